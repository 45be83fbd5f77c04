//! Step-decay learning rate and early stopping on a smoothed loss.

use std::collections::VecDeque;

/// `lr0 · factor^⌊iter / every⌋`.
pub fn lr_at(lr0: f64, factor: f64, every: u64, iter: u64) -> f64 {
    let k = (iter / every.max(1)).min(i32::MAX as u64) as i32;
    lr0 * factor.powi(k)
}

/// Stops once the running mean of the last `window` losses has not set a
/// new minimum for `patience` iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    pub patience: u64,
    window: usize,
    recent: VecDeque<f64>,
    best: f64,
    best_iter: u64,
}

impl EarlyStopper {
    pub fn new(patience: u64, window: usize) -> Self {
        Self {
            patience,
            window: window.max(1),
            recent: VecDeque::new(),
            best: f64::INFINITY,
            best_iter: 0,
        }
    }

    pub fn smoothed(&self) -> f64 {
        self.recent.iter().sum::<f64>() / self.recent.len() as f64
    }

    pub fn best(&self) -> (u64, f64) {
        (self.best_iter, self.best)
    }

    /// Records the loss of iteration `iter`; returns `true` when training
    /// should stop.
    pub fn observe(&mut self, iter: u64, loss: f64) -> bool {
        if self.recent.len() == self.window {
            self.recent.pop_front();
        }
        self.recent.push_back(loss);
        let m = self.smoothed();
        if m < self.best {
            self.best = m;
            self.best_iter = iter;
        }
        iter - self.best_iter >= self.patience
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halving_rule() {
        assert_eq!(lr_at(1e-6, 0.5, 5000, 0), 1e-6);
        assert_eq!(lr_at(1e-6, 0.5, 5000, 4999), 1e-6);
        assert_eq!(lr_at(1e-6, 0.5, 5000, 5000), 1e-6 / 2.0);
        assert_eq!(lr_at(1e-6, 0.5, 5000, 10000), 1e-6 / 4.0);
    }

    #[test]
    fn stalled_loss_stops_after_patience() {
        let mut s = EarlyStopper::new(7, 1);
        let mut stop_at = None;
        for it in 0..100u64 {
            let loss = if it <= 10 { 100.0 - it as f64 } else { 90.0 };
            if s.observe(it, loss) {
                stop_at = Some(it);
                break;
            }
        }
        assert_eq!(s.best().0, 10);
        assert_eq!(stop_at, Some(17));
    }
}
