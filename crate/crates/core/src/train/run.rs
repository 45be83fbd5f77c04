//! The training loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::adam::adam_step;
use crate::data::{derive_seed, Dataset, PatchBatch, PatchSampler, SlicePair, Split};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{total_generator_loss, wgan_discriminator_loss, LossConfig};
use crate::params::Binder;

use super::config::TrainConfig;
use super::model::{CriticState, TrainState};
use super::schedule::{lr_at, EarlyStopper};

pub const LOG_FILE: &str = "train_log.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.nlck";
pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_HEADER: &str = "iter,l_gp,l_d,lr_g,lr_d,d_real,d_fake,flag";

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub l_gp: f64,
    pub l_d: Option<f64>,
    pub d_real: Option<f64>,
    pub d_fake: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub iterations: u64,
    pub stopped_early: bool,
    pub smoothed_loss: f64,
    pub out_dir: PathBuf,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> PathBuf {
        self.out_dir.join(CHECKPOINT_FILE)
    }

    pub fn log(&self) -> PathBuf {
        self.out_dir.join(LOG_FILE)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn critic_step(c: &mut CriticState, batch: &PatchBatch, fake: crate::Tensor<f32>, lr: f64) -> Result<(f64, f64, f64)> {
    let (loss, d_real, d_fake, grads) = {
        let mut g = Graph::<f32>::new();
        let mut b = Binder::trainable(&c.params);
        if c.net.spec.spectral_norm {
            b = b.with_spectral(&mut c.spectral, true);
        }
        let real = g.constant(batch.clean.clone());
        let fake = g.constant(fake);
        let sr = c.net.forward(&mut g, &mut b, real)?;
        let sf = c.net.forward(&mut g, &mut b, fake)?;
        let l = wgan_discriminator_loss(&mut g, sr, sf)?;
        let out = (
            g.value(l).item() as f64,
            g.value(sr).mean_f64(),
            g.value(sf).mean_f64(),
        );
        let grads = g.backward(l)?.into_named();
        (out.0, out.1, out.2, grads)
    };
    adam_step(&mut c.params, &grads, &mut c.adam, lr)?;
    Ok((loss, d_real, d_fake))
}

/// One iteration: critic update(s) when adversarial, then the generator.
pub fn train_step(state: &mut TrainState, batch: &PatchBatch, cfg: &TrainConfig, lr_g: f64, lr_d: f64) -> Result<StepStats> {
    let mut critic_stats = None;
    if let Some(c) = state.critic.as_mut() {
        for _ in 0..cfg.n_critic {
            let fake = state.generator.infer(&state.gen_params, &batch.noisy)?;
            critic_stats = Some(critic_step(c, batch, fake, lr_d)?);
        }
    }

    let loss_cfg = LossConfig {
        kind: state.variant.loss,
        weights: cfg.weights,
        adversarial: state.critic.is_some(),
        lambda_adv: cfg.lambda_adv,
    };
    let (l_gp, grads) = {
        let mut g = Graph::<f32>::new();
        let mut gb = Binder::trainable(&state.gen_params);
        let x = g.constant(batch.noisy.clone());
        let t = g.constant(batch.clean.clone());
        let out = state.generator.forward(&mut g, &mut gb, x)?;
        let mut sn;
        let scores = match &state.critic {
            Some(c) => {
                sn = c.spectral.clone();
                let mut db = Binder::frozen(&c.params);
                if c.net.spec.spectral_norm {
                    db = db.with_spectral(&mut sn, false);
                }
                Some(c.net.forward(&mut g, &mut db, out)?)
            }
            None => None,
        };
        let loss = total_generator_loss(&mut g, t, out, scores, &loss_cfg)?;
        let l_gp = g.value(loss.reconstruction).item() as f64;
        (l_gp, g.backward(loss.total)?.into_named())
    };
    if !l_gp.is_finite() {
        return Err(Error::numeric(format!("reconstruction loss is {l_gp}")));
    }
    adam_step(&mut state.gen_params, &grads, &mut state.gen_adam, lr_g)?;
    Ok(StepStats {
        l_gp,
        l_d: critic_stats.map(|s| s.0),
        d_real: critic_stats.map(|s| s.1),
        d_fake: critic_stats.map(|s| s.2),
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Trains on the train split of the dataset at `cfg.data_dir`.
pub fn train(cfg: &TrainConfig) -> Result<(TrainState, TrainOutcome)> {
    cfg.validate()?;
    let ds = Dataset::open(&cfg.data_dir)?;
    let slices = ds.load_split(Split::Train, &cfg.window)?;
    train_on(cfg, &slices)
}

/// Trains on already-loaded windowed slices. Writes the config, the log,
/// timings and the checkpoint into `cfg.out_dir`. When a step fails the
/// checkpoint on disk is the last one saved before the failure.
pub fn train_on(cfg: &TrainConfig, slices: &[SlicePair]) -> Result<(TrainState, TrainOutcome)> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text()).map_err(|e| Error::io(out.join(CONFIG_FILE), e))?;
    let log_path = out.join(LOG_FILE);
    let timing_path = out.join(TIMING_FILE);
    let ck_path = out.join(CHECKPOINT_FILE);
    let mut log = create(&log_path)?;
    let mut timing = create(&timing_path)?;
    let w = |f: &mut BufWriter<File>, p: &Path, line: String| writeln!(f, "{line}").map_err(|e| Error::io(p, e));
    w(&mut log, &log_path, LOG_HEADER.into())?;
    w(&mut timing, &timing_path, "iter,wall_ms".into())?;

    let mut state = TrainState::init(cfg)?;
    state.save(&ck_path)?;
    let mut sampler = PatchSampler::new(
        slices,
        cfg.patches_per_slice,
        cfg.patch_size,
        cfg.batch_size,
        derive_seed(cfg.seed, "patches"),
    )?;
    let mut stopper = EarlyStopper::new(cfg.patience, cfg.loss_smoothing);
    let mut stopped_early = false;

    for it in 0..cfg.max_iters {
        let t0 = Instant::now();
        let lr_g = lr_at(cfg.lr_g, cfg.lr_decay_factor, cfg.lr_decay_every, it);
        let lr_d = lr_at(cfg.lr_d, cfg.lr_decay_factor, cfg.lr_decay_every, it);
        let batch = sampler.next_batch()?;
        let stats = match train_step(&mut state, &batch, cfg, lr_g, lr_d) {
            Ok(s) => s,
            Err(e) => {
                let _ = log.flush();
                log::error!("iteration {it} failed: {e}; keeping checkpoint from iteration {}", {
                    TrainState::load(&ck_path).map(|s| s.iteration).unwrap_or(0)
                });
                return Err(e);
            }
        };
        state.iteration = it + 1;
        let diverged = match (stats.d_real, stats.d_fake) {
            (Some(r), Some(f)) => (r - f).abs() > cfg.divergence_bound,
            _ => false,
        };
        if diverged {
            log::warn!("iteration {it}: critic gap exceeds {}", cfg.divergence_bound);
        }
        w(
            &mut log,
            &log_path,
            format!(
                "{it},{},{},{lr_g},{lr_d},{},{},{}",
                stats.l_gp,
                opt(stats.l_d),
                opt(stats.d_real),
                opt(stats.d_fake),
                if diverged { "diverged" } else { "" }
            ),
        )?;
        w(&mut timing, &timing_path, format!("{it},{}", t0.elapsed().as_millis()))?;
        if cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0 {
            state.save(&ck_path)?;
        }
        if it % 50 == 0 {
            log::info!("iter {it} l_gp {:.6} lr_g {lr_g}", stats.l_gp);
        }
        if stopper.observe(it, stats.l_gp) {
            log::info!("no improvement for {} iterations, stopping at {it}", cfg.patience);
            stopped_early = true;
            break;
        }
    }
    state.save(&ck_path)?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    timing.flush().map_err(|e| Error::io(&timing_path, e))?;
    let outcome = TrainOutcome {
        iterations: state.iteration,
        stopped_early,
        smoothed_loss: stopper.smoothed(),
        out_dir: out.clone(),
    };
    Ok((state, outcome))
}
