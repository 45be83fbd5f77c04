//! Aligned random crops from clean/noisy slice pairs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One windowed slice pair, both `[1, H, W]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePair {
    pub id: String,
    pub clean: Tensor<f32>,
    pub noisy: Tensor<f32>,
}

impl SlicePair {
    pub fn new(id: impl Into<String>, clean: Tensor<f32>, noisy: Tensor<f32>) -> Result<Self> {
        clean.expect_same_shape(&noisy)?;
        if clean.rank() != 3 || clean.shape()[0] != 1 {
            return Err(Error::dim(format!("slice must be [1,H,W], got {:?}", clean.shape())));
        }
        Ok(Self {
            id: id.into(),
            clean,
            noisy,
        })
    }

    pub fn height(&self) -> usize {
        self.clean.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.clean.shape()[2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    /// `[B, 1, s, s]`
    pub clean: Tensor<f32>,
    pub noisy: Tensor<f32>,
    pub ids: Vec<String>,
    /// `(y, x)` of each crop's top-left corner.
    pub offsets: Vec<(usize, usize)>,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn crop(src: &Tensor<f32>, w: usize, y: usize, x: usize, s: usize, out: &mut Vec<f32>) {
    for r in 0..s {
        let start = (y + r) * w + x;
        out.extend_from_slice(&src.data()[start..start + s]);
    }
}

fn gather(pairs: &[&SlicePair], picks: &[(usize, usize, usize)], s: usize) -> Result<PatchBatch> {
    let mut clean = Vec::with_capacity(picks.len() * s * s);
    let mut noisy = Vec::with_capacity(picks.len() * s * s);
    let mut ids = Vec::with_capacity(picks.len());
    let mut offsets = Vec::with_capacity(picks.len());
    for &(i, y, x) in picks {
        let p = pairs[i];
        crop(&p.clean, p.width(), y, x, s, &mut clean);
        crop(&p.noisy, p.width(), y, x, s, &mut noisy);
        ids.push(p.id.clone());
        offsets.push((y, x));
    }
    let shape = [picks.len(), 1, s, s];
    Ok(PatchBatch {
        clean: Tensor::new(&shape, clean)?,
        noisy: Tensor::new(&shape, noisy)?,
        ids,
        offsets,
    })
}

fn check_size(p: &SlicePair, s: usize) -> Result<()> {
    if s == 0 || s > p.height() || s > p.width() {
        return Err(Error::config(format!(
            "patch size {s} does not fit slice {} of {}x{}",
            p.id,
            p.height(),
            p.width()
        )));
    }
    Ok(())
}

fn random_offset(p: &SlicePair, s: usize, rng: &mut impl Rng) -> (usize, usize) {
    (rng.gen_range(0..=p.height() - s), rng.gen_range(0..=p.width() - s))
}

/// `n` uniformly placed `s × s` crops taken at identical offsets from both images.
pub fn extract_patches(pair: &SlicePair, n: usize, s: usize, seed: u64) -> Result<PatchBatch> {
    check_size(pair, s)?;
    if n == 0 {
        return Err(Error::config("patch count must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<_> = (0..n)
        .map(|_| {
            let (y, x) = random_offset(pair, s, &mut rng);
            (0, y, x)
        })
        .collect();
    gather(&[pair], &picks, s)
}

/// Endless batch stream: every epoch crops `per_slice` patches from each
/// slice, shuffles them and hands them out `batch` at a time.
pub struct PatchSampler<'a> {
    slices: Vec<&'a SlicePair>,
    per_slice: usize,
    size: usize,
    batch: usize,
    rng: ChaCha8Rng,
    queue: Vec<(usize, usize, usize)>,
}

impl<'a> PatchSampler<'a> {
    pub fn new(slices: &'a [SlicePair], per_slice: usize, size: usize, batch: usize, seed: u64) -> Result<Self> {
        if slices.is_empty() {
            return Err(Error::config("no training slices"));
        }
        if per_slice == 0 || batch == 0 {
            return Err(Error::config("patches_per_slice and batch_size must be positive"));
        }
        for p in slices {
            check_size(p, size)?;
        }
        Ok(Self {
            slices: slices.iter().collect(),
            per_slice,
            size,
            batch,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: Vec::new(),
        })
    }

    fn refill(&mut self) {
        let mut picks = Vec::with_capacity(self.slices.len() * self.per_slice);
        for (i, p) in self.slices.iter().enumerate() {
            for _ in 0..self.per_slice {
                let (y, x) = random_offset(p, self.size, &mut self.rng);
                picks.push((i, y, x));
            }
        }
        picks.shuffle(&mut self.rng);
        // Popped from the back, so reverse to keep shuffle order.
        picks.reverse();
        self.queue = picks;
    }

    pub fn next_batch(&mut self) -> Result<PatchBatch> {
        let mut picks = Vec::with_capacity(self.batch);
        while picks.len() < self.batch {
            if self.queue.is_empty() {
                self.refill();
            }
            picks.push(self.queue.pop().expect("refilled"));
        }
        gather(&self.slices, &picks, self.size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(h: usize, w: usize) -> SlicePair {
        let clean = Tensor::from_fn(&[1, h, w], |i| i as f32);
        let noisy = Tensor::from_fn(&[1, h, w], |i| i as f32 + 0.5);
        SlicePair::new("a", clean, noisy).unwrap()
    }

    #[test]
    fn full_size_crop_repeats_image() {
        let p = pair(8, 8);
        let b = extract_patches(&p, 3, 8, 1).unwrap();
        assert_eq!(b.clean.shape(), &[3, 1, 8, 8]);
        for i in 0..3 {
            assert_eq!(&b.clean.data()[i * 64..(i + 1) * 64], p.clean.data());
            assert_eq!(b.offsets[i], (0, 0));
        }
    }

    #[test]
    fn crops_are_aligned() {
        let p = pair(10, 12);
        let b = extract_patches(&p, 5, 4, 9).unwrap();
        for (i, &(y, x)) in b.offsets.iter().enumerate() {
            for r in 0..4 {
                for c in 0..4 {
                    let k = i * 16 + r * 4 + c;
                    let src = (y + r) * 12 + x + c;
                    assert_eq!(b.clean.data()[k], p.clean.data()[src]);
                    assert_eq!(b.noisy.data()[k] - b.clean.data()[k], 0.5);
                }
            }
        }
    }

    #[test]
    fn oversize_patch_rejected() {
        assert!(matches!(extract_patches(&pair(8, 8), 1, 9, 0), Err(Error::Config(_))));
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let slices = vec![pair(8, 8), pair(8, 8)];
        let mut s = PatchSampler::new(&slices, 3, 4, 2, 5).unwrap();
        let mut n = 0;
        for _ in 0..3 {
            n += s.next_batch().unwrap().len();
        }
        assert_eq!(n, 6);
    }
}
