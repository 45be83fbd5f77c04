//! Synthetic CT-like phantoms built from ellipses and disks.
//!
//! Primitives are painted in order onto an air background (−1000 HU); a
//! later primitive overwrites earlier ones. The low-contrast lesion always
//! sits inside a host organ that is painted after every other organ, so the
//! ring around the lesion has a single known HU value.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::RegionPair;
use crate::tensor::Tensor;

pub const AIR_HU: f32 = -1000.0;
pub const MAX_HU: f32 = 400.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    Disk { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
        }
    }

    pub fn mask(&self, h: usize, w: usize) -> Vec<bool> {
        (0..h * w)
            .map(|i| self.contains((i % w) as f64, (i / w) as f64))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Body,
    Organ,
    Bone,
    Vessel,
    Host,
    Lesion,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub role: Role,
    pub shape: Shape,
    pub hu: f32,
}

/// Lesion disk plus the ring used as its local background.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lesion {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub ring_inner: f64,
    pub ring_outer: f64,
    /// Lesion HU minus host HU.
    pub contrast_hu: f32,
}

impl Lesion {
    pub fn region_pair(&self, h: usize, w: usize) -> Result<RegionPair> {
        let mut fg = vec![false; h * w];
        let mut bg = vec![false; h * w];
        for i in 0..h * w {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let d = ((x - self.cx).powi(2) + (y - self.cy).powi(2)).sqrt();
            if d <= self.radius {
                fg[i] = true;
            } else if d > self.ring_inner && d <= self.ring_outer {
                bg[i] = true;
            }
        }
        RegionPair::new(h, w, fg, bg)
    }

    /// Inclusive pixel bounding box `(x0, y0, x1, y1)` of the disk.
    pub fn bbox(&self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let lo = |c: f64| (c - self.radius).ceil().max(0.0) as usize;
        let hi = |c: f64, n: usize| ((c + self.radius).floor() as usize).min(n - 1);
        (lo(self.cx), lo(self.cy), hi(self.cx, w), hi(self.cy, h))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub primitives: Vec<Primitive>,
    pub lesion: Lesion,
}

impl Geometry {
    /// Paints every primitive in order over air.
    pub fn render(&self) -> Tensor<f32> {
        let (h, w) = (self.height, self.width);
        let mut img = vec![AIR_HU; h * w];
        for p in &self.primitives {
            for (i, px) in img.iter_mut().enumerate() {
                if p.shape.contains((i % w) as f64, (i / w) as f64) {
                    *px = p.hu;
                }
            }
        }
        Tensor::new(&[1, h, w], img).expect("consistent size")
    }

    pub fn body_mask(&self) -> Vec<bool> {
        self.primitives
            .iter()
            .filter(|p| p.role == Role::Body)
            .fold(vec![false; self.height * self.width], |mut acc, p| {
                for (a, m) in acc.iter_mut().zip(p.shape.mask(self.height, self.width)) {
                    *a |= m;
                }
                acc
            })
    }

    pub fn host(&self) -> &Primitive {
        self.primitives
            .iter()
            .find(|p| p.role == Role::Host)
            .expect("phantoms always carry a host organ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub seed: u64,
    /// `[1, H, W]` in HU.
    pub clean: Tensor<f32>,
    pub geometry: Geometry,
}

fn ellipse_within(rng: &mut ChaCha8Rng, outer: (f64, f64, f64, f64), reach: f64, size: (f64, f64)) -> Shape {
    let (ocx, ocy, orx, ory) = outer;
    let t = rng.gen_range(0.0..std::f64::consts::TAU);
    let rho = reach * rng.gen::<f64>().sqrt();
    Shape::Ellipse {
        cx: ocx + rho * orx * t.cos(),
        cy: ocy + rho * ory * t.sin(),
        rx: size.0 * orx,
        ry: size.1 * ory,
        angle: rng.gen_range(0.0..std::f64::consts::PI),
    }
}

/// Deterministic phantom for `seed`. `complexity` adds organs and vessels.
pub fn generate_phantom(seed: u64, h: usize, w: usize, complexity: usize) -> Result<Phantom> {
    if h < 32 || w < 32 {
        return Err(Error::config(format!("phantom size {h}x{w} is below 32x32")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (h as f64, w as f64);
    let scale = hf.min(wf) / 64.0;
    let mut prims = Vec::new();

    let body = (
        wf / 2.0 + rng.gen_range(-0.03..0.03) * wf,
        hf / 2.0 + rng.gen_range(-0.03..0.03) * hf,
        rng.gen_range(0.65..0.92) * wf / 2.0,
        rng.gen_range(0.65..0.92) * hf / 2.0,
    );
    prims.push(Primitive {
        role: Role::Body,
        shape: Shape::Ellipse {
            cx: body.0,
            cy: body.1,
            rx: body.2,
            ry: body.3,
            angle: 0.0,
        },
        hu: rng.gen_range(-20.0..40.0),
    });

    for _ in 0..complexity.max(1) {
        let size = (rng.gen_range(0.12..0.3), rng.gen_range(0.12..0.3));
        prims.push(Primitive {
            role: Role::Organ,
            shape: ellipse_within(&mut rng, body, 0.55, size),
            hu: rng.gen_range(-100.0..80.0),
        });
    }
    let bone_size = (rng.gen_range(0.06..0.12), rng.gen_range(0.06..0.12));
    prims.push(Primitive {
        role: Role::Bone,
        shape: ellipse_within(&mut rng, body, 0.6, bone_size),
        hu: rng.gen_range(300.0..MAX_HU),
    });
    for _ in 0..complexity + 1 {
        let Shape::Ellipse { cx, cy, .. } = ellipse_within(&mut rng, body, 0.7, (0.0, 0.0)) else {
            unreachable!()
        };
        prims.push(Primitive {
            role: Role::Vessel,
            shape: Shape::Disk {
                cx,
                cy,
                r: rng.gen_range(1.0..2.5) * scale,
            },
            hu: rng.gen_range(120.0..200.0),
        });
    }

    // Host organ and lesion: retry until the lesion ring sits fully inside.
    for _ in 0..200 {
        let host_size = (rng.gen_range(0.28..0.42), rng.gen_range(0.28..0.42));
        let host_shape = ellipse_within(&mut rng, body, 0.3, host_size);
        let host_hu: f32 = rng.gen_range(40.0..80.0);
        let radius = rng.gen_range(2.0..4.0) * scale;
        let ring_inner = radius + scale;
        let ring_outer = radius + 3.0 * scale;
        let Shape::Ellipse { cx, cy, rx, ry, angle } = host_shape else {
            unreachable!()
        };
        let t = rng.gen_range(0.0..std::f64::consts::TAU);
        let rho = 0.35 * rng.gen::<f64>().sqrt();
        let (s, c) = angle.sin_cos();
        let (u, v) = (rho * rx * t.cos(), rho * ry * t.sin());
        let lesion_c = (cx + c * u - s * v, cy + s * u + c * v);
        let magnitude: f32 = rng.gen_range(10.0..40.0);
        let contrast_hu = if rng.gen_bool(0.5) { magnitude } else { -magnitude };

        let lesion = Lesion {
            cx: lesion_c.0,
            cy: lesion_c.1,
            radius,
            ring_inner,
            ring_outer,
            contrast_hu,
        };
        let body_shape = prims[0].shape;
        let fits = (0..h * w).all(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let d = ((x - lesion.cx).powi(2) + (y - lesion.cy).powi(2)).sqrt();
            d > ring_outer + 0.5 || (host_shape.contains(x, y) && body_shape.contains(x, y))
        });
        let region = lesion.region_pair(h, w)?;
        if !fits || !region.foreground.iter().any(|&m| m) || !region.background.iter().any(|&m| m) {
            continue;
        }
        prims.push(Primitive {
            role: Role::Host,
            shape: host_shape,
            hu: host_hu,
        });
        prims.push(Primitive {
            role: Role::Lesion,
            shape: Shape::Disk {
                cx: lesion.cx,
                cy: lesion.cy,
                r: radius,
            },
            hu: host_hu + contrast_hu,
        });
        let geometry = Geometry {
            height: h,
            width: w,
            primitives: prims,
            lesion,
        };
        return Ok(Phantom {
            seed,
            clean: geometry.render(),
            geometry,
        });
    }
    Err(Error::config(format!(
        "could not place a lesion in a {h}x{w} phantom (seed {seed})"
    )))
}
