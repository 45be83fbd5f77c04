//! Raw numeric kernels over NCHW tensors.
//!
//! These are the forward and adjoint routines the autodiff graph dispatches
//! to. They do not record anything; shapes are validated here so the graph
//! layer can stay thin.

use crate::error::{Error, Result};
use crate::tensor::element::Element;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Padding {
    pub mode: PadMode,
    pub size: usize,
}

impl Padding {
    pub const NONE: Padding = Padding {
        mode: PadMode::Zero,
        size: 0,
    };

    pub fn zero(size: usize) -> Self {
        Self {
            mode: PadMode::Zero,
            size,
        }
    }

    pub fn reflect(size: usize) -> Self {
        Self {
            mode: PadMode::Reflect,
            size,
        }
    }

    /// Maps a padded coordinate onto the source axis of length `len`.
    #[inline]
    fn source(&self, i: isize, len: usize) -> Option<usize> {
        let n = len as isize;
        if (0..n).contains(&i) {
            return Some(i as usize);
        }
        match self.mode {
            PadMode::Zero => None,
            PadMode::Reflect => {
                let r = if i < 0 { -i } else { 2 * (n - 1) - i };
                Some(r.clamp(0, n - 1) as usize)
            }
        }
    }
}

/// Convolution algorithm. Both produce the same cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvAlgo {
    Direct,
    #[default]
    Tiled,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: Padding,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new<T: Element>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: Padding,
    ) -> Result<Self> {
        let (n, cin, h, w) = input.dims4()?;
        let (cout, wcin, kh, kw) = weight.dims4()?;
        if wcin != cin {
            return Err(Error::dim(format!(
                "conv2d weight expects {wcin} input channels, input has {cin}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::dim(format!("conv2d kernel {kh}x{kw} must be odd")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be >= 1"));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::dim(format!(
                    "conv2d bias shape {:?} does not match {cout} output channels",
                    b.shape()
                )));
            }
        }
        if pad.mode == PadMode::Reflect && (pad.size >= h || pad.size >= w) {
            return Err(Error::dim(format!(
                "reflect padding {} too large for {h}x{w} input",
                pad.size
            )));
        }
        let hp = h + 2 * pad.size;
        let wp = w + 2 * pad.size;
        if hp < kh || wp < kw {
            return Err(Error::dim(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}"
            )));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (hp - kh) / stride + 1,
            wo: (wp - kw) / stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// Source pixel for output `(oy, ox)` and kernel tap `(ky, kx)`.
    #[inline]
    fn tap(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky) as isize - self.pad.size as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad.size as isize;
        Some((self.pad.source(iy, self.h)?, self.pad.source(ix, self.w)?))
    }
}

pub fn conv2d_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: Padding,
    algo: ConvAlgo,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, weight, bias, stride, pad)?;
    let out = match algo {
        ConvAlgo::Direct => conv_direct(&g, input, weight, bias),
        ConvAlgo::Tiled => conv_tiled(&g, input, weight, bias),
    };
    Tensor::new(&[g.n, g.cout, g.ho, g.wo], out)
}

fn conv_direct<T: Element>(
    g: &ConvGeom,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Vec<T> {
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![T::ZERO; g.n * g.cout * g.p()];
    for n in 0..g.n {
        for co in 0..g.cout {
            let b = bias.map_or(T::ZERO, |b| b.data()[co]);
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = b;
                    for ci in 0..g.cin {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                if let Some((iy, ix)) = g.tap(oy, ox, ky, kx) {
                                    let wv = wt[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                                    acc += wv * x[((n * g.cin + ci) * g.h + iy) * g.w + ix];
                                }
                            }
                        }
                    }
                    out[((n * g.cout + co) * g.ho + oy) * g.wo + ox] = acc;
                }
            }
        }
    }
    out
}

/// Lowers one sample into a `[cin*kh*kw, ho*wo]` column matrix.
fn im2col<T: Element>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut col[((ci * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        row[oy * g.wo + ox] = match g.tap(oy, ox, ky, kx) {
                            Some((iy, ix)) => plane[iy * g.w + ix],
                            None => T::ZERO,
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating.
fn col2im<T: Element>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &col[((ci * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        if let Some((iy, ix)) = g.tap(oy, ox, ky, kx) {
                            plane[iy * g.w + ix] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad.size == 0
}

fn conv_tiled<T: Element>(
    g: &ConvGeom,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let mut out = vec![T::ZERO; g.n * out_len];
    let mut col = if is_pointwise(g) {
        Vec::new()
    } else {
        vec![T::ZERO; k * p]
    };
    for n in 0..g.n {
        let x = &input.data()[n * in_len..(n + 1) * in_len];
        let cols: &[T] = if is_pointwise(g) {
            x
        } else {
            im2col(g, x, &mut col);
            &col
        };
        let o = &mut out[n * out_len..(n + 1) * out_len];
        if let Some(b) = bias {
            for (co, row) in o.chunks_mut(p).enumerate() {
                row.fill(b.data()[co]);
            }
        }
        // SAFETY: weight is cout×k, cols is k×p, o is cout×p, all row-major.
        unsafe {
            T::gemm(
                g.cout,
                k,
                p,
                T::ONE,
                weight.data().as_ptr(),
                k as isize,
                1,
                cols.as_ptr(),
                p as isize,
                1,
                T::ONE,
                o.as_mut_ptr(),
                p as isize,
                1,
            );
        }
    }
    out
}

/// Gradients of a convolution: `(d_input, d_weight, d_bias)`.
///
/// `need_input` skips the input adjoint when the caller has no use for it.
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: Padding,
    d_out: &Tensor<T>,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::new(input, weight, None, stride, pad)?;
    if d_out.shape() != [g.n, g.cout, g.ho, g.wo] {
        return Err(Error::dim(format!(
            "conv2d backward: gradient shape {:?} does not match output",
            d_out.shape()
        )));
    }
    let (k, p) = (g.k(), g.p());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let mut dw = vec![T::ZERO; g.cout * k];
    let mut db = vec![T::ZERO; g.cout];
    let mut dx = if need_input {
        vec![T::ZERO; input.len()]
    } else {
        Vec::new()
    };
    let pointwise = is_pointwise(&g);
    let mut col = vec![T::ZERO; if pointwise { 0 } else { k * p }];
    let mut dcol = vec![T::ZERO; if pointwise || !need_input { 0 } else { k * p }];

    for n in 0..g.n {
        let x = &input.data()[n * in_len..(n + 1) * in_len];
        let dy = &d_out.data()[n * out_len..(n + 1) * out_len];
        for (co, row) in dy.chunks(p).enumerate() {
            db[co] += row.iter().copied().sum::<T>();
        }
        let cols: &[T] = if pointwise {
            x
        } else {
            im2col(&g, x, &mut col);
            &col
        };
        // dW += dY · colsᵀ
        // SAFETY: dy is cout×p, cols viewed as p×k via swapped strides, dw is cout×k.
        unsafe {
            T::gemm(
                g.cout,
                p,
                k,
                T::ONE,
                dy.as_ptr(),
                p as isize,
                1,
                cols.as_ptr(),
                1,
                p as isize,
                T::ONE,
                dw.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        if need_input {
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            let target: &mut [T] = if pointwise { dxn } else { &mut dcol };
            // d_cols = Wᵀ · dY
            // SAFETY: weight viewed as k×cout, dy is cout×p, target is k×p.
            unsafe {
                T::gemm(
                    k,
                    g.cout,
                    p,
                    T::ONE,
                    weight.data().as_ptr(),
                    1,
                    k as isize,
                    dy.as_ptr(),
                    p as isize,
                    1,
                    T::ZERO,
                    target.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
            if !pointwise {
                col2im(&g, &dcol, &mut dx[n * in_len..(n + 1) * in_len]);
            }
        }
    }
    let dx = if need_input {
        Some(Tensor::new(input.shape(), dx)?)
    } else {
        None
    };
    Ok((
        dx,
        Tensor::new(weight.shape(), dw)?,
        Tensor::new(&[g.cout], db)?,
    ))
}

/// 2×2 stride-2 max pooling. Returns the pooled map and, per output
/// element, the flat input index that won (first occurrence on ties).
pub fn maxpool2_forward<T: Element>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!("maxpool2 needs even H and W, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(&[n, c, ho, wo], out)?, arg))
}

pub fn maxpool2_backward<T: Element>(
    input_shape: &[usize],
    argmax: &[usize],
    d_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(d_out.data()) {
        d[i] += g;
    }
    Ok(dx)
}

pub fn upsample_nearest2_forward<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let (ho, wo) = (2 * h, 2 * w);
    let x = input.data();
    let mut out = vec![T::ZERO; n * c * ho * wo];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for oy in 0..ho {
            let srow = &src[(oy / 2) * w..(oy / 2 + 1) * w];
            let drow = &mut dst[oy * wo..(oy + 1) * wo];
            for (ox, v) in drow.iter_mut().enumerate() {
                *v = srow[ox / 2];
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

pub fn upsample_nearest2_backward<T: Element>(d_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, ho, wo) = d_out.dims4()?;
    if ho % 2 != 0 || wo % 2 != 0 {
        return Err(Error::dim("upsample backward expects even gradient extents"));
    }
    let (h, w) = (ho / 2, wo / 2);
    let g = d_out.data();
    let mut dx = vec![T::ZERO; n * c * h * w];
    for plane in 0..n * c {
        let src = &g[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                dst[(oy / 2) * w + ox / 2] += src[oy * wo + ox];
            }
        }
    }
    Tensor::new(&[n, c, h, w], dx)
}

/// Splits a shape around `axis` into `(outer, axis_len, inner)`.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!(
            "axis {axis} out of range for rank {}",
            shape.len()
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis`; the denominator is summed in f64.
pub fn softmax_forward<T: Element>(input: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(input.shape(), axis)?;
    let x = input.data();
    let mut out = vec![T::ZERO; x.len()];
    let mut buf = vec![0f64; len];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let m = (0..len)
                .map(|a| x[idx(a)].to_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (a, b) in buf.iter_mut().enumerate() {
                *b = (x[idx(a)].to_f64() - m).exp();
                z += *b;
            }
            for (a, b) in buf.iter().enumerate() {
                out[idx(a)] = T::from_f64(b / z);
            }
        }
    }
    Tensor::new(input.shape(), out)
}

pub fn softmax_backward<T: Element>(
    output: &Tensor<T>,
    d_out: &Tensor<T>,
    axis: usize,
) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(output.shape(), axis)?;
    let y = output.data();
    let g = d_out.data();
    let mut dx = vec![T::ZERO; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let dot: f64 = (0..len).map(|a| y[idx(a)].to_f64() * g[idx(a)].to_f64()).sum();
            for a in 0..len {
                let j = idx(a);
                dx[j] = T::from_f64(y[j].to_f64() * (g[j].to_f64() - dot));
            }
        }
    }
    Tensor::new(output.shape(), dx)
}

/// NCHW → per-sample `[H*W, C]` rows.
pub(crate) fn to_channels_last<T: Element>(x: &[T], c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for ch in 0..c {
        for p in 0..hw {
            out[p * c + ch] = x[ch * hw + p];
        }
    }
    out
}
