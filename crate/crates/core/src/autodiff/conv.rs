//! 2-D cross-correlation via im2col + GEMM.

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects N×C×H×W input and F×C×kh×kw kernel, got {x:?} and {k:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Validation("conv2d stride must be >= 1".into()));
        }
        let (n, c, h, w) = (x[0], x[1], x[2], x[3]);
        let (f, kc, kh, kw) = (k[0], k[1], k[2], k[3]);
        if kc != c {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input {x:?}, kernel {k:?}"
            )));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::Shape(format!(
                "conv2d kernel {k:?} larger than padded input {x:?} (padding {pad})"
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// Columns of the im2col matrix: one per output position of every sample.
    pub fn columns(&self) -> usize {
        self.n * self.out_plane()
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.f, self.oh, self.ow]
    }

    /// Input coordinate for an output coordinate and kernel offset, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

/// Unfolds `x` into a `patch × columns` matrix.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = g.columns();
    let plane = g.out_plane();
    let mut out = vec![T::zero(); g.patch() * cols];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let Some(iy) = g.source(oy, ki, g.h) else {
                            continue;
                        };
                        let base = n * plane + oy * g.ow;
                        for ox in 0..g.ow {
                            if let Some(ix) = g.source(ox, kj, g.w) {
                                dst_row[base + ox] = src[iy * g.w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Folds a `patch × columns` gradient back onto the input layout, accumulating overlaps.
pub(crate) fn col2im<T: Real>(cols_grad: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = g.columns();
    let plane = g.out_plane();
    let mut dx = vec![T::zero(); g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols_grad[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let dst = &mut dx[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let Some(iy) = g.source(oy, ki, g.h) else {
                            continue;
                        };
                        let base = n * plane + oy * g.ow;
                        for ox in 0..g.ow {
                            if let Some(ix) = g.source(ox, kj, g.w) {
                                dst[iy * g.w + ix] = dst[iy * g.w + ix] + src_row[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Forward pass; returns the output in N×F×OH×OW layout.
pub(crate) fn forward<T: Real>(cols: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let ncols = g.columns();
    let patch = g.patch();
    let mut tmp = vec![T::zero(); g.f * ncols];
    T::gemm(
        g.f,
        patch,
        ncols,
        T::one(),
        weight,
        (patch as isize, 1),
        cols,
        (ncols as isize, 1),
        T::zero(),
        &mut tmp,
        (ncols as isize, 1),
    );
    let plane = g.out_plane();
    let mut out = vec![T::zero(); g.n * g.f * plane];
    for n in 0..g.n {
        for f in 0..g.f {
            let b = bias.map_or(T::zero(), |b| b[f]);
            let src = &tmp[f * ncols + n * plane..f * ncols + (n + 1) * plane];
            let dst = &mut out[(n * g.f + f) * plane..(n * g.f + f + 1) * plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub input: Option<Vec<T>>,
}

pub(crate) fn backward<T: Real>(
    dout: &[T],
    cols: &[T],
    weight: &[T],
    g: &ConvGeom,
    need_input: bool,
) -> ConvGrads<T> {
    let ncols = g.columns();
    let patch = g.patch();
    let plane = g.out_plane();
    // F × (N·P) view of the upstream gradient.
    let mut dtmp = vec![T::zero(); g.f * ncols];
    for n in 0..g.n {
        for f in 0..g.f {
            let src = &dout[(n * g.f + f) * plane..(n * g.f + f + 1) * plane];
            dtmp[f * ncols + n * plane..f * ncols + (n + 1) * plane].copy_from_slice(src);
        }
    }
    let bias = (0..g.f)
        .map(|f| dtmp[f * ncols..(f + 1) * ncols].iter().copied().sum())
        .collect();
    let mut dweight = vec![T::zero(); g.f * patch];
    T::gemm(
        g.f,
        ncols,
        patch,
        T::one(),
        &dtmp,
        (ncols as isize, 1),
        cols,
        (1, ncols as isize),
        T::zero(),
        &mut dweight,
        (patch as isize, 1),
    );
    let input = need_input.then(|| {
        let mut dcols = vec![T::zero(); patch * ncols];
        T::gemm(
            patch,
            g.f,
            ncols,
            T::one(),
            weight,
            (1, patch as isize),
            &dtmp,
            (ncols as isize, 1),
            T::zero(),
            &mut dcols,
            (ncols as isize, 1),
        );
        col2im(&dcols, g)
    });
    ConvGrads {
        weight: dweight,
        bias,
        input,
    }
}
