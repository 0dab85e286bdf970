//! Batch normalization kernels over an `N × C × S` layout (S = spatial size, 1 for 2-D input).

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct BnLayout {
    pub n: usize,
    pub c: usize,
    pub s: usize,
}

impl BnLayout {
    pub fn from_shape(shape: &[usize]) -> Option<Self> {
        if shape.len() < 2 {
            return None;
        }
        Some(Self {
            n: shape[0],
            c: shape[1],
            s: shape[2..].iter().product(),
        })
    }

    fn count(&self) -> usize {
        self.n * self.s
    }

    #[inline]
    fn lane(&self, ni: usize, ci: usize) -> std::ops::Range<usize> {
        let start = (ni * self.c + ci) * self.s;
        start..start + self.s
    }
}

pub(crate) struct BnForward<T> {
    pub out: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Batch mean and unbiased variance (training mode only).
    pub batch: Option<(Vec<T>, Vec<T>)>,
}

pub(crate) fn forward<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    layout: BnLayout,
    stats: Option<(&[T], &[T])>,
    eps: T,
) -> BnForward<T> {
    let BnLayout { n, c, .. } = layout;
    let m = T::c(layout.count() as f64);
    let (mean, var, batch) = match stats {
        Some((mean, var)) => (mean.to_vec(), var.to_vec(), None),
        None => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ci in 0..c {
                let mut acc = T::zero();
                for ni in 0..n {
                    acc = acc + x[layout.lane(ni, ci)].iter().copied().sum::<T>();
                }
                let mu = acc / m;
                let mut sq = T::zero();
                for ni in 0..n {
                    for &v in &x[layout.lane(ni, ci)] {
                        let d = v - mu;
                        sq = sq + d * d;
                    }
                }
                mean[ci] = mu;
                var[ci] = sq / m;
            }
            let unbiased = if layout.count() > 1 {
                let scale = m / (m - T::one());
                var.iter().map(|&v| v * scale).collect()
            } else {
                var.clone()
            };
            let batch = Some((mean.clone(), unbiased));
            (mean, var, batch)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            for i in layout.lane(ni, ci) {
                let h = (x[i] - mean[ci]) * inv_std[ci];
                xhat[i] = h;
                out[i] = gamma[ci] * h + beta[ci];
            }
        }
    }
    BnForward {
        out,
        xhat,
        inv_std,
        batch,
    }
}

pub(crate) struct BnGrads<T> {
    pub input: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub(crate) fn backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    layout: BnLayout,
    train: bool,
) -> BnGrads<T> {
    let BnLayout { n, c, .. } = layout;
    let m = T::c(layout.count() as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            for i in layout.lane(ni, ci) {
                dgamma[ci] = dgamma[ci] + dy[i] * xhat[i];
                dbeta[ci] = dbeta[ci] + dy[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for ni in 0..n {
        for ci in 0..c {
            let g = gamma[ci] * inv_std[ci];
            for i in layout.lane(ni, ci) {
                dx[i] = if train {
                    // d/dx of gamma * (x - mean) / std with batch statistics.
                    g * (dy[i] - dbeta[ci] / m - xhat[i] * dgamma[ci] / m)
                } else {
                    g * dy[i]
                };
            }
        }
    }
    BnGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}
