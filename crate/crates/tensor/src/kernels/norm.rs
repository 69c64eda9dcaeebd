use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const GN_EPS: f64 = 1e-5;

/// Saved state of a batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BnSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Valid positions per channel that entered the statistics.
    pub count: Vec<usize>,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance, for running-statistics updates.
    pub batch_var_unbiased: Vec<T>,
}

#[inline]
fn is_valid<T: Scalar>(mask: Option<&[T]>, n: usize, hw: usize, i: usize) -> bool {
    mask.map_or(true, |m| m[n * hw + i] > T::zero())
}

/// Batch normalisation over `N x C x H x W` with statistics taken only over
/// positions where `mask` (shape `N x 1 x H x W`) is set. Masked positions
/// produce exact zeros. `running` selects evaluation mode.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_forward<T: Scalar>(
    shape: [usize; 4],
    x: &[T],
    gamma: &[T],
    beta: &[T],
    mask: Option<&[T]>,
    running: Option<(&[T], &[T])>,
) -> (Vec<T>, BnSaved<T>) {
    let [n, c, h, w] = shape;
    let hw = h * w;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); c];
    let mut count = vec![0usize; c];
    let mut batch_mean = vec![T::zero(); c];
    let mut batch_var_unbiased = vec![T::zero(); c];
    for ch in 0..c {
        let (mean, inv) = match running {
            Some((rm, rv)) => {
                let mut cnt = 0;
                for b in 0..n {
                    cnt += (0..hw).filter(|&i| is_valid(mask, b, hw, i)).count();
                }
                count[ch] = cnt;
                (rm[ch].f64(), 1.0 / (rv[ch].f64() + BN_EPS).sqrt())
            }
            None => {
                let mut sum = 0.0f64;
                let mut cnt = 0usize;
                for b in 0..n {
                    let plane = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    for (i, v) in plane.iter().enumerate() {
                        if is_valid(mask, b, hw, i) {
                            sum += v.f64();
                            cnt += 1;
                        }
                    }
                }
                if cnt == 0 {
                    continue;
                }
                let mean = sum / cnt as f64;
                let mut sq = 0.0f64;
                for b in 0..n {
                    let plane = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    for (i, v) in plane.iter().enumerate() {
                        if is_valid(mask, b, hw, i) {
                            let d = v.f64() - mean;
                            sq += d * d;
                        }
                    }
                }
                let var = sq / cnt as f64;
                count[ch] = cnt;
                batch_mean[ch] = T::of(mean);
                batch_var_unbiased[ch] = T::of(if cnt > 1 { sq / (cnt - 1) as f64 } else { var });
                (mean, 1.0 / (var + BN_EPS).sqrt())
            }
        };
        inv_std[ch] = T::of(inv);
        let (mean_t, inv_t) = (T::of(mean), T::of(inv));
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in 0..hw {
                if is_valid(mask, b, hw, i) {
                    let xh = (x[off + i] - mean_t) * inv_t;
                    xhat[off + i] = xh;
                    y[off + i] = gamma[ch] * xh + beta[ch];
                }
            }
        }
    }
    (y, BnSaved { xhat, inv_std, count, batch_mean, batch_var_unbiased })
}

pub struct AffineNormGrads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

pub fn batch_norm_backward<T: Scalar>(
    shape: [usize; 4],
    dy: &[T],
    gamma: &[T],
    mask: Option<&[T]>,
    saved: &BnSaved<T>,
    eval_mode: bool,
) -> AffineNormGrads<T> {
    let [n, c, h, w] = shape;
    let hw = h * w;
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let m = saved.count[ch];
        if m == 0 {
            continue;
        }
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in 0..hw {
                if is_valid(mask, b, hw, i) {
                    sum_dy = sum_dy + dy[off + i];
                    sum_dy_xhat = sum_dy_xhat + dy[off + i] * saved.xhat[off + i];
                }
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let g = gamma[ch];
        let inv = saved.inv_std[ch];
        let mf = T::of(m as f64);
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in 0..hw {
                if !is_valid(mask, b, hw, i) {
                    continue;
                }
                dx[off + i] = if eval_mode {
                    dy[off + i] * g * inv
                } else {
                    g * inv / mf * (mf * dy[off + i] - sum_dy - saved.xhat[off + i] * sum_dy_xhat)
                };
            }
        }
    }
    AffineNormGrads { dx, dgamma, dbeta }
}

#[derive(Clone, Debug)]
pub struct GnSaved<T> {
    pub xhat: Vec<T>,
    /// One entry per (sample, group).
    pub inv_std: Vec<T>,
}

pub fn group_norm_forward<T: Scalar>(
    shape: [usize; 4],
    groups: usize,
    x: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, GnSaved<T>) {
    let [n, c, h, w] = shape;
    let hw = h * w;
    let cg = c / groups;
    let span = cg * hw;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); n * groups];
    for b in 0..n {
        for g in 0..groups {
            let off = (b * c + g * cg) * hw;
            let chunk = &x[off..off + span];
            let mean = chunk.iter().map(|v| v.f64()).sum::<f64>() / span as f64;
            let var = chunk.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / span as f64;
            let inv = 1.0 / (var + GN_EPS).sqrt();
            inv_std[b * groups + g] = T::of(inv);
            let (mean_t, inv_t) = (T::of(mean), T::of(inv));
            for j in 0..span {
                let ch = g * cg + j / hw;
                let xh = (chunk[j] - mean_t) * inv_t;
                xhat[off + j] = xh;
                y[off + j] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (y, GnSaved { xhat, inv_std })
}

pub fn group_norm_backward<T: Scalar>(
    shape: [usize; 4],
    groups: usize,
    dy: &[T],
    gamma: &[T],
    saved: &GnSaved<T>,
) -> AffineNormGrads<T> {
    let [n, c, h, w] = shape;
    let hw = h * w;
    let cg = c / groups;
    let span = cg * hw;
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mf = T::of(span as f64);
    for b in 0..n {
        for g in 0..groups {
            let off = (b * c + g * cg) * hw;
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for j in 0..span {
                let ch = g * cg + j / hw;
                let d = dy[off + j] * gamma[ch];
                sum_d = sum_d + d;
                sum_dx = sum_dx + d * saved.xhat[off + j];
                dgamma[ch] = dgamma[ch] + dy[off + j] * saved.xhat[off + j];
                dbeta[ch] = dbeta[ch] + dy[off + j];
            }
            let inv = saved.inv_std[b * groups + g];
            for j in 0..span {
                let ch = g * cg + j / hw;
                let d = dy[off + j] * gamma[ch];
                dx[off + j] = inv / mf * (mf * d - sum_d - saved.xhat[off + j] * sum_dx);
            }
        }
    }
    AffineNormGrads { dx, dgamma, dbeta }
}
