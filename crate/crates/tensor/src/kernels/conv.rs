use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Geometry of a square-kernel 2-D convolution over an `N x C x H x W` batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(TensorError::dim(
                "conv2d",
                format!("expected 4-d input and weight, got {x_shape:?} and {w_shape:?}"),
            ));
        }
        let (n, c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (c_out, wc_in, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if wc_in != c_in {
            return Err(TensorError::shapes("conv2d", x_shape, w_shape));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(TensorError::dim("conv2d", format!("kernel must be square and odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(TensorError::dim("conv2d", "stride must be positive"));
        }
        let span_h = h + 2 * pad;
        let span_w = w + 2 * pad;
        if span_h < kh || span_w < kh {
            return Err(TensorError::dim(
                "conv2d",
                format!("non-positive output extent for input {h}x{w}, kernel {kh}, pad {pad}"),
            ));
        }
        let h_out = (span_h - kh) / stride + 1;
        let w_out = (span_w - kh) / stride + 1;
        Ok(ConvGeom { n, c_in, h, w, c_out, k: kh, stride, pad, h_out, w_out })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.c_out, self.h_out, self.w_out]
    }

    /// Output positions per image.
    pub fn plane_out(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Rows of the unfolded input matrix.
    pub fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    /// Input coordinate for output coordinate `o` and kernel offset `kk`, if in bounds.
    #[inline]
    pub fn src(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + kk) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

impl ConvGeom {
    /// Output range `[lo, hi)` whose tap at offset `kk` lands inside `0..extent`.
    #[inline]
    fn span(&self, kk: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > kk { (self.pad - kk).div_ceil(s) } else { 0 };
        if extent + self.pad <= kk {
            return (0, 0);
        }
        let hi = ((extent - 1 + self.pad - kk) / s + 1).min(out);
        (lo.min(hi), hi)
    }

    /// 1x1, stride 1, no padding: the unfolded sample is the sample itself.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold one sample (`C_in x H x W`) into `cols`, a `(C_in*k*k) x P` matrix.
fn im2col_one<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.plane_out();
    let hw = g.h * g.w;
    for ci in 0..g.c_in {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..g.k {
            let (ylo, yhi) = g.span(ky, g.h, g.h_out);
            for kx in 0..g.k {
                let (xlo, xhi) = g.span(kx, g.w, g.w_out);
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                dst[..ylo * g.w_out].fill(T::zero());
                dst[yhi * g.w_out..].fill(T::zero());
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    line[..xlo].fill(T::zero());
                    line[xhi..].fill(T::zero());
                    if xlo == xhi {
                        continue;
                    }
                    let ix0 = xlo * g.stride + kx - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        line[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for (d, s) in line[xlo..xhi].iter_mut().zip(src[ix0..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Fold one sample's column matrix back onto `dx`, accumulating overlaps.
fn col2im_one<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let p = g.plane_out();
    let hw = g.h * g.w;
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..g.k {
            let (ylo, yhi) = g.span(ky, g.h, g.h_out);
            for kx in 0..g.k {
                let (xlo, xhi) = g.span(kx, g.w, g.w_out);
                if xlo == xhi {
                    continue;
                }
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let ix0 = xlo * g.stride + kx - g.pad;
                    let line = &src[oy * g.w_out + xlo..oy * g.w_out + xhi];
                    let dst = &mut plane[iy * g.w + ix0..(iy + 1) * g.w];
                    for (d, s) in dst.iter_mut().step_by(g.stride).zip(line) {
                        *d = *d + *s;
                    }
                }
            }
        }
    }
}

/// Convolution without bias, laid out as `N x C_out x P`.
pub fn conv2d_raw<T: Scalar>(g: &ConvGeom, x: &[T], weight: &[T]) -> Vec<T> {
    conv2d_forward(g, x, weight, None)
}

/// Cross-correlation plus bias.
pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let p = g.plane_out();
    let in_n = g.c_in * g.h * g.w;
    let out_n = g.c_out * p;
    let mut out = vec![T::zero(); g.n * out_n];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.patch() * p] };
    for n in 0..g.n {
        let xn = &x[n * in_n..(n + 1) * in_n];
        let yn = &mut out[n * out_n..(n + 1) * out_n];
        let beta = match bias {
            Some(b) => {
                for (co, &bv) in b.iter().enumerate() {
                    yn[co * p..(co + 1) * p].fill(bv);
                }
                T::one()
            }
            None => T::zero(),
        };
        let rhs: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col_one(g, xn, &mut cols);
            &cols
        };
        T::gemm(g.c_out, g.patch(), p, T::one(), weight, false, rhs, false, beta, yn);
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

/// Gradients of `conv2d_forward` given upstream `dy` (N x C_out x P).
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let p = g.plane_out();
    let in_n = g.c_in * g.h * g.w;
    let out_n = g.c_out * p;
    let pointwise = g.is_pointwise();
    let mut dw = need_dw.then(|| vec![T::zero(); g.c_out * g.patch()]);
    let mut dx = need_dx.then(|| vec![T::zero(); g.n * in_n]);
    let mut cols = if pointwise || !need_dw { Vec::new() } else { vec![T::zero(); g.patch() * p] };
    let mut dcols = if pointwise || !need_dx { Vec::new() } else { vec![T::zero(); g.patch() * p] };
    for n in 0..g.n {
        let dyn_ = &dy[n * out_n..(n + 1) * out_n];
        if let Some(dw) = dw.as_mut() {
            let xn = &x[n * in_n..(n + 1) * in_n];
            let rhs: &[T] = if pointwise {
                xn
            } else {
                im2col_one(g, xn, &mut cols);
                &cols
            };
            T::gemm(g.c_out, p, g.patch(), T::one(), dyn_, false, rhs, true, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_n..(n + 1) * in_n];
            if pointwise {
                T::gemm(g.patch(), g.c_out, p, T::one(), weight, true, dyn_, false, T::zero(), dxn);
            } else {
                T::gemm(g.patch(), g.c_out, p, T::one(), weight, true, dyn_, false, T::zero(), &mut dcols);
                col2im_one(g, &dcols, dxn);
            }
        }
    }
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); g.c_out];
        for n in 0..g.n {
            for (co, d) in db.iter_mut().enumerate() {
                let off = n * out_n + co * p;
                *d = *d + dy[off..off + p].iter().copied().sum();
            }
        }
        db
    });
    ConvGrads { dx, dw, db }
}

/// Per-window statistics of a single-channel mask for partial convolution.
///
/// `valid_count[n, p]` is the number of valid mask pixels in the window,
/// `in_bounds[p]` the number of window taps that fall inside the image.
pub struct MaskWindows {
    pub valid_count: Vec<u32>,
    pub in_bounds: Vec<u32>,
}

pub fn mask_windows<T: Scalar>(g: &ConvGeom, mask: &[T]) -> MaskWindows {
    let p = g.plane_out();
    let mut valid_count = vec![0u32; g.n * p];
    let mut in_bounds = vec![0u32; p];
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            let mut ib = 0;
            for ky in 0..g.k {
                if g.src(oy, ky, g.h).is_none() {
                    continue;
                }
                for kx in 0..g.k {
                    if g.src(ox, kx, g.w).is_some() {
                        ib += 1;
                    }
                }
            }
            in_bounds[oy * g.w_out + ox] = ib;
        }
    }
    for n in 0..g.n {
        let plane = &mask[n * g.h * g.w..(n + 1) * g.h * g.w];
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let mut cnt = 0;
                for ky in 0..g.k {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for kx in 0..g.k {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            if plane[iy * g.w + ix] > T::zero() {
                                cnt += 1;
                            }
                        }
                    }
                }
                valid_count[n * p + oy * g.w_out + ox] = cnt;
            }
        }
    }
    MaskWindows { valid_count, in_bounds }
}
