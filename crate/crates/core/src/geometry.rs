//! Homography and thin-plate-spline warps in normalized `[0, 1]^2` image
//! coordinates, where pixel `(x, y)` of a `W x H` image sits at
//! `((x + 0.5) / W, (y + 0.5) / H)`.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector3};
use rand::Rng as _;
use texrect_tensor::Tensor;

use crate::error::{Error, Result};
use crate::imageio::dims3;
use crate::mask::Mask;
use crate::rng::Rng;

pub type Point = (f64, f64);

const MAX_RESAMPLES: usize = 16;
const SNAP: f64 = 1e-6;
const UNIT_CORNERS: [Point; 4] = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];

/// Projective map `p -> H p` with `H[2][2] = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Homography {
    h: Matrix3<f64>,
}

impl Homography {
    pub fn identity() -> Self {
        Homography { h: Matrix3::identity() }
    }

    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m[(2, 2)].abs() < 1e-12 || !m.iter().all(|v| v.is_finite()) {
            return Err(Error::Degenerate("homography needs a finite matrix with H[2][2] != 0".into()));
        }
        let h = m / m[(2, 2)];
        if h.determinant().abs() <= 1e-9 {
            return Err(Error::Degenerate(format!("singular homography (det {:e})", h.determinant())));
        }
        Ok(Homography { h })
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        let mut h = Matrix3::identity();
        h[(0, 2)] = dx;
        h[(1, 2)] = dy;
        Homography { h }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.h
    }

    /// Exact 4-point DLT mapping `src[i]` to `dst[i]`.
    pub fn from_correspondences(src: &[Point; 4], dst: &[Point; 4]) -> Result<Self> {
        let mut a = SMatrix::<f64, 8, 8>::zeros();
        let mut b = SVector::<f64, 8>::zeros();
        for i in 0..4 {
            let ((x, y), (u, v)) = (src[i], dst[i]);
            let r = 2 * i;
            a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
            a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
            b[r] = u;
            b[r + 1] = v;
        }
        let sol = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Degenerate("collinear correspondences".into()))?;
        Homography::from_matrix(Matrix3::new(sol[0], sol[1], sol[2], sol[3], sol[4], sol[5], sol[6], sol[7], 1.0))
    }

    pub fn apply(&self, (x, y): Point) -> Point {
        let p = self.h * Vector3::new(x, y, 1.0);
        (p[0] / p[2], p[1] / p[2])
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .h
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("homography is not invertible".into()))?;
        Homography::from_matrix(inv)
    }

    /// `self` after `first`.
    pub fn compose(&self, first: &Homography) -> Result<Self> {
        Homography::from_matrix(self.h * first.h)
    }
}

/// True when the quad is strictly convex with a consistent winding.
fn is_convex(q: &[Point; 4]) -> bool {
    let mut sign = 0.0f64;
    for i in 0..4 {
        let (a, b, c) = (q[i], q[(i + 1) % 4], q[(i + 2) % 4]);
        let cross = (b.0 - a.0) * (c.1 - b.1) - (b.1 - a.1) * (c.0 - b.0);
        if cross.abs() < 1e-9 || (sign != 0.0 && cross.signum() != sign) {
            return false;
        }
        sign = cross.signum();
    }
    true
}

/// Homography moving each unit-square corner by `U(-s/2, s/2)` per axis.
pub fn sample_homography(s_hmg: f64, rng: &mut Rng) -> Result<Homography> {
    if !(0.0..=1.0).contains(&s_hmg) {
        return Err(Error::Config(format!("s_hmg must lie in [0, 1], got {s_hmg}")));
    }
    if s_hmg == 0.0 {
        return Ok(Homography::identity());
    }
    let half = s_hmg / 2.0;
    for _ in 0..MAX_RESAMPLES {
        let dst = UNIT_CORNERS.map(|(x, y)| (x + rng.random_range(-half..=half), y + rng.random_range(-half..=half)));
        if !is_convex(&dst) {
            continue;
        }
        if let Ok(h) = Homography::from_correspondences(&UNIT_CORNERS, &dst) {
            return Ok(h);
        }
    }
    Err(Error::Degenerate(format!("no valid homography after {MAX_RESAMPLES} draws at s={s_hmg}")))
}

/// Thin-plate spline `f(p) = A [1, x, y]^T + sum_i w_i U(|p - c_i|)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TpsWarp {
    sources: Vec<Point>,
    targets: Vec<Point>,
    /// Rows are the x and y outputs; columns multiply `1, x, y`.
    affine: [[f64; 3]; 2],
    weights: Vec<[f64; 2]>,
}

fn tps_kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

impl TpsWarp {
    pub fn identity(sources: Vec<Point>) -> Self {
        let n = sources.len();
        TpsWarp {
            targets: sources.clone(),
            sources,
            affine: [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            weights: vec![[0.0; 2]; n],
        }
    }

    /// Solve the interpolating spline through `sources[i] -> targets[i]`.
    pub fn fit(sources: Vec<Point>, targets: Vec<Point>) -> Result<Self> {
        let n = sources.len();
        if n < 3 || targets.len() != n {
            return Err(Error::Dimension(format!("TPS needs >= 3 paired points, got {n} and {}", targets.len())));
        }
        if sources == targets {
            return Ok(TpsWarp::identity(sources));
        }
        let m = n + 3;
        let mut a = DMatrix::<f64>::zeros(m, m);
        let mut bx = DVector::<f64>::zeros(m);
        let mut by = DVector::<f64>::zeros(m);
        for (i, &(xi, yi)) in sources.iter().enumerate() {
            for (j, &(xj, yj)) in sources.iter().enumerate() {
                a[(i, j)] = tps_kernel((xi - xj).powi(2) + (yi - yj).powi(2));
            }
            for (k, v) in [1.0, xi, yi].into_iter().enumerate() {
                a[(i, n + k)] = v;
                a[(n + k, i)] = v;
            }
            bx[i] = targets[i].0;
            by[i] = targets[i].1;
        }
        let lu = a.lu();
        let singular = || Error::Degenerate("singular TPS system".into());
        let sx = lu.solve(&bx).ok_or_else(singular)?;
        let sy = lu.solve(&by).ok_or_else(singular)?;
        if !sx.iter().chain(sy.iter()).all(|v| v.is_finite()) {
            return Err(singular());
        }
        Ok(TpsWarp {
            weights: (0..n).map(|i| [sx[i], sy[i]]).collect(),
            affine: [[sx[n], sx[n + 1], sx[n + 2]], [sy[n], sy[n + 1], sy[n + 2]]],
            sources,
            targets,
        })
    }

    pub fn sources(&self) -> &[Point] {
        &self.sources
    }

    pub fn targets(&self) -> &[Point] {
        &self.targets
    }

    pub fn affine(&self) -> [[f64; 3]; 2] {
        self.affine
    }

    pub fn weights(&self) -> &[[f64; 2]] {
        &self.weights
    }

    pub fn apply(&self, (x, y): Point) -> Point {
        let [ax, ay] = self.affine;
        let mut u = ax[0] + ax[1] * x + ax[2] * y;
        let mut v = ay[0] + ay[1] * x + ay[2] * y;
        for (c, w) in self.sources.iter().zip(&self.weights) {
            let k = tps_kernel((x - c.0).powi(2) + (y - c.1).powi(2));
            u += w[0] * k;
            v += w[1] * k;
        }
        (u, v)
    }

    /// Spline fitted in the opposite direction, targets back to sources.
    pub fn inverse(&self) -> Result<Self> {
        TpsWarp::fit(self.targets.clone(), self.sources.clone())
    }
}

/// `grid x grid` lattice over the unit square.
pub fn control_lattice(grid: usize) -> Vec<Point> {
    let step = 1.0 / (grid - 1) as f64;
    (0..grid)
        .flat_map(|j| (0..grid).map(move |i| (i as f64 * step, j as f64 * step)))
        .collect()
}

pub fn sample_tps(s_tps: f64, grid: usize, rng: &mut Rng) -> Result<TpsWarp> {
    if grid < 2 {
        return Err(Error::Config(format!("TPS grid must be >= 2, got {grid}")));
    }
    if !(0.0..=1.0).contains(&s_tps) {
        return Err(Error::Config(format!("s_tps must lie in [0, 1], got {s_tps}")));
    }
    let sources = control_lattice(grid);
    if s_tps == 0.0 {
        return Ok(TpsWarp::identity(sources));
    }
    let half = s_tps / 2.0;
    for _ in 0..MAX_RESAMPLES {
        let targets = sources
            .iter()
            .map(|&(x, y)| (x + rng.random_range(-half..=half), y + rng.random_range(-half..=half)))
            .collect();
        if let Ok(t) = TpsWarp::fit(sources.clone(), targets) {
            return Ok(t);
        }
    }
    Err(Error::Degenerate(format!("no solvable TPS after {MAX_RESAMPLES} draws at s={s_tps}")))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Transform {
    Homography(Homography),
    Tps(TpsWarp),
}

impl Transform {
    /// Map from output (warped) coordinates back to input coordinates.
    fn inverse_map(&self) -> Result<Box<dyn Fn(Point) -> Point + Sync>> {
        Ok(match self {
            Transform::Homography(h) => {
                let inv = h.inverse()?;
                Box::new(move |p| inv.apply(p))
            }
            Transform::Tps(t) => {
                let inv = t.inverse()?;
                Box::new(move |p| inv.apply(p))
            }
        })
    }
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// Inverse-warp `img` (`C x H x W`) with bilinear sampling. Output pixels
/// whose sample falls outside the input, or touches an invalid input pixel
/// when `valid_in` is given, are zeroed and marked invalid.
pub fn warp_image(img: &Tensor<f32>, transform: &Transform, valid_in: Option<&Mask>) -> Result<(Tensor<f32>, Mask)> {
    let [c, h, w] = dims3(img)?;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Dimension(format!("cannot warp empty image {:?}", img.shape())));
    }
    if let Some(m) = valid_in {
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::Dimension(format!("validity {}x{} vs image {h}x{w}", m.height(), m.width())));
        }
    }
    let back = transform.inverse_map()?;
    let src = img.data();
    let mut out = vec![0.0f32; c * h * w];
    let mut valid = Mask::zeros(h, w);
    let ok = |y: usize, x: usize| valid_in.is_none_or(|m| m.get(y, x));
    for y in 0..h {
        for x in 0..w {
            let (u, v) = back(((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64));
            let sx = snap(u * w as f64 - 0.5);
            let sy = snap(v * h as f64 - 0.5);
            if !(sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f64 && sy <= (h - 1) as f64) {
                continue;
            }
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let x1 = if fx > 0.0 { x0 + 1 } else { x0 };
            let y1 = if fy > 0.0 { y0 + 1 } else { y0 };
            if !(ok(y0, x0) && ok(y0, x1) && ok(y1, x0) && ok(y1, x1)) {
                continue;
            }
            valid.set(y, x, true);
            let wts = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
            for ch in 0..c {
                let base = ch * h * w;
                let px = [
                    src[base + y0 * w + x0],
                    src[base + y0 * w + x1],
                    src[base + y1 * w + x0],
                    src[base + y1 * w + x1],
                ];
                let acc: f64 = wts.iter().zip(px).map(|(a, p)| a * p as f64).sum();
                out[base + y * w + x] = acc as f32;
            }
        }
    }
    Ok((Tensor::new([c, h, w], out)?, valid))
}
