//! Interval sampling along cones, conical-frustum Gaussians, integrated
//! positional encoding, offset application and hierarchical resampling.
//!
//! The taped functions ([`frustum_moments`], [`integrated_encoding`],
//! [`shift_intervals`]) operate on whole batches and are what the renderer
//! uses; the plain single-ray functions are thin wrappers over them.

use rand::Rng;
use thiserror::Error;

use crate::diffmath::{DiffError, Tape, Var};
use crate::geometry::{ConeRay, Vec3};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplingError {
    #[error("invalid ray bounds: near {near} must be below far {far}")]
    Bounds { near: f64, far: f64 },
    #[error("need at least one interval")]
    NoIntervals,
    #[error("invalid intervals: {0}")]
    Intervals(String),
    #[error("weights must be finite and non-negative (index {0})")]
    NegativeWeight(usize),
    #[error("length mismatch: {what} has {got}, expected {expected}")]
    Length {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

pub type Result<T> = std::result::Result<T, SamplingError>;

/// Intervals along one ray, each with its own start and end so that shifted
/// intervals may overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalSet {
    pub starts: Vec<f64>,
    pub ends: Vec<f64>,
}

impl IntervalSet {
    /// Contiguous intervals between consecutive edges.
    pub fn from_edges(edges: &[f64]) -> Result<Self> {
        if edges.len() < 2 {
            return Err(SamplingError::NoIntervals);
        }
        if edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(SamplingError::Intervals("edges must be strictly increasing".into()));
        }
        Ok(Self {
            starts: edges[..edges.len() - 1].to_vec(),
            ends: edges[1..].to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn midpoints(&self) -> Vec<f64> {
        self.starts
            .iter()
            .zip(&self.ends)
            .map(|(a, b)| 0.5 * (a + b))
            .collect()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.starts.iter().zip(&self.ends).map(|(a, b)| b - a).collect()
    }

    /// Edges when the intervals are contiguous.
    pub fn edges(&self) -> Option<Vec<f64>> {
        if self.starts[1..] != self.ends[..self.len() - 1] {
            return None;
        }
        let mut e = self.starts.clone();
        e.push(*self.ends.last()?);
        Some(e)
    }

    /// Bounds, positive widths and sorted midpoints.
    pub fn check(&self, near: f64, far: f64) -> Result<()> {
        if self.starts.len() != self.ends.len() {
            return Err(SamplingError::Length {
                what: "ends",
                got: self.ends.len(),
                expected: self.starts.len(),
            });
        }
        for (i, (&a, &b)) in self.starts.iter().zip(&self.ends).enumerate() {
            if !(a >= near && b <= far && a < b) {
                return Err(SamplingError::Intervals(format!(
                    "interval {i} = [{a}, {b}] outside [{near}, {far}] or empty"
                )));
            }
        }
        if self.midpoints().windows(2).any(|w| w[0] > w[1]) {
            return Err(SamplingError::Intervals("midpoints not sorted".into()));
        }
        Ok(())
    }
}

/// `m` equal bins over `[near, far]`. With `jitter`, every interior edge is
/// redrawn uniformly within the bin of width `(far - near) / m` centered on
/// it; the outer edges stay at `near` and `far`.
pub fn stratified_intervals<R: Rng + ?Sized>(
    near: f64,
    far: f64,
    m: usize,
    jitter: Option<&mut R>,
) -> Result<IntervalSet> {
    if !(near < far) {
        return Err(SamplingError::Bounds { near, far });
    }
    if m == 0 {
        return Err(SamplingError::NoIntervals);
    }
    let step = (far - near) / m as f64;
    let mut edges: Vec<f64> = (0..=m).map(|k| near + step * k as f64).collect();
    edges[m] = far;
    if let Some(rng) = jitter {
        for e in edges.iter_mut().take(m).skip(1) {
            *e += step * (rng.random::<f64>() - 0.5);
        }
    }
    IntervalSet::from_edges(&edges)
}

/// Gaussian summary of a conical frustum in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrustumGaussian {
    pub mean: Vec3,
    pub cov_diag: Vec3,
}

/// Per-sample ray constants laid out row by row for batched evaluation.
#[derive(Debug, Clone)]
pub struct SampleRays {
    /// `n x 3` origins.
    pub origins: Vec<f64>,
    /// `n x 3` unit directions.
    pub directions: Vec<f64>,
    /// `n` cone radii at unit distance.
    pub radii: Vec<f64>,
}

impl SampleRays {
    /// Repeats each cone's data `per_ray` times.
    pub fn expand(cones: &[ConeRay], per_ray: usize) -> Self {
        let n = cones.len() * per_ray;
        let mut origins = Vec::with_capacity(3 * n);
        let mut directions = Vec::with_capacity(3 * n);
        let mut radii = Vec::with_capacity(n);
        for c in cones {
            for _ in 0..per_ray {
                origins.extend(c.origin.iter());
                directions.extend(c.direction.iter());
                radii.push(c.base_radius);
            }
        }
        Self {
            origins,
            directions,
            radii,
        }
    }

    pub fn len(&self) -> usize {
        self.radii.len()
    }

    pub fn is_empty(&self) -> bool {
        self.radii.is_empty()
    }
}

/// Frustum means and diagonal covariances for `n` intervals given as
/// `n x 1` start/end columns. Returns `(mean, var)`, both `n x 3`.
///
/// Uses the midpoint/half-width parameterization of the frustum moments,
/// which stays accurate for thin frustums far from the origin.
pub fn frustum_moments(
    tape: &mut Tape,
    rays: &SampleRays,
    t0: Var,
    t1: Var,
) -> std::result::Result<(Var, Var), DiffError> {
    let n = rays.len();
    let sum = tape.add(t0, t1)?;
    let mu = tape.mul_scalar(sum, 0.5);
    let diff = tape.sub(t1, t0)?;
    let hw = tape.mul_scalar(diff, 0.5);
    let mu2 = tape.square(mu);
    let hw2 = tape.square(hw);
    let hw4 = tape.square(hw2);
    let mu2x3 = tape.mul_scalar(mu2, 3.0);
    let denom = tape.add(mu2x3, hw2)?;

    // t_mean = mu + 2 mu hw^2 / denom
    let a = tape.mul(mu, hw2)?;
    let a = tape.mul_scalar(a, 2.0);
    let a = tape.div(a, denom)?;
    let t_mean = tape.add(mu, a)?;

    // t_var = hw^2 / 3 - (4/15) hw^4 (12 mu^2 - hw^2) / denom^2
    let b = tape.mul_scalar(mu2, 12.0);
    let b = tape.sub(b, hw2)?;
    let b = tape.mul(hw4, b)?;
    let d2 = tape.square(denom);
    let b = tape.div(b, d2)?;
    let b = tape.mul_scalar(b, 4.0 / 15.0);
    let c = tape.mul_scalar(hw2, 1.0 / 3.0);
    let t_var = tape.sub(c, b)?;

    // r_var = r^2 (mu^2 / 4 + (5/12) hw^2 - (4/15) hw^4 / denom)
    let e = tape.mul_scalar(mu2, 0.25);
    let f = tape.mul_scalar(hw2, 5.0 / 12.0);
    let e = tape.add(e, f)?;
    let g = tape.div(hw4, denom)?;
    let g = tape.mul_scalar(g, 4.0 / 15.0);
    let e = tape.sub(e, g)?;
    let r2 = tape.constant(rays.radii.iter().map(|r| r * r).collect(), n, 1)?;
    let r_var = tape.mul(e, r2)?;

    let ones = tape.constant(vec![1.0; 3], 1, 3)?;
    let o = tape.constant(rays.origins.clone(), n, 3)?;
    let d = tape.constant(rays.directions.clone(), n, 3)?;
    let dd = tape.constant(rays.directions.iter().map(|x| x * x).collect(), n, 3)?;
    let perp = tape.constant(rays.directions.iter().map(|x| 1.0 - x * x).collect(), n, 3)?;

    let tm3 = tape.matmul(t_mean, ones)?;
    let step = tape.mul(d, tm3)?;
    let mean = tape.add(o, step)?;

    let tv3 = tape.matmul(t_var, ones)?;
    let rv3 = tape.matmul(r_var, ones)?;
    let along = tape.mul(tv3, dd)?;
    let across = tape.mul(rv3, perp)?;
    let var = tape.add(along, across)?;
    Ok((mean, var))
}

/// Frequency selection matrix `3 x 3L` with `scale(l)` at `(axis, 3l + axis)`.
fn frequency_matrix(levels: usize, scale: impl Fn(usize) -> f64) -> Vec<f64> {
    let cols = 3 * levels;
    let mut m = vec![0.0; 3 * cols];
    for l in 0..levels {
        for a in 0..3 {
            m[a * cols + 3 * l + a] = scale(l);
        }
    }
    m
}

/// Integrated positional encoding of `n x 3` Gaussians: for each level `l`
/// and axis, `sin(2^l mu) exp(-4^l var / 2)` followed by the matching cosine
/// block. Output is `n x 6L`.
pub fn integrated_encoding(
    tape: &mut Tape,
    mean: Var,
    var: Var,
    levels: usize,
) -> std::result::Result<Var, DiffError> {
    let s = tape.constant(frequency_matrix(levels, |l| (1u64 << l) as f64), 3, 3 * levels)?;
    let s2 = tape.constant(frequency_matrix(levels, |l| (1u64 << (2 * l)) as f64), 3, 3 * levels)?;
    let y = tape.matmul(mean, s)?;
    let yv = tape.matmul(var, s2)?;
    let damp = tape.mul_scalar(yv, -0.5);
    let damp = tape.exp(damp);
    let sy = tape.sin(y);
    let cy = tape.cos(y);
    let sin = tape.mul(sy, damp)?;
    let cos = tape.mul(cy, damp)?;
    tape.concat_cols(sin, cos)
}

/// Plain encoding of a view direction: the direction itself followed by
/// `sin(2^l d)` and `cos(2^l d)` blocks. Length `3 + 6L`.
pub fn direction_encoding(d: &Vec3, levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 + 6 * levels);
    out.extend(d.iter());
    for f in [f64::sin, f64::cos] {
        for l in 0..levels {
            let scale = (1u64 << l) as f64;
            out.extend(d.iter().map(|x| f(scale * x)));
        }
    }
    out
}

/// Encoded inputs for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub ipe: Vec<f64>,
    pub dir_enc: Vec<f64>,
}

pub fn frustum_gaussian(cone: &ConeRay, t0: f64, t1: f64) -> Result<FrustumGaussian> {
    if !(t0 < t1) {
        return Err(SamplingError::Intervals(format!("need t0 < t1, got [{t0}, {t1}]")));
    }
    let mut tape = Tape::new();
    let rays = SampleRays::expand(std::slice::from_ref(cone), 1);
    let a = tape.constant(vec![t0], 1, 1)?;
    let b = tape.constant(vec![t1], 1, 1)?;
    let (mean, var) = frustum_moments(&mut tape, &rays, a, b)?;
    Ok(FrustumGaussian {
        mean: Vec3::from_column_slice(tape.value(mean)),
        cov_diag: Vec3::from_column_slice(tape.value(var)),
    })
}

pub fn ipe(g: &FrustumGaussian, levels: usize) -> Result<Vec<f64>> {
    if levels == 0 {
        return Err(SamplingError::Intervals("need at least one encoding level".into()));
    }
    let mut tape = Tape::new();
    let m = tape.constant(g.mean.iter().copied().collect(), 1, 3)?;
    let v = tape.constant(g.cov_diag.iter().copied().collect(), 1, 3)?;
    let e = integrated_encoding(&mut tape, m, v, levels)?;
    Ok(tape.value(e).to_vec())
}

pub fn encode_sample(cone: &ConeRay, t0: f64, t1: f64, pos_levels: usize, dir_levels: usize) -> Result<EncodedSample> {
    let g = frustum_gaussian(cone, t0, t1)?;
    Ok(EncodedSample {
        ipe: ipe(&g, pos_levels)?,
        dir_enc: direction_encoding(&cone.direction, dir_levels),
    })
}

/// Result of [`shift_intervals`]: shifted, re-sorted starts/ends, the
/// offsets permuted into the same order, and the permutation itself
/// (`perm[r][k]` is the source column of output column `k` in row `r`).
#[derive(Debug, Clone)]
pub struct ShiftedIntervals {
    pub starts: Var,
    pub ends: Var,
    pub offsets: Var,
    pub perm: Vec<Vec<usize>>,
}

/// Rigidly translates every interval by its offset along the ray.
///
/// All inputs are `rays x m`. The translation is clamped per interval to
/// `[near - start, far - end]` so the shifted interval stays inside the ray
/// bounds with its width intact, then each row is re-sorted by midpoint.
/// The shift is on the tape; the sort permutation is not.
pub fn shift_intervals(
    tape: &mut Tape,
    starts: Var,
    ends: Var,
    offsets: Var,
    bounds: &[(f64, f64)],
) -> std::result::Result<ShiftedIntervals, DiffError> {
    let shape = tape.shape(starts);
    let (rows, m) = (shape.rows, shape.cols);
    if bounds.len() != rows {
        return Err(DiffError::Invalid {
            op: "shift_intervals",
            msg: format!("{} bounds for {rows} rays", bounds.len()),
        });
    }
    let near: Vec<f64> = bounds.iter().flat_map(|b| std::iter::repeat_n(b.0, m)).collect();
    let far: Vec<f64> = bounds.iter().flat_map(|b| std::iter::repeat_n(b.1, m)).collect();
    let near = tape.constant(near, rows, m)?;
    let far = tape.constant(far, rows, m)?;
    let lo = tape.sub(near, starts)?;
    let hi = tape.sub(far, ends)?;
    let s = tape.maximum(offsets, lo)?;
    let s = tape.minimum(s, hi)?;
    let a = tape.add(starts, s)?;
    let b = tape.add(ends, s)?;

    let (va, vb) = (tape.value(a), tape.value(b));
    let mut perm = Vec::with_capacity(rows);
    let mut flat = Vec::with_capacity(rows * m);
    for r in 0..rows {
        let mid = |k: usize| va[r * m + k] + vb[r * m + k];
        let mut idx: Vec<usize> = (0..m).collect();
        idx.sort_by(|&i, &j| mid(i).total_cmp(&mid(j)));
        flat.extend(idx.iter().map(|k| r * m + k));
        perm.push(idx);
    }
    let starts = tape.gather(a, flat.clone(), rows, m)?;
    let ends = tape.gather(b, flat.clone(), rows, m)?;
    let offsets = tape.gather(offsets, flat, rows, m)?;
    Ok(ShiftedIntervals {
        starts,
        ends,
        offsets,
        perm,
    })
}

/// Single-ray [`shift_intervals`] on plain values.
pub fn apply_offsets(iv: &IntervalSet, offsets: &[f64], near: f64, far: f64) -> Result<IntervalSet> {
    let m = iv.len();
    if offsets.len() != m {
        return Err(SamplingError::Length {
            what: "offsets",
            got: offsets.len(),
            expected: m,
        });
    }
    let mut tape = Tape::new();
    let a = tape.constant(iv.starts.clone(), 1, m)?;
    let b = tape.constant(iv.ends.clone(), 1, m)?;
    let o = tape.constant(offsets.to_vec(), 1, m)?;
    let s = shift_intervals(&mut tape, a, b, o, &[(near, far)])?;
    Ok(IntervalSet {
        starts: tape.value(s.starts).to_vec(),
        ends: tape.value(s.ends).to_vec(),
    })
}

/// Weight padding added before building the resampling distribution.
pub const RESAMPLE_PADDING: f64 = 0.01;

/// Draws `m_fine` new contiguous intervals by inverse-transform sampling
/// the piecewise-constant density proportional to `w + RESAMPLE_PADDING`
/// over the given intervals.
///
/// With an rng the `m_fine + 1` quantiles are stratified-jittered;
/// without one they sit at stratum centers. Nothing here is on a tape.
pub fn hierarchical_resample<R: Rng + ?Sized>(
    iv: &IntervalSet,
    w: &[f64],
    m_fine: usize,
    rng: Option<&mut R>,
) -> Result<IntervalSet> {
    let m = iv.len();
    if w.len() != m {
        return Err(SamplingError::Length {
            what: "weights",
            got: w.len(),
            expected: m,
        });
    }
    if m == 0 || m_fine == 0 {
        return Err(SamplingError::NoIntervals);
    }
    if let Some(i) = w.iter().position(|x| !(*x >= 0.0 && x.is_finite())) {
        return Err(SamplingError::NegativeWeight(i));
    }

    // Intervals in start order with their padded masses.
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| iv.starts[i].total_cmp(&iv.starts[j]));
    let mass: Vec<f64> = order.iter().map(|&i| w[i] + RESAMPLE_PADDING).collect();
    let total: f64 = mass.iter().sum();
    let mut cdf = Vec::with_capacity(m + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for p in &mass {
        acc += p / total;
        cdf.push(acc);
    }
    cdf[m] = 1.0;

    let n = m_fine + 1;
    let us: Vec<f64> = match rng {
        Some(rng) => (0..n)
            .map(|k| (k as f64 + rng.random::<f64>()) / n as f64)
            .collect(),
        None => (0..n).map(|k| (k as f64 + 0.5) / n as f64).collect(),
    };
    let mut edges: Vec<f64> = us
        .iter()
        .map(|&u| {
            // Last bin whose cdf start is <= u.
            let k = cdf[1..m].partition_point(|&c| c <= u);
            let (c0, c1) = (cdf[k], cdf[k + 1]);
            let frac = if c1 > c0 { ((u - c0) / (c1 - c0)).clamp(0.0, 1.0) } else { 0.5 };
            let i = order[k];
            iv.starts[i] + frac * (iv.ends[i] - iv.starts[i])
        })
        .collect();
    edges.sort_by(f64::total_cmp);
    // Coincident quantiles would give empty intervals; nudge them apart so
    // the output always has exactly `m_fine` intervals.
    for k in 1..edges.len() {
        if edges[k] <= edges[k - 1] {
            edges[k] = edges[k - 1].next_up();
        }
    }
    IntervalSet::from_edges(&edges)
}

#[cfg(test)]
pub(crate) mod ks {
    /// Asymptotic Kolmogorov-Smirnov p-value for statistic `d` on `n` draws.
    pub fn p_value(d: f64, n: usize) -> f64 {
        let sn = (n as f64).sqrt();
        let lambda = (sn + 0.12 + 0.11 / sn) * d;
        let mut p = 0.0;
        for k in 1..=100 {
            let term = 2.0 * (-1f64).powi(k - 1) * (-2.0 * (k as f64 * lambda).powi(2)).exp();
            p += term;
            if term.abs() < 1e-12 {
                break;
            }
        }
        p.clamp(0.0, 1.0)
    }

    /// Sup distance between the empirical CDF of `xs` and `cdf`.
    pub fn statistic(xs: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }
}
