//! Training losses on the tape: photometric MSE, the weight-based mutual
//! information term, distortion, patch consistency between unseen and
//! perturbed renders, and depth smoothness.
//!
//! Every sum over rays is divided by the number of rays (and perturbations
//! where they appear), so the weights below do not depend on batch size.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::{DiffError, Tape, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("patch layout: {0}")]
    Patch(String),
    #[error("{what}: got {got} values, expected {expected}")]
    Length {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("invalid loss config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Smallest number of unmasked samples for a ray to enter the MI term.
pub const MI_MIN_SAMPLES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiConfig {
    pub epsilon: f64,
    /// Samples with `w` at or below this are dropped.
    pub mask_threshold: f64,
    pub rho_clip: f64,
}

impl Default for MiConfig {
    fn default() -> Self {
        Self {
            epsilon: 5e-4,
            mask_threshold: 1e-4,
            rho_clip: 0.9999,
        }
    }
}

impl MiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(LossError::Config("epsilon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.mask_threshold) {
            return Err(LossError::Config("mask_threshold must lie in [0, 1)".into()));
        }
        if !(self.rho_clip > 0.0 && self.rho_clip < 1.0) {
            return Err(LossError::Config("rho_clip must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Mean over rays of the squared L2 color error. `rendered` is `rays x 3`.
pub fn loss_mse(tape: &mut Tape, rendered: Var, gt: &[f64]) -> Result<Var> {
    let s = tape.shape(rendered);
    if gt.len() != s.len() {
        return Err(LossError::Length {
            what: "ground-truth colors",
            got: gt.len(),
            expected: s.len(),
        });
    }
    let gt = tape.constant(gt.to_vec(), s.rows, s.cols)?;
    let d = tape.sub(rendered, gt)?;
    let d = tape.square(d);
    let total = tape.sum(d);
    Ok(tape.mul_scalar(total, 1.0 / s.rows as f64))
}

/// Treats a variance as zero when it is at rounding level relative to the
/// data magnitude.
fn negligible(var_sum: f64, n: usize, scale: f64) -> bool {
    var_sum <= n as f64 * (1e-12 * scale).powi(2)
}

/// Centered cross and auto sums `(suv, suu, svv)`, or `None` when either
/// side has no variance beyond rounding.
fn centered_sums(u: &[f64], v: &[f64]) -> Option<(f64, f64, f64)> {
    let n = u.len().min(v.len());
    if n == 0 {
        return None;
    }
    let mu = u[..n].iter().sum::<f64>() / n as f64;
    let mv = v[..n].iter().sum::<f64>() / n as f64;
    let (mut suv, mut suu, mut svv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        let (da, db) = (a - mu, b - mv);
        suv += da * db;
        suu += da * da;
        svv += db * db;
    }
    let su = u[..n].iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let sv = v[..n].iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if negligible(suu, n, su) || negligible(svv, n, sv) {
        return None;
    }
    Some((suv, suu, svv))
}

/// Gaussian mutual information `-ln(1 - rho^2) / 2` from the clamped
/// Pearson correlation; zero when either side has no variance.
pub fn mi_gaussian(u: &[f64], v: &[f64], rho_clip: f64) -> f64 {
    match centered_sums(u, v) {
        Some((suv, suu, svv)) => {
            let rho = (suv / (suu * svv).sqrt()).clamp(-rho_clip, rho_clip);
            -0.5 * (1.0 - rho * rho).ln()
        }
        None => 0.0,
    }
}

fn entropy(counts: &[usize], n: usize) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

/// Plug-in estimate `H(U) + H(V) - H(U, V)` on an equal-width
/// `bins x bins` grid over the data range. Not differentiable.
pub fn mi_histogram(u: &[f64], v: &[f64], bins: usize) -> f64 {
    let n = u.len().min(v.len());
    if n == 0 || bins == 0 {
        return 0.0;
    }
    let bin = |x: &[f64]| -> Vec<usize> {
        let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w = (hi - lo) / bins as f64;
        x.iter()
            .map(|&a| if w > 0.0 { (((a - lo) / w) as usize).min(bins - 1) } else { 0 })
            .collect()
    };
    let (bu, bv) = (bin(&u[..n]), bin(&v[..n]));
    let mut cu = vec![0usize; bins];
    let mut cv = vec![0usize; bins];
    let mut cj = vec![0usize; bins * bins];
    for (a, b) in bu.iter().zip(&bv) {
        cu[*a] += 1;
        cv[*b] += 1;
        cj[a * bins + b] += 1;
    }
    entropy(&cu, n) + entropy(&cv, n) - entropy(&cj, n)
}

/// Negated mean over rays of the Gaussian MI between `1 / (w + eps)` and
/// the offsets, using only samples with `w > mask_threshold`. Rays with
/// fewer than [`MI_MIN_SAMPLES`] surviving samples, or with no variance on
/// either side, contribute zero. Inputs are `rays x m`; the mask itself is
/// not differentiated.
pub fn loss_mi(tape: &mut Tape, w: Var, offsets: Var, cfg: &MiConfig) -> Result<Var> {
    cfg.validate()?;
    let s = tape.shape(w);
    if tape.shape(offsets) != s {
        return Err(DiffError::ShapeMismatch {
            op: "loss_mi",
            left: s,
            right: tape.shape(offsets),
        }
        .into());
    }
    let (rays, m) = (s.rows, s.cols);
    let we = tape.add_scalar(w, cfg.epsilon);
    let one = tape.scalar(1.0);
    let u = tape.div(one, we)?;

    // Mask and per-ray validity from plain values.
    let (uv, ov, wv) = (tape.value(u), tape.value(offsets), tape.value(w));
    let mut mask = vec![0.0; rays * m];
    let mut inv_n = vec![1.0; rays];
    let mut pad = vec![0.0; rays];
    for r in 0..rays {
        let row = r * m..(r + 1) * m;
        let keep: Vec<usize> = row.clone().filter(|&i| wv[i] > cfg.mask_threshold).collect();
        let pick = |x: &[f64]| keep.iter().map(|&i| x[i]).collect::<Vec<_>>();
        let valid = keep.len() >= MI_MIN_SAMPLES && centered_sums(&pick(uv), &pick(ov)).is_some();
        if valid {
            for &i in &keep {
                mask[i] = 1.0;
            }
            inv_n[r] = 1.0 / keep.len() as f64;
        } else {
            pad[r] = 1.0;
        }
    }
    let mask = tape.constant(mask, rays, m)?;
    let inv_n = tape.constant(inv_n, rays, 1)?;
    let pad = tape.constant(pad, rays, 1)?;
    let ones = tape.constant(vec![1.0; m], 1, m)?;

    let centered = |tape: &mut Tape, x: Var| -> std::result::Result<Var, DiffError> {
        let xm = tape.mul(x, mask)?;
        let sum = tape.sum_rows(xm);
        let mean = tape.mul(sum, inv_n)?;
        let mean = tape.matmul(mean, ones)?;
        let d = tape.sub(x, mean)?;
        tape.mul(d, mask)
    };
    let du = centered(tape, u)?;
    let dv = centered(tape, offsets)?;
    let uvp = tape.mul(du, dv)?;
    let cov = tape.sum_rows(uvp);
    let uu = tape.square(du);
    let suu = tape.sum_rows(uu);
    let vv = tape.square(dv);
    let svv = tape.sum_rows(vv);
    let prod = tape.mul(suu, svv)?;
    let prod = tape.add(prod, pad)?;
    let norm = tape.sqrt(prod)?;
    let rho = tape.div(cov, norm)?;
    let rho = tape.clamp(rho, -cfg.rho_clip, cfg.rho_clip)?;
    let r2 = tape.square(rho);
    let r2 = tape.neg(r2);
    let rest = tape.add_scalar(r2, 1.0);
    let ln = tape.log(rest)?;
    // loss = -(1/R) sum(-ln/2) = sum(ln) / (2R)
    let total = tape.sum(ln);
    Ok(tape.mul_scalar(total, 0.5 / rays as f64))
}

/// Brute-force distortion of one ray, for checking [`loss_dist`].
pub fn distortion(w: &[f64], s: &[f64], ds: &[f64]) -> f64 {
    let mut inter = 0.0;
    for i in 0..w.len() {
        for j in 0..w.len() {
            inter += w[i] * w[j] * (s[i] - s[j]).abs();
        }
    }
    let intra: f64 = w.iter().zip(ds).map(|(a, d)| a * a * d).sum();
    inter + intra / 3.0
}

/// Distortion on `rays x m` weights and interval bounds, with distances
/// normalized to `[0, 1]` by each ray's `(near, far)`. Rows must be sorted
/// by midpoint, which holds for every pass the renderer produces.
pub fn loss_dist(tape: &mut Tape, w: Var, starts: Var, ends: Var, bounds: &[(f64, f64)]) -> Result<Var> {
    let s = tape.shape(w);
    let (rays, m) = (s.rows, s.cols);
    if bounds.len() != rays {
        return Err(LossError::Length {
            what: "ray bounds",
            got: bounds.len(),
            expected: rays,
        });
    }
    let near: Vec<f64> = bounds.iter().flat_map(|b| std::iter::repeat_n(b.0, m)).collect();
    let inv: Vec<f64> = bounds
        .iter()
        .flat_map(|b| std::iter::repeat_n(1.0 / (b.1 - b.0), m))
        .collect();
    let near = tape.constant(near, rays, m)?;
    let inv = tape.constant(inv, rays, m)?;
    let sum = tape.add(starts, ends)?;
    let mid = tape.mul_scalar(sum, 0.5);
    let mid = tape.sub(mid, near)?;
    let sn = tape.mul(mid, inv)?;
    let width = tape.sub(ends, starts)?;
    let dsn = tape.mul(width, inv)?;

    // sum_ij w_i w_j |s_i - s_j| = 2 sum_i w_i (s_i W_<i - S_<i) on sorted s
    let cw = tape.cumsum(w);
    let w_before = tape.sub(cw, w)?;
    let ws = tape.mul(w, sn)?;
    let cws = tape.cumsum(ws);
    let s_before = tape.sub(cws, ws)?;
    let a = tape.mul(sn, w_before)?;
    let a = tape.sub(a, s_before)?;
    let a = tape.mul(w, a)?;
    let inter = tape.sum(a);
    let inter = tape.mul_scalar(inter, 2.0);
    let w2 = tape.square(w);
    let b = tape.mul(w2, dsn)?;
    let intra = tape.sum(b);
    let intra = tape.mul_scalar(intra, 1.0 / 3.0);
    let total = tape.add(inter, intra)?;
    Ok(tape.mul_scalar(total, 1.0 / rays as f64))
}

pub fn loss_offset(tape: &mut Tape, mi: Var, dist: Var, lambda: f64) -> Result<Var> {
    let a = tape.mul_scalar(mi, lambda);
    Ok(tape.add(a, dist)?)
}

/// Pixel-level consistency: squared L2 between each unseen render and the
/// matching ray of every perturbed render, over `P * rays`.
pub fn loss_ssl(tape: &mut Tape, unseen: Var, perturbed: &[Var]) -> Result<Var> {
    let rays = tape.shape(unseen).rows;
    if perturbed.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let mut total: Option<Var> = None;
    for &p in perturbed {
        let d = tape.sub(unseen, p)?;
        let d = tape.square(d);
        let s = tape.sum(d);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let scale = 1.0 / (perturbed.len() * rays) as f64;
    Ok(tape.mul_scalar(total.expect("non-empty"), scale))
}

/// For every unseen ray, the rows of a perturbed render that form its
/// patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchLayout {
    pub patch_size: usize,
    pub rows: Vec<Vec<usize>>,
}

impl PatchLayout {
    /// Unseen and perturbed renders share the same patch grid: rays are
    /// stored patch by patch, `ps * ps` consecutive rows each, and every
    /// ray is compared with the whole perturbed patch it falls in.
    pub fn shared_footprint(patches: usize, ps: usize) -> Self {
        let per = ps * ps;
        let rows = (0..patches * per)
            .map(|r| {
                let p = r / per;
                (p * per..(p + 1) * per).collect()
            })
            .collect();
        Self { patch_size: ps, rows }
    }

    /// One patch per unseen ray, stored consecutively.
    pub fn per_ray(rays: usize, ps: usize) -> Self {
        let per = ps * ps;
        Self {
            patch_size: ps,
            rows: (0..rays).map(|r| (r * per..(r + 1) * per).collect()).collect(),
        }
    }
}

/// Patch consistency (color or depth, depending on what the `k`-column
/// inputs hold): the mean over `P`, unseen rays and the `PS * PS` patch
/// rays of the squared L2 difference.
pub fn loss_ppc(tape: &mut Tape, unseen: Var, perturbed: &[Var], layout: &PatchLayout) -> Result<Var> {
    let us = tape.shape(unseen);
    let per = layout.patch_size * layout.patch_size;
    if layout.patch_size == 0 {
        return Err(LossError::Patch("patch size must be positive".into()));
    }
    if layout.rows.len() != us.rows {
        return Err(LossError::Patch(format!(
            "{} patches for {} unseen rays",
            layout.rows.len(),
            us.rows
        )));
    }
    if let Some(bad) = layout.rows.iter().find(|r| r.len() != per) {
        return Err(LossError::Patch(format!(
            "patch with {} rays, expected {per}",
            bad.len()
        )));
    }
    if perturbed.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let k = us.cols;
    let expand = |rows: &mut dyn Iterator<Item = usize>| -> Vec<usize> {
        rows.flat_map(|r| (0..k).map(move |c| r * k + c)).collect()
    };
    let rep = expand(&mut (0..us.rows).flat_map(|r| std::iter::repeat_n(r, per)));
    let idx = expand(&mut layout.rows.iter().flatten().copied());
    let n = us.rows * per;
    let identity = per == 1 && idx.iter().enumerate().all(|(i, &j)| i == j);
    let u = if per == 1 { unseen } else { tape.gather(unseen, rep, n, k)? };
    let mut total: Option<Var> = None;
    for &p in perturbed {
        let ps = tape.shape(p);
        if ps.cols != k || idx.iter().any(|&i| i >= ps.len()) {
            return Err(LossError::Patch(format!("perturbed render {ps} does not fit the layout")));
        }
        let pv = if identity { p } else { tape.gather(p, idx.clone(), n, k)? };
        let d = tape.sub(u, pv)?;
        let d = tape.square(d);
        let s = tape.sum(d);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let scale = 1.0 / (per * perturbed.len() * us.rows) as f64;
    Ok(tape.mul_scalar(total.expect("non-empty"), scale))
}

/// Sum of squared horizontal and vertical forward differences within each
/// `ps x ps` depth patch, averaged over patches. `depth` holds the patches
/// one after another, each row-major.
pub fn loss_smooth(tape: &mut Tape, depth: Var, ps: usize) -> Result<Var> {
    let n = tape.shape(depth).len();
    if ps < 2 {
        return Ok(tape.scalar(0.0));
    }
    let per = ps * ps;
    if n % per != 0 {
        return Err(LossError::Patch(format!("{n} depths do not split into {ps}x{ps} patches")));
    }
    let patches = n / per;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for p in 0..patches {
        let base = p * per;
        for y in 0..ps {
            for x in 0..ps {
                if x + 1 < ps {
                    a.push(base + y * ps + x);
                    b.push(base + y * ps + x + 1);
                }
                if y + 1 < ps {
                    a.push(base + y * ps + x);
                    b.push(base + (y + 1) * ps + x);
                }
            }
        }
    }
    let pairs = a.len();
    let da = tape.gather(depth, a, pairs, 1)?;
    let db = tape.gather(depth, b, pairs, 1)?;
    let d = tape.sub(db, da)?;
    let d = tape.square(d);
    let s = tape.sum(d);
    Ok(tape.mul_scalar(s, 1.0 / patches as f64))
}

/// Relative weights of the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub mu: f64,
    pub nu: f64,
    pub lambda: f64,
    pub coarse_coef: f64,
    /// Multiplier on the smoothness term; 0 disables it.
    pub smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mu: 0.5,
            nu: 0.5,
            lambda: 5e-3,
            coarse_coef: 0.1,
            smooth: 1.0,
        }
    }
}

/// Scalar loss terms of one pass on the tape.
#[derive(Debug, Clone, Copy)]
pub struct PassTerms {
    pub mse: Var,
    pub mi: Var,
    pub dist: Var,
    pub offset: Var,
    pub ppc_rgb: Var,
    pub ppc_d: Var,
    pub smooth: Var,
}

impl PassTerms {
    /// All terms zero.
    pub fn zeros(tape: &mut Tape) -> Self {
        let z = tape.scalar(0.0);
        Self {
            mse: z,
            mi: z,
            dist: z,
            offset: z,
            ppc_rgb: z,
            ppc_d: z,
            smooth: z,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PassBreakdown {
    pub mse: f64,
    pub mi: f64,
    pub dist: f64,
    pub offset: f64,
    pub ppc_rgb: f64,
    pub ppc_d: f64,
    pub smooth: f64,
    pub total: f64,
}

impl PassBreakdown {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        self.mse + w.mu * self.offset + w.nu * (self.ppc_rgb + self.ppc_d) + w.smooth * self.smooth
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub coarse: PassBreakdown,
    pub fine: PassBreakdown,
    pub total: f64,
}

impl LossBreakdown {
    pub fn recompute_total(&self, w: &LossWeights) -> f64 {
        self.fine.weighted(w) + w.coarse_coef * self.coarse.weighted(w)
    }

    pub const CSV_HEADER: &'static str =
        "step,lr,mse_c,mse_f,mi_f,dist_f,offset_f,ppc_rgb_f,ppc_d_f,smooth_f,total";

    /// One log row; floats use the shortest round-trip representation.
    pub fn csv_row(&self, step: usize, lr: f64) -> String {
        let f = &self.fine;
        format!(
            "{step},{lr:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.coarse.mse, f.mse, f.mi, f.dist, f.offset, f.ppc_rgb, f.ppc_d, f.smooth, self.total
        )
    }
}

fn pass_total(tape: &mut Tape, t: &PassTerms, w: &LossWeights) -> Result<Var> {
    let off = tape.mul_scalar(t.offset, w.mu);
    let ppc = tape.add(t.ppc_rgb, t.ppc_d)?;
    let ppc = tape.mul_scalar(ppc, w.nu);
    let sm = tape.mul_scalar(t.smooth, w.smooth);
    let l = tape.add(t.mse, off)?;
    let l = tape.add(l, ppc)?;
    Ok(tape.add(l, sm)?)
}

/// `L_fine + coarse_coef * L_coarse` with
/// `L = mse + mu * offset + nu * (ppc_rgb + ppc_d) + smooth`.
pub fn loss_total(
    tape: &mut Tape,
    coarse: &PassTerms,
    fine: &PassTerms,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let lc = pass_total(tape, coarse, w)?;
    let lf = pass_total(tape, fine, w)?;
    let lc_scaled = tape.mul_scalar(lc, w.coarse_coef);
    let total = tape.add(lf, lc_scaled)?;
    let read = |t: &PassTerms, l: Var| PassBreakdown {
        mse: tape.scalar_value(t.mse),
        mi: tape.scalar_value(t.mi),
        dist: tape.scalar_value(t.dist),
        offset: tape.scalar_value(t.offset),
        ppc_rgb: tape.scalar_value(t.ppc_rgb),
        ppc_d: tape.scalar_value(t.ppc_d),
        smooth: tape.scalar_value(t.smooth),
        total: tape.scalar_value(l),
    };
    let breakdown = LossBreakdown {
        coarse: read(coarse, lc),
        fine: read(fine, lf),
        total: tape.scalar_value(total),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{grad_check, Shape};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn eval<F: FnOnce(&mut Tape) -> Result<Var>>(f: F) -> f64 {
        let mut t = Tape::new();
        let v = f(&mut t).unwrap();
        t.scalar_value(v)
    }

    #[test]
    fn mse_examples() {
        let v = eval(|t| {
            let r = t.constant(vec![0.6, 0.2, 0.3], 1, 3)?;
            loss_mse(t, r, &[0.5, 0.2, 0.3])
        });
        assert!((v - 0.01).abs() < 1e-15);
        let v = eval(|t| {
            let r = t.constant(vec![0.1; 6], 2, 3)?;
            loss_mse(t, r, &[0.1; 6])
        });
        assert_eq!(v, 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a: Vec<f64> = (0..30).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..30).map(|_| rng.random()).collect();
        let want = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 10.0;
        let got = eval(|t| {
            let r = t.constant(a.clone(), 10, 3)?;
            loss_mse(t, r, &b)
        });
        assert!((got - want).abs() < 1e-12);
    }

    fn gaussian_pair(rho: f64, n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (1.0 - rho * rho).sqrt();
        (0..n)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                (a, rho * a + s * b)
            })
            .unzip()
    }

    #[test]
    fn gaussian_mi_limits() {
        let u: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let clip = -0.5 * (1.0 - 0.9999f64 * 0.9999).ln();
        assert!((mi_gaussian(&u, &u, 0.9999) - clip).abs() < 1e-12);
        assert!((clip - 4.26).abs() < 0.01);
        assert_eq!(mi_gaussian(&u, &[0.3; 20], 0.9999), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
        assert!(mi_gaussian(&a, &b, 0.9999) < 0.02);
    }

    #[test]
    fn estimators_agree_with_closed_form() {
        for (i, rho) in [0.0, 0.4, 0.8].into_iter().enumerate() {
            let (u, v) = gaussian_pair(rho, 100_000, 10 + i as u64);
            let want = -0.5 * (1.0f64 - rho * rho).ln();
            let g = mi_gaussian(&u, &v, 0.9999);
            let h = mi_histogram(&u, &v, 32);
            assert!((g - want).abs() < 0.03, "rho {rho}: gaussian {g} vs {want}");
            assert!((h - want).abs() < 0.08, "rho {rho}: histogram {h} vs {want}");
            assert!((g - h).abs() < 0.1);
        }
    }

    fn random_weights(rng: &mut ChaCha8Rng, rays: usize, m: usize) -> Vec<f64> {
        (0..rays * m)
            .map(|_| if rng.random::<f64>() < 0.2 { 0.0 } else { rng.random_range(0.001..0.2) })
            .collect()
    }

    #[test]
    fn mi_loss_constant_and_perfect_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (rays, m) = (3, 16);
        let w = random_weights(&mut rng, rays, m);
        let cfg = MiConfig::default();
        let v = eval(|t| {
            let wv = t.constant(w.clone(), rays, m)?;
            let o = t.constant(vec![0.25; rays * m], rays, m)?;
            loss_mi(t, wv, o, &cfg)
        });
        assert_eq!(v, 0.0);

        let off: Vec<f64> = w.iter().map(|x| -0.3 / (x + cfg.epsilon) + 0.1).collect();
        let v = eval(|t| {
            let wv = t.constant(w.clone(), rays, m)?;
            let o = t.constant(off.clone(), rays, m)?;
            loss_mi(t, wv, o, &cfg)
        });
        let clip = -0.5 * (1.0 - 0.9999f64 * 0.9999).ln();
        assert!((v + clip).abs() < 1e-9, "{v}");
    }

    #[test]
    fn mi_loss_matches_per_ray_estimator_and_skips_short_rays() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (rays, m) = (4, 12);
        let mut w = random_weights(&mut rng, rays, m);
        // Ray 3 keeps only 5 samples.
        for i in 0..7 {
            w[3 * m + i] = 0.0;
        }
        let off: Vec<f64> = (0..rays * m).map(|_| rng.random_range(-0.1..0.1)).collect();
        let cfg = MiConfig::default();
        let got = eval(|t| {
            let wv = t.constant(w.clone(), rays, m)?;
            let o = t.constant(off.clone(), rays, m)?;
            loss_mi(t, wv, o, &cfg)
        });
        let mut want = 0.0;
        for r in 0..rays {
            let keep: Vec<usize> = (r * m..(r + 1) * m).filter(|&i| w[i] > cfg.mask_threshold).collect();
            if keep.len() < MI_MIN_SAMPLES {
                continue;
            }
            let u: Vec<f64> = keep.iter().map(|&i| 1.0 / (w[i] + cfg.epsilon)).collect();
            let v: Vec<f64> = keep.iter().map(|&i| off[i]).collect();
            want -= mi_gaussian(&u, &v, cfg.rho_clip);
        }
        want /= rays as f64;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn mi_loss_gradients() {
        let cfg = MiConfig::default();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (rays, m) = (3, 12);
            let w = random_weights(&mut rng, rays, m);
            let off: Vec<f64> = (0..rays * m).map(|_| rng.random_range(-0.1..0.1)).collect();
            let err = grad_check(
                |t: &mut Tape, o: Var| {
                    let wv = t.constant(w.clone(), rays, m)?;
                    loss_mi(t, wv, o, &cfg)
                },
                &off,
                Shape::new(rays, m),
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn dist_examples_and_oracle() {
        let one = |w: Vec<f64>, s: Vec<f64>, ds: Vec<f64>| {
            let m = w.len();
            let starts: Vec<f64> = s.iter().zip(&ds).map(|(a, d)| a - d / 2.0).collect();
            let ends: Vec<f64> = s.iter().zip(&ds).map(|(a, d)| a + d / 2.0).collect();
            eval(|t| {
                let wv = t.constant(w, 1, m)?;
                let a = t.constant(starts, 1, m)?;
                let b = t.constant(ends, 1, m)?;
                loss_dist(t, wv, a, b, &[(0.0, 1.0)])
            })
        };
        assert_eq!(one(vec![0.0; 3], vec![0.1, 0.5, 0.9], vec![0.01; 3]), 0.0);
        let v = one(vec![1.0], vec![0.5], vec![0.01]);
        assert!((v - 0.01 / 3.0).abs() < 1e-15);
        let v = one(vec![0.5, 0.5], vec![0.2, 0.8], vec![0.01, 0.01]);
        assert!((v - (0.3 + 0.0025 * 2.0 / 3.0)).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (rays, m) = (3, 20);
        let edges: Vec<Vec<f64>> = (0..rays)
            .map(|_| {
                let mut e: Vec<f64> = (0..=m).map(|_| rng.random_range(2.0..6.0)).collect();
                e.sort_by(f64::total_cmp);
                e
            })
            .collect();
        let w = random_weights(&mut rng, rays, m);
        let starts: Vec<f64> = edges.iter().flat_map(|e| e[..m].to_vec()).collect();
        let ends: Vec<f64> = edges.iter().flat_map(|e| e[1..].to_vec()).collect();
        let got = eval(|t| {
            let wv = t.constant(w.clone(), rays, m)?;
            let a = t.constant(starts.clone(), rays, m)?;
            let b = t.constant(ends.clone(), rays, m)?;
            loss_dist(t, wv, a, b, &[(2.0, 6.0); 3])
        });
        let want = (0..rays)
            .map(|r| {
                let row = r * m..(r + 1) * m;
                let s: Vec<f64> = row.clone().map(|i| ((starts[i] + ends[i]) / 2.0 - 2.0) / 4.0).collect();
                let ds: Vec<f64> = row.clone().map(|i| (ends[i] - starts[i]) / 4.0).collect();
                distortion(&w[row], &s, &ds)
            })
            .sum::<f64>()
            / rays as f64;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn offset_composition() {
        let v = eval(|t| {
            let mi = t.scalar(-4.0);
            let d = t.scalar(0.3);
            loss_offset(t, mi, d, 5e-3)
        });
        assert!((v - 0.28).abs() < 1e-15);
        let v = eval(|t| {
            let mi = t.scalar(-4.0);
            let d = t.scalar(0.3);
            loss_offset(t, mi, d, 0.0)
        });
        assert_eq!(v, 0.3);
    }

    #[test]
    fn ssl_and_ppc_examples() {
        let v = eval(|t| {
            let u = t.constant(vec![0.2, 0.0, 0.0], 1, 3)?;
            let p = t.constant(vec![0.0; 3], 1, 3)?;
            loss_ssl(t, u, &[p])
        });
        assert!((v - 0.04).abs() < 1e-15);

        let v = eval(|t| {
            let u = t.constant(vec![0.0; 3], 1, 3)?;
            let p = t.constant(
                vec![0.1, 0.0, 0.0, 0.0, 0.1, 0.0, 0.0, 0.0, 0.1, 0.1, 0.1, 0.0],
                4,
                3,
            )?;
            loss_ppc(t, u, &[p], &PatchLayout::per_ray(1, 2))
        });
        assert!((v - 0.0125).abs() < 1e-15);

        let v = eval(|t| {
            let u = t.constant(vec![0.3, 0.5, 0.7], 1, 3)?;
            let p = t.constant([0.3, 0.5, 0.7].repeat(4), 4, 3)?;
            loss_ppc(t, u, &[p], &PatchLayout::per_ray(1, 2))
        });
        assert_eq!(v, 0.0);

        let mut t = Tape::new();
        let u = t.constant(vec![0.0; 3], 1, 3).unwrap();
        let p = t.constant(vec![0.0; 9], 3, 3).unwrap();
        assert!(loss_ppc(&mut t, u, &[p], &PatchLayout { patch_size: 2, rows: vec![vec![0, 1, 2]] }).is_err());
    }

    #[test]
    fn ppc_with_unit_patches_is_ssl_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in [1, 3] {
            let rays = 10;
            let u: Vec<f64> = (0..rays * k).map(|_| rng.random()).collect();
            let ps: Vec<Vec<f64>> = (0..3).map(|_| (0..rays * k).map(|_| rng.random()).collect()).collect();
            let run = |ppc: bool| {
                eval(|t| {
                    let uv = t.constant(u.clone(), rays, k)?;
                    let pv = ps
                        .iter()
                        .map(|p| t.constant(p.clone(), rays, k))
                        .collect::<std::result::Result<Vec<_>, _>>()?;
                    if ppc {
                        loss_ppc(t, uv, &pv, &PatchLayout::shared_footprint(rays, 1))
                    } else {
                        loss_ssl(t, uv, &pv)
                    }
                })
            };
            assert_eq!(run(true).to_bits(), run(false).to_bits());
        }
    }

    #[test]
    fn smooth_examples() {
        let v = eval(|t| {
            let d = t.constant(vec![1.0, 2.0, 1.0, 2.0], 4, 1)?;
            loss_smooth(t, d, 2)
        });
        assert_eq!(v, 2.0);
        let v = eval(|t| {
            let d = t.constant(vec![3.0; 16], 16, 1)?;
            loss_smooth(t, d, 4)
        });
        assert_eq!(v, 0.0);
        for ps in 2..6 {
            let slope = 0.37;
            let depth: Vec<f64> = (0..ps * ps).map(|i| 2.0 + slope * (i % ps) as f64).collect();
            let v = eval(|t| {
                let d = t.constant(depth, ps * ps, 1)?;
                loss_smooth(t, d, ps)
            });
            let want = (ps * (ps - 1)) as f64 * slope * slope;
            assert!((v - want).abs() < 1e-12);
        }
        let v = eval(|t| {
            let d = t.constant(vec![1.0], 1, 1)?;
            loss_smooth(t, d, 1)
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        let mut t = Tape::new();
        let z = PassTerms::zeros(&mut t);
        let (v, b) = loss_total(&mut t, &z, &z, &w).unwrap();
        assert_eq!(t.scalar_value(v), 0.0);
        assert_eq!(b.total, 0.0);

        let fine = PassTerms {
            mse: t.scalar(1.0),
            offset: t.scalar(0.2),
            ppc_rgb: t.scalar(0.4),
            ppc_d: t.scalar(0.0),
            smooth: t.scalar(0.1),
            ..z
        };
        let (_, b) = loss_total(&mut t, &z, &fine, &w).unwrap();
        assert!((b.total - 1.4).abs() < 1e-15);
        let (_, b) = loss_total(&mut t, &fine, &fine, &w).unwrap();
        assert!((b.total - 1.1 * 1.4).abs() < 1e-12);
        assert!((b.total - b.recompute_total(&w)).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let rays = 4;
            let gt: Vec<f64> = (0..rays * 3).map(|_| rng.random()).collect();
            let x: Vec<f64> = (0..rays * 3).map(|_| rng.random()).collect();
            let p: Vec<f64> = (0..rays * 3).map(|_| rng.random()).collect();
            let sh = Shape::new(rays, 3);
            let h = 1e-6;
            let checks: Vec<(&str, f64)> = vec![
                ("mse", grad_check(|t: &mut Tape, v: Var| loss_mse(t, v, &gt), &x, sh, h).unwrap()),
                (
                    "ssl",
                    grad_check(
                        |t: &mut Tape, v: Var| {
                            let pv = t.constant(p.clone(), rays, 3)?;
                            loss_ssl(t, v, &[pv])
                        },
                        &x,
                        sh,
                        h,
                    )
                    .unwrap(),
                ),
                (
                    "ppc",
                    grad_check(
                        |t: &mut Tape, v: Var| {
                            let u = t.constant(p[..3].to_vec(), 1, 3)?;
                            loss_ppc(t, u, &[v], &PatchLayout::per_ray(1, 2))
                        },
                        &x,
                        sh,
                        h,
                    )
                    .unwrap(),
                ),
                (
                    "smooth",
                    grad_check(|t: &mut Tape, v: Var| {
                        let v = t.reshape(v, 12, 1)?;
                        loss_smooth(t, v, 2)
                    }, &x, sh, h)
                    .unwrap(),
                ),
            ];
            for (name, err) in checks {
                assert!(err < 1e-4, "{name} seed {seed}: {err}");
            }
            let m = 10;
            let mut e: Vec<f64> = (0..=m).map(|_| rng.random_range(2.0..6.0)).collect();
            e.sort_by(f64::total_cmp);
            let w: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..0.3)).collect();
            let err = grad_check(
                |t: &mut Tape, wv: Var| {
                    let a = t.constant(e[..m].to_vec(), 1, m)?;
                    let b = t.constant(e[1..].to_vec(), 1, m)?;
                    loss_dist(t, wv, a, b, &[(2.0, 6.0)])
                },
                &w,
                Shape::new(1, m),
                h,
            )
            .unwrap();
            assert!(err < 1e-4, "dist seed {seed}: {err}");
        }
    }

    proptest! {
        #[test]
        fn scaling_colors_scales_photometric_losses(k in 0.1f64..3.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..12).map(|_| rng.random()).collect();
            let b: Vec<f64> = (0..12).map(|_| rng.random()).collect();
            let ka: Vec<f64> = a.iter().map(|x| x * k).collect();
            let kb: Vec<f64> = b.iter().map(|x| x * k).collect();
            let mse = |x: &[f64], y: &[f64]| eval(|t| { let v = t.constant(x.to_vec(), 4, 3)?; loss_mse(t, v, y) });
            let ppc = |x: &[f64], y: &[f64]| eval(|t| {
                let u = t.constant(x[..3].to_vec(), 1, 3)?;
                let p = t.constant(y.to_vec(), 4, 3)?;
                loss_ppc(t, u, &[p], &PatchLayout::per_ray(1, 2))
            });
            prop_assert!((mse(&ka, &kb) - k * k * mse(&a, &b)).abs() < 1e-12);
            prop_assert!((ppc(&ka, &kb) - k * k * ppc(&a, &b)).abs() < 1e-12);
        }

        #[test]
        fn losses_have_the_right_sign(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (rays, m) = (2, 16);
            let w = random_weights(&mut rng, rays, m);
            let off: Vec<f64> = (0..rays * m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let cfg = MiConfig::default();
            let mi = eval(|t| {
                let wv = t.constant(w.clone(), rays, m)?;
                let o = t.constant(off.clone(), rays, m)?;
                loss_mi(t, wv, o, &cfg)
            });
            prop_assert!(mi <= 0.0);
            prop_assert!(mi >= -0.5 * -(1.0 - cfg.rho_clip * cfg.rho_clip).ln() - 1e-12);
            let d: Vec<f64> = (0..16).map(|_| rng.random_range(2.0..6.0)).collect();
            let sm = eval(|t| { let v = t.constant(d.clone(), 16, 1)?; loss_smooth(t, v, 4) });
            prop_assert!(sm >= 0.0);
        }
    }
}
