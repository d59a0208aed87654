//! Emission-absorption quadrature, coarse/fine cone rendering and the
//! deformable fine pass.
//!
//! Transmittance is the usual `T_i = exp(-sum_{j<i} sigma_j delta_j)`, and
//! expected depth assigns the leftover mass `T_{M+1}` to the far plane so it
//! stays bounded on empty rays.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::{DiffError, Tape, Var};
use crate::field::{FieldError, FieldOutput, FieldSource, FieldVars, FrustumBatch, RadianceField};
use crate::geometry::{pixel_cone, CameraPose, ConeRay, GeometryError};
use crate::sampling::{
    frustum_moments, hierarchical_resample, shift_intervals, stratified_intervals, IntervalSet,
    SampleRays, SamplingError,
};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("render config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, RenderError>;

/// Which passes shift their frustums by the predicted offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Deformable {
    Off,
    #[default]
    Fine,
    Both,
}

impl Deformable {
    pub fn coarse(self) -> bool {
        self == Self::Both
    }

    pub fn fine(self) -> bool {
        self != Self::Off
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub m_coarse: usize,
    pub m_fine: usize,
    #[serde(default)]
    pub deformable: Deformable,
    /// Composite the residual transmittance onto this color.
    #[serde(default = "white")]
    pub background: Option<[f64; 3]>,
}

fn white() -> Option<[f64; 3]> {
    Some([1.0; 3])
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            m_coarse: 64,
            m_fine: 64,
            deformable: Deformable::Fine,
            background: white(),
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_coarse == 0 || self.m_fine == 0 {
            return Err(RenderError::Config("sample counts must be positive".into()));
        }
        if let Some(bg) = self.background {
            if bg.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(RenderError::Config("background must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    pub fn with_deformable(mut self, d: Deformable) -> Self {
        self.deformable = d;
        self
    }
}

/// One ray's quadrature result on plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: [f64; 3],
    pub depth: f64,
    pub weights: Vec<f64>,
    /// `M + 1` entries, `T_1 = 1`.
    pub transmittance: Vec<f64>,
    pub accumulation: f64,
}

/// Weights and the `M + 1` transmittances for a single ray.
pub fn weights_from_density(sigma: &[f64], delta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut weights = Vec::with_capacity(sigma.len());
    let mut trans = Vec::with_capacity(sigma.len() + 1);
    let mut cum = 0.0f64;
    trans.push(1.0);
    for (s, d) in sigma.iter().zip(delta) {
        let x = s * d;
        let t = (-cum).exp();
        weights.push(t * (1.0 - (-x).exp()));
        cum += x;
        trans.push((-cum).exp());
    }
    (weights, trans)
}

/// Composites one ray from its weights and transmittances.
pub fn composite(
    weights: &[f64],
    transmittance: &[f64],
    colors: &[[f64; 3]],
    t_mid: &[f64],
    far: f64,
    background: Option<[f64; 3]>,
) -> RenderOutput {
    let t_last = *transmittance.last().unwrap_or(&1.0);
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    for ((w, c), t) in weights.iter().zip(colors).zip(t_mid) {
        for k in 0..3 {
            color[k] += w * c[k];
        }
        depth += w * t;
    }
    if let Some(bg) = background {
        for k in 0..3 {
            color[k] += t_last * bg[k];
        }
    }
    depth += t_last * far;
    RenderOutput {
        color,
        depth,
        weights: weights.to_vec(),
        transmittance: transmittance.to_vec(),
        accumulation: weights.iter().sum(),
    }
}

/// Batched quadrature on `rays x m` densities and widths. Returns the
/// weights, the transmittance in front of every sample (both `rays x m`)
/// and the residual transmittance `T_{M+1}` (`rays x 1`).
pub fn quadrature(
    tape: &mut Tape,
    sigma: Var,
    delta: Var,
) -> std::result::Result<(Var, Var, Var), DiffError> {
    let m = tape.shape(sigma).cols;
    let x = tape.mul(sigma, delta)?;
    let rays = tape.shape(sigma).rows;
    let cum = tape.cumsum(x);
    // Exclusive sums as a shifted copy of `cum`, so the transmittance is
    // monotone to the last bit.
    let excl = if m > 1 {
        let idx = (0..rays).flat_map(|r| (0..m - 1).map(move |k| r * m + k)).collect();
        let head = tape.gather(cum, idx, rays, m - 1)?;
        let zero = tape.zeros(rays, 1);
        tape.concat_cols(zero, head)?
    } else {
        tape.zeros(rays, 1)
    };
    let neg = tape.neg(excl);
    let trans = tape.exp(neg);
    let nx = tape.neg(x);
    let keep = tape.exp(nx);
    let alpha = tape.neg(keep);
    let alpha = tape.add_scalar(alpha, 1.0);
    let weights = tape.mul(trans, alpha)?;
    let total = tape.column(cum, m - 1)?;
    let total = tape.neg(total);
    let t_last = tape.exp(total);
    Ok((weights, trans, t_last))
}

/// `rows x 1` column repeated into `rows x k`.
fn broadcast_cols(tape: &mut Tape, x: Var, k: usize) -> std::result::Result<Var, DiffError> {
    let ones = tape.constant(vec![1.0; k], 1, k)?;
    tape.matmul(x, ones)
}

/// Batched compositing. `sample_color` is `(rays * m) x 3`; returns the
/// `rays x 3` colors and `rays x 1` depths.
pub fn composite_batch(
    tape: &mut Tape,
    weights: Var,
    t_last: Var,
    sample_color: Var,
    t_mid: Var,
    far: &[f64],
    background: Option<[f64; 3]>,
) -> std::result::Result<(Var, Var), DiffError> {
    let s = tape.shape(weights);
    let (rays, m) = (s.rows, s.cols);
    let w = tape.reshape(weights, rays * m, 1)?;
    let w3 = broadcast_cols(tape, w, 3)?;
    let wc = tape.mul(w3, sample_color)?;
    let wc = tape.reshape(wc, rays, 3 * m)?;
    let mut select = vec![0.0; 3 * m * 3];
    for i in 0..m {
        for k in 0..3 {
            select[(3 * i + k) * 3 + k] = 1.0;
        }
    }
    let select = tape.constant(select, 3 * m, 3)?;
    let mut color = tape.matmul(wc, select)?;
    if let Some(bg) = background {
        let bg = tape.constant(bg.to_vec(), 1, 3)?;
        let rest = tape.matmul(t_last, bg)?;
        color = tape.add(color, rest)?;
    }
    let wt = tape.mul(weights, t_mid)?;
    let depth = tape.sum_rows(wt);
    let far = tape.constant(far.to_vec(), rays, 1)?;
    let rest = tape.mul(t_last, far)?;
    let depth = tape.add(depth, rest)?;
    Ok((color, depth))
}

/// Everything one quadrature pass leaves on the tape. Matrices are
/// `rays x m` unless noted.
#[derive(Debug, Clone)]
pub struct PassVars {
    pub m: usize,
    pub starts: Var,
    pub ends: Var,
    pub sigma: Var,
    /// `(rays * m) x 3`.
    pub sample_color: Var,
    /// Offsets aligned with the final intervals, present when the pass was
    /// deformed.
    pub offsets: Option<Var>,
    pub weights: Var,
    pub trans: Var,
    /// `rays x 1`.
    pub t_last: Var,
    /// `rays x 3`.
    pub color: Var,
    /// `rays x 1`.
    pub depth: Var,
}

impl PassVars {
    /// Unpacks every ray of the pass into plain outputs.
    pub fn outputs(&self, tape: &Tape) -> Vec<RenderOutput> {
        let m = self.m;
        let (w, tr, tl) = (tape.value(self.weights), tape.value(self.trans), tape.value(self.t_last));
        let (c, d) = (tape.value(self.color), tape.value(self.depth));
        (0..tl.len())
            .map(|r| {
                let weights = w[r * m..(r + 1) * m].to_vec();
                let mut transmittance = tr[r * m..(r + 1) * m].to_vec();
                transmittance.push(tl[r]);
                RenderOutput {
                    color: [c[3 * r], c[3 * r + 1], c[3 * r + 2]],
                    depth: d[r],
                    accumulation: weights.iter().sum(),
                    weights,
                    transmittance,
                }
            })
            .collect()
    }

    /// Final intervals of ray `r`.
    pub fn intervals(&self, tape: &Tape, r: usize) -> IntervalSet {
        let m = self.m;
        IntervalSet {
            starts: tape.value(self.starts)[r * m..(r + 1) * m].to_vec(),
            ends: tape.value(self.ends)[r * m..(r + 1) * m].to_vec(),
        }
    }

    /// Per-sample field outputs of ray `r` (feature left empty).
    pub fn field_output(&self, tape: &Tape, r: usize) -> FieldOutput {
        let m = self.m;
        let c = tape.value(self.sample_color);
        FieldOutput {
            sigma: tape.value(self.sigma)[r * m..(r + 1) * m].to_vec(),
            color: (r * m..(r + 1) * m)
                .map(|i| [c[3 * i], c[3 * i + 1], c[3 * i + 2]])
                .collect(),
            feature: Vec::new(),
            offset: match self.offsets {
                Some(o) => tape.value(o)[r * m..(r + 1) * m].to_vec(),
                None => vec![0.0; m],
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct RenderedBatch {
    pub coarse: PassVars,
    pub fine: PassVars,
    pub bounds: Vec<(f64, f64)>,
}

fn intervals_to_vars(
    tape: &mut Tape,
    sets: &[IntervalSet],
    m: usize,
) -> std::result::Result<(Var, Var), DiffError> {
    let rays = sets.len();
    let starts: Vec<f64> = sets.iter().flat_map(|s| s.starts.iter().copied()).collect();
    let ends: Vec<f64> = sets.iter().flat_map(|s| s.ends.iter().copied()).collect();
    Ok((tape.constant(starts, rays, m)?, tape.constant(ends, rays, m)?))
}

fn evaluate_intervals(
    tape: &mut Tape,
    field: &dyn RadianceField,
    rays: &SampleRays,
    starts: Var,
    ends: Var,
) -> Result<FieldVars> {
    let n = rays.len();
    let t0 = tape.reshape(starts, n, 1)?;
    let t1 = tape.reshape(ends, n, 1)?;
    let (mean, var) = frustum_moments(tape, rays, t0, t1)?;
    Ok(field.evaluate(
        tape,
        &FrustumBatch {
            mean,
            var,
            directions: &rays.directions,
        },
    )?)
}

#[allow(clippy::too_many_arguments)]
fn run_pass(
    tape: &mut Tape,
    field: &dyn RadianceField,
    rays: &SampleRays,
    bounds: &[(f64, f64)],
    mut starts: Var,
    mut ends: Var,
    deform: bool,
    background: Option<[f64; 3]>,
) -> Result<PassVars> {
    let s = tape.shape(starts);
    let (n_rays, m) = (s.rows, s.cols);
    let mut out = evaluate_intervals(tape, field, rays, starts, ends)?;
    let mut offsets = None;
    if deform {
        let raw = tape.reshape(out.offset, n_rays, m)?;
        let shifted = shift_intervals(tape, starts, ends, raw, bounds)?;
        starts = shifted.starts;
        ends = shifted.ends;
        offsets = Some(shifted.offsets);
        out = evaluate_intervals(tape, field, rays, starts, ends)?;
    }
    let sigma = tape.reshape(out.sigma, n_rays, m)?;
    let delta = tape.sub(ends, starts)?;
    let sum = tape.add(starts, ends)?;
    let t_mid = tape.mul_scalar(sum, 0.5);
    let (weights, trans, t_last) = quadrature(tape, sigma, delta)?;
    let far: Vec<f64> = bounds.iter().map(|b| b.1).collect();
    let (color, depth) = composite_batch(tape, weights, t_last, out.color, t_mid, &far, background)?;
    Ok(PassVars {
        m,
        starts,
        ends,
        sigma,
        sample_color: out.color,
        offsets,
        weights,
        trans,
        t_last,
        color,
        depth,
    })
}

/// Coarse and fine passes for a batch of cones on one tape.
///
/// The rng, when given, jitters the stratified coarse intervals (one draw
/// sequence per ray, in ray order) and then the fine quantiles; without it
/// both are deterministic.
pub fn render_rays<R: Rng + ?Sized>(
    tape: &mut Tape,
    field: &dyn RadianceField,
    cones: &[ConeRay],
    cfg: &RenderConfig,
    mut rng: Option<&mut R>,
) -> Result<RenderedBatch> {
    cfg.validate()?;
    if cones.is_empty() {
        return Err(RenderError::Config("no rays to render".into()));
    }
    let bounds: Vec<(f64, f64)> = cones.iter().map(|c| (c.near, c.far)).collect();

    let coarse_sets = cones
        .iter()
        .map(|c| stratified_intervals(c.near, c.far, cfg.m_coarse, rng.as_deref_mut()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let (starts, ends) = intervals_to_vars(tape, &coarse_sets, cfg.m_coarse)?;
    let rays = SampleRays::expand(cones, cfg.m_coarse);
    let coarse = run_pass(
        tape,
        field,
        &rays,
        &bounds,
        starts,
        ends,
        cfg.deformable.coarse(),
        cfg.background,
    )?;

    let w = tape.value(coarse.weights).to_vec();
    let fine_sets = (0..cones.len())
        .map(|r| {
            let iv = coarse.intervals(tape, r);
            let wr = &w[r * cfg.m_coarse..(r + 1) * cfg.m_coarse];
            hierarchical_resample(&iv, wr, cfg.m_fine, rng.as_deref_mut())
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let (starts, ends) = intervals_to_vars(tape, &fine_sets, cfg.m_fine)?;
    let rays = SampleRays::expand(cones, cfg.m_fine);
    let fine = run_pass(
        tape,
        field,
        &rays,
        &bounds,
        starts,
        ends,
        cfg.deformable.fine(),
        cfg.background,
    )?;
    Ok(RenderedBatch {
        coarse,
        fine,
        bounds,
    })
}

/// Plain results of rendering a single cone.
#[derive(Debug, Clone)]
pub struct ConeRender {
    pub coarse: RenderOutput,
    pub fine: RenderOutput,
    pub fine_intervals: IntervalSet,
    pub fine_field: FieldOutput,
}

pub fn render_cone<R: Rng + ?Sized>(
    field: &dyn FieldSource,
    cone: &ConeRay,
    cfg: &RenderConfig,
    rng: Option<&mut R>,
) -> Result<ConeRender> {
    let mut tape = Tape::new();
    let bound = field.bind_frozen(&mut tape)?;
    let b = render_rays(&mut tape, bound.as_ref(), std::slice::from_ref(cone), cfg, rng)?;
    Ok(ConeRender {
        coarse: b.coarse.outputs(&tape).remove(0),
        fine: b.fine.outputs(&tape).remove(0),
        fine_intervals: b.fine.intervals(&tape, 0),
        fine_field: b.fine.field_output(&tape, 0),
    })
}

/// Renders every pixel of `cam` (fine pass, no jitter) in chunks of
/// `chunk` rays. Returns row-major RGB.
pub fn render_image(
    field: &dyn FieldSource,
    cam: &CameraPose,
    cfg: &RenderConfig,
    chunk: usize,
) -> Result<Vec<[f64; 3]>> {
    let cones = (0..cam.height)
        .flat_map(|r| (0..cam.width).map(move |c| (r, c)))
        .map(|(r, c)| pixel_cone(cam, r, c))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut out = Vec::with_capacity(cones.len());
    let mut tape = Tape::new();
    for batch in cones.chunks(chunk.max(1)) {
        tape.reset();
        let bound = field.bind_frozen(&mut tape)?;
        let b = render_rays::<rand_chacha::ChaCha8Rng>(&mut tape, bound.as_ref(), batch, cfg, None)?;
        let c = tape.value(b.fine.color);
        out.extend(c.chunks(3).map(|x| [x[0], x[1], x[2]]));
    }
    Ok(out)
}
