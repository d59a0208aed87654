//! Radiance-field MLP with the per-frustum offset head.
//!
//! The trunk maps the integrated position encoding to a feature vector;
//! density and offset are read from that feature alone, color additionally
//! sees the view-direction encoding. Density and offset are therefore
//! view-invariant by construction.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::diffmath::{DiffError, Tape, Var};
use crate::sampling::{direction_encoding, integrated_encoding, EncodedSample};

/// Initial value of every offset-head weight and of its bias.
pub const OFFSET_INIT: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("invalid field layout: {0}")]
    Spec(String),
    #[error("input dimension mismatch: {what} has {got} columns, expected {expected}")]
    Dimension {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, FieldError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldSpec {
    pub pos_levels: usize,
    pub dir_levels: usize,
    pub trunk_width: usize,
    pub trunk_depth: usize,
    /// Trunk layer whose input is concatenated with the position encoding.
    pub skip_layer: Option<usize>,
    pub color_width: usize,
}

impl Default for FieldSpec {
    fn default() -> Self {
        Self {
            pos_levels: 10,
            dir_levels: 4,
            trunk_width: 64,
            trunk_depth: 4,
            skip_layer: Some(2),
            color_width: 32,
        }
    }
}

impl FieldSpec {
    /// 8 x 256 trunk with the skip at layer 4.
    pub fn full_scale() -> Self {
        Self {
            trunk_width: 256,
            trunk_depth: 8,
            skip_layer: Some(4),
            color_width: 128,
            ..Self::default()
        }
    }

    pub fn pos_dim(&self) -> usize {
        6 * self.pos_levels
    }

    pub fn dir_dim(&self) -> usize {
        3 + 6 * self.dir_levels
    }

    pub fn validate(&self) -> Result<()> {
        if self.pos_levels == 0
            || self.trunk_width == 0
            || self.trunk_depth == 0
            || self.color_width == 0
        {
            return Err(FieldError::Spec("zero-width or zero-depth layer".into()));
        }
        if let Some(s) = self.skip_layer {
            if s == 0 || s >= self.trunk_depth {
                return Err(FieldError::Spec(format!(
                    "skip layer {s} must lie in 1..{}",
                    self.trunk_depth
                )));
            }
        }
        Ok(())
    }

    /// `(name, rows, cols)` of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let w = self.trunk_width;
        let mut out = Vec::new();
        for i in 0..self.trunk_depth {
            let fan_in = if i == 0 {
                self.pos_dim()
            } else if Some(i) == self.skip_layer {
                w + self.pos_dim()
            } else {
                w
            };
            out.push((format!("trunk.{i}.weight"), fan_in, w));
            out.push((format!("trunk.{i}.bias"), 1, w));
        }
        out.push(("density.weight".into(), w, 1));
        out.push(("density.bias".into(), 1, 1));
        out.push(("color.0.weight".into(), w + self.dir_dim(), self.color_width));
        out.push(("color.0.bias".into(), 1, self.color_width));
        out.push(("color.1.weight".into(), self.color_width, 3));
        out.push(("color.1.bias".into(), 1, 3));
        out.push(("offset.weight".into(), w, 1));
        out.push(("offset.bias".into(), 1, 1));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// All MLP weights, stored in [`FieldSpec::layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub spec: FieldSpec,
    pub tensors: Vec<Tensor>,
}

/// Parameter group a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Trunk,
    Density,
    Color,
    Offset,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        match name.split('.').next() {
            Some("density") => Self::Density,
            Some("color") => Self::Color,
            Some("offset") => Self::Offset,
            _ => Self::Trunk,
        }
    }
}

impl FieldParams {
    pub fn zeros(spec: FieldSpec) -> Result<Self> {
        spec.validate()?;
        let tensors = spec
            .layout()
            .into_iter()
            .map(|(name, rows, cols)| Tensor {
                name,
                rows,
                cols,
                values: vec![0.0; rows * cols],
            })
            .collect();
        Ok(Self { spec, tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.values.len()).sum()
    }

    /// Records every tensor on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundField> {
        self.bind_with(tape, true)
    }

    /// Records every tensor as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<BoundField> {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, tracked: bool) -> Result<BoundField> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if tracked {
                    tape.var(t.values.clone(), t.rows, t.cols)
                } else {
                    tape.constant(t.values.clone(), t.rows, t.cols)
                }
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(BoundField {
            spec: self.spec,
            vars,
        })
    }

    /// Plain evaluation of a batch of encoded samples.
    pub fn evaluate(&self, samples: &[EncodedSample]) -> Result<FieldOutput> {
        let n = samples.len();
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape)?;
        let ipe: Vec<f64> = samples.iter().flat_map(|s| s.ipe.iter().copied()).collect();
        let dir: Vec<f64> = samples.iter().flat_map(|s| s.dir_enc.iter().copied()).collect();
        let pos_dim = if n == 0 { 0 } else { ipe.len() / n };
        let dir_dim = if n == 0 { 0 } else { dir.len() / n };
        let ipe = tape.constant(ipe, n, pos_dim)?;
        let dir = tape.constant(dir, n, dir_dim)?;
        let out = bound.forward(&mut tape, ipe, dir)?;
        Ok(FieldOutput {
            sigma: tape.value(out.sigma).to_vec(),
            color: tape
                .value(out.color)
                .chunks(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect(),
            feature: tape.value(out.feature).to_vec(),
            offset: tape.value(out.offset).to_vec(),
        })
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint, prefix: &str) {
        let s = &self.spec;
        ckpt.put_u64(
            &format!("{prefix}spec"),
            vec![
                s.pos_levels as u64,
                s.dir_levels as u64,
                s.trunk_width as u64,
                s.trunk_depth as u64,
                s.skip_layer.map_or(0, |k| k as u64),
                s.color_width as u64,
            ],
        );
        for t in &self.tensors {
            ckpt.put_f64(&format!("{prefix}{}", t.name), vec![t.rows, t.cols], t.values.clone());
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let s = ckpt.get_u64(&format!("{prefix}spec"))?;
        if s.len() != 6 {
            return Err(FieldError::Spec("malformed spec entry".into()));
        }
        let spec = FieldSpec {
            pos_levels: s[0] as usize,
            dir_levels: s[1] as usize,
            trunk_width: s[2] as usize,
            trunk_depth: s[3] as usize,
            skip_layer: (s[4] != 0).then_some(s[4] as usize),
            color_width: s[5] as usize,
        };
        let mut params = Self::zeros(spec)?;
        for t in &mut params.tensors {
            let (shape, values) = ckpt.get_f64(&format!("{prefix}{}", t.name))?;
            if shape != [t.rows, t.cols] {
                return Err(FieldError::Spec(format!(
                    "tensor {} has shape {shape:?}, expected [{}, {}]",
                    t.name, t.rows, t.cols
                )));
            }
            t.values = values.to_vec();
        }
        Ok(params)
    }
}

/// Fan-in scaled uniform initialization (`U(-b, b)`, `b = sqrt(6 / fan_in)`)
/// with zero biases; the offset head is set to [`OFFSET_INIT`] exactly.
pub fn init_params<R: Rng + ?Sized>(spec: FieldSpec, rng: &mut R) -> Result<FieldParams> {
    let mut params = FieldParams::zeros(spec)?;
    for t in &mut params.tensors {
        if t.name.starts_with("offset.") {
            t.values.fill(OFFSET_INIT);
        } else if t.name.ends_with(".weight") {
            let bound = (6.0 / t.rows as f64).sqrt();
            for v in &mut t.values {
                *v = rng.random_range(-bound..bound);
            }
        }
    }
    Ok(params)
}

/// Per-sample outputs on plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldOutput {
    pub sigma: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    /// Row-major `n x trunk_width`.
    pub feature: Vec<f64>,
    pub offset: Vec<f64>,
}

/// Per-sample outputs on the tape: `sigma` and `offset` are `n x 1`,
/// `color` is `n x 3`, `feature` is `n x trunk_width`.
#[derive(Debug, Clone, Copy)]
pub struct FieldVars {
    pub sigma: Var,
    pub color: Var,
    pub feature: Var,
    pub offset: Var,
}

/// Parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundField {
    pub spec: FieldSpec,
    pub vars: Vec<Var>,
}

impl BoundField {
    /// The bound tensors paired with their names.
    pub fn named<'a>(&'a self, params: &'a FieldParams) -> impl Iterator<Item = (&'a str, Var)> + 'a {
        params.tensors.iter().map(|t| t.name.as_str()).zip(self.vars.iter().copied())
    }

    fn dense(&self, tape: &mut Tape, x: Var, idx: usize) -> std::result::Result<Var, DiffError> {
        let h = tape.matmul(x, self.vars[idx])?;
        tape.add_row(h, self.vars[idx + 1])
    }

    /// Evaluates the MLP on `n x 6L` position encodings and `n x (3 + 6L')`
    /// direction encodings.
    pub fn forward(&self, tape: &mut Tape, ipe: Var, dir_enc: Var) -> Result<FieldVars> {
        let spec = &self.spec;
        let (pi, di) = (tape.shape(ipe), tape.shape(dir_enc));
        if pi.cols != spec.pos_dim() {
            return Err(FieldError::Dimension {
                what: "position encoding",
                got: pi.cols,
                expected: spec.pos_dim(),
            });
        }
        if di.cols != spec.dir_dim() || di.rows != pi.rows {
            return Err(FieldError::Dimension {
                what: "direction encoding",
                got: di.cols,
                expected: spec.dir_dim(),
            });
        }
        let mut h = ipe;
        for i in 0..spec.trunk_depth {
            if Some(i) == spec.skip_layer {
                h = tape.concat_cols(h, ipe)?;
            }
            let z = self.dense(tape, h, 2 * i)?;
            h = tape.relu(z);
        }
        let feature = h;
        let base = 2 * spec.trunk_depth;

        let raw_sigma = self.dense(tape, feature, base)?;
        let sigma = tape.softplus(raw_sigma);

        let hc = tape.concat_cols(feature, dir_enc)?;
        let hc = self.dense(tape, hc, base + 2)?;
        let hc = tape.relu(hc);
        let raw_color = self.dense(tape, hc, base + 4)?;
        let color = tape.sigmoid(raw_color);

        let offset = self.dense(tape, feature, base + 6)?;
        Ok(FieldVars {
            sigma,
            color,
            feature,
            offset,
        })
    }
}

/// Inputs handed to a [`RadianceField`] for a batch of `n` frustums.
#[derive(Debug, Clone, Copy)]
pub struct FrustumBatch<'a> {
    /// `n x 3` Gaussian means (world frame).
    pub mean: Var,
    /// `n x 3` diagonal variances.
    pub var: Var,
    /// Row-major `n x 3` unit view directions.
    pub directions: &'a [f64],
}

/// Anything the renderer can query for density, color and offsets.
pub trait RadianceField {
    fn evaluate(&self, tape: &mut Tape, batch: &FrustumBatch<'_>) -> Result<FieldVars>;
}

/// Something that can put a frozen [`RadianceField`] on a fresh tape.
pub trait FieldSource {
    fn bind_frozen<'a>(&'a self, tape: &mut Tape) -> Result<Box<dyn RadianceField + 'a>>;
}

impl FieldSource for FieldParams {
    fn bind_frozen<'a>(&'a self, tape: &mut Tape) -> Result<Box<dyn RadianceField + 'a>> {
        Ok(Box::new(FieldParams::bind_frozen(self, tape)?))
    }
}

impl RadianceField for BoundField {
    fn evaluate(&self, tape: &mut Tape, batch: &FrustumBatch<'_>) -> Result<FieldVars> {
        let n = tape.shape(batch.mean).rows;
        let ipe = integrated_encoding(tape, batch.mean, batch.var, self.spec.pos_levels)?;
        let dir: Vec<f64> = batch
            .directions
            .chunks(3)
            .flat_map(|d| direction_encoding(&crate::geometry::Vec3::new(d[0], d[1], d[2]), self.spec.dir_levels))
            .collect();
        let dir = tape.constant(dir, n, self.spec.dir_dim())?;
        self.forward(tape, ipe, dir)
    }
}
