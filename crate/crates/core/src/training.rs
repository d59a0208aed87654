//! The optimization loop: patch batches from the seen views, perturbed
//! unseen patches, the combined objective and an Adam update.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, TrainConfig};
use crate::diffmath::{DiffError, Tape, Var};
use crate::field::{init_params, FieldError, FieldParams};
use crate::geometry::{
    perturb_pose, pixel_cone, pose_from_sphere, sample_unseen_pose, ConeRay, GeometryError,
    Intrinsics, PoseBounds, PosePair, TauRanges,
};
use crate::losses::{
    loss_dist, loss_mi, loss_mse, loss_offset, loss_ppc, loss_smooth, loss_total, LossBreakdown,
    LossError, LossWeights, PassTerms, PatchLayout,
};
use crate::rendering::{render_rays, PassVars, RenderConfig, RenderError, RenderedBatch};
use crate::scenes::{DatasetView, Split};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("checkpoint: {0}")]
    State(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// `lr_start * (lr_end / lr_start)^(step / iterations)`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.iterations == 0 {
        return cfg.lr_start;
    }
    let s = step.min(cfg.iterations) as f64 / cfg.iterations as f64;
    cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(s)
}

/// Seen rays, stored patch by patch with each patch row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SeenBatch {
    pub patch_size: usize,
    pub cones: Vec<ConeRay>,
    /// `3` values per ray.
    pub gt: Vec<f64>,
    /// `(view, row, col)` of each patch's top-left pixel.
    pub origins: Vec<(usize, usize, usize)>,
}

/// Unseen patches followed by their perturbed copies: rays
/// `[0, n)` are unseen, `[n (1 + p), n (2 + p))` are perturbation `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnseenBatch {
    pub patch_size: usize,
    pub patches: usize,
    pub perturbations: usize,
    pub cones: Vec<ConeRay>,
    pub poses: Vec<PosePair>,
    /// `(row, col)` of each patch's top-left pixel.
    pub origins: Vec<(usize, usize)>,
}

impl UnseenBatch {
    pub fn unseen_rays(&self) -> usize {
        self.patches * self.patch_size * self.patch_size
    }
}

fn train_views(dataset: &[DatasetView]) -> Vec<&DatasetView> {
    dataset.iter().filter(|v| v.split == Split::Train).collect()
}

fn patch_cones(
    cam: &crate::geometry::CameraPose,
    row: usize,
    col: usize,
    ps: usize,
    out: &mut Vec<ConeRay>,
) -> Result<()> {
    for y in 0..ps {
        for x in 0..ps {
            out.push(pixel_cone(cam, row + y, col + x)?);
        }
    }
    Ok(())
}

/// `patches_per_batch` random patches, each from a random train view.
pub fn assemble_seen_batch<R: Rng + ?Sized>(
    dataset: &[DatasetView],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<SeenBatch> {
    let views = train_views(dataset);
    if views.is_empty() {
        return Err(TrainError::Dataset("no train views".into()));
    }
    let ps = cfg.patch_size;
    if let Some(v) = views.iter().find(|v| v.image.width < ps || v.image.height < ps) {
        return Err(TrainError::Dataset(format!(
            "{}x{} image is smaller than the {ps}x{ps} patch",
            v.image.width, v.image.height
        )));
    }
    let n = cfg.rays_per_batch();
    let mut batch = SeenBatch {
        patch_size: ps,
        cones: Vec::with_capacity(n),
        gt: Vec::with_capacity(3 * n),
        origins: Vec::with_capacity(cfg.patches_per_batch),
    };
    for _ in 0..cfg.patches_per_batch {
        let vi = rng.random_range(0..views.len());
        let v = views[vi];
        let row = rng.random_range(0..=v.image.height - ps);
        let col = rng.random_range(0..=v.image.width - ps);
        patch_cones(&v.camera, row, col, ps, &mut batch.cones)?;
        for y in 0..ps {
            for x in 0..ps {
                batch.gt.extend(v.image.pixel(row + y, col + x));
            }
        }
        batch.origins.push((vi, row, col));
    }
    Ok(batch)
}

/// Unseen pose region and perturbation ranges, filled in from the train
/// cameras where the config leaves them open.
pub fn unseen_setup(dataset: &[DatasetView], cfg: &TrainConfig) -> Result<(PoseBounds, TauRanges, Intrinsics)> {
    let views = train_views(dataset);
    let first = views
        .first()
        .ok_or_else(|| TrainError::Dataset("no train views".into()))?;
    let bounds = match cfg.unseen_bounds {
        Some(b) => b,
        None => {
            let r = views.iter().map(|v| v.camera.position.norm()).sum::<f64>() / views.len() as f64;
            PoseBounds::upper_hemisphere(r)
        }
    };
    let tau = cfg.tau.unwrap_or_else(|| TauRanges::default_for(bounds.radius));
    tau.validate(bounds.radius)?;
    let mut intr = first.camera.intrinsics();
    let k = cfg.unseen_resolution_scale;
    intr.width *= k;
    intr.height *= k;
    intr.focal *= k as f64;
    Ok((bounds, tau, intr))
}

/// `unseen_patches` patches on fresh poses, each with `perturbations`
/// copies covering the same pixel footprint from a perturbed pose.
pub fn assemble_unseen_batch<R: Rng + ?Sized>(
    bounds: &PoseBounds,
    tau: &TauRanges,
    intrinsics: Intrinsics,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<UnseenBatch> {
    let ps = cfg.patch_size;
    if intrinsics.width < ps || intrinsics.height < ps {
        return Err(TrainError::Dataset("unseen image smaller than the patch".into()));
    }
    let (patches, p) = (cfg.unseen_patches, cfg.perturbations);
    let mut poses = Vec::with_capacity(patches);
    let mut origins = Vec::with_capacity(patches);
    for _ in 0..patches {
        let pose = sample_unseen_pose(bounds, rng)?;
        poses.push(perturb_pose(&pose, tau, p, rng)?);
        let row = rng.random_range(0..=intrinsics.height - ps);
        let col = rng.random_range(0..=intrinsics.width - ps);
        origins.push((row, col));
    }
    let mut cones = Vec::with_capacity(patches * ps * ps * (1 + p));
    for k in 0..=p {
        for (pair, &(row, col)) in poses.iter().zip(&origins) {
            let pose = if k == 0 { pair.unseen } else { pair.perturbed[k - 1] };
            let cam = pose_from_sphere(&pose, intrinsics)?;
            patch_cones(&cam, row, col, ps, &mut cones)?;
        }
    }
    Ok(UnseenBatch {
        patch_size: ps,
        patches,
        perturbations: p,
        cones,
        poses,
        origins,
    })
}

/// Parameters, Adam moments, step counter and the rng driving batches
/// and jitter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: FieldParams,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
    pub step: usize,
    pub rng: ChaCha8Rng,
}

const STATE_FORMAT: u64 = 1;

impl TrainState {
    /// Fresh parameters drawn from `cfg.seed`; the same rng then drives
    /// training.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = init_params(cfg.field, &mut rng)?;
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.values.len()]).collect();
        Ok(Self {
            params,
            adam_m: zeros.clone(),
            adam_v: zeros,
            step: 0,
            rng,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        c.put_u64("state.format", vec![STATE_FORMAT]);
        self.params.to_checkpoint(&mut c, "params.");
        for (i, t) in self.params.tensors.iter().enumerate() {
            let shape = [t.rows, t.cols];
            c.put_f64(&format!("adam.m.{}", t.name), shape.to_vec(), self.adam_m[i].clone());
            c.put_f64(&format!("adam.v.{}", t.name), shape.to_vec(), self.adam_v[i].clone());
        }
        c.put_u64("state.step", vec![self.step as u64]);
        let seed = self.rng.get_seed();
        c.put_u64(
            "rng.seed",
            seed.chunks(8)
                .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
        );
        c.put_u64("rng.stream", vec![self.rng.get_stream()]);
        let pos = self.rng.get_word_pos();
        c.put_u64("rng.word_pos", vec![pos as u64, (pos >> 64) as u64]);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let missing = |what: &str| TrainError::State(format!("missing or malformed {what}"));
        let format = c.get_u64("state.format").map_err(|_| missing("state.format"))?;
        if format != [STATE_FORMAT] {
            return Err(TrainError::State(format!("unsupported state format {format:?}")));
        }
        let params = FieldParams::from_checkpoint(c, "params.")?;
        let mut adam_m = Vec::new();
        let mut adam_v = Vec::new();
        for t in &params.tensors {
            for (key, dst) in [("m", &mut adam_m), ("v", &mut adam_v)] {
                let name = format!("adam.{key}.{}", t.name);
                let (shape, values) = c.get_f64(&name).map_err(|_| missing(&name))?;
                if shape != [t.rows, t.cols] {
                    return Err(missing(&name));
                }
                dst.push(values.to_vec());
            }
        }
        let step = match c.get_u64("state.step").map_err(|_| missing("state.step"))? {
            [s] => *s as usize,
            _ => return Err(missing("state.step")),
        };
        let words = c.get_u64("rng.seed").map_err(|_| missing("rng.seed"))?;
        if words.len() != 4 {
            return Err(missing("rng.seed"));
        }
        let mut seed = [0u8; 32];
        for (i, w) in words.iter().enumerate() {
            seed[8 * i..8 * i + 8].copy_from_slice(&w.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        match c.get_u64("rng.stream").map_err(|_| missing("rng.stream"))? {
            [s] => rng.set_stream(*s),
            _ => return Err(missing("rng.stream")),
        }
        match c.get_u64("rng.word_pos").map_err(|_| missing("rng.word_pos"))? {
            [lo, hi] => rng.set_word_pos(*lo as u128 | (*hi as u128) << 64),
            _ => return Err(missing("rng.word_pos")),
        }
        Ok(Self {
            params,
            adam_m,
            adam_v,
            step,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// MSE and, for deformed passes with `mu > 0`, the offset loss.
fn seen_terms(
    tape: &mut Tape,
    pass: &PassVars,
    gt: &[f64],
    bounds: &[(f64, f64)],
    cfg: &TrainConfig,
) -> Result<PassTerms> {
    let mut t = PassTerms::zeros(tape);
    t.mse = loss_mse(tape, pass.color, gt)?;
    if let (Some(off), true) = (pass.offsets, cfg.loss.mu != 0.0) {
        t.mi = loss_mi(tape, pass.weights, off, &cfg.mi)?;
        t.dist = loss_dist(tape, pass.weights, pass.starts, pass.ends, bounds)?;
        t.offset = loss_offset(tape, t.mi, t.dist, cfg.loss.lambda)?;
    }
    Ok(t)
}

/// Weights in effect at `step`, with the unseen-branch ramp applied.
pub fn weights_at(step: usize, cfg: &TrainConfig) -> LossWeights {
    let mut w = cfg.loss;
    if cfg.unseen_ramp > 0 {
        let f = (step as f64 / cfg.unseen_ramp as f64).min(1.0);
        w.nu *= f;
        w.smooth *= f;
    }
    w
}

/// The full objective for one step and its gradient with respect to
/// every parameter tensor (in layout order).
pub fn loss_and_grads<R: Rng + ?Sized>(
    params: &FieldParams,
    seen: &SeenBatch,
    unseen: Option<&UnseenBatch>,
    cfg: &TrainConfig,
    step: usize,
    rng: &mut R,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let field = params.bind(&mut tape)?;
    let rendered = render_rays(&mut tape, &field, &seen.cones, &cfg.render, Some(&mut *rng))?;
    let RenderedBatch { coarse, fine, bounds } = &rendered;
    let coarse_terms = seen_terms(&mut tape, coarse, &seen.gt, bounds, cfg)?;
    let mut fine_terms = seen_terms(&mut tape, fine, &seen.gt, bounds, cfg)?;

    let w = weights_at(step, cfg);
    if let Some(u) = unseen {
        let rcfg = RenderConfig {
            deformable: crate::rendering::Deformable::Off,
            ..cfg.render
        };
        let r = render_rays(&mut tape, &field, &u.cones, &rcfg, Some(&mut *rng))?;
        let n = u.unseen_rays();
        let block = |tape: &mut Tape, v: Var, k: usize| tape.gather_rows(v, &(k * n..(k + 1) * n).collect::<Vec<_>>());
        let mut uc = block(&mut tape, r.fine.color, 0)?;
        let mut ud = block(&mut tape, r.fine.depth, 0)?;
        if cfg.stop_grad_unseen {
            uc = tape.constant(tape.value(uc).to_vec(), n, 3)?;
            ud = tape.constant(tape.value(ud).to_vec(), n, 1)?;
        }
        let mut pc = Vec::with_capacity(u.perturbations);
        let mut pd = Vec::with_capacity(u.perturbations);
        for k in 1..=u.perturbations {
            pc.push(block(&mut tape, r.fine.color, k)?);
            pd.push(block(&mut tape, r.fine.depth, k)?);
        }
        let layout = PatchLayout::shared_footprint(u.patches, u.patch_size);
        if w.nu != 0.0 {
            fine_terms.ppc_rgb = loss_ppc(&mut tape, uc, &pc, &layout)?;
            fine_terms.ppc_d = loss_ppc(&mut tape, ud, &pd, &layout)?;
        }
        if w.smooth != 0.0 {
            fine_terms.smooth = loss_smooth(&mut tape, r.fine.depth, u.patch_size)?;
        }
    }

    let (total, breakdown) = loss_total(&mut tape, &coarse_terms, &fine_terms, &w)?;
    if !breakdown.total.is_finite() {
        return Err(TrainError::NonFinite {
            step,
            detail: format!("{breakdown:?}"),
        });
    }
    let grads = tape.backward(total)?;
    let g = field
        .vars
        .iter()
        .zip(&params.tensors)
        .map(|(&v, t)| grads.get_or_zeros(v, t.values.len()))
        .collect::<Vec<_>>();
    if let Some(t) = g.iter().zip(&params.tensors).find(|(g, _)| g.iter().any(|x| !x.is_finite())) {
        return Err(TrainError::NonFinite {
            step,
            detail: format!("gradient of {}", t.1.name),
        });
    }
    Ok((breakdown, g))
}

/// One bias-corrected Adam update at learning rate `lr`.
pub fn adam_update(state: &mut TrainState, grads: &[Vec<f64>], lr: f64) {
    let t = (state.step + 1) as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, tensor) in state.params.tensors.iter_mut().enumerate() {
        let (m, v) = (&mut state.adam_m[i], &mut state.adam_v[i]);
        for (j, p) in tensor.values.iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
            *p -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// Renders, differentiates and updates. On error the state is left as it
/// was, rng included.
pub fn train_step(
    state: &mut TrainState,
    seen: &SeenBatch,
    unseen: Option<&UnseenBatch>,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let mut rng = state.rng.clone();
    let (breakdown, grads) = loss_and_grads(&state.params, seen, unseen, cfg, state.step, &mut rng)?;
    adam_update(state, &grads, lr_at(state.step, cfg));
    state.rng = rng;
    state.step += 1;
    Ok(breakdown)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl LogRow {
    pub fn csv(&self) -> String {
        self.loss.csv_row(self.step, self.lr)
    }
}

pub fn loss_log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LossBreakdown::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

/// Draws the batches for the next step from the state's rng.
pub fn next_batches(
    state: &mut TrainState,
    dataset: &[DatasetView],
    cfg: &TrainConfig,
) -> Result<(SeenBatch, Option<UnseenBatch>)> {
    let seen = assemble_seen_batch(dataset, cfg, &mut state.rng)?;
    let unseen = if cfg.uses_unseen() {
        let (bounds, tau, intr) = unseen_setup(dataset, cfg)?;
        Some(assemble_unseen_batch(&bounds, &tau, intr, cfg, &mut state.rng)?)
    } else {
        None
    };
    Ok((seen, unseen))
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("ckpt_{step:06}.bin"))
}

/// Steps `state` until `end` (capped at `cfg.iterations`). Checkpoints go
/// to `ckpt_dir` after every `checkpoint_interval()` completed steps;
/// `on_step` sees each row as it is produced.
pub fn train_until(
    state: &mut TrainState,
    dataset: &[DatasetView],
    cfg: &TrainConfig,
    end: usize,
    ckpt_dir: Option<&Path>,
    mut on_step: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    let end = end.min(cfg.iterations);
    let every = cfg.checkpoint_interval();
    let mut rows = Vec::with_capacity(end.saturating_sub(state.step));
    while state.step < end {
        let saved_rng = state.rng.clone();
        let (seen, unseen) = next_batches(state, dataset, cfg)?;
        let step = state.step;
        let loss = match train_step(state, &seen, unseen.as_ref(), cfg) {
            Ok(l) => l,
            Err(e) => {
                state.rng = saved_rng;
                return Err(e);
            }
        };
        let row = LogRow {
            step,
            lr: lr_at(step, cfg),
            loss,
        };
        on_step(&row);
        rows.push(row);
        if let Some(dir) = ckpt_dir {
            if every > 0 && state.step % every == 0 {
                state.save(&checkpoint_path(dir, state.step))?;
            }
        }
    }
    Ok(rows)
}

/// Fresh state trained for `cfg.iterations` steps.
pub fn train(
    dataset: &[DatasetView],
    cfg: &TrainConfig,
    ckpt_dir: Option<&Path>,
) -> Result<(TrainState, Vec<LogRow>)> {
    cfg.validate()?;
    let mut state = TrainState::new(cfg)?;
    let rows = train_until(&mut state, dataset, cfg, cfg.iterations, ckpt_dir, |_| {})?;
    Ok((state, rows))
}

pub fn write_loss_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let io = |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(loss_log_csv(rows).as_bytes()).map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::geometry::TauRanges;
    use crate::scenes::{make_dataset, AnalyticScene, DatasetSpec};

    fn tiny_cfg() -> TrainConfig {
        let mut c = TrainConfig::quick();
        c.iterations = 8;
        c.patch_size = 2;
        c.patches_per_batch = 2;
        c.unseen_patches = 2;
        c.render.m_coarse = 8;
        c.render.m_fine = 8;
        c.field.trunk_width = 8;
        c.field.color_width = 4;
        c
    }

    fn tiny_dataset() -> Vec<DatasetView> {
        let spec = DatasetSpec {
            resolution: 8,
            n_test: 1,
            oracle_samples: 1024,
            ..DatasetSpec::default()
        };
        make_dataset(&AnalyticScene::one_sphere(), &spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn lr_schedule_endpoints() {
        let c = TrainConfig::default();
        assert!((lr_at(0, &c) - 1e-3).abs() < 1e-18);
        assert!((lr_at(c.iterations, &c) - 5e-5).abs() < 1e-18);
        assert!((lr_at(c.iterations / 2, &c) - (1e-3f64 * 5e-5).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn seen_batch_contract() {
        let data = tiny_dataset();
        let mut c = TrainConfig::default();
        c.patch_size = 4;
        let b = assemble_seen_batch(&data, &c, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(b.cones.len(), 16 * 16);
        let again = assemble_seen_batch(&data, &c, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(b, again);
        for (p, &(vi, row, col)) in b.origins.iter().enumerate() {
            let v = train_views(&data)[vi];
            for y in 0..4 {
                for x in 0..4 {
                    let r = p * 16 + y * 4 + x;
                    assert_eq!(&b.gt[3 * r..3 * r + 3], &v.image.pixel(row + y, col + x));
                    assert_eq!(b.cones[r].pixel, (row + y, col + x));
                }
            }
        }
        let defaults = TrainConfig::default();
        let big = make_dataset(
            &AnalyticScene::empty(),
            &DatasetSpec { resolution: 16, oracle_samples: 1024, n_test: 0, ..DatasetSpec::default() },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let b = assemble_seen_batch(&big, &defaults, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.cones.len(), 1024);
        c.patch_size = 9;
        assert!(assemble_seen_batch(&data, &c, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
    }

    #[test]
    fn unseen_batch_contract() {
        let data = tiny_dataset();
        let mut c = TrainConfig::default();
        c.patch_size = 4;
        c.perturbations = 2;
        let (bounds, _, intr) = unseen_setup(&data, &c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = assemble_unseen_batch(&bounds, &TauRanges::zero(), intr, &c, &mut rng).unwrap();
        let n = b.unseen_rays();
        assert_eq!(n, 256);
        assert_eq!(b.cones.len(), 3 * n);
        for k in 1..=2 {
            for i in 0..n {
                let (a, p) = (&b.cones[i], &b.cones[k * n + i]);
                assert!((a.origin - p.origin).norm() < 1e-12);
                assert!((a.direction - p.direction).norm() < 1e-12);
                assert_eq!(a.pixel, p.pixel);
            }
        }
        let tau = TauRanges::default_for(bounds.radius);
        let b = assemble_unseen_batch(&bounds, &tau, intr, &c, &mut rng).unwrap();
        assert!((0..n).all(|i| b.cones[i].pixel == b.cones[n + i].pixel));
        assert!((0..n).any(|i| (b.cones[i].origin - b.cones[n + i].origin).norm() > 1e-6));
    }

    #[test]
    fn steps_are_reproducible_and_touch_every_group() {
        let data = tiny_dataset();
        let c = tiny_cfg();
        let run = || {
            let mut s = TrainState::new(&c).unwrap();
            let rows = train_until(&mut s, &data, &c, 3, None, |_| {}).unwrap();
            (s, loss_log_csv(&rows))
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(la, lb);
        assert_eq!(a, b);
        let fresh = TrainState::new(&c).unwrap();
        for (t0, t1) in fresh.params.tensors.iter().zip(&a.params.tensors) {
            assert_ne!(t0.values, t1.values, "{} never moved", t0.name);
        }
        assert_eq!(la.lines().next().unwrap(), LossBreakdown::CSV_HEADER);
        assert_eq!(la.lines().count(), 4);
    }

    #[test]
    fn state_round_trips_bit_exact() {
        let data = tiny_dataset();
        let c = tiny_cfg();
        let mut s = TrainState::new(&c).unwrap();
        train_until(&mut s, &data, &c, 2, None, |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.bin");
        s.save(&p).unwrap();
        let back = TrainState::load(&p).unwrap();
        assert_eq!(back, s);
        let mut a = s.clone();
        let mut b = back;
        assert_eq!(a.rng.random::<u64>(), b.rng.random::<u64>());
    }

    #[test]
    fn train_writes_checkpoints_and_handles_zero_iterations() {
        let data = tiny_dataset();
        let mut c = tiny_cfg();
        c.iterations = 0;
        let (s, rows) = train(&data, &c, None).unwrap();
        assert!(rows.is_empty());
        assert_eq!(s, TrainState::new(&c).unwrap());

        c.iterations = 8;
        let dir = tempfile::tempdir().unwrap();
        let (s, rows) = train(&data, &c, Some(dir.path())).unwrap();
        assert_eq!(rows.len(), 8);
        for k in [2, 4, 6, 8] {
            assert!(checkpoint_path(dir.path(), k).exists());
        }
        assert_eq!(TrainState::load(&checkpoint_path(dir.path(), 8)).unwrap(), s);
    }

    #[test]
    fn non_finite_loss_leaves_state_alone() {
        let data = tiny_dataset();
        let c = tiny_cfg();
        let mut s = TrainState::new(&c).unwrap();
        s.params.tensors[0].values[0] = f64::NAN;
        let before = s.clone();
        let err = train_until(&mut s, &data, &c, 1, None, |_| {}).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { step: 0, .. }), "{err}");
        assert_eq!(s.step, before.step);
        assert_eq!(s.rng, before.rng);
        assert_eq!(s.adam_m, before.adam_m);
    }

    #[test]
    fn baseline_variant_skips_unseen_branch() {
        let data = tiny_dataset();
        let c = Variant::Baseline.apply(tiny_cfg());
        let mut s = TrainState::new(&c).unwrap();
        let rows = train_until(&mut s, &data, &c, 1, None, |_| {}).unwrap();
        let f = rows[0].loss.fine;
        assert_eq!((f.offset, f.ppc_rgb, f.ppc_d, f.smooth), (0.0, 0.0, 0.0, 0.0));
        let c = Variant::Full.apply(tiny_cfg());
        let mut s = TrainState::new(&c).unwrap();
        let rows = train_until(&mut s, &data, &c, 1, None, |_| {}).unwrap();
        let f = rows[0].loss.fine;
        assert!(f.ppc_rgb > 0.0 && f.smooth > 0.0 && f.dist > 0.0);
    }
}
