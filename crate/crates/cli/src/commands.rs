use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context as _, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use fewview::config::{TrainConfig, Variant};
use fewview::eval::{compare, diagnose_rays, evaluate_views, median_spread, profiles_csv, spread_csv, MetricReport, Pass};
use fewview::field::FieldSource;
use fewview::geometry::{pose_from_sphere, SphericalPose};
use fewview::rendering::render_image;
use fewview::scenes::{
    load_blender_format, make_dataset, write_blender_format, AnalyticScene, DatasetSpec, DatasetView, Image, Split,
};
use fewview::training::{loss_log_csv, train_until, TrainState};

use crate::manifest::Manifest;
use crate::{require_file, UsageError};

/// Flags shared by every subcommand.
pub struct Context {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
}

const SCENE_FILE: &str = "scene.toml";
const DEFAULT_NEAR_FAR: (f64, f64) = (2.0, 6.0);

fn write(path: &Path, text: &str) -> Result<PathBuf> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path.to_path_buf())
}

fn load_scene_arg(s: &str) -> Result<AnalyticScene> {
    if let Some(scene) = AnalyticScene::preset(s) {
        return Ok(scene);
    }
    let p = Path::new(s);
    if !p.exists() {
        bail!(UsageError(format!("unknown scene preset or file: {s}")));
    }
    Ok(AnalyticScene::load(p)?)
}

/// Scene bounds of a dataset: from its scene.toml when it has one.
fn dataset_scene(data: &Path) -> Result<Option<AnalyticScene>> {
    let p = data.join(SCENE_FILE);
    if p.exists() {
        Ok(Some(AnalyticScene::load(&p)?))
    } else {
        Ok(None)
    }
}

fn load_dataset(data: &Path) -> Result<Vec<DatasetView>> {
    require_file(data)?;
    let (near, far) = match dataset_scene(data)? {
        Some(s) => (s.near, s.far),
        None => DEFAULT_NEAR_FAR,
    };
    Ok(load_blender_format(data, near, far)?)
}

/// `--config` when given, else the config.toml that `train` left beside
/// the checkpoint, else the defaults.
fn config_for(ctx: &Context, checkpoint: Option<&Path>) -> Result<TrainConfig> {
    if let Some(p) = &ctx.config {
        return Ok(TrainConfig::load(p)?);
    }
    if let Some(c) = checkpoint {
        let beside = c.parent().unwrap_or(Path::new(".")).join("config.toml");
        if beside.exists() {
            return Ok(TrainConfig::load(&beside)?);
        }
    }
    Ok(TrainConfig::default())
}

fn load_state(p: &Path) -> Result<TrainState> {
    require_file(p)?;
    TrainState::load(p).with_context(|| format!("loading checkpoint {}", p.display()))
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => bail!(UsageError(format!("split must be train or test, got {s}"))),
    }
}

fn parse_pose(s: &str) -> Result<SphericalPose> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| UsageError(format!("pose must be radius,phi,gamma: {s}")))?;
    let [r, phi, gamma] = v[..] else {
        bail!(UsageError(format!("pose must have three components: {s}")));
    };
    SphericalPose::new(r, phi, gamma).map_err(|e| anyhow!(UsageError(format!("pose {s}: {e}"))))
}

pub fn make_scene(
    ctx: &Context,
    scene: &str,
    n_train: Option<usize>,
    n_test: Option<usize>,
    resolution: Option<usize>,
) -> Result<()> {
    let scene = load_scene_arg(scene)?;
    let mut spec = match &ctx.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<DatasetSpec>(&text).map_err(|e| anyhow!("{}: {}", p.display(), e.message()))?
        }
        None => DatasetSpec::default(),
    };
    spec.n_train = n_train.unwrap_or(spec.n_train);
    spec.n_test = n_test.unwrap_or(spec.n_test);
    spec.resolution = resolution.unwrap_or(spec.resolution);
    let seed = ctx.seed.unwrap_or(0);
    let views = make_dataset(&scene, &spec, &mut ChaCha8Rng::seed_from_u64(seed))?;

    let out = &ctx.out_dir;
    scene.save(&out.join(SCENE_FILE))?;
    write_blender_format(out, &views, spec.camera_angle_x)?;
    let mut m = Manifest::new("make-scene", seed, json!({ "dataset": spec, "scene": scene }));
    m.artifact(out.join(SCENE_FILE));
    for split in [Split::Train, Split::Test] {
        let n = views.iter().filter(|v| v.split == split).count();
        if n == 0 {
            continue;
        }
        m.artifact(out.join(format!("transforms_{}.json", split.name())));
        for i in 0..n {
            m.artifact(out.join(split.name()).join(format!("r_{i}.png")));
        }
    }
    m.note("focal", json!(views.first().map(|v| v.camera.focal)));
    m.write(out)?;
    println!("wrote {} views to {}", views.len(), out.display());
    Ok(())
}

pub fn train(
    ctx: &Context,
    data: &Path,
    preset: &str,
    variant: Option<&str>,
    iterations: Option<usize>,
    resume: Option<&Path>,
) -> Result<()> {
    let dataset = load_dataset(data)?;
    let mut cfg = match &ctx.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::preset(preset).ok_or_else(|| UsageError(format!("unknown preset {preset}")))?,
    };
    if let Some(v) = variant {
        let v = Variant::parse(v).ok_or_else(|| UsageError(format!("unknown variant {v}")))?;
        cfg = v.apply(cfg);
    }
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    cfg.validate()?;

    let mut state = match resume {
        Some(p) => {
            let s = load_state(p)?;
            if s.params.spec != cfg.field {
                bail!("checkpoint field shape does not match the config");
            }
            s
        }
        None => TrainState::new(&cfg)?,
    };
    let start = state.step;
    let out = &ctx.out_dir;
    let cfg_path = write(&out.join("config.toml"), &cfg.to_toml())?;
    let every = (cfg.iterations / 20).max(1);
    let rows = train_until(&mut state, &dataset, &cfg, cfg.iterations, Some(out), |r| {
        if r.step % every == 0 {
            eprintln!("step {} lr {:.3e} loss {:.6}", r.step, r.lr, r.loss.total);
        }
    })?;
    let log = write(&out.join("loss.csv"), &loss_log_csv(&rows))?;
    let final_path = out.join("final.bin");
    state.save(&final_path)?;

    let mut m = Manifest::new("train", cfg.seed, serde_json::to_value(cfg)?);
    m.note("start_step", json!(start));
    m.note("end_step", json!(state.step));
    m.note("resumed_from", json!(resume.map(|p| p.display().to_string())));
    m.note("final_total", json!(rows.last().map(|r| r.loss.total)));
    m.artifact(cfg_path);
    m.artifact(log);
    m.artifact(final_path);
    let mut ckpts: Vec<PathBuf> = std::fs::read_dir(out)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ckpt_") && n.ends_with(".bin"))
        })
        .collect();
    ckpts.sort();
    for c in ckpts {
        m.artifact(c);
    }
    m.write(out)?;
    println!("trained steps {start}..{} into {}", state.step, out.display());
    Ok(())
}

pub fn render(ctx: &Context, checkpoint: &Path, data: &Path, split: &str, poses: &[String]) -> Result<()> {
    let split = parse_split(split)?;
    let poses = poses.iter().map(|p| parse_pose(p)).collect::<Result<Vec<_>>>()?;
    let state = load_state(checkpoint)?;
    let cfg = config_for(ctx, Some(checkpoint))?;
    let dataset = load_dataset(data)?;
    let out = &ctx.out_dir;
    let mut m = Manifest::new("render", cfg.seed, serde_json::to_value(cfg.render)?);
    m.note("checkpoint", json!(checkpoint.display().to_string()));

    let views: Vec<&DatasetView> = dataset.iter().filter(|v| v.split == split).collect();
    if !views.is_empty() {
        std::fs::create_dir_all(out.join(split.name()))?;
    }
    for (i, v) in views.iter().enumerate() {
        let img = Image::new(v.camera.width, v.camera.height, render_image(&state.params, &v.camera, &cfg.render, 1024)?);
        let p = out.join(split.name()).join(format!("r_{i}.png"));
        img.save_png(&p)?;
        m.artifact(p);
    }
    if !poses.is_empty() {
        let intr = dataset
            .first()
            .ok_or_else(|| anyhow!("dataset has no views to take intrinsics from"))?
            .camera
            .intrinsics();
        std::fs::create_dir_all(out.join("poses"))?;
        for (i, pose) in poses.iter().enumerate() {
            let cam = pose_from_sphere(pose, intr)?;
            let img = Image::new(cam.width, cam.height, render_image(&state.params, &cam, &cfg.render, 1024)?);
            let p = out.join("poses").join(format!("r_{i}.png"));
            img.save_png(&p)?;
            m.artifact(p);
        }
        m.note("poses", serde_json::to_value(&poses)?);
    }
    m.write(out)?;
    Ok(())
}

pub fn eval(ctx: &Context, data: &Path, checkpoint: Option<&Path>, renders: Option<&Path>) -> Result<()> {
    let dataset = load_dataset(data)?;
    let tests: Vec<&DatasetView> = dataset.iter().filter(|v| v.split == Split::Test).collect();
    if tests.is_empty() {
        bail!(UsageError(format!("{} has no test views", data.display())));
    }
    let cfg = config_for(ctx, checkpoint)?;
    let report = match (checkpoint, renders) {
        (Some(c), None) => {
            let state = load_state(c)?;
            evaluate_views(&state.params, &tests, &cfg.render)?.0
        }
        (None, Some(dir)) => {
            let mut report = MetricReport::default();
            for (i, v) in tests.iter().enumerate() {
                let p = dir.join("test").join(format!("r_{i}.png"));
                require_file(&p)?;
                report.views.push(compare(i, &Image::load_png(&p)?, &v.image)?);
            }
            report
        }
        _ => bail!(UsageError("eval needs exactly one of --checkpoint or --renders".into())),
    };
    let out = &ctx.out_dir;
    let text = report.to_text();
    let txt = write(&out.join("metrics.txt"), &text)?;
    let csv = write(&out.join("metrics.csv"), &report.to_csv())?;
    let mut m = Manifest::new("eval", cfg.seed, serde_json::to_value(cfg.render)?);
    let (pm, ps) = report.psnr_stats();
    let (sm, ss) = report.ssim_stats();
    m.note("psnr", json!({ "mean": pm, "std": ps }));
    m.note("ssim", json!({ "mean": sm, "std": ss }));
    m.artifact(txt);
    m.artifact(csv);
    m.write(out)?;
    print!("{text}");
    Ok(())
}

pub fn diagnose(ctx: &Context, checkpoint: Option<&Path>, data: &Path, oracle: bool, rays: usize) -> Result<()> {
    let dataset = load_dataset(data)?;
    let cfg = config_for(ctx, checkpoint)?;
    let state;
    let scene;
    let field: &dyn FieldSource = match (checkpoint, oracle) {
        (Some(c), false) => {
            state = load_state(c)?;
            &state.params
        }
        (None, true) => {
            scene = dataset_scene(data)?
                .ok_or_else(|| UsageError(format!("{} has no {SCENE_FILE}", data.display())))?;
            &scene
        }
        _ => bail!(UsageError("diagnose needs exactly one of --checkpoint or --oracle".into())),
    };
    let seed = ctx.seed.unwrap_or(0);
    let profiles = diagnose_rays(field, &dataset, rays, &cfg.render, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let out = &ctx.out_dir;
    let prof = write(&out.join("profiles.csv"), &profiles_csv(&profiles))?;
    let spread = write(&out.join("spread.csv"), &spread_csv(&profiles))?;
    let mut m = Manifest::new("diagnose", seed, serde_json::to_value(cfg.render)?);
    for pass in [Pass::Coarse, Pass::Fine] {
        let s = median_spread(&profiles, pass);
        m.note(&format!("median_spread_{}", pass.name()), json!(s));
        println!("{} median spread {}", pass.name(), s.map_or("n/a".into(), |x| format!("{x:.6}")));
    }
    m.artifact(prof);
    m.artifact(spread);
    m.write(out)?;
    Ok(())
}
