//! Image metrics, metric reports and per-ray weight diagnostics.

use std::fmt::Write as _;

use rand::Rng;
use thiserror::Error;

use crate::field::FieldSource;
use crate::geometry::pixel_cone;
use crate::diffmath::Tape;
use crate::rendering::{render_image, render_rays, RenderConfig, RenderError, RenderOutput};
use crate::sampling::IntervalSet;
use crate::scenes::{DatasetView, Image, Split};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    Shape(usize, usize, usize, usize),
    #[error("image {0}x{1} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")]
    TooSmall(usize, usize),
    #[error("no views to evaluate")]
    Empty,
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(EvalError::Shape(a.width, a.height, b.width, b.height));
    }
    Ok(())
}

/// PSNR in dB over all pixels and channels, and whether the images were
/// identical (in which case the value is [`PSNR_CAP`]).
pub fn psnr(a: &Image, b: &Image) -> Result<(f64, bool)> {
    same_shape(a, b)?;
    let n = 3 * a.data.len();
    let se: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .flat_map(|(x, y)| (0..3).map(move |k| (x[k] - y[k]).powi(2)))
        .sum();
    if se == 0.0 {
        return Ok((PSNR_CAP, true));
    }
    Ok(((-10.0 * (se / n as f64).log10()).min(PSNR_CAP), false))
}

fn gaussian_window() -> Vec<f64> {
    let h = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - h).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|x| x / s).collect()
}

fn gray(img: &Image) -> Vec<f64> {
    img.data.iter().map(|p| (p[0] + p[1] + p[2]) / 3.0).collect()
}

/// Mean SSIM over all windows that fit entirely inside the image, on the
/// channel-mean grayscale.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(EvalError::TooSmall(w, h));
    }
    let (x, y) = (gray(a), gray(b));
    let g = gaussian_window();
    let mut total = 0.0;
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    for r0 in 0..oh {
        for c0 in 0..ow {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let k = g[i] * g[j];
                    let idx = (r0 + i) * w + c0 + j;
                    let (p, q) = (x[idx], y[idx]);
                    mx += k * p;
                    my += k * q;
                    sxx += k * p * p;
                    syy += k * q * q;
                    sxy += k * p * q;
                }
            }
            let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + C1) * (2.0 * cxy + C2))
                / ((mx * mx + my * my + C1) * (vx + vy + C2));
        }
    }
    Ok(total / (ow * oh) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewMetric {
    pub view_id: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// PSNR hit the cap because the images were identical.
    pub identical: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub views: Vec<ViewMetric>,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

impl MetricReport {
    pub fn psnr_stats(&self) -> (f64, f64) {
        mean_std(&self.views.iter().map(|v| v.psnr).collect::<Vec<_>>())
    }

    pub fn ssim_stats(&self) -> (f64, f64) {
        mean_std(&self.views.iter().map(|v| v.ssim).collect::<Vec<_>>())
    }

    /// `view_id psnr ssim` per view, then `mean psnr±std ssim±std`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for v in &self.views {
            let _ = writeln!(s, "{} {:.4} {:.6}", v.view_id, v.psnr, v.ssim);
        }
        let (pm, ps) = self.psnr_stats();
        let (sm, ss) = self.ssim_stats();
        let _ = writeln!(s, "mean {pm:.4}±{ps:.4} {sm:.6}±{ss:.6}");
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("view_id,psnr,ssim,identical\n");
        for v in &self.views {
            let _ = writeln!(s, "{},{:e},{:e},{}", v.view_id, v.psnr, v.ssim, v.identical);
        }
        s
    }

    /// Reads back the per-view lines of [`Self::to_text`].
    pub fn parse_text(text: &str) -> Option<Self> {
        let mut views = Vec::new();
        for line in text.lines().filter(|l| !l.starts_with("mean ") && !l.is_empty()) {
            let mut it = line.split_whitespace();
            let view_id = it.next()?.parse().ok()?;
            let psnr: f64 = it.next()?.parse().ok()?;
            let ssim = it.next()?.parse().ok()?;
            views.push(ViewMetric {
                view_id,
                psnr,
                ssim,
                identical: psnr >= PSNR_CAP,
            });
        }
        Some(Self { views })
    }
}

pub fn compare(view_id: usize, rendered: &Image, truth: &Image) -> Result<ViewMetric> {
    let (p, identical) = psnr(rendered, truth)?;
    Ok(ViewMetric {
        view_id,
        psnr: p,
        ssim: ssim(rendered, truth)?,
        identical,
    })
}

/// Renders each view and scores it against its image. Views are numbered
/// by their position in `views`.
pub fn evaluate_views(
    field: &dyn FieldSource,
    views: &[&DatasetView],
    cfg: &RenderConfig,
) -> Result<(MetricReport, Vec<Image>)> {
    if views.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut report = MetricReport::default();
    let mut images = Vec::with_capacity(views.len());
    for (i, v) in views.iter().enumerate() {
        let data = render_image(field, &v.camera, cfg, 1024)?;
        let img = Image::new(v.camera.width, v.camera.height, data);
        report.views.push(compare(i, &img, &v.image)?);
        images.push(img);
    }
    Ok((report, images))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Coarse,
    Fine,
}

impl Pass {
    pub fn name(self) -> &'static str {
        match self {
            Self::Coarse => "coarse",
            Self::Fine => "fine",
        }
    }
}

/// Per-sample quantities along one ray of one pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RayProfile {
    pub view: usize,
    pub pixel: (usize, usize),
    pub pass: Pass,
    /// Interval midpoints.
    pub t: Vec<f64>,
    /// Interval widths.
    pub dt: Vec<f64>,
    pub w: Vec<f64>,
    /// Transmittance in front of each sample.
    pub trans: Vec<f64>,
    /// Squared distance of each sample's color to the pixel's true color.
    pub rgbmse: Vec<f64>,
}

impl RayProfile {
    fn build(
        view: usize,
        pixel: (usize, usize),
        pass: Pass,
        out: &RenderOutput,
        iv: &IntervalSet,
        colors: &[[f64; 3]],
        gt: [f64; 3],
    ) -> Self {
        let m = out.weights.len();
        Self {
            view,
            pixel,
            pass,
            t: iv.midpoints(),
            dt: iv.widths(),
            w: out.weights.clone(),
            trans: out.transmittance[..m].to_vec(),
            rgbmse: colors
                .iter()
                .map(|c| (0..3).map(|k| (c[k] - gt[k]).powi(2)).sum())
                .collect(),
        }
    }

    /// See [`weight_spread`].
    pub fn spread(&self) -> Option<f64> {
        weight_spread(&self.t, &self.dt, &self.w)
    }
}

/// Standard deviation in `t` of the normalized weights, each spread
/// uniformly over its interval (midpoint `t`, width `dt`). `None` when the
/// ray carries (almost) no weight.
pub fn weight_spread(t: &[f64], dt: &[f64], w: &[f64]) -> Option<f64> {
    let s: f64 = w.iter().sum();
    if !(s > 1e-8) {
        return None;
    }
    let m = t.iter().zip(w).map(|(t, w)| t * w).sum::<f64>() / s;
    let v = (0..w.len())
        .map(|i| w[i] * ((t[i] - m).powi(2) + dt[i] * dt[i] / 12.0))
        .sum::<f64>()
        / s;
    Some(v.max(0.0).sqrt())
}

/// Renders `n_rays` random pixels of the test views (train views when
/// there are none) without jitter and records both passes. Profiles come
/// in pairs: coarse then fine for each ray.
pub fn diagnose_rays<R: Rng + ?Sized>(
    field: &dyn FieldSource,
    dataset: &[DatasetView],
    n_rays: usize,
    cfg: &RenderConfig,
    rng: &mut R,
) -> Result<Vec<RayProfile>> {
    let mut views: Vec<(usize, &DatasetView)> =
        dataset.iter().enumerate().filter(|(_, v)| v.split == Split::Test).collect();
    if views.is_empty() {
        views = dataset.iter().enumerate().collect();
    }
    if views.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut out = Vec::with_capacity(2 * n_rays);
    for _ in 0..n_rays {
        let (vi, v) = views[rng.random_range(0..views.len())];
        let row = rng.random_range(0..v.image.height);
        let col = rng.random_range(0..v.image.width);
        let cone = pixel_cone(&v.camera, row, col)?;
        let gt = v.image.pixel(row, col);
        let mut tape = Tape::new();
        let bound = field.bind_frozen(&mut tape).map_err(RenderError::from)?;
        let b = render_rays::<R>(&mut tape, bound.as_ref(), std::slice::from_ref(&cone), cfg, None)?;
        for (pass, vars) in [(Pass::Coarse, &b.coarse), (Pass::Fine, &b.fine)] {
            out.push(RayProfile::build(
                vi,
                (row, col),
                pass,
                &vars.outputs(&tape)[0],
                &vars.intervals(&tape, 0),
                &vars.field_output(&tape, 0).color,
                gt,
            ));
        }
    }
    Ok(out)
}

pub const PROFILE_CSV_HEADER: &str = "view,row,col,pass,sample,t,dt,w,T,rgbmse";

pub fn profiles_csv(profiles: &[RayProfile]) -> String {
    let mut s = String::from(PROFILE_CSV_HEADER);
    s.push('\n');
    for p in profiles {
        for i in 0..p.t.len() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:e},{:e},{:e},{:e},{:e}",
                p.view,
                p.pixel.0,
                p.pixel.1,
                p.pass.name(),
                i,
                p.t[i],
                p.dt[i],
                p.w[i],
                p.trans[i],
                p.rgbmse[i]
            );
        }
    }
    s
}

/// Per-ray spread of one pass; rays without weight show as empty.
pub fn spread_csv(profiles: &[RayProfile]) -> String {
    let mut s = String::from("view,row,col,pass,spread\n");
    for p in profiles {
        let v = p.spread().map(|x| format!("{x:e}")).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{v}", p.view, p.pixel.0, p.pixel.1, p.pass.name());
    }
    s
}

/// Median over rays of the defined spreads of `pass`.
pub fn median_spread(profiles: &[RayProfile], pass: Pass) -> Option<f64> {
    let mut v: Vec<f64> = profiles
        .iter()
        .filter(|p| p.pass == pass)
        .filter_map(RayProfile::spread)
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}
