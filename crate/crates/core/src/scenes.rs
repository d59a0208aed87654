//! Analytic ground truth: soft-edged spheres and boxes with constant
//! albedo, a dense reference renderer, synthetic datasets, PNG IO and the
//! Blender `transforms_*.json` layout.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::Tape;
use crate::field::{FieldError, FieldSource, FieldVars, FrustumBatch, RadianceField};
use crate::geometry::{
    pixel_cone, pose_from_sphere, sample_unseen_pose, CameraPose, GeometryError, Intrinsics, Mat3,
    PoseBounds, Vec3,
};

pub const SCENE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}, frame {frame}: {msg}")]
    Frame {
        path: PathBuf,
        frame: usize,
        msg: String,
    },
    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, SceneError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SceneError + '_ {
    move |source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveShape {
    Sphere,
    /// Axis-aligned cube; `size` is the half side.
    Box,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub shape: PrimitiveShape,
    pub center: [f64; 3],
    /// Sphere radius or box half side.
    pub size: f64,
    pub density: f64,
    pub albedo: [f64; 3],
    /// Width of the density ramp across the surface; defaults to 5% of `size`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub falloff: Option<f64>,
}

impl Primitive {
    pub fn sphere(center: [f64; 3], radius: f64, density: f64, albedo: [f64; 3]) -> Self {
        Self {
            shape: PrimitiveShape::Sphere,
            center,
            size: radius,
            density,
            albedo,
            falloff: None,
        }
    }

    pub fn cube(center: [f64; 3], half: f64, density: f64, albedo: [f64; 3]) -> Self {
        Self {
            shape: PrimitiveShape::Box,
            ..Self::sphere(center, half, density, albedo)
        }
    }

    pub fn falloff_width(&self) -> f64 {
        self.falloff.unwrap_or(0.05 * self.size)
    }

    pub fn signed_distance(&self, x: &Vec3) -> f64 {
        let p = x - Vec3::from(self.center);
        match self.shape {
            PrimitiveShape::Sphere => p.norm() - self.size,
            PrimitiveShape::Box => {
                let q = p.abs().add_scalar(-self.size);
                q.map(|v| v.max(0.0)).norm() + q.max().min(0.0)
            }
        }
    }

    /// `density * (1 - smoothstep)` across `[-w/2, w/2]` of signed distance.
    pub fn density_at(&self, x: &Vec3) -> f64 {
        let w = self.falloff_width();
        let d = self.signed_distance(x);
        if w <= 0.0 {
            return if d <= 0.0 { self.density } else { 0.0 };
        }
        let t = ((d + 0.5 * w) / w).clamp(0.0, 1.0);
        self.density * (1.0 - t * t * (3.0 - 2.0 * t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticScene {
    pub version: u32,
    pub background: [f64; 3],
    pub near: f64,
    pub far: f64,
    #[serde(default, rename = "primitive")]
    pub primitives: Vec<Primitive>,
}

impl AnalyticScene {
    pub fn empty() -> Self {
        Self {
            version: SCENE_VERSION,
            background: [1.0; 3],
            near: 2.0,
            far: 6.0,
            primitives: Vec::new(),
        }
    }

    pub fn one_sphere() -> Self {
        Self {
            primitives: vec![Primitive::sphere([0.0; 3], 1.0, 40.0, [0.85, 0.3, 0.2])],
            ..Self::empty()
        }
    }

    /// A red sphere resting next to a blue box.
    pub fn two_primitive() -> Self {
        Self {
            primitives: vec![
                Primitive::sphere([0.45, -0.35, 0.1], 0.75, 40.0, [0.85, 0.25, 0.2]),
                Primitive::cube([-0.55, 0.45, -0.2], 0.55, 40.0, [0.2, 0.35, 0.85]),
            ],
            ..Self::empty()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "empty" => Some(Self::empty()),
            "one-sphere" => Some(Self::one_sphere()),
            "two-primitive" => Some(Self::two_primitive()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SCENE_VERSION {
            return Err(SceneError::Invalid(format!(
                "unsupported scene version {} (expected {SCENE_VERSION})",
                self.version
            )));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(SceneError::Invalid("need 0 < near < far".into()));
        }
        let unit = |c: &[f64; 3]| c.iter().all(|x| (0.0..=1.0).contains(x));
        if !unit(&self.background) {
            return Err(SceneError::Invalid("background outside [0, 1]".into()));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if !(p.density >= 0.0) || !(p.size > 0.0) || !unit(&p.albedo) {
                return Err(SceneError::Invalid(format!(
                    "primitive {i}: need density >= 0, size > 0 and albedo in [0, 1]"
                )));
            }
            if p.falloff.is_some_and(|w| !(w >= 0.0)) {
                return Err(SceneError::Invalid(format!("primitive {i}: negative falloff")));
            }
        }
        Ok(())
    }

    /// Total density and density-weighted albedo at `x` (albedo is zero
    /// where there is no density).
    pub fn density(&self, x: &Vec3) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut acc = [0.0; 3];
        for p in &self.primitives {
            let s = p.density_at(x);
            sigma += s;
            for k in 0..3 {
                acc[k] += s * p.albedo[k];
            }
        }
        if sigma > 0.0 {
            for a in &mut acc {
                *a /= sigma;
            }
        }
        (sigma, acc)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene serializes")
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let scene: Self = toml::from_str(text).map_err(|e| SceneError::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text, path)
    }
}

/// Scene densities queried at each frustum's mean, with zero offsets.
#[derive(Debug, Clone, Copy)]
pub struct AnalyticField<'a>(pub &'a AnalyticScene);

impl RadianceField for AnalyticField<'_> {
    fn evaluate(&self, tape: &mut Tape, batch: &FrustumBatch<'_>) -> std::result::Result<FieldVars, FieldError> {
        let n = tape.shape(batch.mean).rows;
        let mean = tape.value(batch.mean);
        let mut sigma = Vec::with_capacity(n);
        let mut color = Vec::with_capacity(3 * n);
        for x in mean.chunks(3) {
            let (s, a) = self.0.density(&Vec3::new(x[0], x[1], x[2]));
            sigma.push(s);
            color.extend(a);
        }
        Ok(FieldVars {
            sigma: tape.constant(sigma, n, 1)?,
            color: tape.constant(color, n, 3)?,
            feature: tape.zeros(n, 1),
            offset: tape.zeros(n, 1),
        })
    }
}

impl FieldSource for AnalyticScene {
    fn bind_frozen<'a>(&'a self, _: &mut Tape) -> std::result::Result<Box<dyn RadianceField + 'a>, FieldError> {
        Ok(Box::new(AnalyticField(self)))
    }
}

/// Row-major RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<[f64; 3]>) -> Self {
        assert_eq!(data.len(), width * height, "image data does not match its size");
        Self { width, height, data }
    }

    pub fn filled(width: usize, height: usize, c: [f64; 3]) -> Self {
        Self::new(width, height, vec![c; width * height])
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        self.data[row * self.width + col]
    }

    /// Values are clamped to `[0, 1]` and mapped linearly to 0..=255.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .flatten()
            .map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, image::ColorType::Rgb8)
            .map_err(|e| SceneError::Image {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })
    }

    /// Reads an 8-bit PNG; an alpha channel is composited onto white.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| SceneError::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let rgba = img.to_rgba8();
        let (w, h) = rgba.dimensions();
        let data = rgba
            .pixels()
            .map(|p| {
                let a = p[3] as f64 / 255.0;
                let c = |i: usize| p[i] as f64 / 255.0 * a + (1.0 - a);
                [c(0), c(1), c(2)]
            })
            .collect();
        Ok(Self::new(w as usize, h as usize, data))
    }
}

/// Dense midpoint quadrature of the scene along each pixel's central ray.
pub fn oracle_render(scene: &AnalyticScene, cam: &CameraPose, samples: usize) -> Result<Image> {
    let samples = samples.max(1);
    let mut data = Vec::with_capacity(cam.width * cam.height);
    let dt = (cam.far - cam.near) / samples as f64;
    for row in 0..cam.height {
        for col in 0..cam.width {
            let cone = pixel_cone(cam, row, col)?;
            let mut trans = 1.0;
            let mut c = [0.0; 3];
            for i in 0..samples {
                let t = cam.near + (i as f64 + 0.5) * dt;
                let (sigma, albedo) = scene.density(&(cone.origin + t * cone.direction));
                if sigma > 0.0 {
                    let keep = (-sigma * dt).exp();
                    let w = trans * (1.0 - keep);
                    for k in 0..3 {
                        c[k] += w * albedo[k];
                    }
                    trans *= keep;
                }
            }
            for k in 0..3 {
                c[k] += trans * scene.background[k];
            }
            data.push(c);
        }
    }
    Ok(Image::new(cam.width, cam.height, data))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetView {
    pub image: Image,
    pub camera: CameraPose,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub resolution: usize,
    pub camera_angle_x: f64,
    pub radius: f64,
    /// Draw train views from the first octant only (azimuth in [0, pi/2]).
    pub train_octant: bool,
    pub oracle_samples: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_train: 3,
            n_test: 8,
            resolution: 32,
            camera_angle_x: 0.6911,
            radius: 4.0,
            train_octant: true,
            oracle_samples: 4096,
        }
    }
}

impl DatasetSpec {
    pub fn intrinsics(&self, scene: &AnalyticScene) -> Intrinsics {
        Intrinsics::from_fov_x(
            self.camera_angle_x,
            self.resolution,
            self.resolution,
            scene.near,
            scene.far,
        )
    }

    pub fn train_bounds(&self) -> PoseBounds {
        let mut b = PoseBounds::upper_hemisphere(self.radius);
        if self.train_octant {
            b.phi = (0.0, 0.5 * std::f64::consts::PI);
        }
        b
    }
}

/// Renders `n_train` then `n_test` views from poses drawn in that order.
pub fn make_dataset<R: Rng + ?Sized>(
    scene: &AnalyticScene,
    spec: &DatasetSpec,
    rng: &mut R,
) -> Result<Vec<DatasetView>> {
    scene.validate()?;
    if spec.resolution == 0 || spec.resolution > 128 {
        return Err(SceneError::Invalid("resolution must lie in 1..=128".into()));
    }
    let intr = spec.intrinsics(scene);
    let test_bounds = PoseBounds::upper_hemisphere(spec.radius);
    let mut views = Vec::with_capacity(spec.n_train + spec.n_test);
    for (split, n, bounds) in [
        (Split::Train, spec.n_train, spec.train_bounds()),
        (Split::Test, spec.n_test, test_bounds),
    ] {
        for _ in 0..n {
            let pose = sample_unseen_pose(&bounds, rng)?;
            let camera = pose_from_sphere(&pose, intr)?;
            let image = oracle_render(scene, &camera, spec.oracle_samples)?;
            views.push(DatasetView { image, camera, split });
        }
    }
    Ok(views)
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    camera_angle_x: f64,
    frames: Vec<Frame>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Frame {
    file_path: String,
    transform_matrix: Vec<Vec<f64>>,
}

/// Camera-to-world matrix with columns (right, up, back, position).
pub fn camera_to_world(cam: &CameraPose) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&cam.rotation);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&cam.position);
    m
}

/// Writes `transforms_<split>.json` and `<split>/r_<i>.png` for every split
/// present. All views must share one horizontal field of view.
pub fn write_blender_format(dir: &Path, views: &[DatasetView], camera_angle_x: f64) -> Result<()> {
    for split in [Split::Train, Split::Test] {
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub).map_err(io_err(&sub))?;
        let mut frames = Vec::new();
        for (i, v) in views.iter().filter(|v| v.split == split).enumerate() {
            let rel = format!("./{}/r_{i}", split.name());
            v.image.save_png(&dir.join(format!("{rel}.png")))?;
            let m = camera_to_world(&v.camera);
            frames.push(Frame {
                file_path: rel,
                transform_matrix: (0..4).map(|r| (0..4).map(|c| m[(r, c)]).collect()).collect(),
            });
        }
        let path = dir.join(format!("transforms_{}.json", split.name()));
        let text = serde_json::to_string_pretty(&Manifest {
            camera_angle_x,
            frames,
        })
        .expect("manifest serializes");
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Nearest rotation to `m` if it is already orthonormal to within `tol`.
fn reorthonormalize(m: &Mat3, tol: f64) -> Option<Mat3> {
    let err = (m.transpose() * m - Mat3::identity()).abs().max();
    if !(err <= tol) || m.determinant() <= 0.0 {
        return None;
    }
    let x = m.column(0).normalize();
    let y = (m.column(1) - x * x.dot(&m.column(1))).normalize();
    let z = x.cross(&y);
    Some(Mat3::from_columns(&[x, y, z]))
}

/// Loads one split of a Blender-format directory. Ray bounds are not part
/// of the manifest and are passed in.
pub fn load_blender_split(dir: &Path, split: Split, near: f64, far: f64) -> Result<Vec<DatasetView>> {
    let path = dir.join(format!("transforms_{}.json", split.name()));
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| SceneError::Format {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    let mut views = Vec::with_capacity(manifest.frames.len());
    for (i, f) in manifest.frames.iter().enumerate() {
        let frame_err = |msg: String| SceneError::Frame {
            path: path.clone(),
            frame: i,
            msg,
        };
        let rows = &f.transform_matrix;
        if rows.len() != 4 || rows.iter().any(|r| r.len() != 4 || r.iter().any(|x| !x.is_finite())) {
            return Err(frame_err("transform_matrix must be a finite 4x4 matrix".into()));
        }
        let rot = Mat3::from_fn(|r, c| rows[r][c]);
        let pos = Vec3::new(rows[0][3], rows[1][3], rows[2][3]);
        let rot = if (rot.transpose() * rot - Mat3::identity()).abs().max() <= 1e-9 {
            rot
        } else {
            reorthonormalize(&rot, 1e-4)
                .ok_or_else(|| frame_err("rotation block is not orthonormal".into()))?
        };
        let mut file = dir.join(f.file_path.trim_start_matches("./"));
        if file.extension().is_none() {
            file.set_extension("png");
        }
        let image = Image::load_png(&file)?;
        let intr = Intrinsics::from_fov_x(manifest.camera_angle_x, image.width, image.height, near, far);
        let camera = CameraPose::new(pos, rot, intr).map_err(|e| frame_err(e.to_string()))?;
        views.push(DatasetView { image, camera, split });
    }
    Ok(views)
}

/// Train views followed by test views; a missing test manifest is allowed.
pub fn load_blender_format(dir: &Path, near: f64, far: f64) -> Result<Vec<DatasetView>> {
    let mut views = load_blender_split(dir, Split::Train, near, far)?;
    if dir.join("transforms_test.json").exists() {
        views.extend(load_blender_split(dir, Split::Test, near, far)?);
    }
    Ok(views)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SphericalPose;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cam(res: usize) -> CameraPose {
        let s = SphericalPose::new(4.0, 0.7, 1.1).unwrap();
        pose_from_sphere(&s, Intrinsics::from_fov_x(0.6911, res, res, 2.0, 6.0)).unwrap()
    }

    #[test]
    fn density_examples() {
        let s = AnalyticScene::one_sphere();
        assert_eq!(s.density(&Vec3::new(3.0, 0.0, 0.0)).0, 0.0);
        assert_eq!(s.density(&Vec3::zeros()).0, 40.0);
        // Half-way through the ramp: exactly on the surface.
        assert!((s.density(&Vec3::new(0.0, 1.0, 0.0)).0 - 20.0).abs() < 1e-12);
        let b = Primitive::cube([0.0; 3], 1.0, 10.0, [0.5; 3]);
        assert!((b.density_at(&Vec3::new(1.0, 0.3, -0.2)) - 5.0).abs() < 1e-12);
        assert!((b.signed_distance(&Vec3::new(2.0, 2.0, 0.0)) - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn overlapping_albedo_is_density_weighted() {
        let s = AnalyticScene {
            primitives: vec![
                Primitive::sphere([0.0; 3], 1.0, 30.0, [1.0, 0.0, 0.0]),
                Primitive::sphere([0.0; 3], 1.0, 10.0, [0.0, 0.0, 1.0]),
            ],
            ..AnalyticScene::empty()
        };
        let (sigma, a) = s.density(&Vec3::zeros());
        assert_eq!(sigma, 40.0);
        assert!((a[0] - 0.75).abs() < 1e-15 && (a[2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn oracle_trivial_scenes() {
        let img = oracle_render(&AnalyticScene::empty(), &cam(6), 1024).unwrap();
        assert!(img.data.iter().all(|p| *p == [1.0; 3]));

        let wall = AnalyticScene {
            primitives: vec![Primitive::cube([0.0, 0.0, -13.0], 10.0, 200.0, [0.3, 0.6, 0.1])],
            ..AnalyticScene::empty()
        };
        let c = CameraPose::new(Vec3::zeros(), Mat3::identity(), Intrinsics::from_fov_x(0.6911, 6, 6, 2.0, 6.0))
            .unwrap();
        let img = oracle_render(&wall, &c, 4096).unwrap();
        for p in &img.data {
            for k in 0..3 {
                assert!((p[k] - wall.primitives[0].albedo[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn oracle_converges() {
        let s = AnalyticScene::two_primitive();
        let c = cam(12);
        let a = oracle_render(&s, &c, 4096).unwrap();
        let b = oracle_render(&s, &c, 8192).unwrap();
        let worst = a
            .data
            .iter()
            .zip(&b.data)
            .flat_map(|(x, y)| (0..3).map(move |k| (x[k] - y[k]).abs()))
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn scene_file_round_trip_and_validation() {
        let s = AnalyticScene::two_primitive();
        let text = s.to_toml();
        assert!(text.contains("version = 1"));
        assert_eq!(AnalyticScene::from_toml(&text, Path::new("s.toml")).unwrap(), s);
        let bad = text.replace("version = 1", "version = 9");
        assert!(AnalyticScene::from_toml(&bad, Path::new("s.toml")).is_err());
        let bad = text.replacen("density = 40.0", "density = -1.0", 1);
        assert!(AnalyticScene::from_toml(&bad, Path::new("s.toml")).is_err());
    }

    #[test]
    fn datasets_are_seed_deterministic() {
        let spec = DatasetSpec {
            resolution: 8,
            n_test: 2,
            oracle_samples: 1024,
            ..DatasetSpec::default()
        };
        let s = AnalyticScene::one_sphere();
        let a = make_dataset(&s, &spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = make_dataset(&s, &spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|v| v.split == Split::Train).count(), 3);
        assert!(a.iter().all(|v| v.image.data.iter().flatten().all(|x| (0.0..=1.0).contains(x))));
        for v in a.iter().filter(|v| v.split == Split::Train) {
            let p = SphericalPose::from_position(v.camera.position, Vec3::zeros());
            assert!(p.phi <= 0.5 * std::f64::consts::PI);
        }
    }

    #[test]
    fn png_round_trip_is_linear() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = Image::new(2, 1, vec![[0.0, 0.5, 1.0], [0.2, 0.4, 0.6]]);
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        for (a, b) in img.data.iter().flatten().zip(back.data.iter().flatten()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        assert_eq!(back.pixel(0, 1)[1], 102.0 / 255.0);
    }

    #[test]
    fn blender_focal_and_identity_transform() {
        let intr = Intrinsics::from_fov_x(0.6911, 800, 800, 2.0, 6.0);
        assert!((intr.focal - 400.0 / (0.5f64 * 0.6911).tan()).abs() < 1e-9);
        // The rounded angle gives 1111.13; 0.6911112 gives 1111.11.
        assert!((intr.focal - 1111.11).abs() < 0.05, "{}", intr.focal);

        let dir = tempfile::tempdir().unwrap();
        Image::filled(4, 4, [0.5; 3]).save_png(&dir.path().join("f.png")).unwrap();
        let manifest = r#"{"camera_angle_x": 0.6911, "frames": [{"file_path": "./f",
            "transform_matrix": [[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]}]}"#;
        fs::write(dir.path().join("transforms_train.json"), manifest).unwrap();
        let views = load_blender_format(dir.path(), 2.0, 6.0).unwrap();
        let c = &views[0].camera;
        assert_eq!(c.position, Vec3::zeros());
        assert!((c.forward() - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-15);
        assert!((c.focal - 2.0 / (0.5f64 * 0.6911).tan()).abs() < 1e-12);
    }

    #[test]
    fn blender_rejects_bad_frames() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_blender_format(dir.path(), 2.0, 6.0),
            Err(SceneError::Io { .. })
        ));
        let manifest = r#"{"camera_angle_x": 0.6911, "frames": [{"file_path": "./f",
            "transform_matrix": [[1,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]}]}"#;
        fs::write(dir.path().join("transforms_train.json"), manifest).unwrap();
        let err = load_blender_format(dir.path(), 2.0, 6.0).unwrap_err();
        assert!(matches!(err, SceneError::Frame { frame: 0, .. }), "{err}");
        assert!(err.to_string().contains("transforms_train.json"));
    }

    #[test]
    fn blender_round_trip() {
        let spec = DatasetSpec {
            resolution: 6,
            n_test: 2,
            oracle_samples: 1024,
            ..DatasetSpec::default()
        };
        let views = make_dataset(&AnalyticScene::one_sphere(), &spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_blender_format(dir.path(), &views, spec.camera_angle_x).unwrap();
        let back = load_blender_format(dir.path(), 2.0, 6.0).unwrap();
        assert_eq!(back.len(), views.len());
        for (a, b) in views.iter().zip(&back) {
            assert_eq!(a.split, b.split);
            assert!((a.camera.position - b.camera.position).abs().max() < 1e-9);
            assert!((a.camera.rotation - b.camera.rotation).abs().max() < 1e-9);
            assert!((a.camera.focal - b.camera.focal).abs() < 1e-9);
        }
    }
}
