//! Cameras on a viewing sphere, pixel cones, and pose perturbation.
//!
//! Conventions: world +z is up, the polar angle is measured from +z, and a
//! camera looks down its local -z axis with +x right and +y up. Rotation
//! matrices are world-from-camera, so their columns are the camera's right,
//! up and back axes expressed in world coordinates.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid spherical pose: {0}")]
    InvalidPose(String),
    #[error("degenerate look-at frame: viewing direction is parallel to the up axis")]
    DegenerateUp,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("pixel ({row}, {col}) outside a {width}x{height} image")]
    PixelOutOfBounds {
        row: usize,
        col: usize,
        width: usize,
        height: usize,
    },
    #[error("invalid range: {0}")]
    InvalidRange(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Camera placement on a sphere around `target`: radius, azimuth `phi`
/// and polar angle `gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalPose {
    pub radius: f64,
    pub phi: f64,
    pub gamma: f64,
    #[serde(default)]
    pub target: [f64; 3],
}

impl SphericalPose {
    pub fn new(radius: f64, phi: f64, gamma: f64) -> Result<Self> {
        let pose = Self {
            radius,
            phi: phi.rem_euclid(TAU),
            gamma,
            target: [0.0; 3],
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(GeometryError::InvalidPose(format!(
                "radius must be positive, got {}",
                self.radius
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < PI) {
            return Err(GeometryError::DegenerateUp);
        }
        if !self.phi.is_finite() {
            return Err(GeometryError::InvalidPose("non-finite azimuth".into()));
        }
        Ok(())
    }

    pub fn target(&self) -> Vec3 {
        Vec3::from(self.target)
    }

    pub fn position(&self) -> Vec3 {
        let (sg, cg) = self.gamma.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        self.target() + self.radius * Vec3::new(sg * cp, sg * sp, cg)
    }

    /// Recovers the spherical coordinates of `position` around `target`.
    pub fn from_position(position: Vec3, target: Vec3) -> Self {
        let rel = position - target;
        let radius = rel.norm();
        Self {
            radius,
            phi: rel.y.atan2(rel.x).rem_euclid(TAU),
            gamma: (rel.z / radius).clamp(-1.0, 1.0).acos(),
            target: target.into(),
        }
    }
}

/// Pinhole intrinsics plus the ray bounds shared by every camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Intrinsics {
    /// Focal length from a horizontal field of view, Blender style.
    pub fn from_fov_x(camera_angle_x: f64, width: usize, height: usize, near: f64, far: f64) -> Self {
        Self {
            focal: 0.5 * width as f64 / (0.5 * camera_angle_x).tan(),
            width,
            height,
            near,
            far,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) || self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidCamera(format!(
                "focal {} and size {}x{} must be positive",
                self.focal, self.width, self.height
            )));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(GeometryError::InvalidCamera(format!(
                "need 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub position: Vec3,
    /// World-from-camera rotation.
    pub rotation: Mat3,
    pub focal: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl CameraPose {
    pub fn new(position: Vec3, rotation: Mat3, intrinsics: Intrinsics) -> Result<Self> {
        intrinsics.validate()?;
        let ortho = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        if ortho > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidCamera(
                "rotation is not a proper orthonormal matrix".into(),
            ));
        }
        Ok(Self {
            position,
            rotation,
            focal: intrinsics.focal,
            width: intrinsics.width,
            height: intrinsics.height,
            near: intrinsics.near,
            far: intrinsics.far,
        })
    }

    /// Camera at `position` aimed at `target`, world +z as up reference.
    pub fn look_at(position: Vec3, target: Vec3, intrinsics: Intrinsics) -> Result<Self> {
        let forward = (target - position).normalize();
        let right = forward.cross(&Vec3::z());
        if right.norm() < 1e-12 || !right.norm().is_finite() {
            return Err(GeometryError::DegenerateUp);
        }
        let right = right.normalize();
        let up = right.cross(&forward);
        let rotation = Mat3::from_columns(&[right, up, -forward]);
        Self::new(position, rotation, intrinsics)
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            focal: self.focal,
            width: self.width,
            height: self.height,
            near: self.near,
            far: self.far,
        }
    }

    /// Optical axis in world coordinates.
    pub fn forward(&self) -> Vec3 {
        -self.rotation.column(2).into_owned()
    }
}

pub fn pose_from_sphere(s: &SphericalPose, intrinsics: Intrinsics) -> Result<CameraPose> {
    s.validate()?;
    CameraPose::look_at(s.position(), s.target(), intrinsics)
}

/// A pixel's viewing cone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConeRay {
    pub origin: Vec3,
    /// Unit direction.
    pub direction: Vec3,
    /// Cone radius at unit distance along `direction`.
    pub base_radius: f64,
    pub pixel: (usize, usize),
    pub near: f64,
    pub far: f64,
}

/// Cone through the center of pixel `(row, col)`.
///
/// The base radius is the pixel footprint at unit depth scaled by
/// `2 / sqrt(12)`, so the disc has the same variance as the square pixel.
pub fn pixel_cone(cam: &CameraPose, row: usize, col: usize) -> Result<ConeRay> {
    if row >= cam.height || col >= cam.width {
        return Err(GeometryError::PixelOutOfBounds {
            row,
            col,
            width: cam.width,
            height: cam.height,
        });
    }
    let x = (col as f64 + 0.5 - 0.5 * cam.width as f64) / cam.focal;
    let y = -(row as f64 + 0.5 - 0.5 * cam.height as f64) / cam.focal;
    let direction = (cam.rotation * Vec3::new(x, y, -1.0)).normalize();
    Ok(ConeRay {
        origin: cam.position,
        direction,
        base_radius: (1.0 / cam.focal) * 2.0 / 12f64.sqrt(),
        pixel: (row, col),
        near: cam.near,
        far: cam.far,
    })
}

/// Half-widths of the symmetric uniform perturbation intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauRanges {
    pub radius: f64,
    pub phi: f64,
    pub gamma: f64,
    /// Perturbed polar angles are clamped into this open interval.
    #[serde(default = "default_gamma_limits")]
    pub gamma_limits: (f64, f64),
}

fn default_gamma_limits() -> (f64, f64) {
    (1e-3, PI - 1e-3)
}

impl TauRanges {
    pub fn zero() -> Self {
        Self {
            radius: 0.0,
            phi: 0.0,
            gamma: 0.0,
            gamma_limits: default_gamma_limits(),
        }
    }

    /// +-0.5% of the radius and +-0.5 degrees on both angles.
    pub fn default_for(radius: f64) -> Self {
        Self {
            radius: 0.005 * radius,
            phi: 0.5f64.to_radians(),
            gamma: 0.5f64.to_radians(),
            gamma_limits: default_gamma_limits(),
        }
    }

    /// Rejects ranges that are negative or could drive the radius to zero.
    pub fn validate(&self, radius: f64) -> Result<()> {
        if [self.radius, self.phi, self.gamma]
            .iter()
            .any(|h| !(*h >= 0.0 && h.is_finite()))
        {
            return Err(GeometryError::InvalidRange(
                "perturbation half-widths must be finite and non-negative".into(),
            ));
        }
        if radius - self.radius <= 0.0 {
            return Err(GeometryError::InvalidRange(format!(
                "radius perturbation {} can make radius {} non-positive",
                self.radius, radius
            )));
        }
        let (lo, hi) = self.gamma_limits;
        if !(lo > 0.0 && lo < hi && hi < PI) {
            return Err(GeometryError::InvalidRange(format!(
                "polar limits ({lo}, {hi}) must satisfy 0 < lo < hi < pi"
            )));
        }
        Ok(())
    }
}

/// An unseen pose and its perturbed copies.
#[derive(Debug, Clone, PartialEq)]
pub struct PosePair {
    pub unseen: SphericalPose,
    pub perturbed: Vec<SphericalPose>,
    /// Applied `(tau_radius, tau_phi, tau_gamma)` per perturbed pose. The
    /// polar entry is the effective change after clamping.
    pub taus: Vec<[f64; 3]>,
}

/// Additive perturbation of radius, azimuth and polar angle. The azimuth
/// wraps into `[0, 2pi)`; the polar angle is clamped into `gamma_limits`.
pub fn apply_tau(s: &SphericalPose, tau: [f64; 3], gamma_limits: (f64, f64)) -> SphericalPose {
    SphericalPose {
        radius: s.radius + tau[0],
        phi: (s.phi + tau[1]).rem_euclid(TAU),
        gamma: (s.gamma + tau[2]).clamp(gamma_limits.0, gamma_limits.1),
        target: s.target,
    }
}

fn symmetric_draw<R: Rng + ?Sized>(rng: &mut R, half: f64) -> f64 {
    if half == 0.0 {
        0.0
    } else {
        rng.random_range(-half..=half)
    }
}

/// Draws `count` perturbed copies of `s` with additive uniform noise on
/// radius, azimuth and polar angle.
pub fn perturb_pose<R: Rng + ?Sized>(
    s: &SphericalPose,
    tau: &TauRanges,
    count: usize,
    rng: &mut R,
) -> Result<PosePair> {
    s.validate()?;
    tau.validate(s.radius)?;
    if count == 0 {
        return Err(GeometryError::InvalidRange(
            "need at least one perturbation".into(),
        ));
    }
    let (lo, hi) = tau.gamma_limits;
    let mut perturbed = Vec::with_capacity(count);
    let mut taus = Vec::with_capacity(count);
    for _ in 0..count {
        let tr = symmetric_draw(rng, tau.radius);
        let tp = symmetric_draw(rng, tau.phi);
        let tg = symmetric_draw(rng, tau.gamma);
        let p = apply_tau(s, [tr, tp, tg], (lo, hi));
        taus.push([tr, tp, p.gamma - s.gamma]);
        perturbed.push(p);
    }
    Ok(PosePair {
        unseen: *s,
        perturbed,
        taus,
    })
}

/// Region of the viewing sphere unseen poses are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseBounds {
    pub radius: f64,
    pub phi: (f64, f64),
    pub gamma: (f64, f64),
    #[serde(default)]
    pub target: [f64; 3],
}

impl PoseBounds {
    /// Full upper hemisphere, keeping clear of the pole and the horizon.
    pub fn upper_hemisphere(radius: f64) -> Self {
        Self {
            radius,
            phi: (0.0, TAU),
            gamma: (0.15, 0.5 * PI - 0.05),
            target: [0.0; 3],
        }
    }
}

fn draw_in<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64), what: &str) -> Result<f64> {
    if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(GeometryError::InvalidRange(format!(
            "empty {what} range [{lo}, {hi}]"
        )));
    }
    Ok(if lo == hi { lo } else { rng.random_range(lo..hi) })
}

/// Uniform azimuth and polar angle within `bounds` at the fixed radius.
pub fn sample_unseen_pose<R: Rng + ?Sized>(bounds: &PoseBounds, rng: &mut R) -> Result<SphericalPose> {
    let phi = draw_in(rng, bounds.phi, "azimuth")?;
    let gamma = draw_in(rng, bounds.gamma, "polar")?;
    let pose = SphericalPose {
        radius: bounds.radius,
        phi: phi.rem_euclid(TAU),
        gamma,
        target: bounds.target,
    };
    pose.validate()?;
    Ok(pose)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn intr(focal: f64, w: usize, h: usize) -> Intrinsics {
        Intrinsics {
            focal,
            width: w,
            height: h,
            near: 2.0,
            far: 6.0,
        }
    }

    #[test]
    fn sphere_axis_cases() {
        let p = SphericalPose::new(2.0, 0.0, PI / 2.0).unwrap().position();
        assert!((p - Vec3::new(2.0, 0.0, 0.0)).norm() < 1e-15);
        let p = SphericalPose::new(1.0, PI / 2.0, PI / 2.0).unwrap().position();
        assert!((p - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn sphere_general_case_against_trig() {
        let s = SphericalPose::new(4.0, 0.7, 1.1).unwrap();
        let cam = pose_from_sphere(&s, intr(50.0, 16, 16)).unwrap();
        let expect = Vec3::new(
            4.0 * 1.1f64.sin() * 0.7f64.cos(),
            4.0 * 1.1f64.sin() * 0.7f64.sin(),
            4.0 * 1.1f64.cos(),
        );
        assert!((cam.position - expect).norm() < 1e-12);
        let to_origin = (-cam.position).normalize();
        assert!((cam.forward() - to_origin).norm() < 1e-12);
    }

    #[test]
    fn degenerate_polar_angles_rejected() {
        assert_eq!(
            SphericalPose::new(1.0, 0.0, 0.0).unwrap_err(),
            GeometryError::DegenerateUp
        );
        assert!(SphericalPose::new(1.0, 0.0, PI).is_err());
        assert!(SphericalPose::new(-1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn center_pixel_looks_forward() {
        let s = SphericalPose::new(4.0, 0.3, 0.9).unwrap();
        let cam = pose_from_sphere(&s, intr(30.0, 5, 5)).unwrap();
        let c = pixel_cone(&cam, 2, 2).unwrap();
        assert!((c.direction - cam.forward()).norm() < 1e-12);
    }

    #[test]
    fn mirrored_pixels_mirror_about_forward_axis() {
        let s = SphericalPose::new(4.0, 1.3, 0.7).unwrap();
        let cam = pose_from_sphere(&s, intr(40.0, 8, 8)).unwrap();
        let a = cam.rotation.transpose() * pixel_cone(&cam, 3, 1).unwrap().direction;
        let b = cam.rotation.transpose() * pixel_cone(&cam, 3, 6).unwrap().direction;
        assert!((a.x + b.x).abs() < 1e-12);
        assert!((a.y - b.y).abs() < 1e-12 && (a.z - b.z).abs() < 1e-12);
    }

    #[test]
    fn corner_pixel_against_pinhole() {
        let s = SphericalPose::new(4.0, 0.0, PI / 2.0).unwrap();
        let cam = pose_from_sphere(&s, intr(100.0, 64, 64)).unwrap();
        let c = pixel_cone(&cam, 0, 0).unwrap();
        // Camera at +x looking at the origin: right = +y, up = +z, fwd = -x.
        let x = (0.5 - 32.0) / 100.0;
        let y = -(0.5 - 32.0) / 100.0;
        let d = Vec3::new(-1.0, x, y).normalize();
        assert!((c.direction - d).norm() < 1e-12);
        assert!((c.base_radius - 0.01 * 2.0 / 12f64.sqrt()).abs() < 1e-15);
        assert!(pixel_cone(&cam, 64, 0).is_err());
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = SphericalPose::new(4.0, 0.4, 1.0).unwrap();
        let pair = perturb_pose(&s, &TauRanges::zero(), 3, &mut rng).unwrap();
        assert!(pair.perturbed.iter().all(|p| *p == s));
    }

    #[test]
    fn radius_only_perturbation() {
        let s = SphericalPose::new(4.0, 0.4, 1.0).unwrap();
        let p = apply_tau(&s, [0.1, 0.0, 0.0], (1e-3, PI - 1e-3));
        assert!((p.radius - 4.1).abs() < 1e-15);
        assert_eq!((p.phi, p.gamma), (s.phi, s.gamma));

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tau = TauRanges {
            radius: 0.1,
            ..TauRanges::zero()
        };
        let pair = perturb_pose(&s, &tau, 5, &mut rng).unwrap();
        for (p, t) in pair.perturbed.iter().zip(&pair.taus) {
            assert_eq!(p.radius, 4.0 + t[0]);
            assert_eq!((p.phi, p.gamma), (s.phi, s.gamma));
        }
    }

    #[test]
    fn azimuth_noise_is_centered_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = SphericalPose::new(4.0, 1.0, 1.0).unwrap();
        let tau = TauRanges {
            phi: 0.02,
            ..TauRanges::zero()
        };
        let pair = perturb_pose(&s, &tau, 10_000, &mut rng).unwrap();
        let draws: Vec<f64> = pair.taus.iter().map(|t| t[1]).collect();
        assert!(draws.iter().all(|t| t.abs() <= 0.02));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let sigma = 0.02 / 3f64.sqrt() / (draws.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * sigma, "{mean}");
    }

    #[test]
    fn radius_range_that_reaches_zero_is_rejected() {
        let tau = TauRanges {
            radius: 1.0,
            ..TauRanges::zero()
        };
        assert!(tau.validate(1.0).is_err());
        assert!(tau.validate(1.5).is_ok());
    }

    #[test]
    fn unseen_pose_sampler() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let point = PoseBounds {
            radius: 3.0,
            phi: (0.5, 0.5),
            gamma: (1.0, 1.0),
            target: [0.0; 3],
        };
        let p = sample_unseen_pose(&point, &mut rng).unwrap();
        assert_eq!((p.radius, p.phi, p.gamma), (3.0, 0.5, 1.0));

        let ring = PoseBounds {
            phi: (0.0, TAU),
            ..point
        };
        for _ in 0..100 {
            let z = sample_unseen_pose(&ring, &mut rng).unwrap().position().z;
            assert!((z - 3.0 * 1.0f64.cos()).abs() < 1e-12);
        }

        let hemi = PoseBounds::upper_hemisphere(4.0);
        for _ in 0..1000 {
            let p = sample_unseen_pose(&hemi, &mut rng).unwrap();
            assert_eq!(p.radius, 4.0);
            assert!(p.gamma >= hemi.gamma.0 && p.gamma <= hemi.gamma.1);
        }

        let empty = PoseBounds {
            gamma: (1.0, 0.5),
            ..point
        };
        assert!(sample_unseen_pose(&empty, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn sphere_round_trip(r in 0.5f64..10.0, phi in 0.0f64..TAU, gamma in 0.01f64..(PI - 0.01)) {
            let s = SphericalPose::new(r, phi, gamma).unwrap();
            let back = SphericalPose::from_position(s.position(), s.target());
            prop_assert!((back.radius - r).abs() < 1e-9);
            prop_assert!((back.gamma - gamma).abs() < 1e-9);
            let dphi = (back.phi - s.phi).abs();
            prop_assert!(dphi.min(TAU - dphi) < 1e-9);
        }

        #[test]
        fn small_perturbations_barely_move_optical_axis(
            seed in 0u64..1000, phi in 0.0f64..TAU, gamma in 0.2f64..(PI - 0.2)
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = SphericalPose::new(4.0, phi, gamma).unwrap();
            let tau = TauRanges { radius: 0.02, phi: 0.02, gamma: 0.02, ..TauRanges::zero() };
            let pair = perturb_pose(&s, &tau, 4, &mut rng).unwrap();
            let i = intr(20.0, 4, 4);
            let a = pose_from_sphere(&s, i).unwrap().forward();
            for p in &pair.perturbed {
                let b = pose_from_sphere(p, i).unwrap().forward();
                prop_assert!(a.dot(&b).clamp(-1.0, 1.0).acos() <= 0.05);
            }
        }

        #[test]
        fn ray_directions_are_unit(
            phi in 0.0f64..TAU, gamma in 0.1f64..3.0, row in 0usize..16, col in 0usize..16
        ) {
            let s = SphericalPose::new(4.0, phi, gamma).unwrap();
            let cam = pose_from_sphere(&s, intr(12.0, 16, 16)).unwrap();
            let c = pixel_cone(&cam, row, col).unwrap();
            prop_assert!((c.direction.norm() - 1.0).abs() < 1e-9);
        }
    }
}
