//! Pinhole cameras, ray generation, depth sampling and projection.
//!
//! Conventions used throughout the crate:
//! * camera frame is x right, y down, z forward; poses map world to camera;
//! * continuous pixel coordinates put pixel `(i, j)` over `[i, i+1) x [j, j+1)`,
//!   so its centre sits at `(i + 0.5, j + 0.5)`;
//! * feature/image lookups use *index* coordinates, where integer values hit
//!   pixel centres. [`Projection::index_coords`] converts between the two.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{Tape, Tensor};
use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

const ORTHO_TOL: f64 = 1e-9;

/// World-to-camera rigid transform: `p_cam = R x + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraPose {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let gram = rotation.transpose() * rotation;
        if (gram - Matrix3::identity()).abs().max() > ORTHO_TOL || (rotation.determinant() - 1.0).abs() > ORTHO_TOL {
            return Err(Error::Contract("rotation is not a proper orthonormal matrix".into()));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Contract("translation is not finite".into()));
        }
        Ok(CameraPose { rotation, translation })
    }

    pub fn identity() -> Self {
        CameraPose { rotation: Matrix3::identity(), translation: Vec3::zeros() }
    }

    /// Camera at `eye` looking at `target`; `up` fixes the roll (image y
    /// points away from it).
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Contract("look_at: eye coincides with target".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Contract("look_at: up is parallel to view direction".into()))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        CameraPose::new(rotation, translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// Camera centre in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    /// `[R | t]` as 12 floats, row-major.
    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 12 {
            return Err(Error::shape("pose", &[v.len()], &[12]));
        }
        let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        CameraPose::new(rotation, Vec3::new(v[3], v[7], v[11]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let intr = Intrinsics { fx, fy, cx, cy, width, height };
        intr.validate()?;
        Ok(intr)
    }

    /// Centred principal point and equal focal lengths.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(focal, focal, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.fx, self.fy, self.cx, self.cy]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, near: f64, far: f64) -> Result<Self> {
        let direction = direction.try_normalize(1e-300).ok_or_else(|| Error::Contract("zero ray direction".into()))?;
        if !(near > 0.0 && near < far) {
            return Err(Error::Contract(format!("need 0 < near < far, got {near}, {far}")));
        }
        Ok(Ray { origin, direction, near, far })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// One uniform draw inside each of `K` equal bins.
    Stratified,
    /// Bin centres; deterministic.
    Midpoint,
}

/// Ordered sample depths along a ray.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthSamples {
    pub t: Vec<f64>,
}

impl DepthSamples {
    /// Spacings `t_{k+1} - t_k`, with the last one running to `far`.
    pub fn deltas(&self, far: f64) -> Vec<f64> {
        let mut d: Vec<f64> = self.t.windows(2).map(|w| w[1] - w[0]).collect();
        if let Some(last) = self.t.last() {
            d.push(far - last);
        }
        d
    }
}

/// Ray from the camera centre through the continuous point
/// `(px + 0.5, py + 0.5)`, i.e. through the centre of pixel `(px, py)` for
/// integer arguments.
pub fn ray_through_pixel(pose: &CameraPose, intr: &Intrinsics, px: f64, py: f64, near: f64, far: f64) -> Result<Ray> {
    if !(px >= 0.0 && px < intr.width as f64 && py >= 0.0 && py < intr.height as f64) {
        return Err(Error::Range(format!("pixel ({px}, {py}) outside {}x{} image", intr.width, intr.height)));
    }
    let cam_dir = Vec3::new((px + 0.5 - intr.cx) / intr.fx, (py + 0.5 - intr.cy) / intr.fy, 1.0);
    let world_dir = pose.rotation().transpose() * cam_dir;
    Ray::new(pose.center(), world_dir, near, far)
}

pub fn sample_depths(ray: &Ray, k: usize, mode: SamplingMode, seed: u64) -> Result<DepthSamples> {
    if k == 0 {
        return Err(Error::Contract("sample_depths needs K >= 1".into()));
    }
    let bin = (ray.far - ray.near) / k as f64;
    let t = match mode {
        SamplingMode::Midpoint => (0..k).map(|i| ray.near + (i as f64 + 0.5) * bin).collect(),
        SamplingMode::Stratified => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..k).map(|i| ray.near + (i as f64 + rng.gen::<f64>()) * bin).collect()
        }
    };
    Ok(DepthSamples { t })
}

/// Result of projecting a world point into a view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    /// Continuous pixel coordinates.
    pub u: f64,
    pub v: f64,
    /// Camera-frame z.
    pub depth: f64,
    /// False when the point is at or behind the camera plane (`z <= 1e-6`).
    pub in_front: bool,
}

impl Projection {
    /// Index-space coordinates for [`bilinear_sample`].
    pub fn index_coords(&self) -> (f64, f64) {
        (self.u - 0.5, self.v - 0.5)
    }
}

pub fn project(point: &Vec3, pose: &CameraPose, intr: &Intrinsics) -> Projection {
    let p = pose.world_to_camera(point);
    let in_front = p.z > 1e-6;
    let z = if in_front { p.z } else { 1.0 };
    Projection { u: intr.fx * p.x / z + intr.cx, v: intr.fy * p.y / z + intr.cy, depth: p.z, in_front }
}

/// Bilinear lookup of a `[C, H, W]` map at index coordinates `(x, y)`.
/// Returns the `C` interpolated values and whether the lookup was valid; an
/// invalid lookup yields zeros. Differentiable use goes through
/// [`Tape::bilinear_gather`].
pub fn bilinear_sample(map: &Tensor, x: f64, y: f64) -> Result<(Vec<f64>, bool)> {
    let mut tape = Tape::new();
    let m = tape.constant(map.clone());
    let xy = tape.constant(Tensor::new(vec![1, 2], vec![x, y])?);
    let (out, valid) = tape.bilinear_gather(m, xy, &[true])?;
    Ok((tape.value(out).data().to_vec(), valid[0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assume, proptest};

    fn random_pose(seed: u64) -> CameraPose {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eye = Vec3::new(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), rng.gen_range(1.0..4.0));
        let target = Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
        CameraPose::look_at(eye, target, Vec3::z()).unwrap()
    }

    fn intr() -> Intrinsics {
        Intrinsics::new(100.0, 90.0, 32.0, 24.0, 64, 48).unwrap()
    }

    #[test]
    fn optical_axis_ray() {
        let i = intr();
        let r = ray_through_pixel(&CameraPose::identity(), &i, i.cx - 0.5, i.cy - 0.5, 1.0, 2.0).unwrap();
        assert!((r.direction - Vec3::z()).norm() < 1e-15);
        assert_eq!(r.origin, Vec3::zeros());
    }

    #[test]
    fn one_pixel_right_of_centre() {
        let f = 80.0;
        let i = Intrinsics::centered(f, 32, 32).unwrap();
        let r = ray_through_pixel(&CameraPose::identity(), &i, i.cx + 0.5, i.cy - 0.5, 1.0, 2.0).unwrap();
        let expect = Vec3::new(1.0 / f, 0.0, 1.0).normalize();
        assert!((r.direction - expect).norm() < 1e-15);
        assert!((r.direction.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_bounds_pixel_is_range_error() {
        let i = intr();
        let p = CameraPose::identity();
        assert!(matches!(ray_through_pixel(&p, &i, 64.0, 0.0, 1.0, 2.0), Err(Error::Range(_))));
        assert!(matches!(ray_through_pixel(&p, &i, -0.1, 0.0, 1.0, 2.0), Err(Error::Range(_))));
    }

    #[test]
    fn projection_examples() {
        let i = intr();
        let p = project(&Vec3::new(0.0, 0.0, 1.0), &CameraPose::identity(), &i);
        assert_eq!((p.u, p.v, p.depth, p.in_front), (32.0, 24.0, 1.0, true));
        let p = project(&Vec3::new(0.1, 0.0, 1.0), &CameraPose::identity(), &i);
        assert!((p.u - 42.0).abs() < 1e-12);
        let behind = project(&Vec3::new(0.0, 0.0, -1.0), &CameraPose::identity(), &i);
        assert!(!behind.in_front);
    }

    #[test]
    fn depth_samples() {
        let ray = Ray::new(Vec3::zeros(), Vec3::z(), 1e-9, 1.0).unwrap();
        let ray = Ray { near: 0.0, ..ray };
        let s = sample_depths(&ray, 2, SamplingMode::Midpoint, 0).unwrap();
        assert_eq!(s.t, vec![0.25, 0.75]);
        let ray = Ray::new(Vec3::zeros(), Vec3::z(), 2.0, 5.0).unwrap();
        let s = sample_depths(&ray, 1, SamplingMode::Midpoint, 0).unwrap();
        assert_eq!(s.t, vec![3.5]);
        assert!(matches!(sample_depths(&ray, 0, SamplingMode::Midpoint, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn stratified_one_per_bin_and_reproducible() {
        let ray = Ray::new(Vec3::zeros(), Vec3::z(), 2.8, 5.2).unwrap();
        let a = sample_depths(&ray, 64, SamplingMode::Stratified, 17).unwrap();
        let b = sample_depths(&ray, 64, SamplingMode::Stratified, 17).unwrap();
        assert_eq!(a, b);
        let bin = (ray.far - ray.near) / 64.0;
        for (k, t) in a.t.iter().enumerate() {
            let lo = ray.near + k as f64 * bin;
            assert!(*t >= lo && *t < lo + bin);
        }
        assert!(a.t.windows(2).all(|w| w[0] < w[1]));
        let c = sample_depths(&ray, 64, SamplingMode::Stratified, 18).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn pose_invariants_and_serialization() {
        let p = random_pose(3);
        let r = p.rotation();
        assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        let q = CameraPose::from_row_major(&p.to_row_major()).unwrap();
        assert_eq!(p, q);
        let bad = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(CameraPose::new(bad, Vec3::zeros()).is_err());
        assert!(Intrinsics::new(-1.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 4.0, 0.0, 4, 4).is_err());
    }

    #[test]
    fn look_at_centre_sees_target_on_axis() {
        let eye = Vec3::new(4.0, 1.0, 2.0);
        let p = CameraPose::look_at(eye, Vec3::zeros(), Vec3::z()).unwrap();
        assert!((p.center() - eye).norm() < 1e-12);
        let i = Intrinsics::centered(50.0, 48, 48).unwrap();
        let pr = project(&Vec3::zeros(), &p, &i);
        assert!((pr.u - 24.0).abs() < 1e-12 && (pr.v - 24.0).abs() < 1e-12);
        // World up projects towards the top of the image.
        let up = project(&Vec3::new(0.0, 0.0, 0.5), &p, &i);
        assert!(up.v < 24.0);
    }

    #[test]
    fn bilinear_lattice_constant_and_linear() {
        let map = Tensor::from_fn(&[2, 4, 5], |i| (i * 7 % 11) as f64);
        let (v, ok) = bilinear_sample(&map, 3.0, 2.0).unwrap();
        assert!(ok);
        assert_eq!(v, vec![map.data()[2 * 5 + 3], map.data()[20 + 2 * 5 + 3]]);
        let c = Tensor::full(&[3, 4, 4], 0.37);
        for (x, y) in [(0.2, 0.3), (2.9, 1.1), (-0.4, 3.4)] {
            let (v, ok) = bilinear_sample(&c, x, y).unwrap();
            assert!(ok);
            assert!(v.iter().all(|a| (a - 0.37).abs() < 1e-15));
        }
        // Linear along a grid row.
        let (a, _) = bilinear_sample(&map, 1.0, 2.0).unwrap();
        let (b, _) = bilinear_sample(&map, 2.0, 2.0).unwrap();
        let (m, _) = bilinear_sample(&map, 1.25, 2.0).unwrap();
        for ch in 0..2 {
            assert!((m[ch] - (0.75 * a[ch] + 0.25 * b[ch])).abs() < 1e-12);
        }
        let (z, ok) = bilinear_sample(&map, 5.0, 1.0).unwrap();
        assert!(!ok && z.iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn project_then_ray_round_trip(seed in any::<u64>(), ox in -0.8f64..0.8, oy in -0.8f64..0.8, oz in -0.8f64..0.8) {
            let pose = random_pose(seed);
            let i = Intrinsics::centered(70.0, 64, 64).unwrap();
            let x = Vec3::new(ox, oy, oz);
            let pr = project(&x, &pose, &i);
            prop_assume!(pr.in_front && pr.u >= 0.5 && pr.u < 63.5 && pr.v >= 0.5 && pr.v < 63.5);
            let (px, py) = pr.index_coords();
            let ray = ray_through_pixel(&pose, &i, px, py, 0.1, 100.0).unwrap();
            let w = x - ray.origin;
            let closest = (w - ray.direction * w.dot(&ray.direction)).norm();
            prop_assert!(closest < 1e-9, "{}", closest);
            // And the ray point at t = 2 re-projects to the same pixel.
            let back = project(&ray.at(2.0), &pose, &i);
            prop_assert!((back.u - pr.u).abs() < 1e-9 && (back.v - pr.v).abs() < 1e-9);
        }
    }
}
