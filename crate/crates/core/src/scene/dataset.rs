use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{oracle_render, ppm, SceneSpec, WORKING_VOLUME_RADIUS};
use crate::ad::Tensor;
use crate::camera::{CameraPose, Intrinsics, Vec3};
use crate::error::{Error, Result};

const MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

/// An input image with its camera.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceView {
    pub image: Tensor,
    pub pose: CameraPose,
    pub intrinsics: Intrinsics,
}

/// A held-out camera and its ground-truth image.
pub type TargetView = SourceView;

#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewDataset {
    pub scene: SceneSpec,
    pub source_views: Vec<SourceView>,
    pub target_views: Vec<TargetView>,
    pub near: f64,
    pub far: f64,
}

impl MultiViewDataset {
    pub fn height(&self) -> usize {
        self.source_views[0].intrinsics.height
    }

    pub fn width(&self) -> usize {
        self.source_views[0].intrinsics.width
    }

    pub fn source_images(&self) -> Vec<Tensor> {
        self.source_views.iter().map(|v| v.image.clone()).collect()
    }
}

/// Camera rig: cameras on a horizontal circle around the origin, raised by a
/// fixed elevation, all looking at the origin with world `+z` up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigConfig {
    pub radius: f64,
    pub height: usize,
    pub width: usize,
    pub elevation_deg: f64,
    /// Maximum azimuth/elevation jitter applied to source cameras.
    pub jitter_deg: f64,
    /// Focal length in units of image width.
    pub focal_scale: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig { radius: 4.0, height: 48, width: 48, elevation_deg: 25.0, jitter_deg: 3.0, focal_scale: 1.6 }
    }
}

impl RigConfig {
    pub fn near_far(&self) -> (f64, f64) {
        let margin = 1.2 * WORKING_VOLUME_RADIUS;
        (self.radius - margin, self.radius + margin)
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::centered(self.focal_scale * self.width as f64, self.width, self.height)
    }

    pub fn camera_at(&self, azimuth_deg: f64, elevation_deg: f64) -> Result<CameraPose> {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let eye = Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * self.radius;
        CameraPose::look_at(eye, Vec3::zeros(), Vec3::z())
    }

    /// Nominal (pre-jitter) azimuth of source camera `i` out of `s`.
    pub fn source_azimuth(i: usize, s: usize) -> f64 {
        360.0 * i as f64 / s as f64
    }

    /// Target camera halfway between source cameras 0 and 1.
    pub fn target_azimuth(s: usize) -> f64 {
        180.0 / s as f64
    }
}

/// Oracle-rendered dataset with `s` jittered source cameras evenly spaced on
/// the rig circle and one target camera between the first two.
pub fn make_dataset(
    scene: &SceneSpec,
    s: usize,
    rig_radius: f64,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<MultiViewDataset> {
    let rig = RigConfig { radius: rig_radius, height, width, ..RigConfig::default() };
    make_dataset_with(scene, s, &rig, seed)
}

pub fn make_dataset_with(scene: &SceneSpec, s: usize, rig: &RigConfig, seed: u64) -> Result<MultiViewDataset> {
    if s == 0 {
        return Err(Error::Contract("dataset needs at least one source view".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intr = rig.intrinsics()?;
    let (near, far) = rig.near_far();
    let mut source_views = Vec::with_capacity(s);
    for i in 0..s {
        let j = rig.jitter_deg;
        let az = RigConfig::source_azimuth(i, s) + if j > 0.0 { rng.gen_range(-j..j) } else { 0.0 };
        let el = rig.elevation_deg + if j > 0.0 { rng.gen_range(-j..j) } else { 0.0 };
        let pose = rig.camera_at(az, el)?;
        let image = oracle_render(scene, &pose, &intr)?;
        source_views.push(SourceView { image, pose, intrinsics: intr });
    }
    let pose = rig.camera_at(RigConfig::target_azimuth(s), rig.elevation_deg)?;
    let image = oracle_render(scene, &pose, &intr)?;
    let target_views = vec![SourceView { image, pose, intrinsics: intr }];
    Ok(MultiViewDataset { scene: scene.clone(), source_views, target_views, near, far })
}

#[derive(Serialize, Deserialize)]
struct ViewEntry {
    file: String,
    pose: Vec<f64>,
    intrinsics: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    scene: SceneSpec,
    num_source_views: usize,
    height: usize,
    width: usize,
    near: f64,
    far: f64,
    source_views: Vec<ViewEntry>,
    target_views: Vec<ViewEntry>,
}

pub fn save_dataset(ds: &MultiViewDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries = |views: &[SourceView], prefix: &str| -> Result<Vec<ViewEntry>> {
        views
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let file = format!("{prefix}_{i:02}.ppm");
                ppm::write(&dir.join(&file), &v.image)?;
                Ok(ViewEntry {
                    file,
                    pose: v.pose.to_row_major().to_vec(),
                    intrinsics: v.intrinsics.to_array().to_vec(),
                })
            })
            .collect()
    };
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        scene: ds.scene.clone(),
        num_source_views: ds.source_views.len(),
        height: ds.height(),
        width: ds.width(),
        near: ds.near,
        far: ds.far,
        source_views: entries(&ds.source_views, "source")?,
        target_views: entries(&ds.target_views, "target")?,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<MultiViewDataset> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, "json", e.to_string()))?;
    let bad = |field: &str, reason: String| Error::format(&mpath, field, reason);
    if m.format_version != FORMAT_VERSION {
        return Err(bad("format_version", format!("unsupported version {}", m.format_version)));
    }
    m.scene.validate().map_err(|e| bad("scene", e.to_string()))?;
    if m.num_source_views == 0 {
        return Err(bad("num_source_views", "must be at least 1".into()));
    }
    if m.source_views.len() != m.num_source_views {
        return Err(bad(
            "source_views",
            format!("declared {} views, listed {}", m.num_source_views, m.source_views.len()),
        ));
    }
    if !(m.near > 0.0 && m.near < m.far) {
        return Err(bad("near/far", format!("need 0 < near < far, got {} / {}", m.near, m.far)));
    }
    let load_views = |entries: &[ViewEntry], field: &str| -> Result<Vec<SourceView>> {
        entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let f = format!("{field}[{i}]");
                let pose =
                    CameraPose::from_row_major(&e.pose).map_err(|err| bad(&format!("{f}.pose"), err.to_string()))?;
                if e.intrinsics.len() != 4 {
                    return Err(bad(&format!("{f}.intrinsics"), "expected 4 values".into()));
                }
                let k = &e.intrinsics;
                let intrinsics = Intrinsics::new(k[0], k[1], k[2], k[3], m.width, m.height)
                    .map_err(|err| bad(&format!("{f}.intrinsics"), err.to_string()))?;
                let ipath = dir.join(&e.file);
                let image = ppm::read(&ipath)?;
                if image.shape() != [3, m.height, m.width] {
                    return Err(Error::format(
                        &ipath,
                        "size",
                        format!("expected {}x{}, found {:?}", m.width, m.height, image.shape()),
                    ));
                }
                Ok(SourceView { image, pose, intrinsics })
            })
            .collect()
    };
    let source_views = load_views(&m.source_views, "source_views")?;
    let target_views = load_views(&m.target_views, "target_views")?;
    let source_poses: BTreeSet<[u64; 12]> =
        source_views.iter().map(|v| v.pose.to_row_major().map(f64::to_bits)).collect();
    if target_views.iter().any(|t| source_poses.contains(&t.pose.to_row_major().map(f64::to_bits))) {
        return Err(bad("target_views", "target pose coincides with a source pose".into()));
    }
    Ok(MultiViewDataset { scene: m.scene, source_views, target_views, near: m.near, far: m.far })
}
