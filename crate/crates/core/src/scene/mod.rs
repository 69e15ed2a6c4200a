//! Procedural Lambertian scenes, the analytic ray-tracing oracle, scene edits
//! and the on-disk multi-view dataset.

mod dataset;
mod oracle;
pub mod ppm;

pub use dataset::{
    load_dataset, make_dataset, make_dataset_with, save_dataset, MultiViewDataset, RigConfig, SourceView, TargetView,
};
pub use oracle::{footprint, hit_map, oracle_render, shade, trace_ray, Hit};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, Intrinsics, Vec3};
use crate::error::{Error, Result};

/// Radius of the ball every primitive must fit inside.
pub const WORKING_VOLUME_RADIUS: f64 = 1.0;
/// Minimum distance between primitive centres in generated scenes.
pub const MIN_CENTER_SPACING: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePrimitive {
    pub shape: Shape,
    pub center: [f64; 3],
    pub albedo: [f64; 3],
}

impl ScenePrimitive {
    pub fn sphere(center: [f64; 3], radius: f64, albedo: [f64; 3]) -> Self {
        ScenePrimitive { shape: Shape::Sphere { radius }, center, albedo }
    }

    pub fn aabb(center: [f64; 3], half_extents: [f64; 3], albedo: [f64; 3]) -> Self {
        ScenePrimitive { shape: Shape::Box { half_extents }, center, albedo }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes_ok = match &self.shape {
            Shape::Sphere { radius } => *radius > 0.0,
            Shape::Box { half_extents } => half_extents.iter().all(|h| *h > 0.0),
        };
        if !sizes_ok {
            return Err(Error::Contract(format!("primitive size must be positive: {:?}", self.shape)));
        }
        if !self.albedo.iter().all(|a| (0.0..=1.0).contains(a)) {
            return Err(Error::Contract(format!("albedo outside [0, 1]: {:?}", self.albedo)));
        }
        if !self.center.iter().all(|c| c.is_finite()) {
            return Err(Error::Contract("primitive centre is not finite".into()));
        }
        Ok(())
    }

    /// Radius of the smallest centred ball containing the primitive.
    pub fn bounding_radius(&self) -> f64 {
        match &self.shape {
            Shape::Sphere { radius } => *radius,
            Shape::Box { half_extents } => Vec3::from(*half_extents).norm(),
        }
    }

    pub fn center_vec(&self) -> Vec3 {
        Vec3::from(self.center)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<ScenePrimitive>,
    pub background: [f64; 3],
    pub light_dir: [f64; 3],
    pub ambient: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn empty(background: [f64; 3]) -> Self {
        SceneSpec { primitives: Vec::new(), background, light_dir: [0.0, 0.0, 1.0], ambient: 0.5, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.primitives {
            p.validate()?;
        }
        if (Vec3::from(self.light_dir).norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Contract("light_dir must be a unit vector".into()));
        }
        if !(0.0..=1.0).contains(&self.ambient) || !self.background.iter().all(|b| (0.0..=1.0).contains(b)) {
            return Err(Error::Contract("ambient and background must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Seeded scene with `n_primitives` spheres and boxes inside the working
/// volume, centres at least [`MIN_CENTER_SPACING`] apart.
pub fn random_scene(seed: u64, n_primitives: usize) -> Result<SceneSpec> {
    if n_primitives == 0 {
        return Err(Error::Contract("random_scene needs at least one primitive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut primitives: Vec<ScenePrimitive> = Vec::with_capacity(n_primitives);
    let mut attempts = 0usize;
    while primitives.len() < n_primitives {
        attempts += 1;
        let candidate = random_primitive(&mut rng);
        let c = candidate.center_vec();
        // Prefer non-overlapping bounds; after many rejections settle for the
        // plain spacing rule.
        let strict = attempts < 2000;
        let fits = primitives.iter().all(|p| {
            let gap = (p.center_vec() - c).norm();
            let need = if strict {
                (p.bounding_radius() + candidate.bounding_radius()).max(MIN_CENTER_SPACING)
            } else {
                MIN_CENTER_SPACING
            };
            gap >= need
        });
        if fits {
            primitives.push(candidate);
        }
    }
    let light = Vec3::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(0.5..1.0)).normalize();
    let background = [0, 1, 2].map(|_| rng.gen_range(0.05..0.45));
    Ok(SceneSpec { primitives, background, light_dir: light.into(), ambient: rng.gen_range(0.45..0.65), seed })
}

fn random_primitive(rng: &mut ChaCha8Rng) -> ScenePrimitive {
    let albedo = [0, 1, 2].map(|_| rng.gen_range(0.15..1.0));
    let shape = if rng.gen_bool(0.6) {
        Shape::Sphere { radius: rng.gen_range(0.22..0.42) }
    } else {
        Shape::Box { half_extents: [0, 1, 2].map(|_| rng.gen_range(0.14..0.28)) }
    };
    let bound = match &shape {
        Shape::Sphere { radius } => *radius,
        Shape::Box { half_extents } => Vec3::from(*half_extents).norm(),
    };
    // Uniform direction, radius so that the whole primitive stays inside.
    let max_r = (WORKING_VOLUME_RADIUS - bound).max(0.0) * 0.85;
    let dir = loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            break v / n;
        }
    };
    let r = max_r * rng.gen::<f64>().cbrt();
    ScenePrimitive { shape, center: (dir * r).into(), albedo }
}

/// One of the three target-edit categories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneEdit {
    /// Replace an existing primitive (shape, size, position or albedo).
    Modify { target_index: usize, new_primitive: ScenePrimitive },
    /// Remove a primitive; its pixels fall back to whatever lies behind it.
    Delete { target_index: usize },
    /// Insert a new primitive that must be visible from the target view.
    Add { new_primitive: ScenePrimitive },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    Modify,
    Delete,
    Add,
}

impl SceneEdit {
    pub fn kind(&self) -> EditKind {
        match self {
            SceneEdit::Modify { .. } => EditKind::Modify,
            SceneEdit::Delete { .. } => EditKind::Delete,
            SceneEdit::Add { .. } => EditKind::Add,
        }
    }
}

/// Applies `edit`; `target` is the view an added primitive must be visible in.
pub fn apply_edit(scene: &SceneSpec, edit: &SceneEdit, target: (&CameraPose, &Intrinsics)) -> Result<SceneSpec> {
    let mut out = scene.clone();
    let check_index = |i: usize| {
        if i < scene.primitives.len() {
            Ok(())
        } else {
            Err(Error::Range(format!("edit index {i} but scene has {} primitives", scene.primitives.len())))
        }
    };
    match edit {
        SceneEdit::Modify { target_index, new_primitive } => {
            check_index(*target_index)?;
            new_primitive.validate()?;
            out.primitives[*target_index] = new_primitive.clone();
        }
        SceneEdit::Delete { target_index } => {
            check_index(*target_index)?;
            out.primitives.remove(*target_index);
        }
        SceneEdit::Add { new_primitive } => {
            new_primitive.validate()?;
            out.primitives.push(new_primitive.clone());
            let idx = out.primitives.len() - 1;
            let visible = hit_map(&out, target.0, target.1)?.iter().any(|h| *h == Some(idx));
            if !visible {
                return Err(Error::Visibility);
            }
        }
    }
    Ok(out)
}

/// Picks an edit of the requested kind that changes a clearly visible region
/// of the target view. Deterministic in `seed`.
pub fn choose_edit(
    scene: &SceneSpec,
    kind: EditKind,
    target: (&CameraPose, &Intrinsics),
    seed: u64,
) -> Result<SceneEdit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hits = hit_map(scene, target.0, target.1)?;
    let mut counts = vec![0usize; scene.primitives.len()];
    for h in hits.iter().flatten() {
        counts[*h] += 1;
    }
    let most_visible = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .max_by_key(|(i, &c)| (c, std::cmp::Reverse(*i)))
        .map(|(i, _)| i);
    let fallback_add = matches!(kind, EditKind::Add) || most_visible.is_none();
    if !fallback_add {
        let idx = most_visible.expect("checked above");
        return Ok(match kind {
            EditKind::Delete => SceneEdit::Delete { target_index: idx },
            _ => {
                let old = &scene.primitives[idx];
                // Swap the shape class and push the albedo to a distant colour.
                let r = old.bounding_radius().clamp(0.15, 0.4);
                let albedo =
                    old.albedo.map(|a| if a > 0.55 { rng.gen_range(0.1..0.3) } else { rng.gen_range(0.75..0.95) });
                let shape = match old.shape {
                    Shape::Sphere { .. } => Shape::Box { half_extents: [r * 0.8; 3] },
                    Shape::Box { .. } => Shape::Sphere { radius: r },
                };
                SceneEdit::Modify {
                    target_index: idx,
                    new_primitive: ScenePrimitive { shape, center: old.center, albedo },
                }
            }
        });
    }
    // Add: sample positions until one is visible and clear of the others.
    for _ in 0..500 {
        let center = Vec3::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(-0.4..0.6));
        let radius = rng.gen_range(0.2..0.3);
        let clear =
            scene.primitives.iter().all(|p| (p.center_vec() - center).norm() > p.bounding_radius() + radius + 0.05);
        if !clear {
            continue;
        }
        let albedo = [0, 1, 2].map(|_| rng.gen_range(0.2..1.0));
        let new_primitive = ScenePrimitive::sphere(center.into(), radius, albedo);
        let edit = SceneEdit::Add { new_primitive };
        if apply_edit(scene, &edit, target).is_ok() {
            return Ok(edit);
        }
    }
    Err(Error::Visibility)
}

#[cfg(test)]
mod tests;
