use super::{ScenePrimitive, SceneSpec, Shape};
use crate::ad::Tensor;
use crate::camera::{ray_through_pixel, CameraPose, Intrinsics, Vec3};
use crate::error::Result;

/// Nearest ray-primitive intersection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub index: usize,
    pub normal: Vec3,
}

const T_MIN: f64 = 1e-9;

fn intersect(p: &ScenePrimitive, origin: &Vec3, dir: &Vec3) -> Option<(f64, Vec3)> {
    let c = p.center_vec();
    match &p.shape {
        Shape::Sphere { radius } => {
            let oc = origin - c;
            let b = oc.dot(dir);
            let cc = oc.dot(&oc) - radius * radius;
            let disc = b * b - cc;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t = if -b - sq > T_MIN { -b - sq } else { -b + sq };
            if t <= T_MIN {
                return None;
            }
            let n = (origin + dir * t - c) / *radius;
            Some((t, n))
        }
        Shape::Box { half_extents } => {
            let mut t_near = f64::NEG_INFINITY;
            let mut t_far = f64::INFINITY;
            let mut near_axis = 0;
            let mut far_axis = 0;
            for a in 0..3 {
                let (lo, hi) = (c[a] - half_extents[a], c[a] + half_extents[a]);
                if dir[a].abs() < 1e-300 {
                    if origin[a] < lo || origin[a] > hi {
                        return None;
                    }
                    continue;
                }
                let (mut t0, mut t1) = ((lo - origin[a]) / dir[a], (hi - origin[a]) / dir[a]);
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                if t0 > t_near {
                    t_near = t0;
                    near_axis = a;
                }
                if t1 < t_far {
                    t_far = t1;
                    far_axis = a;
                }
            }
            if t_near > t_far {
                return None;
            }
            let (t, axis) = if t_near > T_MIN {
                (t_near, near_axis)
            } else if t_far > T_MIN {
                (t_far, far_axis)
            } else {
                return None;
            };
            let mut n = Vec3::zeros();
            let x = origin + dir * t;
            n[axis] = if x[axis] >= c[axis] { 1.0 } else { -1.0 };
            Some((t, n))
        }
    }
}

/// Nearest intersection along `origin + t dir`, `t > 0`.
pub fn trace_ray(scene: &SceneSpec, origin: &Vec3, dir: &Vec3) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (index, p) in scene.primitives.iter().enumerate() {
        if let Some((t, normal)) = intersect(p, origin, dir) {
            if best.is_none_or(|b| t < b.t) {
                best = Some(Hit { t, index, normal });
            }
        }
    }
    best
}

/// Lambert-shaded colour seen along a ray (background on a miss).
pub fn shade(scene: &SceneSpec, origin: &Vec3, dir: &Vec3) -> [f64; 3] {
    match trace_ray(scene, origin, dir) {
        None => scene.background,
        Some(hit) => {
            let light = Vec3::from(scene.light_dir);
            let lambert = hit.normal.dot(&light).max(0.0);
            let k = scene.ambient + (1.0 - scene.ambient) * lambert;
            scene.primitives[hit.index].albedo.map(|a| a * k)
        }
    }
}

fn pixel_rays(pose: &CameraPose, intr: &Intrinsics) -> Result<Vec<(Vec3, Vec3)>> {
    let mut rays = Vec::with_capacity(intr.width * intr.height);
    for py in 0..intr.height {
        for px in 0..intr.width {
            // Depth range is irrelevant for the analytic tracer.
            let r = ray_through_pixel(pose, intr, px as f64, py as f64, 1e-6, 1.0)?;
            rays.push((r.origin, r.direction));
        }
    }
    Ok(rays)
}

/// Ground-truth `[3, H, W]` image of `scene` from the given camera.
pub fn oracle_render(scene: &SceneSpec, pose: &CameraPose, intr: &Intrinsics) -> Result<Tensor> {
    let (h, w) = (intr.height, intr.width);
    let mut data = vec![0.0; 3 * h * w];
    for (i, (o, d)) in pixel_rays(pose, intr)?.iter().enumerate() {
        let rgb = shade(scene, o, d);
        for ch in 0..3 {
            data[ch * h * w + i] = rgb[ch];
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Index of the primitive seen at each pixel (row-major), `None` on a miss.
pub fn hit_map(scene: &SceneSpec, pose: &CameraPose, intr: &Intrinsics) -> Result<Vec<Option<usize>>> {
    Ok(pixel_rays(pose, intr)?.iter().map(|(o, d)| trace_ray(scene, o, d).map(|h| h.index)).collect())
}

/// Pixels (row-major) where primitive `index` is the visible surface.
pub fn footprint(scene: &SceneSpec, index: usize, pose: &CameraPose, intr: &Intrinsics) -> Result<Vec<bool>> {
    Ok(hit_map(scene, pose, intr)?.iter().map(|h| *h == Some(index)).collect())
}
