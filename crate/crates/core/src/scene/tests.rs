use super::*;
use crate::ad::Tensor;
use crate::camera::project;
use std::path::Path;

fn view() -> (CameraPose, Intrinsics) {
    let rig = RigConfig::default();
    (rig.camera_at(10.0, 25.0).unwrap(), rig.intrinsics().unwrap())
}

#[test]
fn random_scene_is_deterministic() {
    assert_eq!(random_scene(42, 3).unwrap(), random_scene(42, 3).unwrap());
    assert_ne!(random_scene(42, 3).unwrap(), random_scene(43, 3).unwrap());
    assert_eq!(random_scene(7, 1).unwrap().primitives.len(), 1);
    assert!(matches!(random_scene(7, 0), Err(Error::Contract(_))));
}

#[test]
fn random_scene_property_sweep() {
    for seed in 0..1000 {
        let s = random_scene(seed, 1 + (seed as usize % 4)).unwrap();
        s.validate().unwrap();
        for (i, p) in s.primitives.iter().enumerate() {
            assert!(p.center_vec().norm() + p.bounding_radius() <= WORKING_VOLUME_RADIUS + 1e-12);
            for q in &s.primitives[i + 1..] {
                assert!((p.center_vec() - q.center_vec()).norm() >= MIN_CENTER_SPACING);
            }
        }
    }
}

#[test]
fn empty_scene_renders_background() {
    let (pose, intr) = view();
    let bg = [0.2, 0.4, 0.6];
    let img = oracle_render(&SceneSpec::empty(bg), &pose, &intr).unwrap();
    let hw = intr.width * intr.height;
    for ch in 0..3 {
        assert!(img.data()[ch * hw..(ch + 1) * hw].iter().all(|&v| v == bg[ch]));
    }
}

#[test]
fn sphere_on_axis_projects_to_disk() {
    let intr = Intrinsics::centered(80.0, 64, 64).unwrap();
    let pose = CameraPose::identity();
    let z = 4.0;
    let r = 0.5;
    let mut scene = SceneSpec::empty([0.0; 3]);
    scene.light_dir = [0.0, 0.0, -1.0];
    scene.ambient = 0.3;
    scene.primitives.push(ScenePrimitive::sphere([0.0, 0.0, z], r, [0.8, 0.6, 0.4]));
    let hits = hit_map(&scene, &pose, &intr).unwrap();
    let expect_r = 80.0 * r / z;
    for py in 0..64 {
        for px in 0..64 {
            let d = ((px as f64 + 0.5 - 32.0).powi(2) + (py as f64 + 0.5 - 32.0).powi(2)).sqrt();
            let hit = hits[py * 64 + px].is_some();
            if d < expect_r - 1.0 {
                assert!(hit, "({px},{py}) d={d}");
            }
            if d > expect_r + 1.0 {
                assert!(!hit, "({px},{py}) d={d}");
            }
        }
    }
    // Centre pixel faces the light head-on: full albedo.
    let img = oracle_render(&scene, &pose, &intr).unwrap();
    let centre = 31 * 64 + 31;
    assert!((img.data()[centre] - 0.8).abs() < 2e-3);
}

#[test]
fn box_faces_and_shading_range() {
    let intr = Intrinsics::centered(60.0, 32, 32).unwrap();
    let pose = CameraPose::look_at(Vec3::new(3.0, 0.0, 0.0), Vec3::zeros(), Vec3::z()).unwrap();
    let mut scene = SceneSpec::empty([0.1; 3]);
    scene.light_dir = [1.0, 0.0, 0.0];
    scene.ambient = 0.2;
    scene.primitives.push(ScenePrimitive::aabb([0.0; 3], [0.5, 0.5, 0.5], [0.5, 1.0, 0.25]));
    let hit = trace_ray(&scene, &Vec3::new(3.0, 0.0, 0.0), &Vec3::new(-1.0, 0.0, 0.0)).unwrap();
    assert!((hit.t - 2.5).abs() < 1e-12);
    assert_eq!(hit.normal, Vec3::new(1.0, 0.0, 0.0));
    let img = oracle_render(&scene, &pose, &intr).unwrap();
    assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let c = 16 * 32 + 16;
    assert!((img.data()[c] - 0.5).abs() < 1e-12);
}

#[test]
fn rendering_is_bitwise_deterministic() {
    let s = random_scene(5, 3).unwrap();
    let (pose, intr) = view();
    let a = oracle_render(&s, &pose, &intr).unwrap();
    let b = oracle_render(&s, &pose, &intr).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn delete_only_primitive_gives_background() {
    let (pose, intr) = view();
    let mut scene = SceneSpec::empty([0.3, 0.2, 0.1]);
    scene.primitives.push(ScenePrimitive::sphere([0.0; 3], 0.4, [0.9; 3]));
    let edited = apply_edit(&scene, &SceneEdit::Delete { target_index: 0 }, (&pose, &intr)).unwrap();
    assert!(edited.primitives.is_empty());
    let img = oracle_render(&edited, &pose, &intr).unwrap();
    assert_eq!(img, oracle_render(&SceneSpec::empty([0.3, 0.2, 0.1]), &pose, &intr).unwrap());
}

#[test]
fn edit_errors() {
    let (pose, intr) = view();
    let scene = random_scene(3, 2).unwrap();
    let err = apply_edit(&scene, &SceneEdit::Delete { target_index: 5 }, (&pose, &intr)).unwrap_err();
    assert!(matches!(err, Error::Range(_)));
    // Behind the camera.
    let behind = pose.center() * 1.5;
    let add = SceneEdit::Add { new_primitive: ScenePrimitive::sphere(behind.into(), 0.3, [0.5; 3]) };
    assert!(matches!(apply_edit(&scene, &add, (&pose, &intr)), Err(Error::Visibility)));
    let neg = SceneEdit::Modify { target_index: 0, new_primitive: ScenePrimitive::sphere([0.0; 3], -1.0, [0.5; 3]) };
    assert!(apply_edit(&scene, &neg, (&pose, &intr)).is_err());
}

#[test]
fn albedo_modify_changes_exactly_the_footprint() {
    let (pose, intr) = view();
    let mut scene = SceneSpec::empty([0.1, 0.1, 0.1]);
    scene.primitives.push(ScenePrimitive::sphere([0.0, 0.0, 0.0], 0.35, [0.9, 0.1, 0.1]));
    scene.primitives.push(ScenePrimitive::aabb([0.5, -0.4, 0.0], [0.2; 3], [0.2, 0.2, 0.9]));
    let green = ScenePrimitive::sphere([0.0, 0.0, 0.0], 0.35, [0.1, 0.9, 0.1]);
    let edited =
        apply_edit(&scene, &SceneEdit::Modify { target_index: 0, new_primitive: green }, (&pose, &intr)).unwrap();
    let a = oracle_render(&scene, &pose, &intr).unwrap();
    let b = oracle_render(&edited, &pose, &intr).unwrap();
    let fp = footprint(&scene, 0, &pose, &intr).unwrap();
    let hw = intr.width * intr.height;
    assert!(fp.iter().any(|&f| f));
    for p in 0..hw {
        let differs = (0..3).any(|ch| a.data()[ch * hw + p] != b.data()[ch * hw + p]);
        assert_eq!(differs, fp[p], "pixel {p}");
    }
}

#[test]
fn delete_changes_exactly_the_visible_footprint() {
    for seed in 0..20 {
        let scene = random_scene(seed, 3).unwrap();
        let (pose, intr) = view();
        let idx = (seed as usize) % 3;
        let edited = apply_edit(&scene, &SceneEdit::Delete { target_index: idx }, (&pose, &intr)).unwrap();
        let a = oracle_render(&scene, &pose, &intr).unwrap();
        let b = oracle_render(&edited, &pose, &intr).unwrap();
        let fp = footprint(&scene, idx, &pose, &intr).unwrap();
        let hw = intr.width * intr.height;
        for p in 0..hw {
            let differs = (0..3).any(|ch| a.data()[ch * hw + p] != b.data()[ch * hw + p]);
            // A revealed surface may coincidentally match in colour, never the reverse.
            assert!(!differs || fp[p], "seed {seed} pixel {p} changed outside footprint");
            if fp[p] && !differs {
                let after = hit_map(&edited, &pose, &intr).unwrap()[p];
                assert!(after.is_some() || scene.background == [0.0; 3]);
            }
        }
    }
}

#[test]
fn chosen_edits_are_valid_and_visible() {
    let (pose, intr) = view();
    for seed in 0..12 {
        let scene = random_scene(seed, 3).unwrap();
        for kind in [EditKind::Modify, EditKind::Delete, EditKind::Add] {
            let edit = choose_edit(&scene, kind, (&pose, &intr), seed).unwrap();
            assert_eq!(edit.kind(), kind);
            let edited = apply_edit(&scene, &edit, (&pose, &intr)).unwrap();
            let a = oracle_render(&scene, &pose, &intr).unwrap();
            let b = oracle_render(&edited, &pose, &intr).unwrap();
            assert_ne!(a, b, "seed {seed} {kind:?} had no visible effect");
        }
    }
}

#[test]
fn dataset_layout() {
    let scene = random_scene(1, 3).unwrap();
    let ds = make_dataset(&scene, 4, 4.0, 24, 24, 9).unwrap();
    assert_eq!(ds.source_views.len(), 4);
    assert_eq!(ds.target_views.len(), 1);
    assert_eq!((ds.near, ds.far), (2.8, 5.2));
    // Without jitter the azimuths are exactly 90 degrees apart.
    let rig = RigConfig { height: 24, width: 24, jitter_deg: 0.0, ..RigConfig::default() };
    let ds0 = make_dataset_with(&scene, 4, &rig, 9).unwrap();
    let az: Vec<f64> = ds0
        .source_views
        .iter()
        .map(|v| {
            let c = v.pose.center();
            c.y.atan2(c.x).to_degrees().rem_euclid(360.0)
        })
        .collect();
    for (i, a) in az.iter().enumerate() {
        assert!((a - 90.0 * i as f64).abs() < 1e-9 || (a - 90.0 * i as f64).abs() > 359.999);
    }
    // Every camera looks at the origin.
    for v in &ds.source_views {
        let p = project(&Vec3::zeros(), &v.pose, &v.intrinsics);
        assert!((p.u - 12.0).abs() < 1e-9 && (p.v - 12.0).abs() < 1e-9);
    }
    let ten = make_dataset(&scene, 10, 4.0, 16, 16, 2).unwrap();
    assert_eq!((ten.source_views.len(), ten.target_views.len()), (10, 1));
    let t = &ten.target_views[0];
    assert!(ten.source_views.iter().all(|s| s.pose != t.pose));
    assert_eq!(t.image, oracle_render(&scene, &t.pose, &t.intrinsics).unwrap());
}

fn max_pixel_l2(a: &Tensor, b: &Tensor) -> (f64, f64) {
    let hw = a.shape()[1] * a.shape()[2];
    let mut worst: f64 = 0.0;
    let mut sum = 0.0;
    for p in 0..hw {
        let d: f64 = (0..3).map(|c| (a.data()[c * hw + p] - b.data()[c * hw + p]).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(d);
        sum += d;
    }
    (worst, sum / hw as f64)
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let scene = random_scene(11, 3).unwrap();
    let ds = make_dataset(&scene, 5, 4.0, 20, 18, 3).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.scene, ds.scene);
    assert_eq!((back.near, back.far), (ds.near, ds.far));
    for (a, b) in ds.source_views.iter().chain(&ds.target_views).zip(back.source_views.iter().chain(&back.target_views))
    {
        assert_eq!(a.pose.to_row_major().map(f64::to_bits), b.pose.to_row_major().map(f64::to_bits));
        assert_eq!(a.intrinsics, b.intrinsics);
        let q = a.image.map(|v| ppm::quantize(v) as f64 / 255.0);
        assert_eq!(q, b.image);
        // Rounding moves each channel by at most half a level; flat regions
        // share one rounding error, so the mean can sit near the worst case.
        let bound = 3f64.sqrt() * 0.5 / 255.0 + 1e-15;
        let (worst, mean) = max_pixel_l2(&a.image, &b.image);
        assert!(worst <= bound, "{worst}");
        assert!(mean <= bound, "{mean}");
    }
}

fn corrupt(dir: &Path, f: impl FnOnce(&mut serde_json::Value)) {
    let p = dir.join("manifest.json");
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
    f(&mut v);
    std::fs::write(&p, serde_json::to_string(&v).unwrap()).unwrap();
}

#[test]
fn dataset_validation_errors() {
    let scene = random_scene(12, 2).unwrap();
    let ds = make_dataset(&scene, 10, 4.0, 8, 8, 3).unwrap();

    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    corrupt(dir.path(), |v| {
        v["source_views"].as_array_mut().unwrap().pop();
    });
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Format { ref field, .. } if field == "source_views"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("source_09.ppm")).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Io { .. })));

    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let img = dir.path().join("source_03.ppm");
    let bytes = std::fs::read(&img).unwrap();
    std::fs::write(&img, &bytes[..bytes.len() - 10]).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains("source_03.ppm"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    corrupt(dir.path(), |v| {
        v["source_views"][0]["pose"][0] = serde_json::json!(2.0);
    });
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Format { ref field, .. } if field.contains("pose")), "{err}");

    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    std::fs::write(dir.path().join("manifest.json"), "{ not json").unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));
}
