use std::path::Path;
use std::time::Instant;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::scene::{make_dataset, random_scene};

fn dataset(s: usize, h: usize, w: usize, seed: u64) -> MultiViewDataset {
    let scene = random_scene(seed, 3).unwrap();
    make_dataset(&scene, s, 4.0, h, w, seed).unwrap()
}

fn target(ds: &MultiViewDataset) -> (&CameraPose, &Intrinsics) {
    (&ds.target_views[0].pose, &ds.target_views[0].intrinsics)
}

fn params(seed: u64) -> RendererParams {
    RendererParams::init(RendererArch::default(), seed).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.zip_map(b, |x, y| x - y).unwrap().max_abs()
}

#[test]
fn zero_images_and_biases_give_zero_features() {
    let mut p = params(1);
    for (i, (_, shape)) in p.arch().layout().into_iter().enumerate() {
        if shape.len() == 1 {
            p.tensors_mut()[i] = Tensor::zeros(&shape);
        }
    }
    let mut ds = dataset(2, 6, 7, 1);
    for v in &mut ds.source_views {
        v.image = Tensor::zeros(v.image.shape());
    }
    let maps = encode_views(&p, &ds.source_views).unwrap();
    assert!(maps.iter().all(|m| m.max_abs() == 0.0));
}

#[test]
fn ten_views_give_ten_full_size_maps() {
    let ds = dataset(10, 48, 48, 2);
    let maps = encode_views(&params(2), &ds.source_views).unwrap();
    assert_eq!(maps.len(), 10);
    assert!(maps.iter().all(|m| m.shape() == [16, 48, 48]));
}

#[test]
fn mixed_view_sizes_are_rejected() {
    let mut ds = dataset(2, 6, 6, 3);
    ds.source_views[1].image = Tensor::zeros(&[3, 6, 5]);
    let err = encode_views(&params(3), &ds.source_views).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }), "{err}");
}

#[test]
fn encoder_pixel_gradient_matches_finite_differences() {
    let p = params(4);
    let ds = dataset(1, 6, 6, 4);
    let f = |tape: &mut Tape, img: Var| {
        let net = NetVars::new(tape, &p, false);
        let map = encode_on_tape(tape, &net, img)?;
        Ok(tape.sum(map))
    };
    let coords: Vec<usize> = (0..ds.source_views[0].image.len()).step_by(7).collect();
    let err = crate::ad::gradcheck::check_gradients_at(f, &ds.source_views[0].image, 1e-5, &coords).unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn aggregation_single_view_has_zero_variance() {
    let f = Tensor::from_fn(&[5, 4], |i| i as f64 * 0.3 - 1.0);
    let out = aggregate_features(std::slice::from_ref(&f), &[true; 5]).unwrap();
    for r in 0..5 {
        assert_eq!(&out.data()[r * 8..r * 8 + 4], &f.data()[r * 4..r * 4 + 4]);
        assert!(out.data()[r * 8 + 4..r * 8 + 8].iter().all(|v| *v == 0.0));
    }
}

#[test]
fn aggregation_identical_views() {
    let f = Tensor::from_fn(&[3, 2], |i| (i as f64).sin());
    let out = aggregate_features(&[f.clone(), f.clone(), f.clone()], &[true; 9]).unwrap();
    for r in 0..3 {
        for c in 0..2 {
            assert!((out.data()[r * 4 + c] - f.data()[r * 2 + c]).abs() < 1e-15);
            assert!(out.data()[r * 4 + 2 + c].abs() < 1e-15);
        }
    }
}

#[test]
fn aggregation_two_of_four_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let feats: Vec<Tensor> = (0..4).map(|_| Tensor::from_fn(&[1, 3], |_| rng.gen_range(-1.0..1.0))).collect();
    let valid = [false, true, false, true];
    let out = aggregate_features(&feats, &valid).unwrap();
    for c in 0..3 {
        let (a, b) = (feats[1].data()[c], feats[3].data()[c]);
        let mean = (a + b) / 2.0;
        let var = ((a - mean).powi(2) + (b - mean).powi(2)) / 2.0;
        assert!((out.data()[c] - mean).abs() < 1e-15);
        assert!((out.data()[3 + c] - var).abs() < 1e-15);
    }
    let none = aggregate_features(&feats, &[false; 4]).unwrap();
    assert!(none.data().iter().all(|v| *v == 0.0));
}

#[test]
fn volume_render_empty_space() {
    let out = volume_render(&[[0.3, 0.6, 0.9]; 4], &[0.0; 4], &[1.0, 2.0, 3.0, 4.0], 5.0).unwrap();
    assert_eq!(out.rgb, [0.0; 3]);
    assert!(out.weights.iter().all(|w| *w == 0.0));
}

#[test]
fn volume_render_opaque_first_sample() {
    let colors = [[0.2, 0.4, 0.8], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
    let out = volume_render(&colors, &[1e6, 5.0, 5.0], &[1.0, 1.001, 1.5], 2.0).unwrap();
    for ch in 0..3 {
        assert!((out.rgb[ch] - colors[0][ch]).abs() < 1e-6);
    }
}

#[test]
fn volume_render_two_sample_example() {
    let out = volume_render(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], &[1.0, 2.0], &[0.25, 0.75], 1.0).unwrap();
    let w1 = 1.0 - (-0.5f64).exp();
    let w2 = (-0.5f64).exp() * (1.0 - (-0.5f64).exp());
    assert!((out.weights[0] - w1).abs() < 1e-15);
    assert!((out.weights[1] - w2).abs() < 1e-15);
    assert!((out.rgb[0] - 0.39347).abs() < 5e-6);
    assert!((out.rgb[1] - 0.23865).abs() < 5e-6);
    assert_eq!(out.rgb[2], 0.0);
}

#[test]
fn volume_render_rejects_bad_depths() {
    let c = [[0.0; 3]; 2];
    assert!(volume_render(&c, &[1.0, 1.0], &[0.5, 0.5], 1.0).is_err());
    assert!(volume_render(&c, &[1.0, 1.0], &[0.6, 0.5], 1.0).is_err());
    assert!(volume_render(&c, &[1.0, -1.0], &[0.4, 0.5], 1.0).is_err());
}

proptest! {
    #[test]
    fn tape_composite_matches_direct_evaluation(
        sigma in prop::collection::vec(0.0f64..50.0, 6),
        gaps in prop::collection::vec(1e-3f64..0.5, 6),
        colors in prop::collection::vec(0.0f64..1.0, 18),
    ) {
        let mut t = Vec::new();
        let mut acc = 1.0;
        for g in &gaps {
            t.push(acc);
            acc += g;
        }
        let far = acc;
        let cols: Vec<[f64; 3]> = colors.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let direct = volume_render(&cols, &sigma, &t, far).unwrap();
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::new(vec![1, 6], sigma.clone()).unwrap());
        let c = tape.constant(Tensor::new(vec![1, 6, 3], colors.clone()).unwrap());
        let out = tape.composite(s, c, &gaps).unwrap();
        for ch in 0..3 {
            prop_assert!((tape.value(out).data()[ch] - direct.rgb[ch]).abs() < 1e-14);
        }
        let total: f64 = direct.weights.iter().sum();
        prop_assert!(direct.weights.iter().all(|w| *w >= 0.0));
        prop_assert!(total <= 1.0 + 1e-15);
    }
}

#[test]
fn zero_network_renders_uniform_image() {
    let p = RendererParams::zeros(RendererArch::default()).unwrap();
    let ds = dataset(3, 8, 8, 6);
    let (pose, intr) = target(&ds);
    let img = render_image(&p, &ds.source_views, pose, intr, &RenderConfig::for_dataset(&ds, 8)).unwrap();
    let first = [img.data()[0], img.data()[64], img.data()[128]];
    for px in 0..64 {
        for ch in 0..3 {
            assert_eq!(img.data()[ch * 64 + px], first[ch]);
        }
    }
    // sigma = ln 2 everywhere, colour 0.5; integration starts at the first midpoint.
    let t1 = ds.near + (ds.far - ds.near) / 16.0;
    let opacity = 1.0 - (-(2f64.ln()) * (ds.far - t1)).exp();
    assert!((first[0] - 0.5 * opacity).abs() < 1e-12);
}

#[test]
fn source_view_order_does_not_matter() {
    let p = params(7);
    let ds = dataset(4, 10, 10, 7);
    let (pose, intr) = target(&ds);
    let cfg = RenderConfig::for_dataset(&ds, 8);
    let a = render_image(&p, &ds.source_views, pose, intr, &cfg).unwrap();
    let mut views = ds.source_views.clone();
    views.reverse();
    views.swap(0, 2);
    let b = render_image(&p, &views, pose, intr, &cfg).unwrap();
    assert!(max_abs_diff(&a, &b) <= 1e-12);
}

#[test]
fn rendered_values_lie_in_unit_interval() {
    let p = params(8);
    let ds = dataset(3, 12, 12, 8);
    let (pose, intr) = target(&ds);
    let img = render_image(&p, &ds.source_views, pose, intr, &RenderConfig::for_dataset(&ds, 16)).unwrap();
    assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn one_pixel_image_equals_render_pixel() {
    let p = params(9);
    let ds = dataset(3, 9, 9, 9);
    let mut views = ds.source_views.clone();
    for v in &mut views {
        v.intrinsics = Intrinsics::new(v.intrinsics.fx, v.intrinsics.fy, 0.5, 0.5, 1, 1).unwrap();
        v.image = Tensor::from_fn(&[3, 1, 1], |c| 0.2 + 0.3 * c as f64);
    }
    let intr = views[0].intrinsics;
    let mut cfg = RenderConfig::for_dataset(&ds, 8);
    cfg.mode = SamplingMode::Stratified;
    cfg.seed = 77;
    let pose = &ds.target_views[0].pose;
    let img = render_image(&p, &views, pose, &intr, &cfg).unwrap();
    let feats = encode_views(&p, &views).unwrap();
    let ray = ray_through_pixel(pose, &intr, 0.0, 0.0, cfg.near, cfg.far).unwrap();
    let px = render_pixel(&p, &feats, &views, &ray, &cfg).unwrap();
    assert_eq!(img.data(), &px);
}

#[test]
fn rendering_is_deterministic_and_chunking_invariant() {
    let p = params(10);
    let ds = dataset(3, 10, 10, 10);
    let (pose, intr) = target(&ds);
    let mut cfg = RenderConfig::for_dataset(&ds, 8);
    cfg.mode = SamplingMode::Stratified;
    cfg.seed = 3;
    let a = render_image(&p, &ds.source_views, pose, intr, &cfg).unwrap();
    let b = render_image(&p, &ds.source_views, pose, intr, &cfg).unwrap();
    assert_eq!(a, b);
    cfg.chunk_rays = 7;
    let c = render_image(&p, &ds.source_views, pose, intr, &cfg).unwrap();
    assert!(max_abs_diff(&a, &c) < 1e-12);
    cfg.seed = 4;
    let d = render_image(&p, &ds.source_views, pose, intr, &cfg).unwrap();
    assert_ne!(a, d);
}

#[test]
fn compositing_weights_are_bounded_on_real_rays() {
    let p = params(11);
    let ds = dataset(3, 8, 8, 11);
    let (pose, intr) = target(&ds);
    let cfg = RenderConfig::for_dataset(&ds, 8);
    let feats = encode_views(&p, &ds.source_views).unwrap();
    let mut tape = Tape::new();
    let net = NetVars::new(&mut tape, &p, false);
    let maps: Vec<Var> = feats.iter().map(|f| tape.constant(f.clone())).collect();
    let rays = pixel_rays(pose, intr, &cfg).unwrap();
    let seeds = vec![0; rays.len()];
    let out = trace_rays(&mut tape, &net, &maps, &ds.source_views, &rays, &seeds, &cfg).unwrap();
    let w = tape.composite_weights(out).unwrap();
    for row in w.chunks(8) {
        assert!(row.iter().all(|v| *v >= 0.0));
        assert!(row.iter().sum::<f64>() <= 1.0 + 1e-12);
    }
}

#[test]
fn mse_grad_image_matches_forward_render() {
    let p = params(12);
    let ds = dataset(3, 8, 8, 12);
    let (pose, intr) = target(&ds);
    let cfg = RenderConfig { chunk_rays: 13, ..RenderConfig::for_dataset(&ds, 8) };
    let img = render_image(&p, &ds.source_views, pose, intr, &cfg).unwrap();
    let offset = img.map(|v| v + 0.1);
    let g = image_mse_grad(&p, &ds.source_views, &[true, false, true], pose, intr, &offset, &cfg).unwrap();
    assert!(max_abs_diff(&g.image, &img) < 1e-12);
    assert!((g.loss - 0.01).abs() < 1e-12);
    assert!(g.grads[0].is_some() && g.grads[1].is_none() && g.grads[2].is_some());
    let same = image_mse_grad(&p, &ds.source_views, &[false; 3], pose, intr, &img, &cfg).unwrap();
    assert!(same.loss < 1e-24);
}

/// Loss evaluated with view `view`'s pixel `i` replaced.
fn loss_at(
    p: &RendererParams,
    ds: &MultiViewDataset,
    goal: &Tensor,
    cfg: &RenderConfig,
    view: usize,
    i: usize,
    v: f64,
) -> f64 {
    let mut views = ds.source_views.clone();
    views[view].image.data_mut()[i] = v;
    let (pose, intr) = target(ds);
    let img = render_image(p, &views, pose, intr, cfg).unwrap();
    img.zip_map(goal, |a, b| (a - b).powi(2)).unwrap().sum() / img.len() as f64
}

#[test]
fn end_to_end_pixel_gradient_matches_finite_differences() {
    let p = params(13);
    let ds = dataset(3, 8, 8, 13);
    let (pose, intr) = target(&ds);
    let cfg = RenderConfig::for_dataset(&ds, 8);
    let goal = ds.target_views[0].image.map(|v| 1.0 - v);
    let g = image_mse_grad(&p, &ds.source_views, &[true; 3], pose, intr, &goal, &cfg).unwrap();
    let h = 1e-4;
    let (mut checked, mut kinked) = (0, 0);
    for view in 0..3 {
        let grad = g.grads[view].as_ref().unwrap();
        let mut order: Vec<usize> = (0..grad.len()).collect();
        order.sort_by(|a, b| grad.data()[*b].abs().total_cmp(&grad.data()[*a].abs()));
        let mut done = 0;
        for &i in order.iter().take(10) {
            if done == 4 {
                break;
            }
            let x = ds.source_views[view].image.data()[i];
            let (up, mid, down) =
                (loss_at(&p, &ds, &goal, &cfg, view, i, x + h), g.loss, loss_at(&p, &ds, &goal, &cfg, view, i, x - h));
            // A relu switching inside [x - h, x + h] makes the one-sided
            // slopes disagree; the central difference is no oracle there.
            let (fwd, bwd) = ((up - mid) / h, (mid - down) / h);
            if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()) {
                kinked += 1;
                continue;
            }
            let fd = (up - down) / (2.0 * h);
            let ad = grad.data()[i];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-12);
            assert!(rel < 1e-3, "view {view} pixel {i}: ad {ad} fd {fd} rel {rel}");
            done += 1;
        }
        checked += done;
    }
    assert_eq!(checked, 12, "{kinked} stencils straddled a kink");
}

#[test]
fn full_size_render_fits_time_budget() {
    let p = params(14);
    let ds = dataset(10, 48, 48, 14);
    let (pose, intr) = target(&ds);
    let cfg = RenderConfig::for_dataset(&ds, 32);
    let start = Instant::now();
    let img = render_image(&p, &ds.source_views, pose, intr, &cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(img.shape(), [3, 48, 48]);
    assert!(secs < 30.0, "render took {secs:.1}s");
}

#[test]
fn checkpoint_round_trip_and_validation() {
    let p = params(15);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    p.save(&path).unwrap();
    assert_eq!(RendererParams::load(&path).unwrap(), p);

    let bytes = p.to_bytes();
    let file = Path::new("m.ckpt");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(RendererParams::from_bytes(&bad, file), Err(Error::Format { ref field, .. }) if field == "magic"));
    assert!(matches!(RendererParams::from_bytes(&bytes[..bytes.len() - 3], file), Err(Error::Format { .. })));
    // Pretend the encoder is wider than its tensors.
    let mut wide = bytes.clone();
    wide[12] = 17;
    let err = RendererParams::from_bytes(&wide, file).unwrap_err();
    assert!(err.to_string().contains("enc1.weight"), "{err}");
    let mut extra = bytes;
    extra.push(0);
    assert!(RendererParams::from_bytes(&extra, file).is_err());
}

#[test]
fn params_reject_wrong_shapes() {
    let p = params(16);
    let mut t = p.tensors().to_vec();
    t[3] = Tensor::zeros(&[5]);
    assert!(RendererParams::from_tensors(p.arch(), t).is_err());
    assert_eq!(p.get("sigma.bias").unwrap().data(), &[-1.0]);
}
