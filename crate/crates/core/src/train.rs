//! Training the renderer across many random scenes so that it generalizes to
//! scenes it has never seen.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{Tape, Tensor, Var};
use crate::camera::{ray_through_pixel, SamplingMode};
use crate::error::{Error, Result};
use crate::render::{encode_on_tape, render_image, trace_rays, NetVars, RenderConfig, RendererArch, RendererParams};
use crate::scene::{make_dataset_with, random_scene, shade, MultiViewDataset, RigConfig, SceneSpec};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Size of the training scene pool.
    pub n_scenes: usize,
    /// Source views per step are drawn from `views_min..=views_max`.
    pub views_min: usize,
    pub views_max: usize,
    /// Primitives per scene are drawn from `primitives_min..=primitives_max`.
    pub primitives_min: usize,
    pub primitives_max: usize,
    /// Training image side lengths; each step picks one.
    pub resolutions: Vec<usize>,
    pub rays_per_step: usize,
    pub samples_per_ray: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Held-out evaluation every this many steps (and after the last step).
    pub eval_interval: usize,
    pub eval_scenes: usize,
    pub eval_views: usize,
    pub eval_resolution: usize,
    pub arch: RendererArch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_scenes: 200,
            views_min: 4,
            views_max: 10,
            primitives_min: 2,
            primitives_max: 4,
            resolutions: vec![48],
            rays_per_step: 256,
            samples_per_ray: 32,
            steps: 6000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            eval_interval: 1000,
            eval_scenes: 5,
            eval_views: 10,
            eval_resolution: 48,
            arch: RendererArch::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_scenes,
            self.views_min,
            self.primitives_min,
            self.rays_per_step,
            self.samples_per_ray,
            self.eval_interval,
            self.eval_scenes,
            self.eval_views,
            self.eval_resolution,
        ];
        if counts.contains(&0) || self.resolutions.is_empty() || self.resolutions.contains(&0) {
            return Err(Error::Contract("training counts and resolutions must be >= 1".into()));
        }
        if self.views_min > self.views_max || self.primitives_min > self.primitives_max {
            return Err(Error::Contract("training ranges need min <= max".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Contract("need learning_rate > 0 and betas in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Ray-batch MSE of every step.
    pub loss_curve: Vec<f64>,
    /// Mean held-out PSNR at every evaluation.
    pub eval_curve: Vec<EvalPoint>,
    pub final_psnr: f64,
    pub checkpoint: Option<PathBuf>,
    pub wall_seconds: f64,
}

pub struct TrainOutcome {
    pub params: RendererParams,
    pub report: TrainReport,
}

/// Mean of squared differences over all elements.
pub fn mse_loss(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mse_loss", a.shape(), b.shape()));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mse = mse_loss(a, b)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Adam with bias correction.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &RendererParams, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam { lr, beta1, beta2, eps, t: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, params: &mut RendererParams, grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Seed of the `i`-th scene of a named split; splits never share seeds.
pub fn scene_seed(seed: u64, split: Split, i: usize) -> u64 {
    let base = match split {
        Split::Train => 0,
        Split::Eval => 1 << 40,
        Split::Attack => 2 << 40,
    };
    (seed << 44) ^ (base + i as u64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
    Attack,
}

/// Scene `i` of a split with a seeded primitive count.
pub fn split_scene(seed: u64, split: Split, i: usize, prim_range: (usize, usize)) -> Result<SceneSpec> {
    let s = scene_seed(seed, split, i);
    let n = ChaCha8Rng::seed_from_u64(s ^ 0x5eed).gen_range(prim_range.0..=prim_range.1);
    random_scene(s, n)
}

fn rig(res: usize) -> RigConfig {
    RigConfig { height: res, width: res, ..RigConfig::default() }
}

/// Held-out datasets used for evaluation.
pub fn eval_datasets(cfg: &TrainConfig) -> Result<Vec<MultiViewDataset>> {
    (0..cfg.eval_scenes)
        .map(|i| {
            let scene = split_scene(cfg.seed, Split::Eval, i, (cfg.primitives_min, cfg.primitives_max))?;
            make_dataset_with(&scene, cfg.eval_views, &rig(cfg.eval_resolution), scene_seed(cfg.seed, Split::Eval, i))
        })
        .collect()
}

/// Mean PSNR of the target-view renders of `datasets`.
pub fn evaluate(params: &RendererParams, datasets: &[MultiViewDataset], k: usize) -> Result<f64> {
    let mut total = 0.0;
    for ds in datasets {
        let cfg = RenderConfig::for_dataset(ds, k);
        let t = &ds.target_views[0];
        let img = render_image(params, &ds.source_views, &t.pose, &t.intrinsics, &cfg)?;
        total += psnr(&img, &t.image)?;
    }
    Ok(total / datasets.len() as f64)
}

/// One optimisation step's batch: source views, rays and their true colours.
struct Batch {
    ds: MultiViewDataset,
    rays: Vec<crate::camera::Ray>,
    colors: Vec<f64>,
}

fn draw_batch(cfg: &TrainConfig, scenes: &[SceneSpec], rng: &mut ChaCha8Rng) -> Result<Batch> {
    let scene = scenes.choose(rng).expect("scene pool is non-empty");
    let s = rng.gen_range(cfg.views_min..=cfg.views_max);
    let res = *cfg.resolutions.choose(rng).expect("resolutions are non-empty");
    let rig = rig(res);
    let ds = make_dataset_with(scene, s, &rig, rng.gen())?;
    let az = rng.gen_range(0.0..360.0);
    let el = rig.elevation_deg + rng.gen_range(-rig.jitter_deg..=rig.jitter_deg);
    let pose = rig.camera_at(az, el)?;
    let intr = rig.intrinsics()?;
    let mut rays = Vec::with_capacity(cfg.rays_per_step);
    let mut colors = Vec::with_capacity(3 * cfg.rays_per_step);
    for _ in 0..cfg.rays_per_step {
        let (px, py) = (rng.gen_range(0..res), rng.gen_range(0..res));
        let ray = ray_through_pixel(&pose, &intr, px as f64, py as f64, ds.near, ds.far)?;
        colors.extend(shade(scene, &ray.origin, &ray.direction));
        rays.push(ray);
    }
    Ok(Batch { ds, rays, colors })
}

/// Loss and weight gradients of one batch.
fn batch_grad(params: &RendererParams, batch: &Batch, cfg: &TrainConfig, seed: u64) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let net = NetVars::new(&mut tape, params, true);
    let views = &batch.ds.source_views;
    let maps = views
        .iter()
        .map(|v| {
            let img = tape.constant(v.image.clone());
            encode_on_tape(&mut tape, &net, img)
        })
        .collect::<Result<Vec<Var>>>()?;
    let rcfg = RenderConfig {
        k: cfg.samples_per_ray,
        near: batch.ds.near,
        far: batch.ds.far,
        mode: SamplingMode::Stratified,
        seed,
        chunk_rays: batch.rays.len(),
    };
    let seeds: Vec<u64> = (0..batch.rays.len()).map(|i| crate::render::pixel_seed(seed, i)).collect();
    let rgb = trace_rays(&mut tape, &net, &maps, views, &batch.rays, &seeds, &rcfg)?;
    let truth = tape.constant(Tensor::new(vec![batch.rays.len(), 3], batch.colors.clone())?);
    let diff = tape.sub(rgb, truth)?;
    let sq = tape.mul(diff, diff)?;
    let loss = tape.mean(sq);
    let value = tape.value(loss).item();
    let mut g = tape.backward(loss)?;
    let grads = net.vars().iter().map(|v| g.take(*v).expect("weight gradient")).collect();
    Ok((value, grads))
}

/// Trains from a seeded initialisation. Deterministic given `cfg`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(cfg, |_, _| {})
}

/// [`train`] with a progress callback receiving `(step, loss)` after every step.
pub fn train_with(cfg: &TrainConfig, mut progress: impl FnMut(usize, f64)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let mut params = RendererParams::init(cfg.arch, cfg.seed)?;
    let scenes = (0..cfg.n_scenes)
        .map(|i| split_scene(cfg.seed, Split::Train, i, (cfg.primitives_min, cfg.primitives_max)))
        .collect::<Result<Vec<_>>>()?;
    let held_out = eval_datasets(cfg)?;
    let mut adam = Adam::new(&params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    let mut eval_curve = Vec::new();
    for step in 0..cfg.steps {
        let batch = draw_batch(cfg, &scenes, &mut rng)?;
        let (loss, grads) = batch_grad(&params, &batch, cfg, rng.gen())?;
        if !loss.is_finite() || !grads.iter().all(Tensor::all_finite) {
            return Err(Error::Divergence { step, loss });
        }
        adam.step(&mut params, &grads);
        loss_curve.push(loss);
        progress(step, loss);
        if (step + 1) % cfg.eval_interval == 0 && step + 1 < cfg.steps {
            eval_curve.push(EvalPoint { step: step + 1, psnr: evaluate(&params, &held_out, cfg.samples_per_ray)? });
        }
    }
    let final_psnr = evaluate(&params, &held_out, cfg.samples_per_ray)?;
    eval_curve.push(EvalPoint { step: cfg.steps, psnr: final_psnr });
    Ok(TrainOutcome {
        params,
        report: TrainReport {
            loss_curve,
            eval_curve,
            final_psnr,
            checkpoint: None,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    })
}

/// Moving average of `curve` over the `window` values ending at `end`.
pub fn smoothed(curve: &[f64], end: usize, window: usize) -> f64 {
    let lo = end.saturating_sub(window);
    let slice = &curve[lo..end];
    slice.iter().sum::<f64>() / slice.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            n_scenes: 1,
            views_min: 3,
            views_max: 3,
            primitives_min: 2,
            primitives_max: 2,
            resolutions: vec![12],
            rays_per_step: 32,
            samples_per_ray: 8,
            steps: 5,
            eval_interval: 2,
            eval_scenes: 1,
            eval_views: 3,
            eval_resolution: 12,
            arch: RendererArch { enc_hidden: 4, c_feat: 4, mlp_hidden: 8, d_sigma: 4 },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn mse_values() {
        let a = Tensor::from_fn(&[3, 2, 2], |i| i as f64 / 12.0);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.1);
        assert!((mse_loss(&a, &b).unwrap() - 0.01).abs() < 1e-15);
        assert!(matches!(mse_loss(&a, &Tensor::zeros(&[3, 2, 1])), Err(Error::Shape { .. })));
    }

    #[test]
    fn psnr_values() {
        let a = Tensor::full(&[3, 4, 4], 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-12);
        let c = Tensor::from_fn(&[3, 4, 4], |i| (i as f64 * 0.37).fract());
        assert_eq!(psnr(&a, &c).unwrap(), psnr(&c, &a).unwrap());
    }

    #[test]
    fn zero_steps_keep_initial_weights() {
        let cfg = TrainConfig { steps: 0, ..tiny() };
        let out = train(&cfg).unwrap();
        assert!(out.report.loss_curve.is_empty());
        assert_eq!(out.params, RendererParams::init(cfg.arch, cfg.seed).unwrap());
        assert_eq!(out.report.eval_curve.len(), 1);
        assert!(out.report.final_psnr.is_finite());
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny();
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        let bits = |c: &[f64]| c.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.report.loss_curve), bits(&b.report.loss_curve));
        assert_eq!(a.params, b.params);
        assert_eq!(a.report.eval_curve.len(), 3);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(train(&TrainConfig { learning_rate: 0.0, ..tiny() }).is_err());
        assert!(train(&TrainConfig { views_min: 4, views_max: 3, ..tiny() }).is_err());
        assert!(train(&TrainConfig { resolutions: vec![], ..tiny() }).is_err());
    }

    #[test]
    fn exploding_learning_rate_reports_divergence() {
        let cfg = TrainConfig { learning_rate: 1e300, steps: 50, ..tiny() };
        match train(&cfg) {
            Err(Error::Divergence { step, .. }) => assert!(step < 50),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.report.final_psnr)),
        }
    }

    #[test]
    fn split_seeds_are_disjoint() {
        let train: std::collections::BTreeSet<u64> = (0..500).map(|i| scene_seed(3, Split::Train, i)).collect();
        assert!((0..500).all(|i| !train.contains(&scene_seed(3, Split::Eval, i))));
        assert!((0..500).all(|i| !train.contains(&scene_seed(3, Split::Attack, i))));
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = RendererParams::zeros(tiny().arch).unwrap();
        let grads: Vec<Tensor> = p.tensors().iter().map(|t| Tensor::full(t.shape(), -3.0)).collect();
        let mut adam = Adam::new(&p, 0.01, 0.9, 0.999, 0.0);
        adam.step(&mut p, &grads);
        assert!(p.tensors().iter().all(|t| t.data().iter().all(|v| (v - 0.01).abs() < 1e-15)));
    }
}
