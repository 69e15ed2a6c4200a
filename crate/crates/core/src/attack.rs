//! Targeted attacks on the source views: the rendered target view is pushed
//! toward an edited ground-truth image by perturbing source pixels only.
//!
//! Two threat models are implemented. The low-intensity attack may change
//! every pixel of the attacked views by at most `epsilon` (momentum iterative
//! FGSM with projection). The patch attack may set a centred square of each
//! attacked view to arbitrary values in `[0, 1]`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ad::Tensor;
use crate::error::{Error, Result};
use crate::render::{image_mse_grad, render_image, RenderConfig, RendererParams};
use crate::scene::{MultiViewDataset, SourceView};
use crate::train::mse_loss;

/// Distance below which an attack counts as successful.
pub const SUCCESS_THRESHOLD: f64 = 0.015;

const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    LowIntensity,
    Patch,
}

impl AttackMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackMode::LowIntensity => "low_intensity",
            AttackMode::Patch => "patch",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub mode: AttackMode,
    /// l-infinity budget around the original views (low-intensity only).
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub momentum_mu: f64,
    /// One flag per source view.
    pub attacked_mask: Vec<bool>,
    /// Side of the square patch (patch mode only).
    pub patch_size: usize,
    pub samples_per_ray: usize,
    pub success_threshold: f64,
    pub seed: u64,
}

impl AttackConfig {
    /// `epsilon = 0.01`, step `epsilon / 10`, `mu = 0.9`, 1000 steps.
    pub fn low_intensity(attacked_mask: Vec<bool>) -> Self {
        AttackConfig {
            mode: AttackMode::LowIntensity,
            epsilon: 0.01,
            steps: 1000,
            step_size: 0.001,
            momentum_mu: 0.9,
            attacked_mask,
            patch_size: 0,
            samples_per_ray: 32,
            success_threshold: SUCCESS_THRESHOLD,
            seed: 0,
        }
    }

    /// Step 0.05, `mu = 0.9`, 1000 steps.
    pub fn patch(attacked_mask: Vec<bool>, patch_size: usize) -> Self {
        AttackConfig {
            mode: AttackMode::Patch,
            epsilon: 0.0,
            step_size: 0.05,
            patch_size,
            ..Self::low_intensity(attacked_mask)
        }
    }

    pub fn attacked_count(&self) -> usize {
        self.attacked_mask.iter().filter(|b| **b).count()
    }

    /// Checks the config against a dataset of `s` views of `h x w` pixels.
    pub fn validate(&self, s: usize, h: usize, w: usize) -> Result<()> {
        if !(self.epsilon >= 0.0) || !(self.step_size >= 0.0) {
            return Err(Error::Contract("epsilon and step_size must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum_mu) {
            return Err(Error::Contract(format!("momentum_mu {} outside [0, 1)", self.momentum_mu)));
        }
        if self.attacked_mask.len() != s {
            return Err(Error::shape("attacked_mask", &[self.attacked_mask.len()], &[s]));
        }
        if self.steps > 0 && self.attacked_count() == 0 {
            return Err(Error::Contract("steps > 0 but no source view is attacked".into()));
        }
        if self.mode == AttackMode::Patch && self.patch_size > h.min(w) {
            return Err(Error::Contract(format!("patch of {} px does not fit a {h}x{w} image", self.patch_size)));
        }
        if self.samples_per_ray == 0 {
            return Err(Error::Contract("samples_per_ray must be >= 1".into()));
        }
        Ok(())
    }
}

/// Centred square footprint, identical in every attacked view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub size: usize,
    pub top: usize,
    pub left: usize,
}

impl PatchSpec {
    pub fn centered(size: usize, height: usize, width: usize) -> Result<Self> {
        if size > height.min(width) {
            return Err(Error::Contract(format!("patch of {size} px does not fit a {height}x{width} image")));
        }
        Ok(PatchSpec { size, top: (height - size) / 2, left: (width - size) / 2 })
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..self.top + self.size).contains(&row) && (self.left..self.left + self.size).contains(&col)
    }

    /// Row-major `h * w` flags.
    pub fn mask(&self, height: usize, width: usize) -> Vec<bool> {
        (0..height * width).map(|i| self.contains(i / width, i % width)).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackResult {
    pub config: AttackConfig,
    /// Source views of the best iterate (attacked views perturbed, others
    /// untouched).
    #[serde(skip)]
    pub adversarial_views: Vec<Tensor>,
    /// Target render of the best iterate.
    #[serde(skip)]
    pub rendered: Option<Tensor>,
    /// `J` of every iterate, including the starting point.
    pub loss_curve: Vec<f64>,
    /// Average l2 distance to the edited target of every iterate.
    pub distance_curve: Vec<f64>,
    /// Distance of the render from the unmodified views.
    pub baseline_distance: f64,
    pub final_distance: f64,
    pub final_loss: f64,
    pub best_iteration: usize,
    pub success: bool,
    pub wall_seconds: f64,
}

impl AttackResult {
    /// Running minimum of [`AttackResult::distance_curve`].
    pub fn best_so_far(&self) -> Vec<f64> {
        self.distance_curve
            .iter()
            .scan(f64::INFINITY, |best, d| {
                *best = best.min(*d);
                Some(*best)
            })
            .collect()
    }
}

fn check_pair(op: &'static str, a: &Tensor, b: &Tensor) -> Result<usize> {
    let s = a.shape();
    if s != b.shape() || s.len() != 3 || s[0] != 3 {
        return Err(Error::shape(op, s, b.shape()));
    }
    Ok(s[1] * s[2])
}

/// Mean over pixels of the Euclidean distance between RGB triples.
pub fn avg_l2_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    let hw = check_pair("avg_l2_distance", a, b)?;
    if hw == 0 {
        return Ok(0.0);
    }
    let (ad, bd) = (a.data(), b.data());
    let mut total = 0.0;
    for p in 0..hw {
        let mut sq = 0.0;
        for ch in 0..3 {
            let d = ad[ch * hw + p] - bd[ch * hw + p];
            sq += d * d;
        }
        total += sq.sqrt();
    }
    Ok(total / hw as f64)
}

/// Mean absolute difference over all values.
pub fn avg_abs_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    let hw = check_pair("avg_abs_distance", a, b)?;
    if hw == 0 {
        return Ok(0.0);
    }
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    Ok(sum / (3 * hw) as f64)
}

fn render_config(ds: &MultiViewDataset, cfg: &AttackConfig) -> RenderConfig {
    RenderConfig { seed: cfg.seed, ..RenderConfig::for_dataset(ds, cfg.samples_per_ray) }
}

fn with_images(views: &[SourceView], images: &[Tensor]) -> Vec<SourceView> {
    views
        .iter()
        .zip(images)
        .map(|(v, img)| SourceView { image: img.clone(), pose: v.pose.clone(), intrinsics: v.intrinsics })
        .collect()
}

/// `J = MSE(render(adv_views), edited_target)` at the dataset's target camera.
pub fn attack_loss(
    params: &RendererParams,
    ds: &MultiViewDataset,
    adv_views: &[Tensor],
    edited_target: &Tensor,
    cfg: &AttackConfig,
) -> Result<f64> {
    let t = &ds.target_views[0];
    let views = with_images(&ds.source_views, adv_views);
    let img = render_image(params, &views, &t.pose, &t.intrinsics, &render_config(ds, cfg))?;
    mse_loss(&img, edited_target)
}

/// Sign with `sign(0) = 0`.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One momentum step: `g <- mu g + grad / mean|grad|`, `delta = -step sign(g)`.
/// The mean is floored at `1e-12`.
pub fn mifgsm_step(grad: &Tensor, g: &Tensor, mu: f64, step_size: f64) -> Result<(Tensor, Tensor)> {
    mifgsm_step_masked(grad, g, mu, step_size, None)
}

/// [`mifgsm_step`] restricted to the flagged elements; elsewhere `delta` and
/// the new momentum are zero.
fn mifgsm_step_masked(
    grad: &Tensor,
    g: &Tensor,
    mu: f64,
    step_size: f64,
    mask: Option<&[bool]>,
) -> Result<(Tensor, Tensor)> {
    if grad.shape() != g.shape() {
        return Err(Error::shape("mifgsm_step", grad.shape(), g.shape()));
    }
    if let Some(m) = mask {
        if m.len() != grad.len() {
            return Err(Error::shape("mifgsm_step mask", &[m.len()], grad.shape()));
        }
    }
    let live = |i: usize| mask.is_none_or(|m| m[i]);
    let (count, abs_sum) = grad
        .data()
        .iter()
        .enumerate()
        .filter(|(i, _)| live(*i))
        .fold((0usize, 0.0), |(n, s), (_, v)| (n + 1, s + v.abs()));
    let norm = if count == 0 { NORM_FLOOR } else { (abs_sum / count as f64).max(NORM_FLOOR) };
    let mut new_g = Tensor::zeros(g.shape());
    let mut delta = Tensor::zeros(g.shape());
    for (i, ((ng, d), (gr, old))) in
        new_g.data_mut().iter_mut().zip(delta.data_mut()).zip(grad.data().iter().zip(g.data())).enumerate()
    {
        if live(i) {
            *ng = mu * old + gr / norm;
            // +0.0, not -0.0, where the momentum is zero.
            *d = if *ng == 0.0 { 0.0 } else { -step_size * sign(*ng) };
        }
    }
    Ok((delta, new_g))
}

/// Per-channel copy of a row-major pixel mask for `[3, H, W]` tensors.
fn channel_mask(pixels: &[bool]) -> Vec<bool> {
    pixels.iter().chain(pixels).chain(pixels).copied().collect()
}

struct Tracker {
    loss_curve: Vec<f64>,
    distance_curve: Vec<f64>,
    best: Option<(usize, f64, f64, Vec<Tensor>, Tensor)>,
}

impl Tracker {
    fn record(&mut self, iter: usize, loss: f64, image: Tensor, target: &Tensor, adv: &[Tensor]) -> Result<()> {
        let d = avg_l2_distance(&image, target)?;
        self.loss_curve.push(loss);
        self.distance_curve.push(d);
        if self.best.as_ref().is_none_or(|b| d < b.2) {
            self.best = Some((iter, loss, d, adv.to_vec(), image));
        }
        Ok(())
    }

    fn finish(self, cfg: &AttackConfig, baseline: f64, start: Instant) -> AttackResult {
        let (best_iteration, final_loss, final_distance, adversarial_views, rendered) =
            self.best.expect("at least one iterate");
        AttackResult {
            config: cfg.clone(),
            adversarial_views,
            rendered: Some(rendered),
            loss_curve: self.loss_curve,
            distance_curve: self.distance_curve,
            baseline_distance: baseline,
            final_distance,
            final_loss,
            best_iteration,
            success: final_distance < cfg.success_threshold,
            wall_seconds: start.elapsed().as_secs_f64(),
        }
    }
}

/// Shared optimisation loop; `project` maps an updated view back into its
/// feasible set given the original.
fn run(
    params: &RendererParams,
    ds: &MultiViewDataset,
    edited_target: &Tensor,
    cfg: &AttackConfig,
    mut adv: Vec<Tensor>,
    update_mask: Option<&[bool]>,
    project: impl Fn(&mut Tensor, &Tensor),
) -> Result<AttackResult> {
    let start = Instant::now();
    let t = &ds.target_views[0];
    let rcfg = render_config(ds, cfg);
    let originals = ds.source_images();
    let clean = render_image(params, &ds.source_views, &t.pose, &t.intrinsics, &rcfg)?;
    let baseline = avg_l2_distance(&clean, edited_target)?;
    let mut tracker = Tracker { loss_curve: Vec::new(), distance_curve: Vec::new(), best: None };
    let mut momentum: Vec<Tensor> = adv.iter().map(|a| Tensor::zeros(a.shape())).collect();
    let channels = update_mask.map(channel_mask);
    for iter in 0..=cfg.steps {
        let views = with_images(&ds.source_views, &adv);
        if iter == cfg.steps {
            let img = render_image(params, &views, &t.pose, &t.intrinsics, &rcfg)?;
            let loss = mse_loss(&img, edited_target)?;
            tracker.record(iter, loss, img, edited_target, &adv)?;
            break;
        }
        let g = image_mse_grad(params, &views, &cfg.attacked_mask, &t.pose, &t.intrinsics, edited_target, &rcfg)?;
        tracker.record(iter, g.loss, g.image, edited_target, &adv)?;
        for (v, grad) in g.grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let (delta, new_g) =
                mifgsm_step_masked(grad, &momentum[v], cfg.momentum_mu, cfg.step_size, channels.as_deref())?;
            momentum[v] = new_g;
            adv[v].add_assign(&delta)?;
            project(&mut adv[v], &originals[v]);
        }
    }
    Ok(tracker.finish(cfg, baseline, start))
}

fn check_inputs(ds: &MultiViewDataset, edited_target: &Tensor, cfg: &AttackConfig, mode: AttackMode) -> Result<()> {
    if cfg.mode != mode {
        return Err(Error::Contract(format!("config mode {} used for a {} attack", cfg.mode.as_str(), mode.as_str())));
    }
    cfg.validate(ds.source_views.len(), ds.height(), ds.width())?;
    let expect = [3, ds.height(), ds.width()];
    if edited_target.shape() != expect {
        return Err(Error::shape("edited target", edited_target.shape(), &expect));
    }
    Ok(())
}

/// Momentum iterative FGSM on all pixels of the attacked views, projected
/// to the `epsilon` ball around the originals and then to `[0, 1]`.
pub fn low_intensity_attack(
    params: &RendererParams,
    ds: &MultiViewDataset,
    edited_target: &Tensor,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    check_inputs(ds, edited_target, cfg, AttackMode::LowIntensity)?;
    let eps = cfg.epsilon;
    run(params, ds, edited_target, cfg, ds.source_images(), None, |x, orig| {
        for (v, o) in x.data_mut().iter_mut().zip(orig.data()) {
            *v = v.clamp(o - eps, o + eps).clamp(0.0, 1.0);
        }
    })
}

/// Independent centred patches on the attacked views, started at mid-gray and
/// optimised with the same sign-momentum steps, clipped to `[0, 1]` only.
pub fn patch_attack(
    params: &RendererParams,
    ds: &MultiViewDataset,
    edited_target: &Tensor,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    check_inputs(ds, edited_target, cfg, AttackMode::Patch)?;
    let (h, w) = (ds.height(), ds.width());
    let patch = PatchSpec::centered(cfg.patch_size, h, w)?;
    let pixels = patch.mask(h, w);
    let channels = channel_mask(&pixels);
    let mut adv = ds.source_images();
    for (img, on) in adv.iter_mut().zip(&cfg.attacked_mask) {
        if *on {
            for (v, inside) in img.data_mut().iter_mut().zip(&channels) {
                if *inside {
                    *v = 0.5;
                }
            }
        }
    }
    if cfg.patch_size == 0 {
        // Nothing can change: every iterate is the clean render.
        let mut no_steps = cfg.clone();
        no_steps.steps = 0;
        let mut r = run(params, ds, edited_target, &no_steps, adv, Some(&pixels), |_, _| {})?;
        r.config = cfg.clone();
        r.loss_curve = vec![r.loss_curve[0]; cfg.steps + 1];
        r.distance_curve = vec![r.distance_curve[0]; cfg.steps + 1];
        return Ok(r);
    }
    run(params, ds, edited_target, cfg, adv, Some(&pixels), |x, _| {
        for (v, inside) in x.data_mut().iter_mut().zip(&channels) {
            if *inside {
                *v = v.clamp(0.0, 1.0);
            }
        }
    })
}
