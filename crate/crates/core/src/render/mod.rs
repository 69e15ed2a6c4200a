//! The generalizable renderer: a CNN encoder `E` turns each source image into
//! a feature map, samples along every target ray are projected into all source
//! views, the gathered features are pooled into a view-count independent
//! mean/variance vector, an MLP `f` predicts colour plus a density feature, and
//! a single self-attention layer `T` over the samples of one ray turns the
//! density features into densities before compositing.
//!
//! Everything runs on a [`Tape`], so the rendered pixels are differentiable
//! with respect to both the weights and the source pixels.

mod composite;
mod params;

pub use composite::{volume_render, VolumeSample};
pub use params::{RendererArch, RendererParams};

use params::idx;
use serde::{Deserialize, Serialize};

use crate::ad::{Tape, Tensor, Var};
use crate::camera::{project, ray_through_pixel, sample_depths, CameraPose, Intrinsics, Ray, SamplingMode};
use crate::error::{Error, Result};
use crate::scene::{MultiViewDataset, SourceView};

/// Per-ray sampling settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Samples per ray.
    pub k: usize,
    pub near: f64,
    pub far: f64,
    pub mode: SamplingMode,
    pub seed: u64,
    /// Rays per tape when rendering whole images.
    pub chunk_rays: usize,
}

impl RenderConfig {
    /// Midpoint sampling over the dataset's depth range.
    pub fn for_dataset(ds: &MultiViewDataset, k: usize) -> Self {
        RenderConfig { k, near: ds.near, far: ds.far, mode: SamplingMode::Midpoint, seed: 0, chunk_rays: 512 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.chunk_rays == 0 {
            return Err(Error::Contract("render config needs k >= 1 and chunk_rays >= 1".into()));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::Contract(format!("need 0 < near < far, got {} / {}", self.near, self.far)));
        }
        Ok(())
    }
}

/// Sampling seed of pixel `index`; pixel 0 uses `seed` itself.
pub fn pixel_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// The renderer weights placed on a tape, either as gradient-tracked leaves
/// or as constants.
pub struct NetVars {
    vars: Vec<Var>,
    arch: RendererArch,
}

impl NetVars {
    pub fn new(tape: &mut Tape, params: &RendererParams, trainable: bool) -> Self {
        let vars = params
            .tensors()
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        NetVars { vars, arch: params.arch() }
    }

    /// Leaves in [`RendererParams::tensors`] order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn at(&self, i: usize) -> Var {
        self.vars[i]
    }
}

fn check_views(views: &[SourceView]) -> Result<(usize, usize)> {
    let first = views.first().ok_or_else(|| Error::Contract("need at least one source view".into()))?;
    let s = first.image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("source image", s, &[3, 0, 0]));
    }
    for v in views {
        if v.image.shape() != s {
            return Err(Error::shape("source images", s, v.image.shape()));
        }
        if [v.intrinsics.height, v.intrinsics.width] != s[1..] {
            return Err(Error::shape("source intrinsics", &[v.intrinsics.height, v.intrinsics.width], &s[1..]));
        }
    }
    Ok((s[1], s[2]))
}

/// `E(image)`: three same-padded 3x3 convolutions, relu between them.
pub fn encode_on_tape(tape: &mut Tape, net: &NetVars, image: Var) -> Result<Var> {
    let h = tape.conv2d(image, net.at(idx::ENC1_W), Some(net.at(idx::ENC1_B)), 1)?;
    let h = tape.relu(h);
    let h = tape.conv2d(h, net.at(idx::ENC2_W), Some(net.at(idx::ENC2_B)), 1)?;
    let h = tape.relu(h);
    tape.conv2d(h, net.at(idx::ENC3_W), Some(net.at(idx::ENC3_B)), 1)
}

/// Feature map `[C_feat, H, W]` of every source view.
pub fn encode_views(params: &RendererParams, views: &[SourceView]) -> Result<Vec<Tensor>> {
    check_views(views)?;
    let mut tape = Tape::new();
    let net = NetVars::new(&mut tape, params, false);
    views
        .iter()
        .map(|v| {
            let img = tape.constant(v.image.clone());
            let map = encode_on_tape(&mut tape, &net, img)?;
            Ok(tape.value(map).clone())
        })
        .collect()
}

/// Validity-weighted mean and variance of per-view features. `features[s]` is
/// `[M, C]`; `valid` is `[M, S]` row-major. Returns `[M, 2C]`.
pub fn aggregate_features(features: &[Tensor], valid: &[bool]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = features.iter().map(|f| tape.constant(f.clone())).collect();
    let weights: Vec<f64> = valid.iter().map(|v| if *v { 1.0 } else { 0.0 }).collect();
    let out = tape.mean_var(&vars, &weights)?;
    Ok(tape.value(out).clone())
}

fn dense(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Renders `rays` against the feature maps `maps` (one per entry of `views`),
/// returning the `[N, 3]` composited colours. The compositing weights are
/// available from [`Tape::composite_weights`] on the returned node.
pub fn trace_rays(
    tape: &mut Tape,
    net: &NetVars,
    maps: &[Var],
    views: &[SourceView],
    rays: &[Ray],
    seeds: &[u64],
    cfg: &RenderConfig,
) -> Result<Var> {
    cfg.validate()?;
    if maps.len() != views.len() || maps.is_empty() {
        return Err(Error::shape("trace_rays maps", &[maps.len()], &[views.len()]));
    }
    if seeds.len() != rays.len() {
        return Err(Error::shape("trace_rays seeds", &[seeds.len()], &[rays.len()]));
    }
    let arch = net.arch;
    let (n, k, s) = (rays.len(), cfg.k, views.len());
    let m = n * k;
    let mut points = Vec::with_capacity(m);
    let mut deltas = Vec::with_capacity(m);
    for (ray, seed) in rays.iter().zip(seeds) {
        let depths = sample_depths(ray, k, cfg.mode, *seed)?;
        deltas.extend(depths.deltas(ray.far));
        points.extend(depths.t.iter().map(|t| ray.at(*t)));
    }

    // Project every sample into every view, gather, pool across views.
    let mut gathered = Vec::with_capacity(s);
    let mut weights = vec![0.0; m * s];
    for (vi, (view, map)) in views.iter().zip(maps).enumerate() {
        let mut coords = Vec::with_capacity(2 * m);
        let mut mask = Vec::with_capacity(m);
        for p in &points {
            let pr = project(p, &view.pose, &view.intrinsics);
            let (x, y) = pr.index_coords();
            coords.extend([x, y]);
            mask.push(pr.in_front);
        }
        let coords = tape.constant(Tensor::new(vec![m, 2], coords)?);
        let (g, valid) = tape.bilinear_gather(*map, coords, &mask)?;
        for (row, ok) in valid.iter().enumerate() {
            if *ok {
                weights[row * s + vi] = 1.0;
            }
        }
        gathered.push(g);
    }
    let pooled = tape.mean_var(&gathered, &weights)?;

    // f: colour and density feature per sample.
    let mut h = pooled;
    for (w, b) in [(idx::F1_W, idx::F1_B), (idx::F2_W, idx::F2_B), (idx::F3_W, idx::F3_B)] {
        h = dense(tape, h, net.at(w), net.at(b))?;
        h = tape.relu(h);
    }
    let out = dense(tape, h, net.at(idx::F4_W), net.at(idx::F4_B))?;
    let rgb = tape.slice_cols(out, 0, 3)?;
    let rgb = tape.sigmoid(rgb);
    let colors = tape.reshape(rgb, &[n, k, 3])?;
    let d = arch.d_sigma;
    let dens = tape.slice_cols(out, 3, 3 + d)?;

    // T: one attention layer over the samples of each ray, with a residual.
    let q = tape.matmul(dens, net.at(idx::T_Q))?;
    let q = tape.reshape(q, &[n, k, d])?;
    let kk = tape.matmul(dens, net.at(idx::T_K))?;
    let kk = tape.reshape(kk, &[n, k, d])?;
    let v = tape.matmul(dens, net.at(idx::T_V))?;
    let v = tape.reshape(v, &[n, k, d])?;
    let kt = tape.transpose_last2(kk)?;
    let scores = tape.bmm(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = tape.softmax(scores, 2)?;
    let ctx = tape.bmm(attn, v)?;
    let ctx = tape.reshape(ctx, &[m, d])?;
    let mixed = tape.add(dens, ctx)?;
    let sigma = dense(tape, mixed, net.at(idx::HEAD_W), net.at(idx::HEAD_B))?;
    let sigma = tape.softplus(sigma);
    let sigma = tape.reshape(sigma, &[n, k])?;

    tape.composite(sigma, colors, &deltas)
}

/// Colour of one ray given precomputed feature maps.
pub fn render_pixel(
    params: &RendererParams,
    features: &[Tensor],
    views: &[SourceView],
    ray: &Ray,
    cfg: &RenderConfig,
) -> Result<[f64; 3]> {
    let mut tape = Tape::new();
    let net = NetVars::new(&mut tape, params, false);
    let maps: Vec<Var> = features.iter().map(|f| tape.constant(f.clone())).collect();
    let out = trace_rays(&mut tape, &net, &maps, views, std::slice::from_ref(ray), &[cfg.seed], cfg)?;
    let d = tape.value(out).data();
    Ok([d[0], d[1], d[2]])
}

/// Rays through every pixel centre of a `height x width` view, row-major.
pub fn pixel_rays(pose: &CameraPose, intr: &Intrinsics, cfg: &RenderConfig) -> Result<Vec<Ray>> {
    let mut rays = Vec::with_capacity(intr.width * intr.height);
    for py in 0..intr.height {
        for px in 0..intr.width {
            rays.push(ray_through_pixel(pose, intr, px as f64, py as f64, cfg.near, cfg.far)?);
        }
    }
    Ok(rays)
}

fn scatter_rows(image: &mut [f64], hw: usize, start: usize, rgb: &[f64]) {
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            image[ch * hw + start + i] = px[ch];
        }
    }
}

/// `[3, H, W]` image of the target camera from precomputed feature maps.
pub fn render_with_features(
    params: &RendererParams,
    features: &[Tensor],
    views: &[SourceView],
    pose: &CameraPose,
    intr: &Intrinsics,
    cfg: &RenderConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let rays = pixel_rays(pose, intr, cfg)?;
    let hw = rays.len();
    let mut image = vec![0.0; 3 * hw];
    let mut tape = Tape::new();
    for start in (0..hw).step_by(cfg.chunk_rays) {
        let end = (start + cfg.chunk_rays).min(hw);
        tape.clear();
        let net = NetVars::new(&mut tape, params, false);
        let maps: Vec<Var> = features.iter().map(|f| tape.constant(f.clone())).collect();
        let seeds: Vec<u64> = (start..end).map(|i| pixel_seed(cfg.seed, i)).collect();
        let out = trace_rays(&mut tape, &net, &maps, views, &rays[start..end], &seeds, cfg)?;
        scatter_rows(&mut image, hw, start, tape.value(out).data());
    }
    Tensor::new(vec![3, intr.height, intr.width], image)
}

/// Renders the target camera from the given source views.
pub fn render_image(
    params: &RendererParams,
    views: &[SourceView],
    pose: &CameraPose,
    intr: &Intrinsics,
    cfg: &RenderConfig,
) -> Result<Tensor> {
    let features = encode_views(params, views)?;
    render_with_features(params, &features, views, pose, intr, cfg)
}

/// Rendered image, its MSE against `target`, and the gradient of that MSE
/// with respect to the source images flagged in `wrt`.
#[derive(Clone, Debug)]
pub struct ImageGrad {
    pub image: Tensor,
    pub loss: f64,
    /// `Some` exactly for the views flagged in `wrt`.
    pub grads: Vec<Option<Tensor>>,
}

/// Full-image `J = mean((render - target)^2)` and `dJ/d(source pixels)`.
///
/// Rays are processed in chunks; each chunk's colour gradient is pulled back
/// to the feature maps, and the summed feature-map gradients are pulled back
/// through the encoder once.
pub fn image_mse_grad(
    params: &RendererParams,
    views: &[SourceView],
    wrt: &[bool],
    pose: &CameraPose,
    intr: &Intrinsics,
    target: &Tensor,
    cfg: &RenderConfig,
) -> Result<ImageGrad> {
    cfg.validate()?;
    check_views(views)?;
    if wrt.len() != views.len() {
        return Err(Error::shape("image_mse_grad mask", &[wrt.len()], &[views.len()]));
    }
    let expect = [3, intr.height, intr.width];
    if target.shape() != expect {
        return Err(Error::shape("image_mse_grad target", target.shape(), &expect));
    }

    let mut enc = Tape::new();
    let enc_net = NetVars::new(&mut enc, params, false);
    let mut image_vars = Vec::with_capacity(views.len());
    let mut map_vars = Vec::with_capacity(views.len());
    for (v, on) in views.iter().zip(wrt) {
        let img = if *on { enc.param(v.image.clone()) } else { enc.constant(v.image.clone()) };
        image_vars.push(img);
        map_vars.push(encode_on_tape(&mut enc, &enc_net, img)?);
    }
    let maps: Vec<Tensor> = map_vars.iter().map(|m| enc.value(*m).clone()).collect();
    let mut map_grads: Vec<Option<Tensor>> =
        maps.iter().zip(wrt).map(|(m, on)| on.then(|| Tensor::zeros(m.shape()))).collect();

    let rays = pixel_rays(pose, intr, cfg)?;
    let hw = rays.len();
    let norm = 1.0 / (3 * hw) as f64;
    let td = target.data();
    let mut image = vec![0.0; 3 * hw];
    let mut loss = 0.0;
    let mut tape = Tape::new();
    for start in (0..hw).step_by(cfg.chunk_rays) {
        let end = (start + cfg.chunk_rays).min(hw);
        tape.clear();
        let net = NetVars::new(&mut tape, params, false);
        let chunk_maps: Vec<Var> = maps
            .iter()
            .zip(wrt)
            .map(|(m, on)| if *on { tape.param(m.clone()) } else { tape.constant(m.clone()) })
            .collect();
        let seeds: Vec<u64> = (start..end).map(|i| pixel_seed(cfg.seed, i)).collect();
        let out = trace_rays(&mut tape, &net, &chunk_maps, views, &rays[start..end], &seeds, cfg)?;
        let rgb = tape.value(out).data();
        let mut seed = vec![0.0; rgb.len()];
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for ch in 0..3 {
                let diff = px[ch] - td[ch * hw + start + i];
                loss += diff * diff;
                seed[i * 3 + ch] = 2.0 * diff * norm;
            }
        }
        scatter_rows(&mut image, hw, start, rgb);
        if wrt.iter().any(|b| *b) {
            let seed = Tensor::new(vec![end - start, 3], seed)?;
            let mut g = tape.backward_seeded(vec![(out, seed)])?;
            for (acc, var) in map_grads.iter_mut().zip(&chunk_maps) {
                if let Some(acc) = acc {
                    acc.add_assign(&g.take(*var).expect("map leaf has a gradient"))?;
                }
            }
        }
    }

    let seeds: Vec<(Var, Tensor)> = map_vars.iter().zip(map_grads).filter_map(|(v, g)| g.map(|g| (*v, g))).collect();
    let grads = if seeds.is_empty() {
        vec![None; views.len()]
    } else {
        let mut g = enc.backward_seeded(seeds)?;
        image_vars.iter().zip(wrt).map(|(v, on)| if *on { g.take(*v) } else { None }).collect()
    };
    Ok(ImageGrad { image: Tensor::new(expect.to_vec(), image)?, loss: loss * norm, grads })
}

#[cfg(test)]
mod tests;
