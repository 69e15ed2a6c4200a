use crate::error::{Error, Result};

/// Colour and compositing weights of one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    pub rgb: [f64; 3],
    pub weights: Vec<f64>,
}

/// Emission-absorption compositing of one ray, evaluated directly from the
/// sample list (no tape). `t` must be strictly increasing and end before
/// `far`; the last interval runs to `far`.
pub fn volume_render(colors: &[[f64; 3]], sigma: &[f64], t: &[f64], far: f64) -> Result<VolumeSample> {
    let k = t.len();
    if colors.len() != k || sigma.len() != k {
        return Err(Error::shape("volume_render", &[colors.len(), sigma.len()], &[k]));
    }
    if t.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Contract("volume_render depths must be strictly increasing".into()));
    }
    if t.last().is_some_and(|last| !(*last <= far)) {
        return Err(Error::Contract("volume_render depths must not pass the far plane".into()));
    }
    if sigma.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::Contract("volume_render densities must be non-negative".into()));
    }
    let mut rgb = [0.0; 3];
    let mut weights = Vec::with_capacity(k);
    let mut trans = 1.0;
    for j in 0..k {
        let delta = if j + 1 < k { t[j + 1] - t[j] } else { far - t[j] };
        let tau = sigma[j] * delta;
        let alpha = -(-tau).exp_m1();
        let w = trans * alpha;
        for ch in 0..3 {
            rgb[ch] += w * colors[j][ch];
        }
        weights.push(w);
        trans *= (-tau).exp();
    }
    Ok(VolumeSample { rgb, weights })
}
