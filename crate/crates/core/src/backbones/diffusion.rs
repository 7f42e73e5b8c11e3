//! Linear-β DDPM schedule, ancestral sampling and the latent view of clips.

use super::unet::UNetBackbone;
use super::{bind_adapters, AdapterMap, Attached, Backbone};
use crate::adapters::Pass;
use crate::corpus::codec::{decimate, decode_latent, encode_latent, interpolate};
use crate::error::Result;
use crate::rng::RngState;
use crate::tensor::{Graph, Tensor};

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;
/// Length of the fine-grained schedule the coarse sampling steps stride over.
pub const BASE_STEPS: usize = 1000;

/// Divides codec latents so corpus clips have roughly unit variance, the
/// scale the noise schedule assumes.
pub const LATENT_SCALE: f64 = 0.28;

/// Sampling clamps each predicted clean latent to ±this, in scaled units.
/// Corpus latents sit inside it (the 99.99th percentile of |z| is about 5);
/// without it, small noise-prediction errors at high noise levels compound
/// into samples several times louder than any clip.
pub const X0_CLIP: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// `steps` evenly strided timesteps of the linear β schedule (1e-4 to
    /// 0.02) defined over [`BASE_STEPS`] steps. Each coarse step carries the
    /// effective β that joins consecutive cumulative products, so the chain
    /// still ends near pure noise.
    pub fn linear(steps: usize) -> Self {
        let base: Vec<f64> = (0..BASE_STEPS)
            .map(|i| BETA_START + (BETA_END - BETA_START) * i as f64 / (BASE_STEPS - 1) as f64)
            .collect();
        let mut cumulative = Vec::with_capacity(BASE_STEPS);
        let mut acc = 1.0;
        for b in &base {
            acc *= 1.0 - b;
            cumulative.push(acc);
        }
        let stride = BASE_STEPS / steps.clamp(1, BASE_STEPS);
        let alpha_bars: Vec<f64> = (0..steps.min(BASE_STEPS)).map(|i| cumulative[(i + 1) * stride - 1]).collect();
        let alphas: Vec<f64> = alpha_bars
            .iter()
            .enumerate()
            .map(|(i, ab)| if i == 0 { *ab } else { ab / alpha_bars[i - 1] })
            .collect();
        let betas = alphas.iter().map(|a| 1.0 - a).collect();
        NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`
    pub fn add_noise(&self, x0: &[f64], noise: &[f64], t: usize) -> Vec<f64> {
        let ab = self.alpha_bars[t];
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        x0.iter().zip(noise).map(|(x, e)| a * x + s * e).collect()
    }

    /// Mean of `p(x_{t-1} | x_t)` given a noise estimate.
    pub fn posterior_mean(&self, xt: &[f64], eps: &[f64], t: usize) -> Vec<f64> {
        let coef = self.betas[t] / (1.0 - self.alpha_bars[t]).sqrt();
        let inv = 1.0 / self.alphas[t].sqrt();
        xt.iter().zip(eps).map(|(x, e)| inv * (x - coef * e)).collect()
    }

    /// Clean-sample estimate implied by a noise estimate.
    pub fn predict_x0(&self, xt: &[f64], eps: &[f64], t: usize) -> Vec<f64> {
        let ab = self.alpha_bars[t];
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        xt.iter().zip(eps).map(|(x, e)| (x - s * e) / a).collect()
    }

    /// Mean of `q(x_{t-1} | x_t, x0)`. Equals [`Self::posterior_mean`] when
    /// `x0` is the estimate implied by the same noise.
    pub fn posterior_mean_from_x0(&self, xt: &[f64], x0: &[f64], t: usize) -> Vec<f64> {
        let ab = self.alpha_bars[t];
        let ab_prev = if t == 0 { 1.0 } else { self.alpha_bars[t - 1] };
        let c0 = ab_prev.sqrt() * self.betas[t] / (1.0 - ab);
        let ct = self.alphas[t].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        x0.iter().zip(xt).map(|(z, x)| c0 * z + ct * x).collect()
    }
}

/// Clip waveform to its scaled latent: decimate, encode, divide by the scale.
pub fn clip_to_latent(waveform: &[f64]) -> Result<Tensor> {
    let mut z = encode_latent(&decimate(waveform))?;
    z.data_mut().iter_mut().for_each(|v| *v /= LATENT_SCALE);
    Ok(z)
}

/// Inverse of [`clip_to_latent`] up to the decimation loss.
pub fn latent_to_clip(latent: &Tensor) -> Result<Vec<f64>> {
    let mut z = latent.clone();
    z.data_mut().iter_mut().for_each(|v| *v *= LATENT_SCALE);
    Ok(interpolate(&decode_latent(&z)?))
}

/// Ancestral DDPM sampling from pure noise over every schedule step, with
/// σ_t² = β_t and the clean-sample estimate clamped to ±[`X0_CLIP`]. Returns a scaled latent; see [`latent_to_clip`].
pub fn diffusion_sample(b: &UNetBackbone, cond: &[f64], adapters: &AdapterMap, rng: &mut RngState) -> Result<Tensor> {
    b.validate_adapters(adapters)?;
    let shape = b.config().latent_shape;
    let n: usize = shape.iter().product();
    let sched = b.schedule();
    let mut x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let mut scratch = RngState::new(0);
    for t in (0..sched.len()).rev() {
        let mut g = Graph::new();
        let w = b.weights().bind(&mut g);
        let bound = bind_adapters(&mut g, adapters);
        let att = Attached {
            modules: adapters,
            bound: &bound,
        };
        let xv = g.constant(&shape, x.clone())?;
        let eps = b.predict_noise(&mut g, &w, xv, t, cond, Some(&att), &mut scratch, Pass::eval())?;
        let mut x0 = sched.predict_x0(&x, g.value(eps), t);
        x0.iter_mut().for_each(|v| *v = v.clamp(-X0_CLIP, X0_CLIP));
        let mut mean = sched.posterior_mean_from_x0(&x, &x0, t);
        if t > 0 {
            let sigma = sched.betas[t].sqrt();
            mean.iter_mut().for_each(|m| *m += sigma * rng.normal());
        }
        x = mean;
    }
    Tensor::new(&shape, x)
}
