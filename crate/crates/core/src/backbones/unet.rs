//! Small latent UNet noise predictor: down, mid and up blocks of two ResNet
//! units around one transformer unit each.

use super::diffusion::{clip_to_latent, NoiseSchedule};
use super::{
    init_tensor, pretrain_corpus, pretrain_weights, transformer_block, transformer_block_shapes, AdapterMap,
    Attached, Backbone, BackboneKind, Block, BoundWeights, InsertionPoint, PretrainConfig, Weights,
};
use crate::adapters::{conv2, Pass};
use crate::corpus::codec::LATENT_SHAPE;
use crate::corpus::{embed_prompt, COND_DIM};
use crate::error::{LabError, Result};
use crate::rng::RngState;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub latent_shape: [usize; 3],
    pub channels: usize,
    pub cond_dim: usize,
    pub num_diffusion_steps: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            latent_shape: LATENT_SHAPE,
            channels: 32,
            cond_dim: COND_DIM,
            num_diffusion_steps: 50,
            heads: 4,
            ffn_mult: 2,
        }
    }
}

impl UNetConfig {
    fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (c, ch) = (self.latent_shape[0], self.channels);
        let mut out = vec![
            ("conv_in.w".to_string(), vec![ch, c, 3, 3]),
            ("conv_in.b".to_string(), vec![ch]),
            ("temb".to_string(), vec![self.num_diffusion_steps, ch]),
            ("cond.w".to_string(), vec![self.cond_dim, ch]),
            ("cond.b".to_string(), vec![ch]),
            ("conv_out.w".to_string(), vec![c, ch, 3, 3]),
            ("conv_out.b".to_string(), vec![c]),
        ];
        for b in Block::ALL {
            for r in 0..2 {
                let p = format!("{b}.r{r}");
                out.push((format!("{p}.conv_a.w"), vec![ch, ch, 3, 3]));
                out.push((format!("{p}.conv_a.b"), vec![ch]));
                out.push((format!("{p}.emb.w"), vec![ch, ch]));
                out.push((format!("{p}.conv_b.w"), vec![ch, ch, 3, 3]));
                out.push((format!("{p}.conv_b.b"), vec![ch]));
            }
            out.extend(transformer_block_shapes(&format!("{b}.t0"), ch, self.ffn_mult * ch));
        }
        out
    }
}

/// One denoising example: clean latent (already scaled), prompt vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionExample {
    pub latent: Tensor,
    pub cond: Vec<f64>,
}

impl DiffusionExample {
    pub fn from_clip(waveform: &[f64], prompt: &str) -> Result<Self> {
        Ok(DiffusionExample {
            latent: clip_to_latent(waveform)?,
            cond: embed_prompt(prompt),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNetBackbone {
    config: UNetConfig,
    weights: Weights,
    schedule: NoiseSchedule,
}

fn check_shape(g: &Graph, v: Var, want: &[usize], what: &'static str) -> Result<()> {
    if g.shape(v) != want {
        return Err(LabError::Dimension {
            op: what,
            lhs: g.shape(v).to_vec(),
            rhs: want.to_vec(),
        });
    }
    Ok(())
}

impl UNetBackbone {
    pub fn random(config: UNetConfig, seed: u64) -> Self {
        let root = RngState::new(seed);
        let mut weights = Weights::default();
        for (name, shape) in config.shapes() {
            let mut rng = root.derive_str(&name);
            // residual branches start closed so the untrained net is close to
            // the linear conv_in -> conv_out path
            let t = if name == "temb" {
                Tensor::randn(&shape, 1.0, &mut rng)
            } else if ["conv_b.w", "attn.o.w", "ffn2.w"].iter().any(|s| name.ends_with(s)) {
                Tensor::zeros(&shape)
            } else {
                init_tensor(&name, &shape, &mut rng)
            };
            weights.insert(name, t.with_requires_grad(true));
        }
        let schedule = NoiseSchedule::linear(config.num_diffusion_steps);
        UNetBackbone {
            config,
            weights,
            schedule,
        }
    }

    pub fn from_weights(config: UNetConfig, weights: Weights) -> Result<Self> {
        for (name, shape) in config.shapes() {
            match weights.tensors().get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                _ => return Err(LabError::Contract(format!("UNet weights lack {name} {shape:?}"))),
            }
        }
        let schedule = NoiseSchedule::linear(config.num_diffusion_steps);
        Ok(UNetBackbone {
            config,
            weights,
            schedule,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn freeze(&mut self) {
        self.weights.freeze();
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let c = &self.config;
        let [lc, lh, lw] = c.latent_shape;
        let header = [1, lc, lh, lw, c.channels, c.cond_dim, c.num_diffusion_steps, c.heads, c.ffn_mult];
        super::save_weights(path, &header.map(|v| v as u64), &self.weights)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (h, weights) = super::load_weights(path)?;
        if h.len() != 9 || h[0] != 1 {
            return Err(super::header_error(path, "UNet backbone"));
        }
        let h: Vec<usize> = h.iter().map(|&v| v as usize).collect();
        let config = UNetConfig {
            latent_shape: [h[1], h[2], h[3]],
            channels: h[4],
            cond_dim: h[5],
            num_diffusion_steps: h[6],
            heads: h[7],
            ffn_mult: h[8],
        };
        Self::from_weights(config, weights)
    }

    fn resnet(&self, g: &mut Graph, w: &BoundWeights, prefix: &str, x: Var, e: Var) -> Result<Var> {
        let v = |n: &str| w.var(&format!("{prefix}.{n}"));
        let h = g.gelu(x);
        let h = conv2(g, h, v("conv_a.w"), v("conv_a.b"), 1)?;
        let te = g.matmul(e, v("emb.w"))?;
        let te = g.reshape(te, &[self.config.channels])?;
        let h = g.add_channel(h, te)?;
        let h = g.gelu(h);
        let h = conv2(g, h, v("conv_b.w"), v("conv_b.b"), 1)?;
        g.add(x, h)
    }

    /// Transformer unit over the `H·W` positions of a `[ch×H×W]` map.
    fn attend(&self, g: &mut Graph, w: &BoundWeights, prefix: &str, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
        let tokens = g.transpose(flat)?;
        let y = transformer_block(g, w, prefix, tokens, self.config.heads, false)?;
        let y = g.transpose(y)?;
        g.reshape(y, &s)
    }

    fn block(
        &self,
        g: &mut Graph,
        w: &BoundWeights,
        block: Block,
        mut h: Var,
        e: Var,
        adapters: Option<&Attached<'_>>,
        rng: &mut RngState,
        pass: Pass,
        skip_full: Option<Var>,
    ) -> Result<Var> {
        let adapt = |g: &mut Graph, point: InsertionPoint, h: Var, rng: &mut RngState| match adapters {
            Some(a) => a.apply(g, point, h, rng, pass),
            None => Ok(h),
        };
        h = self.resnet(g, w, &format!("{block}.r0"), h, e)?;
        h = adapt(g, InsertionPoint::AfterResnet(block, 0), h, rng)?;
        h = self.attend(g, w, &format!("{block}.t0"), h)?;
        h = adapt(g, InsertionPoint::AfterTransformer(block, 0), h, rng)?;
        if let Some(full) = skip_full {
            h = g.upsample2(h)?;
            h = g.add(h, full)?;
        }
        h = self.resnet(g, w, &format!("{block}.r1"), h, e)?;
        h = adapt(g, InsertionPoint::AfterResnet(block, 1), h, rng)?;
        adapt(g, InsertionPoint::AfterBlock(block), h, rng)
    }

    /// Predicted noise for a noisy latent at `timestep`.
    pub(crate) fn predict_noise(
        &self,
        g: &mut Graph,
        w: &BoundWeights,
        x: Var,
        timestep: usize,
        cond: &[f64],
        adapters: Option<&Attached<'_>>,
        rng: &mut RngState,
        pass: Pass,
    ) -> Result<Var> {
        let cfg = &self.config;
        if timestep >= cfg.num_diffusion_steps {
            return Err(LabError::Range(format!(
                "timestep {timestep} outside 0..{}",
                cfg.num_diffusion_steps
            )));
        }
        if cond.len() != cfg.cond_dim {
            return Err(LabError::Dimension {
                op: "unet conditioning",
                lhs: vec![cond.len()],
                rhs: vec![cfg.cond_dim],
            });
        }
        let [c, hh, ww] = cfg.latent_shape;
        let ch = cfg.channels;
        check_shape(g, x, &[c, hh, ww], "unet input")?;

        let te = g.gather(w.var("temb"), &[timestep])?;
        let cv = g.constant(&[1, cfg.cond_dim], cond.to_vec())?;
        let ce = g.matmul(cv, w.var("cond.w"))?;
        let ce = g.add_row(ce, w.var("cond.b"))?;
        let e = g.add(te, ce)?;

        let h0 = conv2(g, x, w.var("conv_in.w"), w.var("conv_in.b"), 1)?;
        let d = g.avg_pool2(h0)?;
        let d = self.block(g, w, Block::Down, d, e, adapters, rng, pass, None)?;
        check_shape(g, d, &[ch, hh / 2, ww / 2], "down block output")?;
        let m = self.block(g, w, Block::Mid, d, e, adapters, rng, pass, None)?;
        check_shape(g, m, &[ch, hh / 2, ww / 2], "mid block output")?;
        let u = g.add(m, d)?;
        let u = self.block(g, w, Block::Up, u, e, adapters, rng, pass, Some(h0))?;
        check_shape(g, u, &[ch, hh, ww], "up block output")?;
        conv2(g, u, w.var("conv_out.w"), w.var("conv_out.b"), 1)
    }

    /// Noise-prediction loss on one example with the given noise and step.
    pub(crate) fn denoising_loss(
        &self,
        g: &mut Graph,
        w: &BoundWeights,
        ex: &DiffusionExample,
        timestep: usize,
        noise: &[f64],
        adapters: Option<&Attached<'_>>,
        rng: &mut RngState,
        pass: Pass,
    ) -> Result<Var> {
        let noisy = self.schedule.add_noise(ex.latent.data(), noise, timestep);
        let x = g.constant(&self.config.latent_shape, noisy)?;
        let eps = g.constant(&self.config.latent_shape, noise.to_vec())?;
        let pred = self.predict_noise(g, w, x, timestep, &ex.cond, adapters, rng, pass)?;
        g.mse(pred, eps)
    }

    /// Draws a timestep and a noise field for one training example.
    pub(crate) fn draw_noise(&self, rng: &mut RngState) -> (usize, Vec<f64>) {
        let t = rng.below(self.config.num_diffusion_steps);
        let n: usize = self.config.latent_shape.iter().product();
        (t, (0..n).map(|_| rng.normal()).collect())
    }
}

impl Backbone for UNetBackbone {
    fn kind(&self) -> BackboneKind {
        BackboneKind::UNet
    }

    fn weights(&self) -> &Weights {
        &self.weights
    }

    fn insertion_points(&self) -> Vec<InsertionPoint> {
        let mut out = Vec::new();
        for b in Block::ALL {
            out.push(InsertionPoint::AfterResnet(b, 0));
            out.push(InsertionPoint::AfterTransformer(b, 0));
            out.push(InsertionPoint::AfterResnet(b, 1));
            out.push(InsertionPoint::AfterBlock(b));
        }
        out
    }

    fn adapter_dim(&self, point: InsertionPoint) -> Result<usize> {
        self.validate_point(point)?;
        Ok(self.config.channels)
    }
}

pub fn build_unet_backbone(seed: u64) -> Result<UNetBackbone> {
    build_unet_backbone_with(UNetConfig::default(), &PretrainConfig::default(), seed)
}

pub fn build_unet_backbone_with(config: UNetConfig, pretrain: &PretrainConfig, seed: u64) -> Result<UNetBackbone> {
    let mut b = UNetBackbone::random(config, seed);
    if pretrain.steps > 0 {
        let corpus = pretrain_corpus(seed, pretrain)?;
        let data = corpus
            .clips
            .iter()
            .zip(&corpus.prompts)
            .map(|(c, p)| DiffusionExample::from_clip(&c.waveform, &p.text))
            .collect::<Result<Vec<_>>>()?;
        let model = b.clone();
        let history = pretrain_weights(&mut b.weights, pretrain, data.len(), seed, |g, w, i, rng| {
            let (t, noise) = model.draw_noise(rng);
            model.denoising_loss(g, w, &data[i], t, &noise, None, rng, Pass::train())
        })?;
        log::info!(
            "UNet pretraining: loss {:.4} -> {:.4} over {} steps",
            history.first().copied().unwrap_or(f64::NAN),
            history.last().copied().unwrap_or(f64::NAN),
            history.len()
        );
    }
    b.freeze();
    Ok(b)
}

/// Evaluation-mode noise prediction, shape `latent_shape`.
pub fn unet_forward(
    b: &UNetBackbone,
    noisy_latent: &Tensor,
    timestep: usize,
    cond: &[f64],
    adapters: &AdapterMap,
) -> Result<Tensor> {
    b.validate_adapters(adapters)?;
    let mut g = Graph::new();
    let w = b.weights.bind(&mut g);
    let bound = super::bind_adapters(&mut g, adapters);
    let att = Attached {
        modules: adapters,
        bound: &bound,
    };
    let x = g.leaf(noisy_latent);
    let y = b.predict_noise(&mut g, &w, x, timestep, cond, Some(&att), &mut RngState::new(0), Pass::eval())?;
    Ok(g.tensor(y))
}

/// Fine-tuning objective for adapters on a frozen UNet. Training draws a
/// fresh timestep and noise per visit; validation uses a fixed draw per
/// example so losses are comparable across epochs.
pub struct UNetTask<'a> {
    backbone: &'a UNetBackbone,
    train: Vec<DiffusionExample>,
    val: Vec<DiffusionExample>,
}

impl<'a> UNetTask<'a> {
    pub fn new(
        backbone: &'a UNetBackbone,
        adapters: &AdapterMap,
        train: Vec<DiffusionExample>,
        val: Vec<DiffusionExample>,
    ) -> Result<Self> {
        backbone.validate_adapters(adapters)?;
        Ok(UNetTask { backbone, train, val })
    }
}

impl crate::train::AdapterObjective for UNetTask<'_> {
    fn len(&self, split: crate::train::Split) -> usize {
        match split {
            crate::train::Split::Train => self.train.len(),
            crate::train::Split::Val => self.val.len(),
        }
    }

    fn example_loss(
        &self,
        g: &mut Graph,
        adapters: &Attached<'_>,
        split: crate::train::Split,
        index: usize,
        rng: &mut RngState,
        pass: Pass,
    ) -> Result<Var> {
        let b = self.backbone;
        let (ex, (t, noise)) = match split {
            crate::train::Split::Train => (&self.train[index], b.draw_noise(rng)),
            crate::train::Split::Val => (
                &self.val[index],
                b.draw_noise(&mut RngState::new(0).derive_str("val-noise").derive(index as u64)),
            ),
        };
        let w = b.weights.bind(g);
        b.denoising_loss(g, &w, ex, t, &noise, Some(adapters), rng, pass)
    }
}
