//! Causal token transformer with additive prompt conditioning.

use std::ops::RangeInclusive;

use super::{
    init_tensor, pretrain_corpus, pretrain_weights, transformer_block, transformer_block_shapes, AdapterMap,
    Attached, Backbone, BackboneKind, BoundWeights, InsertionPoint, PretrainConfig, Weights,
};
use crate::adapters::{Pass, LN_EPS};
use crate::corpus::codec::{TOKENS_PER_CLIP, VOCAB_SIZE};
use crate::corpus::{embed_prompt, tokenize, COND_DIM};
use crate::error::{LabError, Result};
use crate::rng::RngState;
use crate::tensor::kernels::std_normal_cdf;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ArConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub context_len: usize,
    pub cond_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl Default for ArConfig {
    fn default() -> Self {
        ArConfig {
            vocab_size: VOCAB_SIZE,
            d_model: 64,
            num_layers: 6,
            context_len: 128,
            cond_dim: COND_DIM,
            heads: 4,
            ffn_dim: 256,
        }
    }
}

impl ArConfig {
    /// Index of the start-of-sequence token in the input embedding table.
    pub fn bos(&self) -> usize {
        self.vocab_size
    }

    fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d) = (self.vocab_size, self.d_model);
        let mut out = vec![
            ("tok_emb".to_string(), vec![v + 1, d]),
            ("emb_out".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.context_len, d]),
            ("cond.w".to_string(), vec![self.cond_dim, d]),
            ("ln_f.g".to_string(), vec![d]),
            ("ln_f.b".to_string(), vec![d]),
            ("head.w".to_string(), vec![d, v]),
            ("head.b".to_string(), vec![v]),
        ];
        for i in 1..=self.num_layers {
            out.extend(transformer_block_shapes(&format!("layer{i}"), d, self.ffn_dim));
        }
        out
    }
}

/// One training sequence: target tokens and the prompt conditioning vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ArExample {
    pub tokens: Vec<usize>,
    pub cond: Vec<f64>,
}

impl ArExample {
    pub fn from_clip(waveform: &[f64], prompt: &str) -> Self {
        ArExample {
            tokens: tokenize(waveform),
            cond: embed_prompt(prompt),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArBackbone {
    config: ArConfig,
    weights: Weights,
}

impl ArBackbone {
    /// Random, unfrozen weights. `emb_out` is a fixed random code book: it is
    /// the target space of the embedding-reconstruction loss and never trains.
    pub fn random(config: ArConfig, seed: u64) -> Self {
        let root = RngState::new(seed);
        let mut weights = Weights::default();
        for (name, shape) in config.shapes() {
            let mut rng = root.derive_str(&name);
            let t = match name.as_str() {
                "emb_out" => Tensor::randn(&shape, 1.0, &mut rng),
                "tok_emb" | "pos_emb" => Tensor::randn(&shape, 0.5, &mut rng),
                _ => init_tensor(&name, &shape, &mut rng),
            };
            weights.insert(name.clone(), t.with_requires_grad(name != "emb_out"));
        }
        ArBackbone { config, weights }
    }

    pub fn from_weights(config: ArConfig, weights: Weights) -> Result<Self> {
        for (name, shape) in config.shapes() {
            match weights.tensors().get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                _ => return Err(LabError::Contract(format!("AR weights lack {name} {shape:?}"))),
            }
        }
        Ok(ArBackbone { config, weights })
    }

    pub fn config(&self) -> &ArConfig {
        &self.config
    }

    pub fn freeze(&mut self) {
        self.weights.freeze();
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let c = &self.config;
        let header = [0, c.vocab_size, c.d_model, c.num_layers, c.context_len, c.cond_dim, c.heads, c.ffn_dim];
        super::save_weights(path, &header.map(|v| v as u64), &self.weights)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (h, weights) = super::load_weights(path)?;
        if h.len() != 8 || h[0] != 0 {
            return Err(super::header_error(path, "AR backbone"));
        }
        let h: Vec<usize> = h.iter().map(|&v| v as usize).collect();
        let config = ArConfig {
            vocab_size: h[1],
            d_model: h[2],
            num_layers: h[3],
            context_len: h[4],
            cond_dim: h[5],
            heads: h[6],
            ffn_dim: h[7],
        };
        Self::from_weights(config, weights)
    }

    fn check_inputs(&self, tokens: &[usize], cond: &[f64]) -> Result<()> {
        let c = &self.config;
        if tokens.is_empty() || tokens.len() > c.context_len {
            return Err(LabError::Range(format!(
                "sequence length {} outside 1..={}",
                tokens.len(),
                c.context_len
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= c.vocab_size) {
            return Err(LabError::Range(format!("token {t} >= vocab size {}", c.vocab_size)));
        }
        if cond.len() != c.cond_dim {
            return Err(LabError::Dimension {
                op: "ar conditioning",
                lhs: vec![cond.len()],
                rhs: vec![c.cond_dim],
            });
        }
        Ok(())
    }

    /// Input embeddings for teacher forcing: position i sees `BOS, t0..t(i-1)`.
    pub(crate) fn embed(&self, g: &mut Graph, w: &BoundWeights, tokens: &[usize], cond: &[f64]) -> Result<Var> {
        let n = tokens.len();
        let ids: Vec<usize> = std::iter::once(self.config.bos()).chain(tokens[..n - 1].iter().copied()).collect();
        let x = g.gather(w.var("tok_emb"), &ids)?;
        let pos: Vec<usize> = (0..n).collect();
        let p = g.gather(w.var("pos_emb"), &pos)?;
        let x = g.add(x, p)?;
        let c = g.constant(&[1, self.config.cond_dim], cond.to_vec())?;
        let c = g.matmul(c, w.var("cond.w"))?;
        let c = g.reshape(c, &[self.config.d_model])?;
        g.add_row(x, c)
    }

    /// Runs `layers`, applying any adapter registered after each one.
    pub(crate) fn run_layers(
        &self,
        g: &mut Graph,
        w: &BoundWeights,
        mut h: Var,
        layers: RangeInclusive<usize>,
        adapters: Option<&Attached<'_>>,
        rng: &mut RngState,
        pass: Pass,
    ) -> Result<Var> {
        for i in layers {
            h = transformer_block(g, w, &format!("layer{i}"), h, self.config.heads, true)?;
            if let Some(a) = adapters {
                h = a.apply(g, InsertionPoint::AfterLayer(i), h, rng, pass.causal(true))?;
            }
        }
        Ok(h)
    }

    pub(crate) fn head(&self, g: &mut Graph, w: &BoundWeights, h: Var) -> Result<Var> {
        let h = g.layer_norm(h, w.var("ln_f.g"), w.var("ln_f.b"), LN_EPS)?;
        let y = g.matmul(h, w.var("head.w"))?;
        g.add_row(y, w.var("head.b"))
    }

    /// Embedding-reconstruction loss: the softmax-weighted mix of code-book
    /// rows against the code-book row of each target token.
    pub(crate) fn embedding_loss(&self, g: &mut Graph, w: &BoundWeights, logits: Var, targets: &[usize]) -> Result<Var> {
        let p = g.softmax(logits);
        let pred = g.matmul(p, w.var("emb_out"))?;
        let want = g.gather(w.var("emb_out"), targets)?;
        g.mse(pred, want)
    }

    /// Full forward in one graph, from tokens to logits.
    pub(crate) fn logits_var(
        &self,
        g: &mut Graph,
        w: &BoundWeights,
        ex: &ArExample,
        adapters: Option<&Attached<'_>>,
        rng: &mut RngState,
        pass: Pass,
    ) -> Result<Var> {
        self.check_inputs(&ex.tokens, &ex.cond)?;
        let h = self.embed(g, w, &ex.tokens, &ex.cond)?;
        let h = self.run_layers(g, w, h, 1..=self.config.num_layers, adapters, rng, pass)?;
        self.head(g, w, h)
    }
}

impl Backbone for ArBackbone {
    fn kind(&self) -> BackboneKind {
        BackboneKind::Ar
    }

    fn weights(&self) -> &Weights {
        &self.weights
    }

    fn insertion_points(&self) -> Vec<InsertionPoint> {
        (1..=self.config.num_layers).map(InsertionPoint::AfterLayer).collect()
    }

    fn adapter_dim(&self, point: InsertionPoint) -> Result<usize> {
        self.validate_point(point)?;
        Ok(self.config.d_model)
    }
}

/// Seeded init followed by the fixed pretraining schedule, then frozen.
pub fn build_ar_backbone(seed: u64) -> Result<ArBackbone> {
    build_ar_backbone_with(ArConfig::default(), &PretrainConfig::default(), seed)
}

pub fn build_ar_backbone_with(config: ArConfig, pretrain: &PretrainConfig, seed: u64) -> Result<ArBackbone> {
    let mut b = ArBackbone::random(config, seed);
    if pretrain.steps > 0 {
        let corpus = pretrain_corpus(seed, pretrain)?;
        let ctx = b.config.context_len.min(TOKENS_PER_CLIP);
        let data: Vec<ArExample> = corpus
            .clips
            .iter()
            .zip(&corpus.prompts)
            .map(|(c, p)| {
                let mut ex = ArExample::from_clip(&c.waveform, &p.text);
                ex.tokens.truncate(ctx);
                ex
            })
            .collect();
        let model = b.clone();
        let history = pretrain_weights(&mut b.weights, pretrain, data.len(), seed, |g, w, i, rng| {
            let logits = model.logits_var(g, w, &data[i], None, rng, Pass::train())?;
            model.embedding_loss(g, w, logits, &data[i].tokens)
        })?;
        log::info!(
            "AR pretraining: loss {:.4} -> {:.4} over {} steps",
            history.first().copied().unwrap_or(f64::NAN),
            history.last().copied().unwrap_or(f64::NAN),
            history.len()
        );
    }
    b.freeze();
    Ok(b)
}

/// Evaluation-mode logits `[n × vocab]`; row i scores token i given the
/// tokens before it.
pub fn ar_forward(b: &ArBackbone, tokens: &[usize], cond: &[f64], adapters: &AdapterMap) -> Result<Tensor> {
    b.validate_adapters(adapters)?;
    let mut g = Graph::new();
    let w = b.weights.bind(&mut g);
    let bound = super::bind_adapters(&mut g, adapters);
    let att = Attached {
        modules: adapters,
        bound: &bound,
    };
    let ex = ArExample {
        tokens: tokens.to_vec(),
        cond: cond.to_vec(),
    };
    let y = b.logits_var(&mut g, &w, &ex, Some(&att), &mut RngState::new(0), Pass::eval())?;
    Ok(g.tensor(y))
}

/// Draws an index from a probability vector by inverting its CDF.
pub fn sample_categorical(probs: &[f64], rng: &mut RngState) -> usize {
    let u = rng.uniform() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Key/value rows of one layer for incremental decoding.
#[derive(Default)]
struct KvCache {
    k: Vec<f64>,
    v: Vec<f64>,
}

fn affine_row(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let n = b.numel();
    let mut y = b.data().to_vec();
    for (i, xi) in x.iter().enumerate() {
        let row = &w.data()[i * n..(i + 1) * n];
        for (yj, wj) in y.iter_mut().zip(row) {
            *yj += xi * wj;
        }
    }
    y
}

fn layer_norm_row(x: &[f64], g: &Tensor, b: &Tensor) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    let rs = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .zip(g.data().iter().zip(b.data()))
        .map(|(v, (g, b))| (v - mean) * rs * g + b)
        .collect()
}

impl ArBackbone {
    /// One new position through layer `i`, extending that layer's cache.
    fn layer_step(&self, i: usize, x: &[f64], cache: &mut KvCache) -> Vec<f64> {
        let w = |n: &str| self.weights.get(&format!("layer{i}.{n}"));
        let d = self.config.d_model;
        let heads = self.config.heads;
        let hd = d / heads;
        let a = layer_norm_row(x, w("ln1.g"), w("ln1.b"));
        let q = affine_row(&a, w("attn.q.w"), w("attn.q.b"));
        cache.k.extend(affine_row(&a, w("attn.k.w"), w("attn.k.b")));
        cache.v.extend(affine_row(&a, w("attn.v.w"), w("attn.v.b")));
        let len = cache.k.len() / d;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut o = vec![0.0; d];
        for h in 0..heads {
            let mut s: Vec<f64> = (0..len)
                .map(|t| {
                    let k = &cache.k[t * d + h * hd..t * d + (h + 1) * hd];
                    q[h * hd..(h + 1) * hd].iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale
                })
                .collect();
            crate::tensor::softmax_in_place(&mut s);
            for (t, p) in s.iter().enumerate() {
                for j in 0..hd {
                    o[h * hd + j] += p * cache.v[t * d + h * hd + j];
                }
            }
        }
        let o = affine_row(&o, w("attn.o.w"), w("attn.o.b"));
        let x: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
        let f = layer_norm_row(&x, w("ln2.g"), w("ln2.b"));
        let f: Vec<f64> = affine_row(&f, w("ffn1.w"), w("ffn1.b"))
            .into_iter()
            .map(|v| v * std_normal_cdf(v))
            .collect();
        let f = affine_row(&f, w("ffn2.w"), w("ffn2.b"));
        x.iter().zip(&f).map(|(a, b)| a + b).collect()
    }

    fn embed_row(&self, id: usize, pos: usize, cond: &[f64]) -> Vec<f64> {
        let d = self.config.d_model;
        let te = &self.weights.get("tok_emb").data()[id * d..(id + 1) * d];
        let pe = &self.weights.get("pos_emb").data()[pos * d..(pos + 1) * d];
        let cw = self.weights.get("cond.w").data();
        (0..d)
            .map(|j| te[j] + pe[j] + cond.iter().enumerate().map(|(k, c)| c * cw[k * d + j]).sum::<f64>())
            .collect()
    }
}

/// Temperature-1 ancestral sampling. Layers below the first adapter run
/// incrementally with key/value caches; from the first adapted layer on, the
/// whole prefix is recomputed each step so sequence-wide adapters see it all.
pub fn ar_generate(
    b: &ArBackbone,
    cond: &[f64],
    length: usize,
    adapters: &AdapterMap,
    rng: &mut RngState,
) -> Result<Vec<usize>> {
    let c = &b.config;
    if length > c.context_len {
        return Err(LabError::Range(format!(
            "cannot generate {length} tokens with context {}",
            c.context_len
        )));
    }
    if cond.len() != c.cond_dim {
        return Err(LabError::Dimension {
            op: "ar conditioning",
            lhs: vec![cond.len()],
            rhs: vec![c.cond_dim],
        });
    }
    b.validate_adapters(adapters)?;
    let first = adapters
        .keys()
        .filter_map(|p| match p {
            InsertionPoint::AfterLayer(i) => Some(*i),
            _ => None,
        })
        .min()
        .unwrap_or(c.num_layers + 1);
    let prefix_layers = first.min(c.num_layers);
    let mut caches: Vec<KvCache> = (0..prefix_layers).map(|_| KvCache::default()).collect();
    let mut prefix_rows: Vec<f64> = Vec::new();
    let mut out = Vec::with_capacity(length);
    let mut prev = c.bos();
    for pos in 0..length {
        let mut x = b.embed_row(prev, pos, cond);
        for (i, cache) in caches.iter_mut().enumerate() {
            x = b.layer_step(i + 1, &x, cache);
        }
        prefix_rows.extend_from_slice(&x);
        let logits = if first > c.num_layers {
            let w = |n: &str| b.weights.get(n);
            affine_row(&layer_norm_row(&x, w("ln_f.g"), w("ln_f.b")), w("head.w"), w("head.b"))
        } else {
            suffix_logits(b, &prefix_rows, pos + 1, first, adapters)?
        };
        let mut probs = logits;
        crate::tensor::softmax_in_place(&mut probs);
        prev = sample_categorical(&probs, rng);
        out.push(prev);
    }
    Ok(out)
}

/// Last-row logits from the output of layer `first` (already computed for
/// `len` positions): adapter at `first`, then the remaining layers.
fn suffix_logits(b: &ArBackbone, rows: &[f64], len: usize, first: usize, adapters: &AdapterMap) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let w = b.weights.bind(&mut g);
    let bound = super::bind_adapters(&mut g, adapters);
    let att = Attached {
        modules: adapters,
        bound: &bound,
    };
    let mut rng = RngState::new(0);
    let h = g.constant(&[len, b.config.d_model], rows.to_vec())?;
    let h = att.apply(&mut g, InsertionPoint::AfterLayer(first), h, &mut rng, Pass::eval().causal(true))?;
    let h = b.run_layers(&mut g, &w, h, first + 1..=b.config.num_layers, Some(&att), &mut rng, Pass::eval())?;
    let logits = b.head(&mut g, &w, h)?;
    let v = b.config.vocab_size;
    Ok(g.value(logits)[(len - 1) * v..len * v].to_vec())
}

/// Fine-tuning objective over a frozen AR host. Hidden states up to the first
/// adapted layer do not depend on adapter weights and are computed once.
pub struct ArTask<'a> {
    backbone: &'a ArBackbone,
    first: usize,
    train: Vec<(Tensor, Vec<usize>)>,
    val: Vec<(Tensor, Vec<usize>)>,
}

impl<'a> ArTask<'a> {
    pub fn new(backbone: &'a ArBackbone, adapters: &AdapterMap, train: &[ArExample], val: &[ArExample]) -> Result<Self> {
        backbone.validate_adapters(adapters)?;
        let first = adapters
            .keys()
            .filter_map(|p| match p {
                InsertionPoint::AfterLayer(i) => Some(*i),
                _ => None,
            })
            .min()
            .unwrap_or(backbone.config.num_layers);
        let cache = |exs: &[ArExample]| -> Result<Vec<(Tensor, Vec<usize>)>> {
            exs.iter()
                .map(|ex| {
                    backbone.check_inputs(&ex.tokens, &ex.cond)?;
                    let mut g = Graph::new();
                    let w = backbone.weights.bind(&mut g);
                    let h = backbone.embed(&mut g, &w, &ex.tokens, &ex.cond)?;
                    let h = backbone.run_layers(&mut g, &w, h, 1..=first, None, &mut RngState::new(0), Pass::eval())?;
                    Ok((g.tensor(h), ex.tokens.clone()))
                })
                .collect()
        };
        Ok(ArTask {
            backbone,
            first,
            train: cache(train)?,
            val: cache(val)?,
        })
    }
}

impl crate::train::AdapterObjective for ArTask<'_> {
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
        let (h, targets) = match split {
            crate::train::Split::Train => &self.train[index],
            crate::train::Split::Val => &self.val[index],
        };
        let b = self.backbone;
        let w = b.weights.bind(g);
        let h = g.leaf(h);
        let h = adapters.apply(g, InsertionPoint::AfterLayer(self.first), h, rng, pass.causal(true))?;
        let h = b.run_layers(g, &w, h, self.first + 1..=b.config.num_layers, Some(adapters), rng, pass)?;
        let logits = b.head(g, &w, h)?;
        b.embedding_loss(g, &w, logits, targets)
    }
}
