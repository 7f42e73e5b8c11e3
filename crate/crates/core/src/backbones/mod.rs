//! Frozen toy generative backbones with named adapter insertion points.

pub mod ar;
pub mod diffusion;
pub mod unet;


use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::adapters::{AdapterModule, BoundAdapter, Pass};
use crate::error::{LabError, Result};
use crate::rng::RngState;
use crate::tensor::{Graph, Tensor, Var};

pub use ar::{
    ar_forward, ar_generate, build_ar_backbone, build_ar_backbone_with, sample_categorical, ArBackbone, ArConfig,
    ArExample, ArTask,
};
pub use diffusion::{clip_to_latent, diffusion_sample, latent_to_clip, NoiseSchedule, LATENT_SCALE, X0_CLIP};
pub use unet::{
    build_unet_backbone, build_unet_backbone_with, unet_forward, DiffusionExample, UNetBackbone, UNetConfig, UNetTask,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BackboneKind {
    Ar,
    UNet,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 2] = [BackboneKind::Ar, BackboneKind::UNet];

    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::Ar => "AR",
            BackboneKind::UNet => "UNet",
        }
    }

    /// Adapters on this host use the 2D kinds.
    pub fn is_2d(self) -> bool {
        self == BackboneKind::UNet
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneKind {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ar" => Ok(BackboneKind::Ar),
            "unet" => Ok(BackboneKind::UNet),
            _ => Err(LabError::Config(format!("unknown backbone {s:?} (expected AR or UNet)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Block {
    Down,
    Mid,
    Up,
}

impl Block {
    pub const ALL: [Block; 3] = [Block::Down, Block::Mid, Block::Up];

    pub fn name(self) -> &'static str {
        match self {
            Block::Down => "down",
            Block::Mid => "mid",
            Block::Up => "up",
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Block {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "down" => Ok(Block::Down),
            "mid" => Ok(Block::Mid),
            "up" => Ok(Block::Up),
            _ => Err(LabError::Placement(format!("unknown block {s:?}"))),
        }
    }
}

/// Where an adapter transforms a hidden state. AR layers are numbered from 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InsertionPoint {
    AfterLayer(usize),
    AfterResnet(Block, usize),
    AfterTransformer(Block, usize),
    AfterBlock(Block),
}

impl InsertionPoint {
    pub fn backbone(self) -> BackboneKind {
        match self {
            InsertionPoint::AfterLayer(_) => BackboneKind::Ar,
            _ => BackboneKind::UNet,
        }
    }
}

impl fmt::Display for InsertionPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InsertionPoint::AfterLayer(i) => write!(f, "after_layer({i})"),
            InsertionPoint::AfterResnet(b, i) => write!(f, "after_resnet({b},{i})"),
            InsertionPoint::AfterTransformer(b, i) => write!(f, "after_transformer({b},{i})"),
            InsertionPoint::AfterBlock(b) => write!(f, "after_block({b})"),
        }
    }
}

impl FromStr for InsertionPoint {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || LabError::Placement(format!("cannot parse insertion point {s:?}"));
        let (head, rest) = s.trim().split_once('(').ok_or_else(bad)?;
        let args: Vec<&str> = rest.strip_suffix(')').ok_or_else(bad)?.split(',').map(str::trim).collect();
        let idx = |a: &str| a.parse::<usize>().map_err(|_| bad());
        match (head, args.as_slice()) {
            ("after_layer", [i]) => Ok(InsertionPoint::AfterLayer(idx(i)?)),
            ("after_block", [b]) => Ok(InsertionPoint::AfterBlock(b.parse()?)),
            ("after_resnet", [b, i]) => Ok(InsertionPoint::AfterResnet(b.parse()?, idx(i)?)),
            ("after_transformer", [b, i]) => Ok(InsertionPoint::AfterTransformer(b.parse()?, idx(i)?)),
            _ => Err(bad()),
        }
    }
}

pub type AdapterMap = BTreeMap<InsertionPoint, AdapterModule>;
pub type BoundMap = BTreeMap<InsertionPoint, BoundAdapter>;

pub fn bind_adapters(g: &mut Graph, adapters: &AdapterMap) -> BoundMap {
    adapters.iter().map(|(p, m)| (*p, m.bind(g))).collect()
}

/// Adapters in use for one forward pass, with their graph handles.
pub struct Attached<'a> {
    pub modules: &'a AdapterMap,
    pub bound: &'a BoundMap,
}

impl Attached<'_> {
    /// Applies the adapter registered at `point`, if any. Stereo-expanded
    /// adapters are folded back to mono by averaging the two channels.
    pub fn apply(
        &self,
        g: &mut Graph,
        point: InsertionPoint,
        h: Var,
        rng: &mut RngState,
        pass: Pass,
    ) -> Result<Var> {
        let Some(m) = self.modules.get(&point) else {
            return Ok(h);
        };
        let p = &self.bound[&point];
        if m.spec().stereo_expand {
            let y = m.forward_stereo(g, p, h, rng, pass)?;
            g.mean_leading(y)
        } else {
            m.forward(g, p, h, rng, pass)
        }
    }
}

/// Named, frozen weight store shared by both backbones.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Weights {
    tensors: BTreeMap<String, Tensor>,
}

impl Weights {
    pub(crate) fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("backbone has no tensor {name}"))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors
            .values()
            .filter(|t| t.requires_grad())
            .map(Tensor::numel)
            .sum()
    }

    pub fn freeze(&mut self) {
        self.tensors.values_mut().for_each(|t| t.set_requires_grad(false));
    }

    pub fn is_frozen(&self) -> bool {
        self.tensors.values().all(|t| !t.requires_grad())
    }

    /// Order-sensitive digest over every tensor's bits.
    pub fn checksum(&self) -> u64 {
        let mut h = crate::rng::fnv1a(b"weights");
        for (name, t) in &self.tensors {
            h = h.rotate_left(7) ^ crate::rng::fnv1a(name.as_bytes()) ^ t.checksum();
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        h
    }

    /// Binds every tensor as a graph leaf (frozen tensors carry no gradient).
    pub fn bind(&self, g: &mut Graph) -> BoundWeights {
        BoundWeights(self.tensors.iter().map(|(n, t)| (n.clone(), g.leaf(t))).collect())
    }
}

pub struct BoundWeights(BTreeMap<String, Var>);

impl BoundWeights {
    pub fn var(&self, name: &str) -> Var {
        *self
            .0
            .get(name)
            .unwrap_or_else(|| panic!("backbone has no tensor {name}"))
    }
}

/// Common surface of the two backbones.
pub trait Backbone {
    fn kind(&self) -> BackboneKind;
    fn weights(&self) -> &Weights;
    fn insertion_points(&self) -> Vec<InsertionPoint>;
    /// Feature width an adapter at `point` must have.
    fn adapter_dim(&self, point: InsertionPoint) -> Result<usize>;

    fn validate_point(&self, point: InsertionPoint) -> Result<()> {
        if self.insertion_points().contains(&point) {
            Ok(())
        } else {
            Err(LabError::Placement(format!(
                "{point} is not an insertion point of the {} backbone",
                self.kind()
            )))
        }
    }

    fn validate_adapters(&self, adapters: &AdapterMap) -> Result<()> {
        for (p, m) in adapters {
            self.validate_point(*p)?;
            let d = self.adapter_dim(*p)?;
            if m.spec().model_dim != d || m.spec().kind.is_2d() != self.kind().is_2d() {
                return Err(LabError::Compatibility(format!(
                    "{} adapter with model_dim {} cannot sit at {p} (needs a {} adapter of dim {d})",
                    m.spec().kind,
                    m.spec().model_dim,
                    if self.kind().is_2d() { "2D" } else { "1D" }
                )));
            }
        }
        Ok(())
    }

    fn checksum(&self) -> u64 {
        self.weights().checksum()
    }
}

/// Pre-LN transformer block on `[T×d]` tokens: attention then FFN, both
/// residual. Shared by the AR layers and the UNet transformer units.
pub(crate) fn transformer_block(
    g: &mut Graph,
    w: &BoundWeights,
    prefix: &str,
    x: Var,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    use crate::adapters::{affine, LN_EPS};
    let v = |n: &str| w.var(&format!("{prefix}.{n}"));
    let a = g.layer_norm(x, v("ln1.g"), v("ln1.b"), LN_EPS)?;
    let q = affine(g, a, v("attn.q.w"), v("attn.q.b"))?;
    let k = affine(g, a, v("attn.k.w"), v("attn.k.b"))?;
    let vv = affine(g, a, v("attn.v.w"), v("attn.v.b"))?;
    let (q, k, vv) = (g.split_heads(q, heads)?, g.split_heads(k, heads)?, g.split_heads(vv, heads)?);
    let o = g.attention(q, k, vv, causal)?;
    let o = g.merge_heads(o)?;
    let o = affine(g, o, v("attn.o.w"), v("attn.o.b"))?;
    let x = g.add(x, o)?;
    let f = g.layer_norm(x, v("ln2.g"), v("ln2.b"), LN_EPS)?;
    let f = affine(g, f, v("ffn1.w"), v("ffn1.b"))?;
    let f = g.gelu(f);
    let f = affine(g, f, v("ffn2.w"), v("ffn2.b"))?;
    g.add(x, f)
}

/// Parameter shapes of one transformer block of width `d`.
pub(crate) fn transformer_block_shapes(prefix: &str, d: usize, ffn: usize) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for n in ["ln1", "ln2"] {
        out.push((format!("{prefix}.{n}.g"), vec![d]));
        out.push((format!("{prefix}.{n}.b"), vec![d]));
    }
    for n in ["q", "k", "v", "o"] {
        out.push((format!("{prefix}.attn.{n}.w"), vec![d, d]));
        out.push((format!("{prefix}.attn.{n}.b"), vec![d]));
    }
    out.push((format!("{prefix}.ffn1.w"), vec![d, ffn]));
    out.push((format!("{prefix}.ffn1.b"), vec![ffn]));
    out.push((format!("{prefix}.ffn2.w"), vec![ffn, d]));
    out.push((format!("{prefix}.ffn2.b"), vec![d]));
    out
}

/// Default initialisation by parameter name: norms gain 1, biases 0,
/// everything else N(0, 1/fan_in) with `fan_in` from the leading axes.
pub(crate) fn init_tensor(name: &str, shape: &[usize], rng: &mut RngState) -> Tensor {
    if name.ends_with(".g") {
        return Tensor::filled(shape, 1.0);
    }
    if name.ends_with(".b") {
        return Tensor::zeros(shape);
    }
    let fan_in: usize = match shape.len() {
        2 => shape[0],
        4 => shape[1] * shape[2] * shape[3],
        _ => shape.iter().skip(1).product::<usize>().max(1),
    };
    Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Writes a weight store as a checkpoint with the given header words.
pub(crate) fn save_weights(path: &std::path::Path, header: &[u64], w: &Weights) -> Result<()> {
    crate::checkpoint::save(path, header, w.tensors())
}

/// Reads a checkpoint written by [`save_weights`]; tensors come back frozen.
pub(crate) fn load_weights(path: &std::path::Path) -> Result<(Vec<u64>, Weights)> {
    let ck = crate::checkpoint::load(path)?;
    let mut w = Weights::default();
    for (name, t) in ck.tensors {
        w.insert(name, t.with_requires_grad(false));
    }
    Ok((ck.header, w))
}

pub(crate) fn header_error(path: &std::path::Path, what: &str) -> LabError {
    LabError::Format {
        path: path.to_path_buf(),
        reason: format!("not a {what} checkpoint"),
    }
}

/// Fixed pretraining schedule that turns a random init into a usable but
/// imperfect frozen host.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Source groups per genre in the mixed pretraining corpus.
    pub groups_per_genre: usize,
    pub clips_per_group: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 200,
            batch_size: 8,
            learning_rate: 2e-3,
            groups_per_genre: 8,
            clips_per_group: 4,
        }
    }
}

/// Mixed two-genre corpus used only for pretraining; seeded apart from any
/// experiment corpus.
pub(crate) fn pretrain_corpus(seed: u64, cfg: &PretrainConfig) -> Result<crate::corpus::Corpus> {
    crate::corpus::generate_corpus(&crate::corpus::CorpusConfig {
        seed: RngState::new(seed).derive_str("pretrain-corpus").next_u64(),
        groups_per_genre: cfg.groups_per_genre,
        clips_per_group: cfg.clips_per_group,
    })
}

/// AdamW over every trainable tensor of `weights`, on batches drawn
/// uniformly from `n` examples. Returns the loss of each step.
pub(crate) fn pretrain_weights(
    weights: &mut Weights,
    cfg: &PretrainConfig,
    n: usize,
    seed: u64,
    loss: impl Fn(&mut Graph, &BoundWeights, usize, &mut RngState) -> Result<Var>,
) -> Result<Vec<f64>> {
    use crate::train::{adamw_step, AdamState, TrainConfig};
    if n == 0 {
        return Err(LabError::Data("empty pretraining set".into()));
    }
    let train_cfg = TrainConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: 0.0,
        batch_size: cfg.batch_size,
        seed,
        ..TrainConfig::ar_default()
    };
    let names: Vec<String> = weights
        .tensors()
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, _)| n.clone())
        .collect();
    let mut state = AdamState::for_sizes(names.iter().map(|n| weights.get(n).numel()));
    let mut rng = RngState::new(seed).derive_str("pretrain");
    let mut history = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut g = Graph::new();
        let w = weights.bind(&mut g);
        let mut total: Option<Var> = None;
        for _ in 0..cfg.batch_size {
            let i = rng.below(n);
            let l = loss(&mut g, &w, i, &mut rng)?;
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        let total = g.scale(total.expect("batch_size >= 1"), 1.0 / cfg.batch_size as f64);
        history.push(g.value(total)[0]);
        g.backward(total)?;
        let grads: Vec<Vec<f64>> = names
            .iter()
            .map(|n| {
                let v = w.var(n);
                g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).len()])
            })
            .collect();
        // release the graph's shared buffers so the update happens in place
        drop(g);
        let tensors = weights.tensors_mut();
        let mut params: Vec<&mut [f64]> = tensors
            .iter_mut()
            .filter(|(n, _)| names.binary_search(n).is_ok())
            .map(|(_, t)| t.data_mut())
            .collect();
        adamw_step(&mut params, &grads, &mut state, &train_cfg)?;
    }
    Ok(history)
}
