//! Bottleneck adapters: linear, dilated-conv with squeeze-excitation, and
//! transformer variants, plus a budget solver over the bottleneck width.

mod budget;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

pub use budget::{
    count_for_spec, minimum_count, solve_bottleneck_for_budget, solve_split, BudgetSolution,
    SplitSolution, DEFAULT_TOLERANCE, MAX_BOTTLENECK_DIM,
};

use crate::checkpoint;
use crate::error::{LabError, Result};
use crate::rng::RngState;
use crate::tensor::{Graph, Tensor, Var};

pub const CONV_KERNEL: usize = 3;
pub const SE_REDUCTION: usize = 4;
pub const FFN_MULT: usize = 4;
pub const LN_EPS: f64 = 1e-5;
pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_RESIDUAL_BLOCKS: usize = 3;
pub const DEFAULT_DROPOUT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AdapterKind {
    LinearBottleneck,
    ConvResidualSE,
    TransformerAdapter,
    TransformerAdapter2D,
    ConvResidual2D,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 5] = [
        AdapterKind::LinearBottleneck,
        AdapterKind::ConvResidualSE,
        AdapterKind::TransformerAdapter,
        AdapterKind::TransformerAdapter2D,
        AdapterKind::ConvResidual2D,
    ];

    /// 2D kinds consume `[C×H×W]` latents and attach to the UNet only.
    pub fn is_2d(self) -> bool {
        matches!(self, Self::TransformerAdapter2D | Self::ConvResidual2D)
    }

    pub fn is_transformer(self) -> bool {
        matches!(self, Self::TransformerAdapter | Self::TransformerAdapter2D)
    }

    pub fn is_conv(self) -> bool {
        matches!(self, Self::ConvResidualSE | Self::ConvResidual2D)
    }

    fn code(self) -> u64 {
        Self::ALL.iter().position(|&k| k == self).unwrap() as u64
    }

    fn from_code(c: u64) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::LinearBottleneck => "LinearBottleneck",
            Self::ConvResidualSE => "ConvResidualSE",
            Self::TransformerAdapter => "TransformerAdapter",
            Self::TransformerAdapter2D => "TransformerAdapter2D",
            Self::ConvResidual2D => "ConvResidual2D",
        }
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture family as named in sweep grids; the backbone picks the kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ArchFamily {
    Linear,
    Conv,
    Transformer,
}

impl ArchFamily {
    pub const ALL: [ArchFamily; 3] = [ArchFamily::Linear, ArchFamily::Conv, ArchFamily::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Conv => "conv",
            Self::Transformer => "transformer",
        }
    }

    pub fn kind_for(self, two_d: bool) -> Result<AdapterKind> {
        Ok(match (self, two_d) {
            (Self::Linear, false) => AdapterKind::LinearBottleneck,
            (Self::Conv, false) => AdapterKind::ConvResidualSE,
            (Self::Transformer, false) => AdapterKind::TransformerAdapter,
            (Self::Conv, true) => AdapterKind::ConvResidual2D,
            (Self::Transformer, true) => AdapterKind::TransformerAdapter2D,
            (Self::Linear, true) => {
                return Err(LabError::Compatibility(
                    "linear adapters cannot attach to a UNet latent".into(),
                ))
            }
        })
    }
}

impl fmt::Display for ArchFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchFamily {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(Self::Linear),
            "conv" | "cnn" => Ok(Self::Conv),
            "transformer" => Ok(Self::Transformer),
            _ => Err(LabError::Vocabulary {
                field: "architecture",
                value: s.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    pub model_dim: usize,
    pub bottleneck_dim: usize,
    pub dropout_p: f64,
    pub num_heads: usize,
    pub num_residual_blocks: usize,
    pub stereo_expand: bool,
}

impl AdapterSpec {
    /// Spec with default heads, blocks and dropout. Transformer kinds use the
    /// largest default-compatible head count dividing the bottleneck.
    pub fn new(kind: AdapterKind, model_dim: usize, bottleneck_dim: usize) -> Self {
        Self {
            kind,
            model_dim,
            bottleneck_dim,
            dropout_p: DEFAULT_DROPOUT,
            num_heads: heads_for(bottleneck_dim),
            num_residual_blocks: DEFAULT_RESIDUAL_BLOCKS,
            stereo_expand: false,
        }
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout_p = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Config(m));
        if self.model_dim == 0 || self.bottleneck_dim == 0 {
            return bad(format!("dims must be positive: {self:?}"));
        }
        if self.bottleneck_dim > MAX_BOTTLENECK_DIM {
            return bad(format!(
                "bottleneck {} exceeds the cap {MAX_BOTTLENECK_DIM}",
                self.bottleneck_dim
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0,1)", self.dropout_p));
        }
        if self.kind.is_transformer()
            && (self.num_heads == 0 || self.bottleneck_dim % self.num_heads != 0)
        {
            return bad(format!(
                "bottleneck {} not divisible by {} heads",
                self.bottleneck_dim, self.num_heads
            ));
        }
        if self.kind.is_conv() && self.num_residual_blocks == 0 {
            return bad("conv adapters need at least one residual block".into());
        }
        if self.stereo_expand && self.kind.is_2d() {
            return bad("stereo_expand applies to autoregressive hosts only".into());
        }
        Ok(())
    }

    fn header(&self) -> Vec<u64> {
        vec![
            self.kind.code(),
            self.model_dim as u64,
            self.bottleneck_dim as u64,
            self.dropout_p.to_bits(),
            self.num_heads as u64,
            self.num_residual_blocks as u64,
            self.stereo_expand as u64,
        ]
    }

    fn from_header(h: &[u64], path: &Path) -> Result<Self> {
        let err = |r: &str| LabError::Format {
            path: path.to_path_buf(),
            reason: r.into(),
        };
        if h.len() != 8 {
            return Err(err("adapter header must hold 8 words"));
        }
        let spec = Self {
            kind: AdapterKind::from_code(h[0]).ok_or_else(|| err("unknown adapter kind"))?,
            model_dim: h[1] as usize,
            bottleneck_dim: h[2] as usize,
            dropout_p: f64::from_bits(h[3]),
            num_heads: h[4] as usize,
            num_residual_blocks: h[5] as usize,
            stereo_expand: h[6] != 0,
        };
        spec.validate().map_err(|e| err(&e.to_string()))?;
        Ok(spec)
    }
}

pub(crate) fn heads_for(bottleneck: usize) -> usize {
    [DEFAULT_HEADS, 2, 1]
        .into_iter()
        .find(|h| bottleneck % h == 0)
        .unwrap_or(1)
}

fn se_hidden(b: usize) -> usize {
    (b / SE_REDUCTION).max(1)
}

/// Every parameter tensor of the adapter a spec describes, in name order.
/// Construction and counting both go through this list.
pub fn param_shapes(spec: &AdapterSpec) -> Vec<(String, Vec<usize>)> {
    let (d, b, k) = (spec.model_dim, spec.bottleneck_dim, CONV_KERNEL);
    let mut v: Vec<(String, Vec<usize>)> = Vec::new();
    let mut add = |n: &str, s: &[usize]| v.push((n.to_string(), s.to_vec()));
    match spec.kind {
        AdapterKind::LinearBottleneck => {
            add("down.w", &[d, b]);
            add("down.b", &[b]);
            add("up.w", &[b, d]);
            add("up.b", &[d]);
        }
        AdapterKind::ConvResidualSE | AdapterKind::ConvResidual2D => {
            let two_d = spec.kind.is_2d();
            let kern = |co: usize, ci: usize| {
                if two_d {
                    vec![co, ci, k, k]
                } else {
                    vec![co, ci, k]
                }
            };
            add("down.w", &kern(b, d));
            add("down.b", &[b]);
            for i in 0..spec.num_residual_blocks {
                add(&format!("res{i}.w"), &kern(b, b));
                add(&format!("res{i}.b"), &[b]);
            }
            if !two_d {
                let r = se_hidden(b);
                add("se.fc1.w", &[b, r]);
                add("se.fc1.b", &[r]);
                add("se.fc2.w", &[r, b]);
                add("se.fc2.b", &[b]);
            }
            add("up.w", &kern(d, b));
            add("up.b", &[d]);
        }
        AdapterKind::TransformerAdapter | AdapterKind::TransformerAdapter2D => {
            add("down.w", &[d, b]);
            add("down.b", &[b]);
            for n in ["ln1", "ln2"] {
                add(&format!("{n}.g"), &[b]);
                add(&format!("{n}.b"), &[b]);
            }
            for n in ["q", "k", "v", "o"] {
                add(&format!("attn.{n}.w"), &[b, b]);
                add(&format!("attn.{n}.b"), &[b]);
            }
            add("ffn1.w", &[b, FFN_MULT * b]);
            add("ffn1.b", &[FFN_MULT * b]);
            add("ffn2.w", &[FFN_MULT * b, b]);
            add("ffn2.b", &[b]);
            add("up.w", &[b, d]);
            add("up.b", &[d]);
        }
    }
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v
}

fn init_param(name: &str, shape: &[usize], rng: &mut RngState) -> Tensor {
    // The up-projection starts at zero so a fresh adapter is an exact identity.
    if name.starts_with("up.") || name.ends_with(".b") {
        return Tensor::zeros(shape);
    }
    if name.ends_with(".g") {
        return Tensor::filled(shape, 1.0);
    }
    let fan_in = match shape.len() {
        2 => shape[0],
        _ => shape[1..].iter().product(),
    };
    Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// How a forward pass runs: dropout active or not, and whether 1D adapters
/// must respect time order (autoregressive hosts).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Pass {
    pub training: bool,
    pub causal: bool,
}

impl Pass {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train() -> Self {
        Self {
            training: true,
            causal: false,
        }
    }

    pub fn causal(mut self, on: bool) -> Self {
        self.causal = on;
        self
    }
}

/// Graph handles for one adapter's parameters, in name order.
#[derive(Debug, Clone)]
pub struct BoundAdapter {
    vars: BTreeMap<String, Var>,
}

impl BoundAdapter {
    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterModule {
    spec: AdapterSpec,
    params: BTreeMap<String, Tensor>,
    count: usize,
}

fn expect_kind(spec: &AdapterSpec, ok: &[AdapterKind], builder: &str) -> Result<()> {
    if ok.contains(&spec.kind) {
        Ok(())
    } else {
        Err(LabError::Config(format!("{builder} cannot build a {}", spec.kind)))
    }
}

pub fn build_linear_adapter(spec: &AdapterSpec, rng: &mut RngState) -> Result<AdapterModule> {
    expect_kind(spec, &[AdapterKind::LinearBottleneck], "build_linear_adapter")?;
    AdapterModule::construct(spec, rng)
}

pub fn build_conv_adapter(spec: &AdapterSpec, rng: &mut RngState) -> Result<AdapterModule> {
    expect_kind(
        spec,
        &[AdapterKind::ConvResidualSE, AdapterKind::ConvResidual2D],
        "build_conv_adapter",
    )?;
    AdapterModule::construct(spec, rng)
}

pub fn build_transformer_adapter(spec: &AdapterSpec, rng: &mut RngState) -> Result<AdapterModule> {
    expect_kind(
        spec,
        &[AdapterKind::TransformerAdapter, AdapterKind::TransformerAdapter2D],
        "build_transformer_adapter",
    )?;
    AdapterModule::construct(spec, rng)
}

pub fn count_parameters(module: &AdapterModule) -> usize {
    module.parameter_count()
}

impl AdapterModule {
    /// Builds any kind.
    pub fn build(spec: &AdapterSpec, rng: &mut RngState) -> Result<Self> {
        Self::construct(spec, rng)
    }

    fn construct(spec: &AdapterSpec, rng: &mut RngState) -> Result<Self> {
        spec.validate()?;
        let mut params = BTreeMap::new();
        for (name, shape) in param_shapes(spec) {
            let t = init_param(&name, &shape, rng).with_requires_grad(true);
            params.insert(name, t);
        }
        let count = params.values().map(Tensor::numel).sum();
        Ok(Self {
            spec: spec.clone(),
            params,
            count,
        })
    }

    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    pub fn parameter_count(&self) -> usize {
        self.count
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    /// Mutable access to parameter values; shapes cannot change.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundAdapter {
        BoundAdapter {
            vars: self
                .params
                .iter()
                .map(|(n, t)| (n.clone(), g.leaf(t)))
                .collect(),
        }
    }

    /// Wraps graph handles already created for this module's parameters,
    /// given in name order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundAdapter> {
        if vars.len() != self.params.len() {
            return Err(LabError::Contract(format!(
                "{} handles for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        Ok(BoundAdapter {
            vars: self.params.keys().cloned().zip(vars.iter().copied()).collect(),
        })
    }

    /// Gradients for every parameter after `g.backward`, in name order.
    pub fn grads(&self, g: &Graph, bound: &BoundAdapter) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .map(|(n, t)| {
                g.grad(bound.var(n))
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect()
    }

    fn check_host(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        let d = self.spec.model_dim;
        let ok = if self.spec.kind.is_2d() {
            s.len() == 3 && s[0] == d
        } else {
            s.len() == 2 && s[1] == d
        };
        if ok {
            Ok(())
        } else {
            let want = if self.spec.kind.is_2d() { vec![d, 0, 0] } else { vec![0, d] };
            Err(LabError::Dimension {
                op: "adapter input",
                lhs: s.to_vec(),
                rhs: want,
            })
        }
    }

    /// Residual adapter forward. 1D kinds take `[T×d]`, 2D kinds `[d×H×W]`;
    /// the output always has the input's shape. In causal mode, output
    /// position `t` of a 1D adapter depends only on inputs `0..=t`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundAdapter,
        x: Var,
        rng: &mut RngState,
        pass: Pass,
    ) -> Result<Var> {
        self.check_host(g, x)?;
        let drop = self.spec.dropout_p;
        let training = pass.training;
        let causal = pass.causal && !self.spec.kind.is_2d();
        let delta = match self.spec.kind {
            AdapterKind::LinearBottleneck => {
                let h = affine(g, x, p.var("down.w"), p.var("down.b"))?;
                let h = g.gelu(h);
                let h = g.dropout(h, drop, rng, training)?;
                affine(g, h, p.var("up.w"), p.var("up.b"))?
            }
            AdapterKind::ConvResidualSE => {
                let xt = g.transpose(x)?;
                let h = self.conv_trunk(g, p, xt, causal)?;
                let h = self.squeeze_excite(g, p, h, causal)?;
                let u = conv1(g, h, p.var("up.w"), p.var("up.b"), 1, causal)?;
                let u = g.dropout(u, drop, rng, training)?;
                g.transpose(u)?
            }
            AdapterKind::ConvResidual2D => {
                let h = self.conv_trunk(g, p, x, false)?;
                let u = conv2(g, h, p.var("up.w"), p.var("up.b"), 1)?;
                g.dropout(u, drop, rng, training)?
            }
            AdapterKind::TransformerAdapter => self.transformer_delta(g, p, x, rng, training, causal)?,
            AdapterKind::TransformerAdapter2D => {
                let s = g.shape(x).to_vec();
                let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
                let tokens = g.transpose(flat)?;
                let d = self.transformer_delta(g, p, tokens, rng, training, false)?;
                let d = g.transpose(d)?;
                g.reshape(d, &s)?
            }
        };
        g.add(x, delta)
    }

    /// Forward followed by the stereo expansion: `[2×T×d]` with both channels
    /// equal to the mono output.
    pub fn forward_stereo(
        &self,
        g: &mut Graph,
        p: &BoundAdapter,
        x: Var,
        rng: &mut RngState,
        pass: Pass,
    ) -> Result<Var> {
        let y = self.forward(g, p, x, rng, pass)?;
        g.stack(&[y, y])
    }

    /// Down-conv then the dilated residual stack, on `[C×...]` layout.
    fn conv_trunk(&self, g: &mut Graph, p: &BoundAdapter, x: Var, causal: bool) -> Result<Var> {
        let h = if self.spec.kind.is_2d() {
            conv2(g, x, p.var("down.w"), p.var("down.b"), 1)?
        } else {
            conv1(g, x, p.var("down.w"), p.var("down.b"), 1, causal)?
        };
        self.residual_stack(g, p, h, causal)
    }

    /// `h + gelu(conv_dil(h) + b)` per block, dilation doubling each block.
    pub fn residual_stack(&self, g: &mut Graph, p: &BoundAdapter, mut h: Var, causal: bool) -> Result<Var> {
        let two_d = self.spec.kind.is_2d();
        for i in 0..self.spec.num_residual_blocks {
            let dil = 1usize << i;
            let w = p.var(&format!("res{i}.w"));
            let b = p.var(&format!("res{i}.b"));
            let r = if two_d {
                conv2(g, h, w, b, dil)?
            } else {
                conv1(g, h, w, b, dil, causal)?
            };
            let r = g.gelu(r);
            h = g.add(h, r)?;
        }
        Ok(h)
    }

    /// Channel gate: global average pool, two-layer MLP, sigmoid. The causal
    /// form pools over the past only, giving one gate per time step.
    fn squeeze_excite(&self, g: &mut Graph, p: &BoundAdapter, h: Var, causal: bool) -> Result<Var> {
        if !causal {
            let gate = self.se_gate(g, p, h)?;
            return g.mul_channel(h, gate);
        }
        let s = g.cum_mean_last(h);
        let s = g.transpose(s)?;
        let gate = self.gate_mlp(g, p, s)?;
        let gate = g.transpose(gate)?;
        g.mul(h, gate)
    }

    fn gate_mlp(&self, g: &mut Graph, p: &BoundAdapter, s: Var) -> Result<Var> {
        let z = affine(g, s, p.var("se.fc1.w"), p.var("se.fc1.b"))?;
        let z = g.relu(z);
        let z = affine(g, z, p.var("se.fc2.w"), p.var("se.fc2.b"))?;
        Ok(g.sigmoid(z))
    }

    /// Per-channel sigmoid weights for a `[b×T]` feature map.
    pub fn se_gate(&self, g: &mut Graph, p: &BoundAdapter, h: Var) -> Result<Var> {
        let b = self.spec.bottleneck_dim;
        let s = g.mean_last(h);
        let s = g.reshape(s, &[1, b])?;
        let z = self.gate_mlp(g, p, s)?;
        g.reshape(z, &[b])
    }

    fn transformer_delta(
        &self,
        g: &mut Graph,
        p: &BoundAdapter,
        x: Var,
        rng: &mut RngState,
        training: bool,
        causal: bool,
    ) -> Result<Var> {
        let drop = self.spec.dropout_p;
        let heads = self.spec.num_heads;
        let h = affine(g, x, p.var("down.w"), p.var("down.b"))?;

        let a = g.layer_norm(h, p.var("ln1.g"), p.var("ln1.b"), LN_EPS)?;
        let q = affine(g, a, p.var("attn.q.w"), p.var("attn.q.b"))?;
        let k = affine(g, a, p.var("attn.k.w"), p.var("attn.k.b"))?;
        let v = affine(g, a, p.var("attn.v.w"), p.var("attn.v.b"))?;
        let (q, k, v) = (
            g.split_heads(q, heads)?,
            g.split_heads(k, heads)?,
            g.split_heads(v, heads)?,
        );
        let o = g.attention(q, k, v, causal)?;
        let o = g.merge_heads(o)?;
        let o = affine(g, o, p.var("attn.o.w"), p.var("attn.o.b"))?;
        let o = g.dropout(o, drop, rng, training)?;
        let h = g.add(h, o)?;

        let f = g.layer_norm(h, p.var("ln2.g"), p.var("ln2.b"), LN_EPS)?;
        let f = affine(g, f, p.var("ffn1.w"), p.var("ffn1.b"))?;
        let f = g.gelu(f);
        let f = g.dropout(f, drop, rng, training)?;
        let f = affine(g, f, p.var("ffn2.w"), p.var("ffn2.b"))?;
        let h = g.add(h, f)?;

        affine(g, h, p.var("up.w"), p.var("up.b"))
    }

    /// Evaluation-mode forward on a plain tensor.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let xv = g.leaf(x);
        let y = self.forward(&mut g, &p, xv, &mut RngState::new(0), Pass::eval())?;
        Ok(g.tensor(y))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = self.spec.header();
        header.push(self.count as u64);
        checkpoint::save(path, &header, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load(path)?;
        let spec = AdapterSpec::from_header(&ck.header, path)?;
        let expected = param_shapes(&spec);
        let fmt = |r: String| LabError::Format {
            path: path.to_path_buf(),
            reason: r,
        };
        if expected.len() != ck.tensors.len() {
            return Err(fmt(format!(
                "expected {} tensors, found {}",
                expected.len(),
                ck.tensors.len()
            )));
        }
        let mut params = BTreeMap::new();
        for ((name, shape), (got_name, t)) in expected.into_iter().zip(ck.tensors) {
            if name != got_name || shape != t.shape() {
                return Err(fmt(format!("unexpected tensor {got_name} {:?}", t.shape())));
            }
            params.insert(name, t.with_requires_grad(true));
        }
        let count: usize = params.values().map(Tensor::numel).sum();
        if count as u64 != ck.header[7] {
            return Err(fmt("parameter count mismatch".into()));
        }
        Ok(Self { spec, params, count })
    }
}

/// `x·w + b` over the last axis.
pub(crate) fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub(crate) fn conv2(g: &mut Graph, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
    let y = g.conv2d(x, w, dilation)?;
    g.add_channel(y, b)
}

/// Same-length 1D conv; the causal form delays the centred kernel so it only
/// reaches back in time.
fn conv1(g: &mut Graph, x: Var, w: Var, b: Var, dilation: usize, causal: bool) -> Result<Var> {
    let y = g.conv1d(x, w, dilation)?;
    let y = if causal {
        g.shift_last(y, dilation * (CONV_KERNEL / 2))
    } else {
        y
    };
    g.add_channel(y, b)
}

#[cfg(test)]
mod tests;
