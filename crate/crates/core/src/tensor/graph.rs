use std::sync::Arc;

use super::kernels::{gemm, std_normal_cdf, std_normal_pdf, ConvGeom};
use super::{check_shape, Tensor};
use crate::error::{dim_err, LabError, Result};
use crate::rng::RngState;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f64>,
        heads: usize,
        len: usize,
        head_dim: usize,
        scale: f64,
    },
    Conv {
        x: Var,
        w: Var,
        geom: ConvGeom,
        c_out: usize,
        col: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Reshape(Var),
    Transpose(Var),
    SplitHeads(Var, usize),
    MergeHeads(Var, usize),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    MeanLast(Var),
    CumMeanLast(Var),
    ShiftLast(Var, usize),
    AvgPool2(Var),
    Upsample2(Var),
    Stack(Vec<Var>),
    MeanLeading(Var),
    Sum(Var),
    Mse(Var, Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Mul(a, b) | AddRow(a, b) | AddChannel(a, b)
            | MulChannel(a, b) | Mse(a, b) => vec![*a, *b],
            Scale(x, _) | Gelu(x) | Relu(x) | Sigmoid(x) | Softmax(x) | Reshape(x)
            | Transpose(x) | SplitHeads(x, _) | MergeHeads(x, _) | MeanLast(x) | CumMeanLast(x)
            | ShiftLast(x, _) | AvgPool2(x)
            | Upsample2(x) | MeanLeading(x) | Sum(x) => vec![*x],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Attention { q, k, v, .. } => vec![*q, *k, *v],
            Conv { x, w, .. } => vec![*x, *w],
            Dropout { x, .. } => vec![*x],
            Gather { table, .. } => vec![*table],
            Stack(xs) => xs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Operation tape. Nodes are appended in evaluation order, so every input of
/// node `k` has an index below `k` and the backward sweep is a reverse scan.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_shared(n.shape.clone(), Arc::clone(&n.value))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Handles of all nodes in tape order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    #[cfg(test)]
    pub(crate) fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            shape,
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.shared_data(),
            op: Op::Leaf,
            needs_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, 0.0, &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(dim_err("transpose", &s, &[2]));
        }
        let out = transpose2(s[0], s[1], self.value(x));
        Ok(self.push(vec![s[1], s[0]], out, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = check_shape(shape)?;
        if n != self.value(x).len() {
            return Err(dim_err("reshape", self.shape(x), shape));
        }
        let node = &self.nodes[x.0];
        let value = Arc::clone(&node.value);
        let needs_grad = node.needs_grad;
        self.nodes.push(Node {
            shape: shape.to_vec(),
            value,
            op: Op::Reshape(x),
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s))
    }

    /// `x[..., j] + bias[j]` (last-axis broadcast).
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx[sx.len() - 1] != sb[0] {
            return Err(dim_err("add_row", sx, sb));
        }
        let d = sb[0];
        let b = self.value(bias);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % d])
            .collect();
        Ok(self.push(sx.to_vec(), out, Op::AddRow(x, bias)))
    }

    /// `x[c, ...] + v[c]` (leading-axis broadcast).
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (sx, sv) = (self.shape(x), self.shape(v));
        if sv.len() != 1 || sx[0] != sv[0] {
            return Err(dim_err("add_channel", sx, sv));
        }
        let inner = self.value(x).len() / sx[0];
        let b = self.value(v);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, val)| val + b[i / inner])
            .collect();
        Ok(self.push(sx.to_vec(), out, Op::AddChannel(x, v)))
    }

    /// `x[c, ...] * w[c]` (leading-axis broadcast).
    pub fn mul_channel(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.len() != 1 || sx[0] != sw[0] {
            return Err(dim_err("mul_channel", sx, sw));
        }
        let inner = self.value(x).len() / sx[0];
        let g = self.value(w);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, val)| val * g[i / inner])
            .collect();
        Ok(self.push(sx.to_vec(), out, Op::MulChannel(x, w)))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v * std_normal_cdf(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid(x))
    }

    // ---- normalisation and attention ------------------------------------

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = sx[sx.len() - 1];
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(dim_err("layer_norm", &sx, self.shape(p)));
            }
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            sx,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let d = s[s.len() - 1];
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        self.push(s, out, Op::Softmax(x))
    }

    /// Scaled dot-product attention over `[heads × len × head_dim]` inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 3 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return Err(dim_err("attention", &s, self.shape(k)));
        }
        let (heads, len, head_dim) = (s[0], s[1], s[2]);
        let scale = 1.0 / (head_dim as f64).sqrt();
        let block = len * head_dim;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; heads * len * len];
        let mut out = vec![0.0; heads * block];
        for h in 0..heads {
            let p = &mut probs[h * len * len..(h + 1) * len * len];
            gemm(
                len,
                head_dim,
                len,
                &qv[h * block..(h + 1) * block],
                false,
                &kv[h * block..(h + 1) * block],
                true,
                0.0,
                p,
            );
            for i in 0..len {
                let row = &mut p[i * len..(i + 1) * len];
                let visible = if causal { i + 1 } else { len };
                for x in row[..visible].iter_mut() {
                    *x *= scale;
                }
                softmax_in_place(&mut row[..visible]);
                for x in row[visible..].iter_mut() {
                    *x = 0.0;
                }
            }
            gemm(
                len,
                len,
                head_dim,
                p,
                false,
                &vv[h * block..(h + 1) * block],
                false,
                0.0,
                &mut out[h * block..(h + 1) * block],
            );
        }
        Ok(self.push(
            s,
            out,
            Op::Attention {
                q,
                k,
                v,
                probs,
                heads,
                len,
                head_dim,
                scale,
            },
        ))
    }

    /// `[len × heads·head_dim]` → `[heads × len × head_dim]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || heads == 0 || s[1] % heads != 0 {
            return Err(dim_err("split_heads", &s, &[heads]));
        }
        let (len, d) = (s[0], s[1]);
        let hd = d / heads;
        let xs = self.value(x);
        let mut out = vec![0.0; xs.len()];
        for t in 0..len {
            for h in 0..heads {
                out[(h * len + t) * hd..(h * len + t + 1) * hd]
                    .copy_from_slice(&xs[t * d + h * hd..t * d + (h + 1) * hd]);
            }
        }
        Ok(self.push(vec![heads, len, hd], out, Op::SplitHeads(x, heads)))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(dim_err("merge_heads", &s, &[3]));
        }
        let (heads, len, hd) = (s[0], s[1], s[2]);
        let d = heads * hd;
        let xs = self.value(x);
        let mut out = vec![0.0; xs.len()];
        for t in 0..len {
            for h in 0..heads {
                out[t * d + h * hd..t * d + (h + 1) * hd]
                    .copy_from_slice(&xs[(h * len + t) * hd..(h * len + t + 1) * hd]);
            }
        }
        Ok(self.push(vec![len, d], out, Op::MergeHeads(x, heads)))
    }

    // ---- convolution ----------------------------------------------------

    /// Same-padded dilated convolution of `[c_in × T]` by `[c_out × c_in × K]`.
    pub fn conv1d(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[0] {
            return Err(dim_err("conv1d", &sx, &sw));
        }
        check_kernel(sw[2], dilation)?;
        let geom = ConvGeom {
            c_in: sx[0],
            h: 1,
            w: sx[1],
            k_h: 1,
            k_w: sw[2],
            dilation,
        };
        let out = self.conv_forward(x, w, geom, sw[0]);
        Ok(out)
    }

    /// Same-padded dilated convolution of `[c_in × H × W]` by `[c_out × c_in × K × K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(dim_err("conv2d", &sx, &sw));
        }
        check_kernel(sw[2], dilation)?;
        let geom = ConvGeom {
            c_in: sx[0],
            h: sx[1],
            w: sx[2],
            k_h: sw[2],
            k_w: sw[3],
            dilation,
        };
        Ok(self.conv_forward(x, w, geom, sw[0]))
    }

    fn conv_forward(&mut self, x: Var, w: Var, geom: ConvGeom, c_out: usize) -> Var {
        let col = geom.im2col(self.value(x));
        let mut out = vec![0.0; c_out * geom.cols()];
        gemm(
            c_out,
            geom.rows(),
            geom.cols(),
            self.value(w),
            false,
            &col,
            false,
            0.0,
            &mut out,
        );
        let mut shape = self.shape(x).to_vec();
        shape[0] = c_out;
        self.push(
            shape,
            out,
            Op::Conv {
                x,
                w,
                geom,
                c_out,
                col,
            },
        )
    }

    /// Average over the last axis; the axis is dropped (rank-1 input gives `[1]`).
    pub fn mean_last(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let n = s[s.len() - 1];
        let out: Vec<f64> = self
            .value(x)
            .chunks(n)
            .map(|c| c.iter().sum::<f64>() / n as f64)
            .collect();
        let shape = if s.len() == 1 {
            vec![1]
        } else {
            s[..s.len() - 1].to_vec()
        };
        self.push(shape, out, Op::MeanLast(x))
    }

    /// Running mean along the last axis: `out[.., t] = mean(x[.., 0..=t])`.
    pub fn cum_mean_last(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let n = s[s.len() - 1];
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(n) {
            let mut acc = 0.0;
            for (t, v) in row.iter().enumerate() {
                acc += v;
                out.push(acc / (t + 1) as f64);
            }
        }
        self.push(s, out, Op::CumMeanLast(x))
    }

    /// Delays each last-axis row by `shift` steps, filling with zeros.
    pub fn shift_last(&mut self, x: Var, shift: usize) -> Var {
        if shift == 0 {
            return x;
        }
        let s = self.shape(x).to_vec();
        let n = s[s.len() - 1];
        let mut out = vec![0.0; self.value(x).len()];
        for (o, row) in out.chunks_mut(n).zip(self.value(x).chunks(n)) {
            if shift < n {
                o[shift..].copy_from_slice(&row[..n - shift]);
            }
        }
        self.push(s, out, Op::ShiftLast(x, shift))
    }

    /// 2×2 average pooling of `[C × H × W]`.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(dim_err("avg_pool2", &s, &[2, 2]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / 2, w / 2);
        let xs = self.value(x);
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    let base = ch * h * w;
                    let s = xs[base + 2 * y * w + 2 * xx]
                        + xs[base + 2 * y * w + 2 * xx + 1]
                        + xs[base + (2 * y + 1) * w + 2 * xx]
                        + xs[base + (2 * y + 1) * w + 2 * xx + 1];
                    out[(ch * ho + y) * wo + xx] = 0.25 * s;
                }
            }
        }
        Ok(self.push(vec![c, ho, wo], out, Op::AvgPool2(x)))
    }

    /// Nearest-neighbour 2× upsampling of `[C × H × W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(dim_err("upsample2", &s, &[3]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let xs = self.value(x);
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = xs[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.push(vec![c, 2 * h, 2 * w], out, Op::Upsample2(x)))
    }

    // ---- indexing and structure -----------------------------------------

    /// Row lookup: `table[ids[i], :]` for each `i`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(dim_err("gather", &s, &[2]));
        }
        let (rows, d) = (s[0], s[1]);
        if ids.is_empty() {
            return Err(LabError::Contract("gather with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(LabError::Range(format!("row {bad} >= table rows {rows}")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Stack same-shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| LabError::Contract("stack of nothing".into()))?;
        let s = self.shape(*first).to_vec();
        if s.len() >= super::MAX_RANK {
            return Err(dim_err("stack", &s, &[xs.len()]));
        }
        let mut out = Vec::with_capacity(s.iter().product::<usize>() * xs.len());
        for &x in xs {
            if self.shape(x) != s.as_slice() {
                return Err(dim_err("stack", &s, self.shape(x)));
            }
            out.extend_from_slice(self.value(x));
        }
        let mut shape = vec![xs.len()];
        shape.extend_from_slice(&s);
        Ok(self.push(shape, out, Op::Stack(xs.to_vec())))
    }

    /// Average over the leading axis; the axis is dropped.
    pub fn mean_leading(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(dim_err("mean_leading", &s, &[2]));
        }
        let inner = self.value(x).len() / s[0];
        let xs = self.value(x);
        let mut out = vec![0.0; inner];
        for c in xs.chunks(inner) {
            for (o, v) in out.iter_mut().zip(c) {
                *o += v;
            }
        }
        let n = s[0] as f64;
        out.iter_mut().for_each(|o| *o /= n);
        Ok(self.push(s[1..].to_vec(), out, Op::MeanLeading(x)))
    }

    // ---- stochastic -----------------------------------------------------

    /// Inverted dropout. Identity (same node) when `p == 0` or not training.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut RngState, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(LabError::Config(format!("dropout p must be in [0,1), got {p}")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.uniform() >= p { keep } else { 0.0 })
            .collect();
        let out = zip(self.value(x), &mask, |a, m| a * m);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }))
    }

    // ---- reductions and losses -----------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean over all elements of the squared difference.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let n = self.value(pred).len() as f64;
        let s: f64 = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        Ok(self.push(vec![1], vec![s / n], Op::Mse(pred, target)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`; gradients accumulate across fan-out
    /// and are readable through [`Graph::grad`] afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(LabError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

fn check_kernel(k: usize, dilation: usize) -> Result<()> {
    if k % 2 == 0 {
        return Err(LabError::Config(format!(
            "kernel size must be odd for symmetric same padding, got {k}"
        )));
    }
    if dilation == 0 {
        return Err(LabError::Config("dilation must be positive".into()));
    }
    Ok(())
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn transpose2(r: usize, c: usize, a: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = a[i * c + j];
        }
    }
    t
}

fn buf<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn acc_map(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    f: impl Fn(usize) -> f64,
) {
    if let Some(b) = buf(nodes, grads, v) {
        for (i, x) in b.iter_mut().enumerate() {
            *x += f(i);
        }
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| -> &[f64] { &nodes[v.0].value };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if let Some(da) = buf(nodes, grads, *a) {
                gemm(m, n, k, g, false, val(*b), true, 1.0, da);
            }
            if let Some(db) = buf(nodes, grads, *b) {
                gemm(k, m, n, val(*a), true, g, false, 1.0, db);
            }
        }
        Op::Add(a, b) => {
            acc_map(nodes, grads, *a, |i| g[i]);
            acc_map(nodes, grads, *b, |i| g[i]);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc_map(nodes, grads, *a, |i| g[i] * bv[i]);
            acc_map(nodes, grads, *b, |i| g[i] * av[i]);
        }
        Op::Scale(x, s) => acc_map(nodes, grads, *x, |i| g[i] * s),
        Op::AddRow(x, bias) => {
            acc_map(nodes, grads, *x, |i| g[i]);
            if let Some(db) = buf(nodes, grads, *bias) {
                let d = db.len();
                for (i, gi) in g.iter().enumerate() {
                    db[i % d] += gi;
                }
            }
        }
        Op::AddChannel(x, v) => {
            acc_map(nodes, grads, *x, |i| g[i]);
            if let Some(dv) = buf(nodes, grads, *v) {
                let inner = g.len() / dv.len();
                for (i, gi) in g.iter().enumerate() {
                    dv[i / inner] += gi;
                }
            }
        }
        Op::MulChannel(x, w) => {
            let (xv, wv) = (val(*x), val(*w));
            let inner = g.len() / wv.len();
            acc_map(nodes, grads, *x, |i| g[i] * wv[i / inner]);
            if let Some(dw) = buf(nodes, grads, *w) {
                for (i, gi) in g.iter().enumerate() {
                    dw[i / inner] += gi * xv[i];
                }
            }
        }
        Op::Gelu(x) => {
            let xv = val(*x);
            acc_map(nodes, grads, *x, |i| {
                let z = xv[i];
                g[i] * (std_normal_cdf(z) + z * std_normal_pdf(z))
            });
        }
        Op::Relu(x) => {
            let xv = val(*x);
            acc_map(nodes, grads, *x, |i| if xv[i] > 0.0 { g[i] } else { 0.0 });
        }
        Op::Sigmoid(x) => {
            let y = &node.value;
            acc_map(nodes, grads, *x, |i| g[i] * y[i] * (1.0 - y[i]));
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gv = val(*gamma);
            let d = gv.len();
            if let Some(dg) = buf(nodes, grads, *gamma) {
                for (i, gi) in g.iter().enumerate() {
                    dg[i % d] += gi * xhat[i];
                }
            }
            if let Some(db) = buf(nodes, grads, *beta) {
                for (i, gi) in g.iter().enumerate() {
                    db[i % d] += gi;
                }
            }
            if let Some(dx) = buf(nodes, grads, *x) {
                for (r, rs) in rstd.iter().enumerate() {
                    let row = r * d..(r + 1) * d;
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in row.clone() {
                        let dh = g[j] * gv[j - r * d];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in row {
                        let dh = g[j] * gv[j - r * d];
                        dx[j] += rs * (dh - mean_dh - xhat[j] * mean_dh_h);
                    }
                }
            }
        }
        Op::Softmax(x) => {
            let y = &node.value;
            let d = node.shape[node.shape.len() - 1];
            if let Some(dx) = buf(nodes, grads, *x) {
                for r in 0..y.len() / d {
                    let row = r * d..(r + 1) * d;
                    let dot: f64 = row.clone().map(|j| g[j] * y[j]).sum();
                    for j in row {
                        dx[j] += y[j] * (g[j] - dot);
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            probs,
            heads,
            len,
            head_dim,
            scale,
        } => {
            let (heads, len, hd, scale) = (*heads, *len, *head_dim, *scale);
            let block = len * hd;
            let (qv, kv, vv) = (val(*q), val(*k), val(*v));
            let mut ds = vec![0.0; len * len];
            for h in 0..heads {
                let p = &probs[h * len * len..(h + 1) * len * len];
                let go = &g[h * block..(h + 1) * block];
                if let Some(dv) = buf(nodes, grads, *v) {
                    gemm(len, len, hd, p, true, go, false, 1.0, &mut dv[h * block..(h + 1) * block]);
                }
                let need_qk = nodes[q.0].needs_grad || nodes[k.0].needs_grad;
                if !need_qk {
                    continue;
                }
                // dP = dO · Vᵀ, then dS = P ⊙ (dP − rowsum(dP ⊙ P)), scaled.
                gemm(len, hd, len, go, false, &vv[h * block..(h + 1) * block], true, 0.0, &mut ds);
                for i in 0..len {
                    let row = i * len..(i + 1) * len;
                    let dot: f64 = row.clone().map(|j| ds[j] * p[j]).sum();
                    for j in row {
                        ds[j] = p[j] * (ds[j] - dot) * scale;
                    }
                }
                if let Some(dq) = buf(nodes, grads, *q) {
                    gemm(len, len, hd, &ds, false, &kv[h * block..(h + 1) * block], false, 1.0, &mut dq[h * block..(h + 1) * block]);
                }
                if let Some(dk) = buf(nodes, grads, *k) {
                    gemm(len, len, hd, &ds, true, &qv[h * block..(h + 1) * block], false, 1.0, &mut dk[h * block..(h + 1) * block]);
                }
            }
        }
        Op::Conv {
            x,
            w,
            geom,
            c_out,
            col,
        } => {
            let (rows, cols) = (geom.rows(), geom.cols());
            if let Some(dw) = buf(nodes, grads, *w) {
                gemm(*c_out, cols, rows, g, false, col, true, 1.0, dw);
            }
            if nodes[x.0].needs_grad {
                let mut dcol = vec![0.0; rows * cols];
                gemm(rows, *c_out, cols, val(*w), true, g, false, 0.0, &mut dcol);
                if let Some(dx) = buf(nodes, grads, *x) {
                    geom.col2im_add(&dcol, dx);
                }
            }
        }
        Op::Dropout { x, mask } => acc_map(nodes, grads, *x, |i| g[i] * mask[i]),
        Op::CumMeanLast(x) => {
            let n = node.shape[node.shape.len() - 1];
            if let Some(dx) = buf(nodes, grads, *x) {
                for (drow, grow) in dx.chunks_mut(n).zip(g.chunks(n)) {
                    let mut acc = 0.0;
                    for t in (0..n).rev() {
                        acc += grow[t] / (t + 1) as f64;
                        drow[t] += acc;
                    }
                }
            }
        }
        Op::ShiftLast(x, shift) => {
            let n = node.shape[node.shape.len() - 1];
            if let Some(dx) = buf(nodes, grads, *x) {
                for (drow, grow) in dx.chunks_mut(n).zip(g.chunks(n)) {
                    for t in 0..n.saturating_sub(*shift) {
                        drow[t] += grow[t + shift];
                    }
                }
            }
        }
        Op::Reshape(x) => acc_map(nodes, grads, *x, |i| g[i]),
        Op::Transpose(x) => {
            let s = &node.shape;
            let gt = transpose2(s[0], s[1], g);
            acc_map(nodes, grads, *x, |i| gt[i]);
        }
        Op::SplitHeads(x, heads) => {
            let s = &node.shape;
            let (len, hd) = (s[1], s[2]);
            let d = heads * hd;
            if let Some(dx) = buf(nodes, grads, *x) {
                for t in 0..len {
                    for h in 0..*heads {
                        for j in 0..hd {
                            dx[t * d + h * hd + j] += g[(h * len + t) * hd + j];
                        }
                    }
                }
            }
        }
        Op::MergeHeads(x, heads) => {
            let s = &nodes[x.0].shape;
            let (len, hd) = (s[1], s[2]);
            let d = heads * hd;
            if let Some(dx) = buf(nodes, grads, *x) {
                for t in 0..len {
                    for h in 0..*heads {
                        for j in 0..hd {
                            dx[(h * len + t) * hd + j] += g[t * d + h * hd + j];
                        }
                    }
                }
            }
        }
        Op::Gather { table, ids } => {
            let d = nodes[table.0].shape[1];
            if let Some(dt) = buf(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
            }
        }
        Op::MeanLast(x) => {
            let s = &nodes[x.0].shape;
            let n = s[s.len() - 1];
            acc_map(nodes, grads, *x, |i| g[i / n] / n as f64);
        }
        Op::AvgPool2(x) => {
            let s = &nodes[x.0].shape;
            let (h, w) = (s[1], s[2]);
            let (ho, wo) = (h / 2, w / 2);
            acc_map(nodes, grads, *x, |i| {
                let c = i / (h * w);
                let y = (i / w) % h;
                let xx = i % w;
                0.25 * g[(c * ho + y / 2) * wo + xx / 2]
            });
        }
        Op::Upsample2(x) => {
            let s = &nodes[x.0].shape;
            let (h, w) = (s[1], s[2]);
            if let Some(dx) = buf(nodes, grads, *x) {
                for (i, gi) in g.iter().enumerate() {
                    let c = i / (4 * h * w);
                    let y = (i / (2 * w)) % (2 * h);
                    let xx = i % (2 * w);
                    dx[(c * h + y / 2) * w + xx / 2] += gi;
                }
            }
        }
        Op::Stack(xs) => {
            let inner = g.len() / xs.len();
            for (k, x) in xs.iter().enumerate() {
                acc_map(nodes, grads, *x, |i| g[k * inner + i]);
            }
        }
        Op::MeanLeading(x) => {
            let n = nodes[x.0].shape[0] as f64;
            let inner = g.len();
            acc_map(nodes, grads, *x, |i| g[i % inner] / n);
        }
        Op::Sum(x) => acc_map(nodes, grads, *x, |_| g[0]),
        Op::Mse(p, t) => {
            let (pv, tv) = (val(*p), val(*t));
            let c = 2.0 * g[0] / pv.len() as f64;
            acc_map(nodes, grads, *p, |i| c * (pv[i] - tv[i]));
            acc_map(nodes, grads, *t, |i| -c * (pv[i] - tv[i]));
        }
    }
}
