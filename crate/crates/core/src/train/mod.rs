//! AdamW, data splits and the early-stopping adapter trainer.

mod split;

use std::time::Instant;

use crate::adapters::Pass;
use crate::backbones::{bind_adapters, AdapterMap, Attached};
use crate::error::{LabError, Result};
use crate::rng::RngState;
use crate::tensor::{Graph, Tensor, Var};

pub use split::{make_splits, SplitManifest};

/// Minimum validation improvement that resets the patience counter.
pub const MIN_IMPROVEMENT: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn ar_default() -> Self {
        TrainConfig {
            learning_rate: 5e-5,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            eps: 1e-8,
            batch_size: 8,
            max_epochs: 40,
            patience: 5,
            seed: 0,
        }
    }

    pub fn diffusion_default() -> Self {
        TrainConfig {
            learning_rate: 4.5e-5,
            weight_decay: 1e-4,
            ..Self::ar_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(LabError::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.patience == 0 || self.max_epochs == 0 || self.batch_size == 0 {
            return Err(LabError::Config(
                "patience, max_epochs and batch_size must be at least 1".into(),
            ));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return Err(LabError::Config("weight_decay must be >= 0 and betas in [0,1)".into()));
        }
        Ok(())
    }
}

/// First and second moments for a list of parameter buffers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn for_sizes(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        AdamState { m, v, step: 0 }
    }
}

/// One AdamW update with bias correction and decoupled weight decay:
/// `θ ← θ(1 − lr·λ) − lr·m̂/(√v̂ + ε)`.
pub fn adamw_step(params: &mut [&mut [f64]], grads: &[Vec<f64>], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(LabError::Contract(format!(
            "adamw_step: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
    for (i, p) in params.iter_mut().enumerate() {
        let (g, m, v) = (&grads[i], &mut state.m[i], &mut state.v[i]);
        if g.len() != p.len() || m.len() != p.len() {
            return Err(LabError::Dimension {
                op: "adamw_step",
                lhs: vec![p.len()],
                rhs: vec![g.len()],
            });
        }
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            p[j] = p[j] * decay - cfg.learning_rate * update;
        }
    }
    Ok(())
}

/// Mean squared error between two equally shaped tensors, with its gradient
/// with respect to `pred`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Vec<f64>)> {
    if pred.shape() != target.shape() {
        return Err(LabError::Dimension {
            op: "mse_loss",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let n = pred.numel() as f64;
    let diff: Vec<f64> = pred.data().iter().zip(target.data()).map(|(p, t)| p - t).collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff.iter().map(|d| 2.0 * d / n).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// A fine-tuning objective over a frozen backbone: per-example losses for the
/// adapters attached at their insertion points.
pub trait AdapterObjective {
    fn len(&self, split: Split) -> usize;

    fn example_loss(
        &self,
        g: &mut Graph,
        adapters: &Attached<'_>,
        split: Split,
        index: usize,
        rng: &mut RngState,
        pass: Pass,
    ) -> Result<Var>;
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub wall_seconds: f64,
}

impl TrainReport {
    /// `epoch,train_loss,val_loss` with 1-based epochs.
    pub fn epochs_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for (i, (t, v)) in self.train_loss.iter().zip(&self.val_loss).enumerate() {
            out.push_str(&format!("{},{t:e},{v:e}\n", i + 1));
        }
        out
    }

    /// One-line JSON record without the per-epoch series.
    pub fn summary_json(&self) -> String {
        serde_json::json!({
            "epochs": self.train_loss.len(),
            "stopped_epoch": self.stopped_epoch,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.val_loss.get(self.best_epoch.wrapping_sub(1)),
            "final_train_loss": self.train_loss.last(),
            "wall_seconds": self.wall_seconds,
        })
        .to_string()
    }
}

fn param_buffers(adapters: &mut AdapterMap) -> Vec<&mut [f64]> {
    adapters
        .values_mut()
        .flat_map(|m| m.params_mut().map(|(_, t)| t.data_mut()))
        .collect()
}

fn param_sizes(adapters: &AdapterMap) -> Vec<usize> {
    adapters
        .values()
        .flat_map(|m| m.params().values().map(Tensor::numel))
        .collect()
}

/// Mean loss over `items`, with gradients for every adapter parameter when
/// `grads` is requested.
fn batch_loss(
    objective: &dyn AdapterObjective,
    adapters: &AdapterMap,
    split: Split,
    items: &[usize],
    rng: &mut RngState,
    pass: Pass,
    grads: bool,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let bound = bind_adapters(&mut g, adapters);
    let att = Attached {
        modules: adapters,
        bound: &bound,
    };
    let mut total: Option<Var> = None;
    for &i in items {
        let l = objective.example_loss(&mut g, &att, split, i, rng, pass)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| LabError::Data("empty batch".into()))?;
    let loss = g.scale(total, 1.0 / items.len() as f64);
    let value = g.value(loss)[0];
    if !value.is_finite() {
        return Err(LabError::Data(format!("loss became {value}")));
    }
    if !grads {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    let gs = adapters
        .iter()
        .flat_map(|(p, m)| m.grads(&g, &bound[p]))
        .collect();
    Ok((value, gs))
}

/// Average validation loss in evaluation mode, batched like training.
pub fn evaluate(objective: &dyn AdapterObjective, adapters: &AdapterMap, split: Split, batch: usize) -> Result<f64> {
    let n = objective.len(split);
    if n == 0 {
        return Err(LabError::Data("nothing to evaluate".into()));
    }
    let idx: Vec<usize> = (0..n).collect();
    let mut rng = RngState::new(0);
    let mut sum = 0.0;
    for chunk in idx.chunks(batch.max(1)) {
        let (l, _) = batch_loss(objective, adapters, split, chunk, &mut rng, Pass::eval(), false)?;
        sum += l * chunk.len() as f64;
    }
    Ok(sum / n as f64)
}

/// Trains the adapters with AdamW and early stopping on validation loss,
/// then restores the weights of the best epoch. With no validation data the
/// epoch's training loss stands in.
pub fn train_adapters(
    objective: &dyn AdapterObjective,
    adapters: &mut AdapterMap,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let n = objective.len(Split::Train);
    if n == 0 {
        return Err(LabError::Data("empty training set".into()));
    }
    let start = Instant::now();
    let mut rng = RngState::new(cfg.seed).derive_str("train");
    let mut state = AdamState::for_sizes(param_sizes(adapters));
    let mut report = TrainReport {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        stopped_epoch: 0,
        best_epoch: 0,
        wall_seconds: 0.0,
    };
    let mut best = (f64::INFINITY, adapters.clone());
    let mut last_improvement = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.max_epochs {
        rng.shuffle(&mut order);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (l, grads) = batch_loss(objective, adapters, Split::Train, batch, &mut rng, Pass::train(), true)?;
            adamw_step(&mut param_buffers(adapters), &grads, &mut state, cfg)?;
            sum += l * batch.len() as f64;
        }
        let train = sum / n as f64;
        let val = if objective.len(Split::Val) > 0 {
            evaluate(objective, adapters, Split::Val, cfg.batch_size)?
        } else {
            train
        };
        log::debug!("epoch {epoch}: train {train:.6} val {val:.6}");
        report.train_loss.push(train);
        report.val_loss.push(val);
        report.stopped_epoch = epoch;
        if val < best.0 - MIN_IMPROVEMENT {
            last_improvement = epoch;
        }
        if val < best.0 {
            best = (val, adapters.clone());
            report.best_epoch = epoch;
        }
        if epoch - last_improvement >= cfg.patience {
            break;
        }
    }
    *adapters = best.1;
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Epoch at which patience runs out for a given validation series, and the
/// best epoch so far (1-based); mirrors the rule inside [`train_adapters`].
/// Patience only resets on improvements larger than [`MIN_IMPROVEMENT`], while
/// the best epoch is the plain minimum.
pub fn early_stop_epoch(val_losses: &[f64], patience: usize) -> (usize, usize) {
    let (mut best, mut best_epoch, mut last) = (f64::INFINITY, 0, 0);
    for (i, &v) in val_losses.iter().enumerate() {
        let epoch = i + 1;
        if v < best - MIN_IMPROVEMENT {
            last = epoch;
        }
        if v < best {
            best = v;
            best_epoch = epoch;
        }
        if epoch - last >= patience {
            return (epoch, best_epoch);
        }
    }
    (val_losses.len(), best_epoch)
}

/// Repeated steps on one fixed batch; returns the loss before each step and
/// the final loss.
pub fn overfit_batch(
    objective: &dyn AdapterObjective,
    adapters: &mut AdapterMap,
    cfg: &TrainConfig,
    items: &[usize],
    steps: usize,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let rng = RngState::new(cfg.seed).derive_str("overfit");
    let mut state = AdamState::for_sizes(param_sizes(adapters));
    let mut losses = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        // a fixed stream per step keeps any sampled noise identical
        let mut step_rng = rng.clone();
        let (l, grads) = batch_loss(objective, adapters, Split::Train, items, &mut step_rng, Pass::train(), true)?;
        losses.push(l);
        adamw_step(&mut param_buffers(adapters), &grads, &mut state, cfg)?;
    }
    let mut step_rng = rng.clone();
    let (l, _) = batch_loss(objective, adapters, Split::Train, items, &mut step_rng, Pass::eval(), false)?;
    losses.push(l);
    Ok(losses)
}
