use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{forward, layer_prefix, next_patch_loss, Binding, ForwardOptions, Mode, Model, ParamStore};
use crate::error::{Error, Result};
use crate::graph_learning::GraphMode;
use crate::tensor::{Graph, RngStream, Tensor};
use crate::tokenizer::{next_patch_targets, normalize, SeriesBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Telemetry cadence in steps.
    pub log_every: usize,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            steps: 500,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            log_every: 100,
            grad_clip: None,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("lr must be >= 0 and betas in [0, 1)".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        Ok(())
    }
}

/// Adam or plain SGD over named parameters.
pub struct Optimizer {
    spec: TrainSpec,
    t: i32,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(spec: &TrainSpec) -> Self {
        Self {
            spec: spec.clone(),
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(String, Tensor)]) -> Result<()> {
        self.t += 1;
        let s = &self.spec;
        let clip = match s.grad_clip {
            Some(c) => {
                let norm = grads.iter().map(|(_, g)| g.norm().powi(2)).sum::<f64>().sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - s.beta1.powi(self.t);
        let bc2 = 1.0 - s.beta2.powi(self.t);
        for (name, grad) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))?;
            match s.optimizer {
                OptimizerKind::Sgd => {
                    for (w, g) in p.data_mut().iter_mut().zip(grad.data()) {
                        *w -= s.lr * g * clip;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; grad.numel()]);
                    let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; grad.numel()]);
                    for (((w, &g), mi), vi) in p.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                        let g = g * clip;
                        *mi = s.beta1 * *mi + (1.0 - s.beta1) * g;
                        *vi = s.beta2 * *vi + (1.0 - s.beta2) * g * g;
                        *w -= s.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + s.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// What a training run updates and how it runs the model.
pub struct TrainPlan {
    pub mode: Mode,
    pub graph_mode: GraphMode,
    pub trainable: Box<dyn Fn(&str) -> bool>,
    /// Router biases are updated only for these layers.
    pub update_routers: Vec<bool>,
}

impl TrainPlan {
    /// Channel-independent, everything but the graph learner trainable.
    pub fn pretrain(model: &Model) -> Self {
        Self {
            mode: Mode::Ci,
            graph_mode: GraphMode::Train,
            trainable: Box::new(|n: &str| !n.starts_with("graph.")),
            update_routers: vec![true; model.cfg.layers],
        }
    }

    /// Embedding and the first `J_CI` layers frozen; the last `J_CM` layers,
    /// the head and the graph learner trainable.
    pub fn finetune(model: &Model, mode: Mode) -> Self {
        let j_ci = model.cfg.frozen_layers();
        let frozen: Vec<String> = (0..j_ci).map(layer_prefix).collect();
        let edge = model.cfg.graph.edge_bias;
        Self {
            mode,
            graph_mode: GraphMode::Train,
            trainable: Box::new(move |n: &str| {
                if n.starts_with("embed.") || frozen.iter().any(|p| n.starts_with(p)) {
                    return false;
                }
                n != "graph.edge_bias" || edge
            }),
            update_routers: (0..model.cfg.layers).map(|l| l >= j_ci).collect(),
        }
    }
}

/// One structured telemetry line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub val_loss: Option<f64>,
    pub tau: f64,
    /// Per MoE layer: selections per expert since the previous record.
    pub expert_loads: Vec<Vec<u64>>,
    pub frozen_grad_norm: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub initial_val: Option<f64>,
    pub final_val: Option<f64>,
    pub losses: Vec<f64>,
    /// Largest frozen-parameter gradient norm at each step.
    pub frozen_grad_norms: Vec<f64>,
    pub records: Vec<LogRecord>,
}

fn stack_windows(windows: &[Tensor], idx: &[usize], lookback: usize) -> Result<SeriesBatch> {
    let items: Vec<Tensor> = idx.iter().map(|&i| windows[i].clone()).collect();
    let w = Tensor::stack(&items)?;
    normalize(&SeriesBatch::from_windows(&w, lookback)?)
}

fn check_windows(model: &Model, windows: &[Tensor]) -> Result<()> {
    let need = model.cfg.lookback + model.cfg.horizon();
    let c = windows.first().map(|w| w.shape()[0]);
    for w in windows {
        if w.rank() != 2 || w.shape()[1] != need {
            return Err(Error::shape("train", format!("window {:?}, expected [C, {need}]", w.shape())));
        }
        if Some(w.shape()[0]) != c {
            return Err(Error::Data(format!(
                "inconsistent channel count across windows: {} vs {}",
                w.shape()[0],
                c.unwrap()
            )));
        }
    }
    Ok(())
}

/// Mean next-patch loss over `windows` with the deterministic graph.
pub fn validation_loss(model: &Model, windows: &[Tensor], mode: Mode, batch_size: usize) -> Result<Option<f64>> {
    if windows.is_empty() {
        return Ok(None);
    }
    let pc = model.cfg.patch_config();
    let mut total = 0.0;
    let idx: Vec<usize> = (0..windows.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = stack_windows(windows, chunk, model.cfg.lookback)?;
        let mut g = Graph::new();
        let bind = Binding::new(&mut g, &model.params, &|_| false);
        let mut opts = ForwardOptions {
            mode,
            graph_mode: GraphMode::Eval,
            tau: None,
            graph_override: None,
            rng: RngStream::new(0),
        };
        let out = forward(&mut g, &bind, model, &batch, &mut opts)?;
        let tgt = next_patch_targets(&batch.values, batch.targets.as_ref().unwrap(), &pc)?;
        let loss = next_patch_loss(&mut g, out.pred, &tgt, model.cfg.loss)?;
        total += g.value(loss).item() * chunk.len() as f64;
    }
    Ok(Some(total / windows.len() as f64))
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Generic loop: sample a batch, forward, backward, optimizer step, router
/// bias step. `log` receives a record every `spec.log_every` steps and at
/// the end.
pub fn train(
    model: &mut Model,
    windows: &[Tensor],
    val: &[Tensor],
    spec: &TrainSpec,
    plan: &TrainPlan,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<TrainReport> {
    spec.validate()?;
    check_windows(model, windows)?;
    check_windows(model, val)?;
    if spec.steps > 0 && windows.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    let pc = model.cfg.patch_config();
    let base = RngStream::new(spec.seed);
    let mut data_rng = base.split(0);
    let mut opt = Optimizer::new(spec);
    let mut report = TrainReport {
        initial_val: validation_loss(model, val, plan.mode, spec.batch_size)?,
        ..TrainReport::default()
    };
    let moe_layers: Vec<usize> = (0..model.cfg.layers).filter(|&l| model.is_moe(l)).collect();
    let mut window_loads: Vec<Vec<u64>> = moe_layers
        .iter()
        .map(|_| vec![0; model.cfg.moe.n_private])
        .collect();

    let bs = spec.batch_size.min(windows.len().max(1));
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut pos = order.len();
    for step in 0..spec.steps {
        if pos + bs > order.len() {
            data_rng.shuffle(&mut order);
            pos = 0;
        }
        let idx = &order[pos..pos + bs];
        pos += bs;
        let batch = stack_windows(windows, idx, model.cfg.lookback)?;
        let tgt = next_patch_targets(&batch.values, batch.targets.as_ref().unwrap(), &pc)?;

        let mut g = Graph::new();
        let bind = Binding::new(&mut g, &model.params, plan.trainable.as_ref());
        let tau = model.cfg.graph.tau_at(step);
        let mut opts = ForwardOptions {
            mode: plan.mode,
            graph_mode: plan.graph_mode,
            tau: Some(tau),
            graph_override: None,
            rng: base.split(step as u64 + 1),
        };
        let out = forward(&mut g, &bind, model, &batch, &mut opts).map_err(|e| diverged(step, e))?;
        let loss = next_patch_loss(&mut g, out.pred, &tgt, model.cfg.loss).map_err(|e| diverged(step, e))?;
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {lv}"),
            });
        }
        let grads = g.backward(loss).map_err(|e| diverged(step, e))?;
        let frozen_norm = bind.frozen_grad_norm(&grads);
        let named = bind.collect(&grads, &model.params);
        if named.iter().any(|(_, t)| !t.all_finite()) {
            return Err(Error::Diverged {
                step,
                detail: "non-finite gradient".into(),
            });
        }
        opt.step(&mut model.params, &named)?;

        for (k, &l) in moe_layers.iter().enumerate() {
            let Some(a) = out.assignments.get(l).and_then(Option::as_ref) else {
                continue;
            };
            for (e, &c) in a.counts.iter().enumerate() {
                window_loads[k][e] += c;
            }
            if plan.update_routers[l] {
                let r = model.routers[l].as_mut().unwrap();
                r.record(a);
                r.update_bias(model.cfg.moe.bias_rate);
            }
        }
        report.losses.push(lv);
        report.frozen_grad_norms.push(frozen_norm);

        let last = step + 1 == spec.steps;
        if step % spec.log_every == 0 || last {
            let val_loss = if step == 0 {
                report.initial_val
            } else {
                validation_loss(model, val, plan.mode, spec.batch_size)?
            };
            let rec = LogRecord {
                step,
                loss: lv,
                val_loss,
                tau,
                expert_loads: std::mem::replace(
                    &mut window_loads,
                    moe_layers.iter().map(|_| vec![0; model.cfg.moe.n_private]).collect(),
                ),
                frozen_grad_norm: frozen_norm,
            };
            log::info!("step {step}: loss {lv:.6}");
            log(&rec);
            report.records.push(rec);
        }
    }
    report.final_val = validation_loss(model, val, plan.mode, spec.batch_size)?;
    Ok(report)
}

/// Channel-independent pretraining on univariate `[1, L + F]` windows.
pub fn pretrain(
    model: &mut Model,
    windows: &[Tensor],
    val: &[Tensor],
    spec: &TrainSpec,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<TrainReport> {
    let plan = TrainPlan::pretrain(model);
    train(model, windows, val, spec, &plan, log)
}

/// Finetuning with the first `J_CI` layers and the embedding frozen.
pub fn finetune(
    model: &mut Model,
    windows: &[Tensor],
    val: &[Tensor],
    spec: &TrainSpec,
    mode: Mode,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<TrainReport> {
    let plan = TrainPlan::finetune(model, mode);
    train(model, windows, val, spec, &plan, log)
}
