//! Full-precision and QAT training on the bundled synthetic tasks, plus
//! gradient checking, learning-rate sweeps and post-training quantization.

mod gradcheck;
mod ptq;
mod quadratic;
mod record;
mod tasks;

pub use gradcheck::{grad_check, param_slice_mut, rel_error, GradCheck, FD_STEP};
pub use ptq::{ptq_apply, PtqReport};
pub use quadratic::Quadratic;
pub use record::{parse_loss_csv, LossRow, RunManifest, RunRecord};
pub use tasks::{char_vocab, cross_entropy, grammar_text, mse, Example, TaskData};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};
use crate::network::{
    backward, build_char_lm, build_toy_mlp, flatten_grads, forward_tape, params, set_params,
    ModuleKind, NetworkSpec, Practical, SiteQuantizer,
};
use crate::optim::{step, OptimizerConfig, OptimizerState};
use crate::quant::QuantConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    LinearTeacher,
    SyntheticCharLm,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    WarmupCosine,
}

fn d_depth() -> usize {
    2
}
fn d_width() -> usize {
    16
}
fn d_heads() -> usize {
    2
}
fn d_seq() -> usize {
    16
}

/// Shape of the network built for a task. The linear teacher uses MLP
/// blocks over `batch` rows and ignores `heads` and `seq_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetParams {
    #[serde(default = "d_depth")]
    pub depth: usize,
    #[serde(default = "d_width")]
    pub width: usize,
    #[serde(default = "d_heads")]
    pub heads: usize,
    #[serde(default = "d_seq")]
    pub seq_len: usize,
}

impl Default for NetParams {
    fn default() -> Self {
        Self {
            depth: d_depth(),
            width: d_width(),
            heads: d_heads(),
            seq_len: d_seq(),
        }
    }
}

fn d_ratio() -> f64 {
    20.0
}
fn d_eval() -> usize {
    10
}
fn d_val() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    #[serde(default)]
    pub net: NetParams,
    pub optimizer: OptimizerConfig,
    /// Present for quantization-aware training.
    #[serde(default)]
    pub quant: Option<QuantConfig>,
    pub steps: usize,
    pub batch: usize,
    /// Training tokens per parameter, used for the token budget.
    #[serde(default = "d_ratio")]
    pub token_ratio: f64,
    #[serde(default)]
    pub stop_at_loss: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default = "d_eval")]
    pub eval_every: usize,
    #[serde(default = "d_val")]
    pub val_examples: usize,
}

impl TrainConfig {
    pub fn new(task: Task, optimizer: OptimizerConfig, steps: usize, batch: usize) -> Self {
        Self {
            task,
            net: NetParams::default(),
            optimizer,
            quant: None,
            steps,
            batch,
            token_ratio: d_ratio(),
            stop_at_loss: None,
            seed: 0,
            schedule: Schedule::Constant,
            warmup_steps: 0,
            eval_every: d_eval(),
            val_examples: d_val(),
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 || self.batch == 0 || self.eval_every == 0 || self.val_examples == 0 {
            return bad("steps, batch, eval_every and val_examples must be at least 1".into());
        }
        if !(self.token_ratio > 0.0 && self.token_ratio.is_finite()) {
            return bad(format!("token_ratio must be positive, got {}", self.token_ratio));
        }
        if self.stop_at_loss.is_some_and(|t| !t.is_finite()) {
            return bad("stop_at_loss must be finite".into());
        }
        let n = &self.net;
        if n.width == 0 || n.heads == 0 || n.seq_len == 0 {
            return bad("net width, heads and seq_len must be positive".into());
        }
        if self.task == Task::SyntheticCharLm && n.width % n.heads != 0 {
            return bad(format!("heads {} must divide width {}", n.heads, n.width));
        }
        if self.task == Task::SyntheticCharLm && n.seq_len > 512 {
            return bad("seq_len above 512 exceeds the validation text".into());
        }
        if self.warmup_steps > self.steps {
            return bad("warmup_steps exceeds steps".into());
        }
        self.optimizer.validate()?;
        if let Some(q) = &self.quant {
            q.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Learning-rate multiplier for 1-based `step`.
    pub fn lr_scale(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => 1.0,
            Schedule::WarmupCosine => {
                if step <= self.warmup_steps {
                    step as f64 / self.warmup_steps as f64
                } else {
                    let span = (self.steps - self.warmup_steps).max(1) as f64;
                    let p = (step - self.warmup_steps) as f64 / span;
                    0.5 * (1.0 + (std::f64::consts::PI * p).cos())
                }
            }
        }
    }

    /// Rows consumed per optimizer step.
    pub fn tokens_per_step(&self) -> usize {
        match self.task {
            Task::LinearTeacher => self.batch,
            Task::SyntheticCharLm => self.batch * self.net.seq_len,
        }
    }

    /// Steps needed to see `token_ratio × n_params` tokens.
    pub fn budget_steps(&self, n_params: usize) -> usize {
        (self.token_ratio * n_params as f64 / self.tokens_per_step() as f64).ceil() as usize
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything derived from a config's seed: the initial network, the task,
/// the fixed validation set and the batch stream.
pub struct Setup {
    pub net: NetworkSpec,
    pub task: TaskData,
    pub val: Vec<Example>,
    pub batches: Rng,
}

impl Setup {
    /// Independent streams are drawn from one generator seeded with
    /// `cfg.seed`, in the order init, task, validation, batches.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut root = Rng::new(cfg.seed);
        let mut init = Rng::new(root.next_u64());
        let task_rng = Rng::new(root.next_u64());
        let mut val_rng = Rng::new(root.next_u64());
        let batches = Rng::new(root.next_u64());
        let n = cfg.net;
        let (net, task) = match cfg.task {
            Task::LinearTeacher => {
                let mut t = task_rng;
                let task = TaskData::teacher(n.width, cfg.batch, &mut t);
                (build_toy_mlp(n.depth, n.width, cfg.batch, &mut init)?, task)
            }
            Task::SyntheticCharLm => {
                let task = TaskData::chars(n.seq_len, &task_rng);
                let vocab = char_vocab().len();
                (build_char_lm(n.depth, n.width, n.heads, n.seq_len, vocab, &mut init)?, task)
            }
        };
        let val = (0..cfg.val_examples).map(|_| task.sample(&mut val_rng, true)).collect();
        Ok(Self {
            net,
            task,
            val,
            batches,
        })
    }

    /// Examples for one step: one `batch`-row regression example, or
    /// `batch` character windows.
    pub fn draw(&mut self, cfg: &TrainConfig) -> Vec<Example> {
        let k = match cfg.task {
            Task::LinearTeacher => 1,
            Task::SyntheticCharLm => cfg.batch,
        };
        (0..k).map(|_| self.task.sample(&mut self.batches, false)).collect()
    }
}

/// Parameters trained with AdamW whatever the configured optimizer: norm
/// gains, and the embedding (module 0 of a character model).
pub fn adamw_only_params(net: &NetworkSpec, task: Task) -> Vec<bool> {
    let mut out = Vec::new();
    for (i, m) in net.modules.iter().enumerate() {
        match &m.kind {
            ModuleKind::Linear(_) => out.push(task == Task::SyntheticCharLm && i == 0),
            ModuleKind::RmsNorm(_) => out.push(true),
            ModuleKind::Attention(_) => out.extend([false; 4]),
            _ => {}
        }
    }
    out
}

/// Mean loss and parameter gradients over `examples`, accumulated in order.
/// With `quant`, every quantized module sees quantized inputs and weights
/// and gradients pass through the STE masks.
pub fn loss_and_grads(
    net: &NetworkSpec,
    examples: &[Example],
    quant: Option<&QuantConfig>,
) -> Result<(f64, Vec<Matrix>)> {
    let mut q = quant.map(|c| Practical::new(*c)).transpose()?;
    let mut total = 0.0;
    let mut acc: Option<Vec<Matrix>> = None;
    for ex in examples {
        let (out, caches) = forward_tape(net, ex.input(), q.as_mut().map(|p| p as &mut dyn SiteQuantizer))?;
        let (l, dy) = ex.loss_grad(&out)?;
        total += l;
        let (grads, _) = backward(net, &caches, &dy)?;
        let g = flatten_grads(grads);
        match &mut acc {
            None => acc = Some(g),
            Some(a) => {
                for (ai, gi) in a.iter_mut().zip(&g) {
                    ai.add_assign(gi)?;
                }
            }
        }
    }
    let k = examples.len() as f64;
    let grads = acc
        .unwrap_or_default()
        .into_iter()
        .map(|g| g.scale(1.0 / k))
        .collect();
    Ok((total / k, grads))
}

/// Mean loss over `examples`; quantized weights are computed once.
pub fn evaluate(net: &NetworkSpec, examples: &[Example], quant: Option<&QuantConfig>) -> Result<f64> {
    let mut q = quant.map(|c| Practical::new(*c)).transpose()?;
    let mut total = 0.0;
    for ex in examples {
        let (out, _) = forward_tape(net, ex.input(), q.as_mut().map(|p| p as &mut dyn SiteQuantizer))?;
        total += ex.loss(&out)?;
    }
    Ok(total / examples.len() as f64)
}

fn diverged(step: usize, loss: f64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => Error::Diverged { step, loss },
        e => e,
    }
}

/// Trains from the seeded initialization. Validation runs at step 0, every
/// `eval_every` steps and at the last step; the run stops at the first
/// validation loss at or below `stop_at_loss`.
pub fn train(cfg: &TrainConfig) -> Result<RunRecord> {
    let mut setup = Setup::new(cfg)?;
    let mut net = setup.net.clone();
    let roles = adamw_only_params(&net, cfg.task);
    let mut states: Vec<OptimizerState> = params(&net)
        .iter()
        .zip(&roles)
        .map(|(p, &adam)| {
            let kind = if adam { crate::optim::OptimizerKind::Adamw } else { cfg.optimizer.kind };
            OptimizerState::new(kind, p.rows(), p.cols())
        })
        .collect();
    let quant = cfg.quant.as_ref();

    let v0 = evaluate(&net, &setup.val, quant).map_err(diverged(0, f64::NAN))?;
    if !v0.is_finite() {
        return Err(Error::Diverged { step: 0, loss: v0 });
    }
    let mut val_loss = vec![(0, v0)];
    let mut train_loss = Vec::with_capacity(cfg.steps);
    let mut stopped_early = cfg.stop_at_loss.is_some_and(|t| v0 <= t);
    let mut steps_run = 0;

    while !stopped_early && steps_run < cfg.steps {
        let t = steps_run + 1;
        let batch = setup.draw(cfg);
        let (loss, grads) = loss_and_grads(&net, &batch, quant).map_err(diverged(t, f64::NAN))?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step: t, loss });
        }
        train_loss.push(loss);
        let mut ps = params(&net);
        let scale = cfg.lr_scale(t);
        for ((p, g), (st, &adam)) in ps.iter_mut().zip(&grads).zip(states.iter_mut().zip(&roles)) {
            let mut oc = if adam { cfg.optimizer.as_adamw() } else { cfg.optimizer.clone() };
            oc.lr *= scale;
            step(&oc, st, p, g).map_err(diverged(t, loss))?;
        }
        set_params(&mut net, &ps)?;
        steps_run = t;
        if t % cfg.eval_every == 0 || t == cfg.steps {
            let v = evaluate(&net, &setup.val, quant).map_err(diverged(t, loss))?;
            if !v.is_finite() {
                return Err(Error::Diverged { step: t, loss: v });
            }
            val_loss.push((t, v));
            stopped_early = cfg.stop_at_loss.is_some_and(|target| v <= target);
        }
    }
    RunRecord::new(cfg.clone(), train_loss, val_loss, net, stopped_early)
}

/// One sweep arm's outcome; `final_val_loss` is `None` when it diverged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepArm {
    pub lr: f64,
    pub final_val_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best_lr: f64,
    pub arms: Vec<SweepArm>,
}

/// Evaluates `run(index, lr)` for every learning rate in parallel and picks
/// the smallest finite result, preferring the smaller lr on ties. Arms that
/// diverge are excluded; other errors abort the sweep.
pub fn select_lr<F>(lrs: &[f64], run: F) -> Result<SweepResult>
where
    F: Fn(usize, f64) -> Result<f64> + Sync,
{
    if lrs.is_empty() {
        return Err(Error::Config("learning-rate list is empty".into()));
    }
    let outcomes: Vec<Result<f64>> = lrs.par_iter().enumerate().map(|(i, &lr)| run(i, lr)).collect();
    let mut arms = Vec::with_capacity(lrs.len());
    let mut best: Option<(f64, f64)> = None;
    for (&lr, out) in lrs.iter().zip(outcomes) {
        match out {
            Ok(v) if v.is_finite() => {
                let better = match best {
                    None => true,
                    Some((bl, blr)) => v < bl || (v == bl && lr < blr),
                };
                if better {
                    best = Some((v, lr));
                }
                arms.push(SweepArm {
                    lr,
                    final_val_loss: Some(v),
                    error: None,
                });
            }
            Ok(v) => arms.push(SweepArm {
                lr,
                final_val_loss: None,
                error: Some(format!("final loss {v}")),
            }),
            Err(e @ (Error::Diverged { .. } | Error::NonFinite(_) | Error::Numerical(_))) => {
                arms.push(SweepArm {
                    lr,
                    final_val_loss: None,
                    error: Some(e.to_string()),
                })
            }
            Err(e) => return Err(e),
        }
    }
    match best {
        Some((_, best_lr)) => Ok(SweepResult { best_lr, arms }),
        None => Err(Error::Numerical("every sweep arm diverged".into())),
    }
}

/// Trains `base` once per learning rate. Arm `i` uses seed `base.seed + i`.
pub fn lr_sweep(base: &TrainConfig, lrs: &[f64]) -> Result<SweepResult> {
    base.validate()?;
    select_lr(lrs, |i, lr| {
        let mut c = base.clone();
        c.optimizer.lr = lr;
        c.seed = base.seed.wrapping_add(i as u64);
        Ok(train(&c)?.manifest.final_val_loss)
    })
}
