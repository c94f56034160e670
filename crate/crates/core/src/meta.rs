//! Bi-level training: inner adaptation on support moves, outer updates from
//! query moves, plus pretraining, the first-order Reptile baseline and
//! meta-test adaptation.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use gradgraph::{grad, no_grad, Tensor};
use log::info;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::loss::{
    flow_input, frame_loss, move_loss, temporal_gan_loss_d, FeatureExtractor, LossContext, LossWeights,
};
use crate::model::{ModelConfig, SynthOptions, Tdgn};
use crate::params::{load_archive, save_archive, ParamSet};
use crate::sampling::{move_pairs, sample_task, SamplerConfig};
use crate::synth::{mix_seed, write_atomic, Dataset};
use crate::types::{Sequence, Task};

pub const STATE_KIND: &str = "train_state/1";
pub const CURVE_HEADER: [&str; 4] = ["step", "support_loss", "query_loss", "d_loss"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Gradient through the inner updates (first- or second-order).
    Maml,
    /// Interpolate towards fine-tuned parameters.
    Reptile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub inner_steps: usize,
    pub tasks_per_batch: usize,
    pub total_tasks: usize,
    pub second_order: bool,
    /// Global gradient norm bound for both loops; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub d_lr: f64,
    pub optimizer: OptimizerKind,
    pub algorithm: Algorithm,
    /// Interpolation rate of the Reptile update.
    pub reptile_lr: f64,
    /// Outer steps between checkpoints.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_lr: 1e-4,
            outer_lr: 5e-5,
            inner_steps: 3,
            tasks_per_batch: 4,
            total_tasks: 3000,
            second_order: true,
            clip_norm: Some(10.0),
            d_lr: 1e-4,
            optimizer: OptimizerKind::Adam,
            algorithm: Algorithm::Maml,
            reptile_lr: 1.0,
            checkpoint_every: 25,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.inner_lr) || !positive(self.outer_lr) {
            return Err(Error::Config(format!(
                "step sizes must be positive: inner {}, outer {}",
                self.inner_lr, self.outer_lr
            )));
        }
        if self.inner_steps == 0 {
            return Err(Error::Config("inner_steps must be at least 1".into()));
        }
        if self.tasks_per_batch == 0 || self.total_tasks == 0 {
            return Err(Error::Config("task counts must be positive".into()));
        }
        if self.clip_norm.is_some_and(|c| !positive(c)) || !(self.d_lr >= 0.0) || !(self.reptile_lr >= 0.0) {
            return Err(Error::Config("clip norm and rates must be nonnegative".into()));
        }
        Ok(())
    }

    /// Outer steps implied by the task budget.
    pub fn outer_steps(&self) -> usize {
        self.total_tasks.div_ceil(self.tasks_per_batch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub d_lr: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr: 1e-4,
            d_lr: 1e-4,
            clip_norm: Some(10.0),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    /// Constant for the first half, then linear decay to zero.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let half = self.iterations / 2;
        if iteration < half {
            self.lr
        } else {
            self.lr * (self.iterations - iteration) as f64 / (self.iterations - half) as f64
        }
    }
}

/// How sequences are synthesized and scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMode {
    /// Chained moves with the full move loss.
    Move,
    /// Independent frames with per-frame pixel and perceptual losses.
    Frame,
}

impl SynthMode {
    pub fn options(self) -> SynthOptions {
        SynthOptions {
            independent_frames: self == SynthMode::Frame,
            force_map: None,
        }
    }
}

/// Meta-test adaptation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptVariant {
    Move,
    Frame,
    TdFree,
}

impl AdaptVariant {
    pub fn mode(self) -> SynthMode {
        match self {
            AdaptVariant::Frame => SynthMode::Frame,
            _ => SynthMode::Move,
        }
    }

    pub fn weights(self, w: LossWeights) -> LossWeights {
        match self {
            AdaptVariant::Move => w,
            _ => LossWeights { temporal: 0.0, ..w },
        }
    }
}

/// A scalar objective over parameters for one task.
pub trait Objective<T> {
    fn support_loss(&self, theta: &ParamSet, task: &T) -> Result<Tensor>;

    fn query_loss(&self, theta: &ParamSet, task: &T) -> Result<QueryEval>;

    /// Fine-tuning loss of the Reptile baseline: every frame of the task.
    fn reptile_loss(&self, theta: &ParamSet, task: &T) -> Result<Tensor> {
        Ok(self.support_loss(theta, task)?.add(&self.query_loss(theta, task)?.loss))
    }
}

/// Query loss plus the synthesized frames behind it.
#[derive(Clone, Debug)]
pub struct QueryEval {
    pub loss: Tensor,
    pub outputs: Vec<Tensor>,
}

/// Frames, poses and discriminator-ready flows of one sequence.
#[derive(Clone, Debug)]
pub struct SeqTensors {
    pub frames: Vec<Tensor>,
    pub poses: Vec<Tensor>,
    /// Flow from frame `t` to `t + 1`, scaled for the discriminator.
    pub flows: Option<Vec<Tensor>>,
}

impl SeqTensors {
    pub fn of(seq: &Sequence) -> Self {
        Self {
            frames: seq.frames.iter().map(|f| f.to_tensor()).collect(),
            poses: seq.poses.iter().map(|p| p.to_tensor()).collect(),
            flows: seq.flows.as_ref().map(|fs| fs.iter().map(flow_input).collect()),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct TaskTensors {
    pub ref_image: Tensor,
    pub ref_pose: Tensor,
    pub support: SeqTensors,
    pub query: SeqTensors,
}

impl TaskTensors {
    pub fn of(task: &Task) -> Self {
        Self {
            ref_image: task.reference.frame.to_tensor(),
            ref_pose: task.reference.pose.to_tensor(),
            support: SeqTensors::of(&task.support),
            query: SeqTensors::of(&task.query),
        }
    }
}

/// Synthesis and loss of one sequence under the given parameters.
pub struct SequenceLoss {
    pub total: Tensor,
    pub outputs: Vec<Tensor>,
}

/// The generator objective: sums move losses (or frame losses) over a
/// sequence synthesized from the reference.
pub struct TdgnObjective<'a> {
    pub model: &'a ModelConfig,
    pub extractor: &'a FeatureExtractor,
    pub discriminator: &'a ParamSet,
    pub weights: LossWeights,
    pub mode: SynthMode,
}

impl<'a> TdgnObjective<'a> {
    pub fn context(&self) -> LossContext<'_> {
        LossContext {
            extractor: self.extractor,
            discriminator: self.discriminator,
            weights: self.weights,
        }
    }

    pub fn sequence_loss(
        &self,
        theta: &ParamSet,
        ref_image: &Tensor,
        ref_pose: &Tensor,
        seq: &SeqTensors,
    ) -> Result<SequenceLoss> {
        let net = Tdgn::new(self.model, theta);
        let reference = net.reference(ref_image, ref_pose)?;
        let outputs = net.synthesize_sequence(&reference, &seq.poses, self.mode.options())?;
        let ctx = self.context();
        let total = match self.mode {
            SynthMode::Move => {
                let needs_flow = self.weights.temporal != 0.0;
                if needs_flow && seq.flows.is_none() {
                    return Err(Error::Config(
                        "temporal loss needs flows; set the temporal weight to 0 for flow-free data".into(),
                    ));
                }
                let mut total = Tensor::scalar(0.0);
                for (a, b) in move_pairs(seq.len())? {
                    let flow = match &seq.flows {
                        Some(f) => f[a].clone(),
                        None => Tensor::zeros(&[2, ref_image.shape()[1], ref_image.shape()[2]]),
                    };
                    let l = move_loss(
                        (&outputs[a], &outputs[b]),
                        (&seq.frames[a], &seq.frames[b]),
                        &flow,
                        &ctx,
                    )?;
                    total = total.add(&l.total);
                }
                total
            }
            SynthMode::Frame => {
                let mut total = Tensor::scalar(0.0);
                for (p, t) in outputs.iter().zip(&seq.frames) {
                    total = total.add(&frame_loss(p, t, &ctx)?);
                }
                total
            }
        };
        Ok(SequenceLoss { total, outputs })
    }
}

impl Objective<TaskTensors> for TdgnObjective<'_> {
    fn support_loss(&self, theta: &ParamSet, task: &TaskTensors) -> Result<Tensor> {
        Ok(self
            .sequence_loss(theta, &task.ref_image, &task.ref_pose, &task.support)?
            .total)
    }

    fn query_loss(&self, theta: &ParamSet, task: &TaskTensors) -> Result<QueryEval> {
        let s = self.sequence_loss(theta, &task.ref_image, &task.ref_pose, &task.query)?;
        Ok(QueryEval {
            loss: s.total,
            outputs: s.outputs,
        })
    }
}

fn check_finite(grads: &[Tensor], what: &str) -> Result<()> {
    if grads.iter().all(Tensor::all_finite) {
        Ok(())
    } else {
        Err(Error::NonFiniteGrad(format!("non-finite gradient in {what}")))
    }
}

/// Rescales gradients whose global norm exceeds `limit`. With graph-carrying
/// gradients the rescaling is itself differentiable.
pub fn clip_global_norm(grads: Vec<Tensor>, limit: Option<f64>) -> Vec<Tensor> {
    let Some(limit) = limit else { return grads };
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm <= limit {
        return grads;
    }
    if grads.iter().any(Tensor::requires_grad) {
        let total = grads
            .iter()
            .map(|g| g.square().sum_all())
            .reduce(|a, b| a.add(&b))
            .expect("at least one gradient");
        let factor = total.powf(-0.5).scale(limit);
        grads.iter().map(|g| g.mul(&factor.expand_scalar(g.shape()))).collect()
    } else {
        let s = limit / norm;
        grads.iter().map(|g| g.scale(s)).collect()
    }
}

/// `steps` plain gradient steps on the loss from `loss_fn`.
///
/// With `create_graph`, `theta` should hold graph leaves (or intermediates)
/// and the result stays differentiable with respect to them. Without it the
/// result is detached.
pub fn gradient_steps(
    theta: &ParamSet,
    lr: f64,
    steps: usize,
    create_graph: bool,
    clip: Option<f64>,
    loss_fn: &dyn Fn(&ParamSet) -> Result<Tensor>,
) -> Result<(ParamSet, f64)> {
    if steps == 0 {
        return Err(Error::Config("inner update needs at least one step".into()));
    }
    let mut cur = if create_graph {
        theta.clone()
    } else {
        theta.detached()
    };
    let mut first = f64::NAN;
    for k in 0..steps {
        let vars = if create_graph { cur.clone() } else { cur.variables() };
        let loss = loss_fn(&vars)?;
        if k == 0 {
            first = loss.item();
        }
        let grads = grad(&loss, vars.tensors(), create_graph).map_err(|e| Error::Structure(e.to_string()))?;
        check_finite(&grads, "inner update")?;
        let grads = clip_global_norm(grads, clip);
        let next: Vec<Tensor> = vars
            .tensors()
            .iter()
            .zip(&grads)
            .map(|(p, g)| if create_graph { p.sub(&g.scale(lr)) } else { p.detach().sub(&g.detach().scale(lr)) })
            .collect();
        cur = vars.with_tensors(next);
    }
    Ok((cur, first))
}

/// Adapted parameters from the support loss of one task.
pub fn inner_update<T>(
    obj: &dyn Objective<T>,
    theta: &ParamSet,
    task: &T,
    lr: f64,
    steps: usize,
    create_graph: bool,
    clip: Option<f64>,
) -> Result<ParamSet> {
    Ok(gradient_steps(theta, lr, steps, create_graph, clip, &|p| obj.support_loss(p, task))?.0)
}

/// Outer gradient contribution of one task.
#[derive(Clone, Debug)]
pub struct TaskGradient {
    pub grads: Vec<Tensor>,
    pub support_loss: f64,
    pub query_loss: f64,
    pub outputs: Vec<Tensor>,
}

/// Query-loss gradient with respect to the initial parameters, through the
/// inner updates when `second_order` is set. In first-order mode the query
/// gradient at the adapted parameters is used as is.
pub fn task_gradient<T>(obj: &dyn Objective<T>, theta: &ParamSet, task: &T, cfg: &MetaConfig) -> Result<TaskGradient> {
    let leaves = theta.detached().variables();
    let (adapted, support_loss) = gradient_steps(
        &leaves,
        cfg.inner_lr,
        cfg.inner_steps,
        cfg.second_order,
        cfg.clip_norm,
        &|p| obj.support_loss(p, task),
    )?;
    let (q, grads) = if cfg.second_order {
        let q = obj.query_loss(&adapted, task)?;
        let g = grad(&q.loss, leaves.tensors(), false).map_err(|e| Error::Structure(e.to_string()))?;
        (q, g)
    } else {
        let at = adapted.detached().variables();
        let q = obj.query_loss(&at, task)?;
        let g = grad(&q.loss, at.tensors(), false).map_err(|e| Error::Structure(e.to_string()))?;
        (q, g)
    };
    check_finite(&grads, "outer update")?;
    Ok(TaskGradient {
        grads,
        support_loss,
        query_loss: q.loss.item(),
        outputs: q.outputs.iter().map(Tensor::detach).collect(),
    })
}

/// Sum of per-task outer gradients plus loss totals.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub grads: Vec<Tensor>,
    pub support_loss: f64,
    pub query_loss: f64,
    pub outputs: Vec<Vec<Tensor>>,
}

pub fn batch_gradient<T>(obj: &dyn Objective<T>, theta: &ParamSet, tasks: &[T], cfg: &MetaConfig) -> Result<BatchGradient> {
    if tasks.is_empty() {
        return Err(Error::Empty("task batch is empty".into()));
    }
    let mut sum: Option<Vec<Tensor>> = None;
    let mut out = BatchGradient {
        grads: Vec::new(),
        support_loss: 0.0,
        query_loss: 0.0,
        outputs: Vec::with_capacity(tasks.len()),
    };
    for task in tasks {
        let tg = task_gradient(obj, theta, task, cfg)?;
        sum = Some(match sum {
            None => tg.grads,
            Some(acc) => acc.iter().zip(&tg.grads).map(|(a, b)| a.add(b)).collect(),
        });
        out.support_loss += tg.support_loss;
        out.query_loss += tg.query_loss;
        out.outputs.push(tg.outputs);
    }
    out.grads = sum.expect("nonempty batch");
    Ok(out)
}

/// Outer optimizer with optional adaptive moments. Parameters and moments are
/// rounded to `f32` after every step so checkpoints restore exactly.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub m: Option<ParamSet>,
    pub v: Option<ParamSet>,
    pub t: u64,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            m: None,
            v: None,
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &ParamSet, grads: &[Tensor], lr: f64) -> ParamSet {
        self.t += 1;
        let round = |v: f64| v as f32 as f64;
        match self.kind {
            OptimizerKind::Sgd => {
                let next = theta
                    .tensors()
                    .iter()
                    .zip(grads)
                    .map(|(p, g)| {
                        let d: Vec<f64> = p.data().iter().zip(g.data()).map(|(x, dx)| round(x - lr * dx)).collect();
                        Tensor::from_vec(p.shape(), d)
                    })
                    .collect();
                theta.with_tensors(next)
            }
            OptimizerKind::Adam => {
                let m = self.m.get_or_insert_with(|| theta.zeros_like()).clone();
                let v = self.v.get_or_insert_with(|| theta.zeros_like()).clone();
                let c1 = 1.0 - ADAM_B1.powi(self.t as i32);
                let c2 = 1.0 - ADAM_B2.powi(self.t as i32);
                let mut new_p = Vec::with_capacity(theta.len());
                let mut new_m = Vec::with_capacity(theta.len());
                let mut new_v = Vec::with_capacity(theta.len());
                for (((p, g), m), v) in theta.tensors().iter().zip(grads).zip(m.tensors()).zip(v.tensors()) {
                    let n = p.numel();
                    let (mut pd, mut md, mut vd) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
                    for i in 0..n {
                        let gi = g.data()[i];
                        let mi = round(ADAM_B1 * m.data()[i] + (1.0 - ADAM_B1) * gi);
                        let vi = round(ADAM_B2 * v.data()[i] + (1.0 - ADAM_B2) * gi * gi);
                        let step = lr * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
                        pd.push(round(p.data()[i] - step));
                        md.push(mi);
                        vd.push(vi);
                    }
                    new_p.push(Tensor::from_vec(p.shape(), pd));
                    new_m.push(Tensor::from_vec(p.shape(), md));
                    new_v.push(Tensor::from_vec(p.shape(), vd));
                }
                self.m = Some(theta.with_tensors(new_m));
                self.v = Some(theta.with_tensors(new_v));
                theta.with_tensors(new_p)
            }
        }
    }

    fn store(&self, prefix: &str, out: &mut ParamSet) {
        if let (Some(m), Some(v)) = (&self.m, &self.v) {
            out.extend_prefixed(&format!("{prefix}.m"), m);
            out.extend_prefixed(&format!("{prefix}.v"), v);
        }
    }

    fn restore(kind: OptimizerKind, t: u64, prefix: &str, all: &ParamSet) -> Self {
        let m = all.strip_prefix(&format!("{prefix}.m"));
        let v = all.strip_prefix(&format!("{prefix}.v"));
        Self {
            kind,
            m: (!m.is_empty()).then_some(m),
            v: (!v.is_empty()).then_some(v),
            t,
        }
    }
}

/// One MAML outer update of `theta` for a generic objective.
pub fn outer_update<T>(
    obj: &dyn Objective<T>,
    theta: &ParamSet,
    tasks: &[T],
    cfg: &MetaConfig,
    opt: &mut Optimizer,
) -> Result<(ParamSet, BatchGradient)> {
    let batch = batch_gradient(obj, theta, tasks, cfg)?;
    let grads = clip_global_norm(batch.grads.clone(), cfg.clip_norm);
    Ok((opt.step(theta, &grads, cfg.outer_lr), batch))
}

/// One Reptile update: `theta + rate * mean(adapted - theta)`, where each
/// task adapts on its full fine-tuning loss.
pub fn reptile_update<T>(obj: &dyn Objective<T>, theta: &ParamSet, tasks: &[T], cfg: &MetaConfig) -> Result<(ParamSet, f64)> {
    if tasks.is_empty() {
        return Err(Error::Empty("task batch is empty".into()));
    }
    let mut delta = theta.zeros_like();
    let mut loss = 0.0;
    for task in tasks {
        let (adapted, first) = gradient_steps(theta, cfg.inner_lr, cfg.inner_steps, false, cfg.clip_norm, &|p| {
            obj.reptile_loss(p, task)
        })?;
        delta = delta.add(&adapted.sub(&theta.detached()));
        loss += first;
    }
    let rate = cfg.reptile_lr / tasks.len() as f64;
    Ok((theta.detached().add(&delta.scale(rate)).rounded_f32(), loss))
}

/// Generator, discriminator and optimizer state of a training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub theta: ParamSet,
    pub disc: ParamSet,
    pub opt_theta: Optimizer,
    pub opt_disc: Optimizer,
    /// Completed outer steps (or pretraining iterations).
    pub step: usize,
}

impl TrainState {
    pub fn new(theta: ParamSet, disc: ParamSet, kind: OptimizerKind) -> Self {
        Self {
            theta: theta.rounded_f32(),
            disc: disc.rounded_f32(),
            opt_theta: Optimizer::new(kind),
            opt_disc: Optimizer::new(OptimizerKind::Adam),
            step: 0,
        }
    }

    /// Same parameters with fresh optimizers and counter.
    pub fn restart(&self, kind: OptimizerKind) -> Self {
        Self::new(self.theta.clone(), self.disc.clone(), kind)
    }

    pub fn save(&self, path: &Path, config: serde_json::Value) -> Result<()> {
        let mut all = ParamSet::new();
        all.extend_prefixed("theta", &self.theta);
        all.extend_prefixed("disc", &self.disc);
        self.opt_theta.store("opt_theta", &mut all);
        self.opt_disc.store("opt_disc", &mut all);
        let extra = json!({
            "step": self.step,
            "opt_theta": {"kind": self.opt_theta.kind, "t": self.opt_theta.t},
            "opt_disc": {"kind": self.opt_disc.kind, "t": self.opt_disc.t},
        });
        save_archive(path, STATE_KIND, config, extra, &all)
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let a = load_archive(path)?;
        if a.kind != STATE_KIND {
            return Err(Error::Checkpoint(format!(
                "{}: expected kind {STATE_KIND}, found {}",
                path.display(),
                a.kind
            )));
        }
        let bad = |what: &str| Error::Checkpoint(format!("{}: missing {what}", path.display()));
        let opt = |key: &str| -> Result<(OptimizerKind, u64)> {
            let o = a.extra.get(key).ok_or_else(|| bad(key))?;
            let kind = serde_json::from_value(o["kind"].clone()).map_err(|_| bad(key))?;
            let t = o["t"].as_u64().ok_or_else(|| bad(key))?;
            Ok((kind, t))
        };
        let (kt, tt) = opt("opt_theta")?;
        let (kd, td) = opt("opt_disc")?;
        let theta = a.params.strip_prefix("theta");
        let disc = a.params.strip_prefix("disc");
        if theta.is_empty() {
            return Err(bad("generator parameters"));
        }
        let state = TrainState {
            theta,
            disc,
            opt_theta: Optimizer::restore(kt, tt, "opt_theta", &a.params),
            opt_disc: Optimizer::restore(kd, td, "opt_disc", &a.params),
            step: a.extra["step"].as_u64().ok_or_else(|| bad("step"))? as usize,
        };
        Ok((state, a.config))
    }
}

/// Fixed inputs of a training run.
pub struct TrainContext<'a> {
    pub dataset: &'a Dataset,
    pub model: &'a ModelConfig,
    pub extractor: &'a FeatureExtractor,
    pub weights: LossWeights,
    pub mode: SynthMode,
}

impl TrainContext<'_> {
    pub fn objective<'b>(&'b self, disc: &'b ParamSet) -> TdgnObjective<'b> {
        TdgnObjective {
            model: self.model,
            extractor: self.extractor,
            discriminator: disc,
            weights: self.weights,
            mode: self.mode,
        }
    }
}

/// Discriminator loss summed over every move of every query sequence.
fn discriminator_loss(disc: &ParamSet, tasks: &[TaskTensors], outputs: &[Vec<Tensor>]) -> Result<Option<Tensor>> {
    let mut total: Option<Tensor> = None;
    for (task, fake) in tasks.iter().zip(outputs) {
        let Some(flows) = &task.query.flows else { continue };
        for (a, b) in move_pairs(task.query.len())? {
            let l = temporal_gan_loss_d(
                (&task.query.frames[a], &task.query.frames[b]),
                (&fake[a], &fake[b]),
                &flows[a],
                disc,
            )?;
            total = Some(match total {
                None => l,
                Some(t) => t.add(&l),
            });
        }
    }
    Ok(total)
}

/// One discriminator step; returns the loss before the step.
fn discriminator_step(
    state: &mut TrainState,
    tasks: &[TaskTensors],
    outputs: &[Vec<Tensor>],
    lr: f64,
    clip: Option<f64>,
) -> Result<f64> {
    if lr == 0.0 || state.disc.is_empty() {
        return Ok(0.0);
    }
    let vars = state.disc.variables();
    let Some(loss) = discriminator_loss(&vars, tasks, outputs)? else { return Ok(0.0) };
    let grads = grad(&loss, vars.tensors(), false).map_err(|e| Error::Structure(e.to_string()))?;
    check_finite(&grads, "discriminator update")?;
    let grads = clip_global_norm(grads, clip);
    state.disc = state.opt_disc.step(&state.disc, &grads, lr);
    Ok(loss.item())
}

/// Losses reported for one outer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub support_loss: f64,
    pub query_loss: f64,
    pub d_loss: f64,
}

/// Outer update of the generator from a task batch, then one
/// discriminator step on the query moves. The discriminator is frozen during
/// inner adaptation.
pub fn outer_step(state: &mut TrainState, ctx: &TrainContext<'_>, tasks: &[TaskTensors], cfg: &MetaConfig) -> Result<StepLosses> {
    let (support_loss, query_loss, outputs) = match cfg.algorithm {
        Algorithm::Maml => {
            let obj = ctx.objective(&state.disc);
            let (theta, batch) = outer_update(&obj, &state.theta, tasks, cfg, &mut state.opt_theta)?;
            state.theta = theta;
            (batch.support_loss, batch.query_loss, batch.outputs)
        }
        Algorithm::Reptile => {
            let obj = ctx.objective(&state.disc);
            let (theta, loss) = reptile_update(&obj, &state.theta, tasks, cfg)?;
            state.opt_theta.t += 1;
            // Discriminator fakes come from the parameters before the update.
            let _g = no_grad();
            let mut query = 0.0;
            let mut outputs = Vec::with_capacity(tasks.len());
            for t in tasks {
                let q = obj.query_loss(&state.theta, t)?;
                query += q.loss.item();
                outputs.push(q.outputs);
            }
            state.theta = theta;
            (loss, query, outputs)
        }
    };
    let d_loss = if ctx.weights.temporal != 0.0 && ctx.mode == SynthMode::Move {
        discriminator_step(state, tasks, &outputs, cfg.d_lr, cfg.clip_norm)?
    } else {
        0.0
    };
    state.step += 1;
    Ok(StepLosses {
        support_loss,
        query_loss,
        d_loss,
    })
}

/// Deterministic task batch for one outer step.
pub fn sample_batch(dataset: &Dataset, sampler: &SamplerConfig, seed: u64, step: usize, n: usize) -> Result<Vec<Task>> {
    let mut rng = StdRng::seed_from_u64(mix_seed(seed, &[7, step as u64]));
    (0..n).map(|_| sample_task(&dataset.train, sampler, &mut rng)).collect()
}

/// Where a run writes its curve and checkpoint.
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub dir: PathBuf,
    pub curve: PathBuf,
    pub checkpoint: PathBuf,
}

impl RunFiles {
    pub fn new(dir: &Path, name: &str) -> Self {
        Self {
            dir: dir.to_path_buf(),
            curve: dir.join(format!("{name}_curve.csv")),
            checkpoint: dir.join(format!("{name}.ckpt")),
        }
    }
}

/// Rows of an existing curve up to and including `step`.
fn curve_prefix(path: &Path, step: usize) -> Result<Vec<csv::StringRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let s: usize = rec
            .get(0)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(path, "bad step column"))?;
        if s <= step {
            rows.push(rec);
        }
    }
    Ok(rows)
}

fn write_curve(path: &Path, rows: &[csv::StringRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CURVE_HEADER)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e.to_string()))?;
    write_atomic(path, &bytes)
}

fn fmt_loss(v: f64) -> String {
    format!("{v:.9e}")
}

/// Meta-trains from `state` until the task budget is spent or `stop` is
/// raised. Curves and checkpoints go to `files` when given; the curve keeps
/// one row per outer step across resumes.
pub fn meta_train(
    mut state: TrainState,
    ctx: &TrainContext<'_>,
    sampler: &SamplerConfig,
    cfg: &MetaConfig,
    files: Option<&RunFiles>,
    config_echo: &serde_json::Value,
    stop: Option<&AtomicBool>,
) -> Result<TrainState> {
    cfg.validate()?;
    sampler.validate()?;
    let total = cfg.outer_steps();
    let mut rows = match files {
        Some(f) => {
            fs::create_dir_all(&f.dir).map_err(|e| Error::io(&f.dir, e))?;
            curve_prefix(&f.curve, state.step)?
        }
        None => Vec::new(),
    };
    let save = |state: &TrainState, rows: &[csv::StringRecord]| -> Result<()> {
        if let Some(f) = files {
            write_curve(&f.curve, rows)?;
            state.save(&f.checkpoint, config_echo.clone())?;
        }
        Ok(())
    };
    while state.step < total {
        if stop.is_some_and(|s| s.load(Ordering::SeqCst)) {
            info!("interrupted at step {}", state.step);
            save(&state, &rows)?;
            return Ok(state);
        }
        let tasks = sample_batch(ctx.dataset, sampler, cfg.seed, state.step, cfg.tasks_per_batch)?;
        let tensors: Vec<TaskTensors> = tasks.iter().map(TaskTensors::of).collect();
        let losses = outer_step(&mut state, ctx, &tensors, cfg)?;
        rows.push(csv::StringRecord::from(vec![
            state.step.to_string(),
            fmt_loss(losses.support_loss),
            fmt_loss(losses.query_loss),
            fmt_loss(losses.d_loss),
        ]));
        info!(
            "step {}/{}: support {:.4} query {:.4} d {:.4}",
            state.step, total, losses.support_loss, losses.query_loss, losses.d_loss
        );
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            save(&state, &rows)?;
        }
    }
    save(&state, &rows)?;
    Ok(state)
}

/// Random training move: a reference frame and two consecutive target frames
/// of one clip.
fn sample_move(dataset: &Dataset, rng: &mut StdRng) -> Result<TaskTensors> {
    let clips: Vec<_> = dataset.train.iter().filter(|c| c.len() >= 3).collect();
    if clips.is_empty() {
        return Err(Error::NoEligibleClip("pretraining needs clips of at least 3 frames".into()));
    }
    let clip = clips[rng.gen_range(0..clips.len())];
    let r = rng.gen_range(0..clip.len());
    let s = loop {
        let s = rng.gen_range(0..clip.len() - 1);
        if s != r && s + 1 != r {
            break s;
        }
    };
    let seq = crate::sampling::slice_sequence(clip, s, 2)?;
    let seq = SeqTensors::of(&seq);
    Ok(TaskTensors {
        ref_image: clip.frames[r].to_tensor(),
        ref_pose: clip.poses[r].to_tensor(),
        query: seq.clone(),
        support: seq,
    })
}

/// Standard training on random moves, updating generator and discriminator
/// jointly, with linear learning-rate decay over the second half.
pub fn pretrain(
    mut state: TrainState,
    ctx: &TrainContext<'_>,
    cfg: &PretrainConfig,
    files: Option<&RunFiles>,
    config_echo: &serde_json::Value,
    stop: Option<&AtomicBool>,
) -> Result<TrainState> {
    let mut rows = match files {
        Some(f) => {
            fs::create_dir_all(&f.dir).map_err(|e| Error::io(&f.dir, e))?;
            curve_prefix(&f.curve, state.step)?
        }
        None => Vec::new(),
    };
    let save = |state: &TrainState, rows: &[csv::StringRecord]| -> Result<()> {
        if let Some(f) = files {
            write_curve(&f.curve, rows)?;
            state.save(&f.checkpoint, config_echo.clone())?;
        }
        Ok(())
    };
    while state.step < cfg.iterations {
        if stop.is_some_and(|s| s.load(Ordering::SeqCst)) {
            break;
        }
        let mut rng = StdRng::seed_from_u64(mix_seed(cfg.seed, &[11, state.step as u64]));
        let mv = sample_move(ctx.dataset, &mut rng)?;
        let vars = state.theta.variables();
        let obj = ctx.objective(&state.disc);
        let s = obj.sequence_loss(&vars, &mv.ref_image, &mv.ref_pose, &mv.query)?;
        let grads = grad(&s.total, vars.tensors(), false).map_err(|e| Error::Structure(e.to_string()))?;
        check_finite(&grads, "pretraining")?;
        let grads = clip_global_norm(grads, cfg.clip_norm);
        let lr = cfg.lr_at(state.step);
        state.theta = state.opt_theta.step(&state.theta, &grads, lr);
        let outputs = vec![s.outputs.iter().map(Tensor::detach).collect::<Vec<_>>()];
        let d_loss = if ctx.weights.temporal != 0.0 && ctx.mode == SynthMode::Move {
            let d_lr = cfg.d_lr * lr / cfg.lr.max(f64::MIN_POSITIVE);
            discriminator_step(&mut state, std::slice::from_ref(&mv), &outputs, d_lr, cfg.clip_norm)?
        } else {
            0.0
        };
        state.step += 1;
        rows.push(csv::StringRecord::from(vec![
            state.step.to_string(),
            fmt_loss(s.total.item()),
            fmt_loss(f64::NAN),
            fmt_loss(d_loss),
        ]));
        if state.step % 100 == 0 {
            info!("pretrain {}/{}: loss {:.4}", state.step, cfg.iterations, s.total.item());
            save(&state, &rows)?;
        }
    }
    save(&state, &rows)?;
    Ok(state)
}

/// Adaptation settings used at meta-test time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub lr: f64,
    pub steps: usize,
    pub variant: AdaptVariant,
    pub clip_norm: Option<f64>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            steps: 3,
            variant: AdaptVariant::Move,
            clip_norm: Some(10.0),
        }
    }
}

/// Tunes `theta` on the support sequence of a task. `steps == 0` returns
/// `theta` unchanged.
pub fn adapt(
    theta: &ParamSet,
    model: &ModelConfig,
    extractor: &FeatureExtractor,
    disc: &ParamSet,
    weights: LossWeights,
    task: &TaskTensors,
    cfg: &AdaptConfig,
) -> Result<ParamSet> {
    if cfg.steps == 0 {
        return Ok(theta.detached());
    }
    let obj = TdgnObjective {
        model,
        extractor,
        discriminator: disc,
        weights: cfg.variant.weights(weights),
        mode: cfg.variant.mode(),
    };
    inner_update(&obj, theta, task, cfg.lr, cfg.steps, false, cfg.clip_norm)
}
