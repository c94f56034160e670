//! Per-move training losses: pixel L1, feature-space perceptual distance and
//! a temporal adversarial term scored by a discriminator over frame pairs.

use std::path::Path;

use gradgraph::Tensor;
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{load_archive, ParamBuilder, ParamSet};
use crate::types::{FlowField, Resolution};

pub const DISCRIMINATOR_KIND: &str = "dt/1";
pub const EXTRACTOR_KIND: &str = "fx/1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub pixel: f64,
    pub perceptual: f64,
    pub temporal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pixel: 1.0,
            perceptual: 1.0,
            temporal: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.pixel, self.perceptual, self.temporal];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {w:?}")));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(Error::Config("all loss weights are zero".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            pixel: self.pixel * c,
            perceptual: self.perceptual * c,
            temporal: self.temporal * c,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    pub seed: u64,
    pub channels: Vec<usize>,
    /// 1-based stages whose outputs enter the loss.
    pub stages: Vec<usize>,
    /// Archive with externally trained weights; replaces the random init.
    pub weights: Option<std::path::PathBuf>,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            seed: 1234,
            channels: vec![8, 16, 32],
            stages: vec![1, 2, 3],
            weights: None,
        }
    }
}

/// Frozen strided convolution pyramid used as a feature space.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    params: ParamSet,
    stages: Vec<usize>,
    depth: usize,
}

impl FeatureExtractor {
    pub fn new(cfg: &ExtractorConfig) -> Result<Self> {
        if cfg.channels.is_empty() {
            return Err(Error::Config("feature extractor needs at least one stage".into()));
        }
        if cfg.stages.is_empty() || cfg.stages.iter().any(|&s| s == 0 || s > cfg.channels.len()) {
            return Err(Error::Config(format!(
                "loss stages {:?} must lie in 1..={}",
                cfg.stages,
                cfg.channels.len()
            )));
        }
        let params = match &cfg.weights {
            Some(path) => Self::load_weights(path, &cfg.channels)?,
            None => {
                let mut rng = StdRng::seed_from_u64(cfg.seed);
                let mut b = ParamBuilder::new(&mut rng);
                let mut c_in = 3;
                for (i, &c) in cfg.channels.iter().enumerate() {
                    b.conv(&format!("fx.s{i}"), c_in, c, 3, false);
                    c_in = c;
                }
                b.finish()
            }
        };
        Ok(Self {
            params: params.detached(),
            stages: cfg.stages.clone(),
            depth: cfg.channels.len(),
        })
    }

    fn load_weights(path: &Path, channels: &[usize]) -> Result<ParamSet> {
        let archive = load_archive(path)?;
        if archive.kind != EXTRACTOR_KIND {
            return Err(Error::Checkpoint(format!(
                "{}: expected kind {EXTRACTOR_KIND}, found {}",
                path.display(),
                archive.kind
            )));
        }
        let mut c_in = 3;
        for (i, &c) in channels.iter().enumerate() {
            let w = archive
                .params
                .try_get(&format!("fx.s{i}.w"))
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing stage {i}", path.display())))?;
            if w.shape() != [c, c_in, 3, 3] {
                return Err(Error::Checkpoint(format!(
                    "{}: stage {i} has shape {:?}",
                    path.display(),
                    w.shape()
                )));
            }
            c_in = c;
        }
        Ok(archive.params)
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Spatial mean of the deepest stage, one value per channel.
    pub fn pooled(&self, image: &Tensor) -> Vec<f64> {
        let mut h = image.clone();
        for i in 0..self.depth {
            let w = self.params.get(&format!("fx.s{i}.w"));
            let b = self.params.get(&format!("fx.s{i}.b"));
            h = h.conv2d(w, 2, 1).add_channel_bias(b).silu();
        }
        let (c, hh, ww) = h.chw();
        let n = (hh * ww) as f64;
        h.data().chunks(hh * ww).take(c).map(|ch| ch.iter().sum::<f64>() / n).collect()
    }

    /// Outputs of the selected stages.
    pub fn features(&self, image: &Tensor) -> Vec<Tensor> {
        let mut h = image.clone();
        let mut out = Vec::with_capacity(self.stages.len());
        let depth = *self.stages.iter().max().unwrap();
        for i in 0..depth {
            let w = self.params.get(&format!("fx.s{i}.w"));
            let b = self.params.get(&format!("fx.s{i}.b"));
            h = h.conv2d(w, 2, 1).add_channel_bias(b).silu();
            if self.stages.contains(&(i + 1)) {
                out.push(h.clone());
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub width: usize,
    pub stages: usize,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            width: 8,
            stages: 3,
            seed: 99,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self, res: Resolution) -> Result<()> {
        let f = 1usize << self.stages;
        if self.stages == 0 || self.width == 0 || res.height % f != 0 || res.width % f != 0 {
            return Err(Error::Config(format!(
                "discriminator with {} stages does not fit {}x{}",
                self.stages, res.height, res.width
            )));
        }
        Ok(())
    }
}

/// Temporal discriminator over `[frame_t, frame_t+1, flow]`, 8 input
/// channels. The logit head starts at zero.
pub fn init_discriminator(cfg: &DiscriminatorConfig, res: Resolution) -> Result<ParamSet> {
    cfg.validate(res)?;
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut b = ParamBuilder::new(&mut rng);
    let mut c_in = 8;
    for s in 0..cfg.stages {
        let c = cfg.width << s;
        b.conv(&format!("d.s{s}"), c_in, c, 3, false);
        c_in = c;
    }
    b.conv("d.head", c_in, 1, 3, true);
    Ok(b.finish())
}

/// Flow tensor scaled to unit range for the discriminator input.
pub fn flow_input(flow: &FlowField) -> Tensor {
    let res = flow.resolution();
    let s = 1.0 / res.max_side() as f64;
    Tensor::from_vec(
        &[2, res.height, res.width],
        flow.flow().iter().map(|&v| v as f64 * s).collect(),
    )
}

/// Patch logit map for one frame pair.
pub fn discriminator_logits(d: &ParamSet, a: &Tensor, b: &Tensor, flow: &Tensor) -> Result<Tensor> {
    check_pair(a, b)?;
    let (_, h, w) = a.chw();
    if flow.shape() != [2, h, w] {
        return Err(Error::Shape(format!(
            "flow must be [2, {h}, {w}], got {:?}",
            flow.shape()
        )));
    }
    let mut x = Tensor::concat(&[a.clone(), b.clone(), flow.clone()]);
    let mut s = 0;
    while let Some(wt) = d.try_get(&format!("d.s{s}.w")) {
        x = x.conv2d(wt, 2, 1).add_channel_bias(d.get(&format!("d.s{s}.b"))).silu();
        s += 1;
    }
    Ok(x.conv2d(d.get("d.head.w"), 1, 1).add_channel_bias(d.get("d.head.b")))
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() || a.shape().len() != 3 || a.shape()[0] != 3 {
        return Err(Error::Shape(format!(
            "expected two [3, H, W] frames, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Two frames of a move.
pub type MovePair<'a> = (&'a Tensor, &'a Tensor);

/// Mean absolute error per frame, summed over both frames.
pub fn l1_move_loss(pred: MovePair<'_>, truth: MovePair<'_>) -> Result<Tensor> {
    check_pair(pred.0, truth.0)?;
    check_pair(pred.1, truth.1)?;
    let a = pred.0.sub(truth.0).abs().mean_all();
    let b = pred.1.sub(truth.1).abs().mean_all();
    Ok(a.add(&b))
}

/// Sum over stages of mean absolute feature differences, over both frames.
pub fn perceptual_move_loss(pred: MovePair<'_>, truth: MovePair<'_>, fx: &FeatureExtractor) -> Result<Tensor> {
    check_pair(pred.0, truth.0)?;
    check_pair(pred.1, truth.1)?;
    let mut total = Tensor::scalar(0.0);
    for (p, t) in [(pred.0, truth.0), (pred.1, truth.1)] {
        for (fp, ft) in fx.features(p).iter().zip(fx.features(t).iter()) {
            total = total.add(&fp.sub(ft).abs().mean_all());
        }
    }
    Ok(total)
}

/// Non-saturating generator term `-mean(log sigmoid(D(fake)))`.
pub fn temporal_gan_loss_g(pred: MovePair<'_>, flow: &Tensor, d: &ParamSet) -> Result<Tensor> {
    let logits = discriminator_logits(d, pred.0, pred.1, flow)?;
    Ok(logits.log_sigmoid().mean_all().neg())
}

/// Logistic discriminator loss. Fake frames are cut from the generator graph.
pub fn temporal_gan_loss_d(real: MovePair<'_>, fake: MovePair<'_>, flow: &Tensor, d: &ParamSet) -> Result<Tensor> {
    let real_logits = discriminator_logits(d, real.0, real.1, flow)?;
    let fake_logits = discriminator_logits(d, &fake.0.detach(), &fake.1.detach(), flow)?;
    let real_term = real_logits.log_sigmoid().mean_all().neg();
    let fake_term = fake_logits.neg().log_sigmoid().mean_all().neg();
    Ok(real_term.add(&fake_term))
}

/// `pixel * L1 + perceptual * P` for a single frame.
pub fn frame_loss(pred: &Tensor, truth: &Tensor, ctx: &LossContext<'_>) -> Result<Tensor> {
    check_pair(pred, truth)?;
    let w = ctx.weights;
    let mut total = Tensor::scalar(0.0);
    if w.pixel != 0.0 {
        total = total.add(&pred.sub(truth).abs().mean_all().scale(w.pixel));
    }
    if w.perceptual != 0.0 {
        for (fp, ft) in ctx.extractor.features(pred).iter().zip(ctx.extractor.features(truth).iter()) {
            total = total.add(&fp.sub(ft).abs().mean_all().scale(w.perceptual));
        }
    }
    Ok(total)
}

/// Weighted terms of one move loss.
#[derive(Clone, Debug)]
pub struct MoveLoss {
    pub pixel: Tensor,
    pub perceptual: Tensor,
    pub temporal: Tensor,
    pub total: Tensor,
}

/// Everything the move loss needs besides the frames.
#[derive(Clone, Copy)]
pub struct LossContext<'a> {
    pub extractor: &'a FeatureExtractor,
    pub discriminator: &'a ParamSet,
    pub weights: LossWeights,
}

/// `pixel * L1 + perceptual * P + temporal * G`. Terms with zero weight are
/// not evaluated.
pub fn move_loss(pred: MovePair<'_>, truth: MovePair<'_>, flow: &Tensor, ctx: &LossContext<'_>) -> Result<MoveLoss> {
    let w = ctx.weights;
    let zero = Tensor::scalar(0.0);
    let pixel = if w.pixel != 0.0 {
        l1_move_loss(pred, truth)?
    } else {
        zero.clone()
    };
    let perceptual = if w.perceptual != 0.0 {
        perceptual_move_loss(pred, truth, ctx.extractor)?
    } else {
        zero.clone()
    };
    let temporal = if w.temporal != 0.0 {
        temporal_gan_loss_g(pred, flow, ctx.discriminator)?
    } else {
        zero
    };
    let total = pixel
        .scale(w.pixel)
        .add(&perceptual.scale(w.perceptual))
        .add(&temporal.scale(w.temporal));
    Ok(MoveLoss {
        pixel,
        perceptual,
        temporal,
        total,
    })
}
