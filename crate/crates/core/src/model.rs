//! The temporal dance generation network.
//!
//! One frame is synthesized in five steps: pyramid encoding of poses and
//! images, coarse-to-fine flow prediction and warping of the reference image,
//! pose-driven modulation of image features, decoding of a rough image, and
//! compositing of warped and rough images through a predicted occlusion map.

use gradgraph::layers::{instance_norm, warp};
use gradgraph::Tensor;
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamSet};
use crate::sampling::move_pairs;
use crate::synth::POSE_CHANNELS;
use crate::types::Resolution;

/// Sub-network name prefixes, in parameter order.
pub const GROUPS: [&str; 6] = ["pen", "ien", "fn", "mn", "dec", "wn"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub resolution: Resolution,
    /// Pyramid levels; level `l` has `1 / 2^(l+1)` of the input size.
    pub levels: usize,
    pub base_channels: usize,
    pub pose_channels: usize,
    /// Width of the occlusion network.
    pub occlusion_width: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            resolution: Resolution::default(),
            levels: 3,
            base_channels: 16,
            pose_channels: POSE_CHANNELS,
            occlusion_width: 8,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("need at least 2 pyramid levels, got {}", self.levels)));
        }
        let f = 1 << self.levels;
        let Resolution { height, width } = self.resolution;
        if height % f != 0 || width % f != 0 || height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "resolution {height}x{width} is not divisible by 2^{} = {f}",
                self.levels
            )));
        }
        if self.base_channels == 0 || self.occlusion_width < 2 || self.pose_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn level_size(&self, level: usize) -> (usize, usize) {
        let f = 2 << level;
        (self.resolution.height / f, self.resolution.width / f)
    }
}

fn residual_block(b: &mut ParamBuilder<'_, StdRng>, name: &str, c: usize) {
    b.conv(&format!("{name}.c1"), c, c, 3, false);
    b.conv(&format!("{name}.c2"), c, c, 3, false);
}

fn encoder_params(b: &mut ParamBuilder<'_, StdRng>, cfg: &ModelConfig, prefix: &str, c_in: usize) {
    let mut c_prev = c_in;
    for l in 0..cfg.levels {
        let c = cfg.channels(l);
        b.conv(&format!("{prefix}.s{l}.down"), c_prev, c, 3, false);
        residual_block(b, &format!("{prefix}.s{l}.r0"), c);
        residual_block(b, &format!("{prefix}.s{l}.r1"), c);
        c_prev = c;
    }
}

/// Fresh generator parameters for `cfg`, deterministic in `cfg.seed`.
///
/// The flow head, both modulation heads and the occlusion head start at zero.
pub fn init_params(cfg: &ModelConfig) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut b = ParamBuilder::new(&mut rng);
    encoder_params(&mut b, cfg, "pen", cfg.pose_channels);
    encoder_params(&mut b, cfg, "ien", 3);
    for l in 0..cfg.levels {
        let c = cfg.channels(l);
        let c_in = if l + 1 == cfg.levels { 2 * c } else { 2 * c + 2 };
        b.conv(&format!("fn.l{l}.conv"), c_in, c, 3, false);
        b.conv(&format!("fn.l{l}.head"), c, 2, 3, true);
    }
    for l in 0..cfg.levels {
        let c = cfg.channels(l);
        b.conv(&format!("mn.l{l}.shared"), 2 * c, c, 3, false);
        b.conv(&format!("mn.l{l}.gamma"), c, 2 * c, 3, true);
        b.conv(&format!("mn.l{l}.beta"), c, 2 * c, 3, true);
    }
    for l in (0..cfg.levels).rev() {
        let c = cfg.channels(l);
        let c_in = if l + 1 == cfg.levels {
            2 * c
        } else {
            2 * c + cfg.channels(l + 1)
        };
        b.conv(&format!("dec.l{l}.fuse"), c_in, c, 3, false);
        residual_block(&mut b, &format!("dec.l{l}.r0"), c);
        residual_block(&mut b, &format!("dec.l{l}.r1"), c);
    }
    let c0 = cfg.channels(0);
    b.conv("dec.out1", c0, (c0 / 2).max(1), 3, false);
    b.conv("dec.out2", (c0 / 2).max(1), 3, 3, false);
    let w = cfg.occlusion_width;
    b.conv("wn.in", 6, w, 3, false);
    residual_block(&mut b, "wn.r0", w);
    b.conv("wn.down", w, 2 * w, 3, false);
    residual_block(&mut b, "wn.r1", 2 * w);
    b.conv("wn.up", 3 * w, w, 3, false);
    residual_block(&mut b, "wn.r2", w);
    b.conv("wn.head", w, 1, 3, true);
    Ok(b.finish())
}

/// Per-level feature maps, finest first.
#[derive(Clone, Debug)]
pub struct Pyramid(pub Vec<Tensor>);

impl Pyramid {
    pub fn levels(&self) -> usize {
        self.0.len()
    }

    pub fn level(&self, l: usize) -> &Tensor {
        &self.0[l]
    }
}

/// Everything computed on the way to one synthesized frame.
#[derive(Clone, Debug)]
pub struct Intermediates {
    /// `[2, H, W]` flow used to warp the reference image.
    pub flow: Tensor,
    pub warped: Tensor,
    pub rough: Tensor,
    /// `[1, H, W]` weight of the warped image.
    pub map: Tensor,
    pub modulated: Pyramid,
}

/// How previous results feed each frame.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SynthOptions {
    /// Condition every frame on the reference instead of the previous output.
    pub independent_frames: bool,
    /// Replace the occlusion map by a constant.
    pub force_map: Option<f64>,
}

/// Reference-dependent features shared by every frame of a sequence.
#[derive(Clone, Debug)]
pub struct ReferenceContext {
    pub image: Tensor,
    pub pose: Tensor,
    pub image_features: Pyramid,
    pub pose_features: Pyramid,
}

/// The network bound to one parameter set.
#[derive(Clone, Copy)]
pub struct Tdgn<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ParamSet,
}

fn check_shape(t: &Tensor, expected: &[usize], what: &str) -> Result<()> {
    if t.shape() != expected {
        return Err(Error::Shape(format!("{what} must be {expected:?}, got {:?}", t.shape())));
    }
    Ok(())
}

impl<'a> Tdgn<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ParamSet) -> Self {
        Self { cfg, params }
    }

    fn conv(&self, name: &str, x: &Tensor, stride: usize) -> Tensor {
        let w = self.params.get(&format!("{name}.w"));
        let b = self.params.get(&format!("{name}.b"));
        let pad = w.shape()[2] / 2;
        x.conv2d(w, stride, pad).add_channel_bias(b)
    }

    fn residual(&self, name: &str, x: &Tensor) -> Tensor {
        let h = self.conv(&format!("{name}.c1"), &x.silu(), 1);
        let h = self.conv(&format!("{name}.c2"), &h.silu(), 1);
        x.add(&h)
    }

    fn encode(&self, prefix: &str, x: &Tensor) -> Pyramid {
        let mut h = x.clone();
        let mut out = Vec::with_capacity(self.cfg.levels);
        for l in 0..self.cfg.levels {
            h = self.conv(&format!("{prefix}.s{l}.down"), &h, 2).silu();
            h = self.residual(&format!("{prefix}.s{l}.r0"), &h);
            h = self.residual(&format!("{prefix}.s{l}.r1"), &h);
            out.push(h.clone());
        }
        Pyramid(out)
    }

    fn full_shape(&self, c: usize) -> [usize; 3] {
        [c, self.cfg.resolution.height, self.cfg.resolution.width]
    }

    pub fn extract_pose_features(&self, pose: &Tensor) -> Result<Pyramid> {
        check_shape(pose, &self.full_shape(self.cfg.pose_channels), "pose map")?;
        Ok(self.encode("pen", pose))
    }

    pub fn extract_image_features(&self, image: &Tensor) -> Result<Pyramid> {
        check_shape(image, &self.full_shape(3), "image")?;
        Ok(self.encode("ien", image))
    }

    fn check_pyramid(&self, p: &Pyramid, what: &str) -> Result<()> {
        if p.levels() != self.cfg.levels {
            return Err(Error::Shape(format!(
                "{what} has {} levels, expected {}",
                p.levels(),
                self.cfg.levels
            )));
        }
        for l in 0..self.cfg.levels {
            let (h, w) = self.cfg.level_size(l);
            check_shape(p.level(l), &[self.cfg.channels(l), h, w], what)?;
        }
        Ok(())
    }

    /// Coarse-to-fine flow from the reference pose features towards the
    /// target pose features, returned at full resolution in pixels.
    pub fn predict_flow(&self, ref_pose: &Pyramid, target_pose: &Pyramid) -> Result<Tensor> {
        self.check_pyramid(ref_pose, "reference pose pyramid")?;
        self.check_pyramid(target_pose, "target pose pyramid")?;
        let top = self.cfg.levels - 1;
        let mut flow: Option<Tensor> = None;
        for l in (0..=top).rev() {
            let input = match &flow {
                None => Tensor::concat(&[ref_pose.level(l).clone(), target_pose.level(l).clone()]),
                Some(coarse) => {
                    let up = coarse.upsample2().scale(2.0);
                    let aligned = warp(ref_pose.level(l), &up);
                    Tensor::concat(&[aligned, target_pose.level(l).clone(), up])
                }
            };
            let h = self.conv(&format!("fn.l{l}.conv"), &input, 1).silu();
            let delta = self.conv(&format!("fn.l{l}.head"), &h, 1);
            flow = Some(match flow {
                None => delta,
                Some(coarse) => coarse.upsample2().scale(2.0).add(&delta),
            });
        }
        Ok(flow.expect("at least one level").upsample2().scale(2.0))
    }

    /// Normalizes the concatenated reference and previous image features,
    /// then scales and shifts them per pixel from the pose features.
    pub fn modulate(
        &self,
        ref_image: &Pyramid,
        prev_image: &Pyramid,
        target_pose: &Pyramid,
        prev_pose: &Pyramid,
    ) -> Result<Pyramid> {
        for (p, what) in [
            (ref_image, "reference image pyramid"),
            (prev_image, "previous image pyramid"),
            (target_pose, "target pose pyramid"),
            (prev_pose, "previous pose pyramid"),
        ] {
            self.check_pyramid(p, what)?;
        }
        let out = (0..self.cfg.levels)
            .map(|l| {
                let x = instance_norm(
                    &Tensor::concat(&[ref_image.level(l).clone(), prev_image.level(l).clone()]),
                    1e-5,
                );
                let cond = Tensor::concat(&[target_pose.level(l).clone(), prev_pose.level(l).clone()]);
                let h = self.conv(&format!("mn.l{l}.shared"), &cond, 1).silu();
                let gamma = self.conv(&format!("mn.l{l}.gamma"), &h, 1);
                let beta = self.conv(&format!("mn.l{l}.beta"), &h, 1);
                x.mul(&gamma.add_scalar(1.0)).add(&beta)
            })
            .collect();
        Ok(Pyramid(out))
    }

    /// Rough image in `[0, 1]` from modulated features.
    pub fn decode(&self, feats: &Pyramid) -> Result<Tensor> {
        if feats.levels() != self.cfg.levels {
            return Err(Error::Shape("decoder input has the wrong number of levels".into()));
        }
        for l in 0..self.cfg.levels {
            let (h, w) = self.cfg.level_size(l);
            check_shape(feats.level(l), &[2 * self.cfg.channels(l), h, w], "decoder input")?;
        }
        let top = self.cfg.levels - 1;
        let mut h: Option<Tensor> = None;
        for l in (0..=top).rev() {
            let input = match &h {
                None => feats.level(l).clone(),
                Some(coarse) => Tensor::concat(&[coarse.upsample2(), feats.level(l).clone()]),
            };
            let mut x = self.conv(&format!("dec.l{l}.fuse"), &input, 1).silu();
            x = self.residual(&format!("dec.l{l}.r0"), &x);
            x = self.residual(&format!("dec.l{l}.r1"), &x);
            h = Some(x);
        }
        let x = h.expect("at least one level").upsample2();
        let x = self.conv("dec.out1", &x, 1).silu();
        Ok(self.conv("dec.out2", &x, 1).sigmoid())
    }

    /// Occlusion map in `(0, 1)` from a small residual U-Net over the
    /// warped and rough images.
    pub fn predict_occlusion(&self, warped: &Tensor, rough: &Tensor) -> Result<Tensor> {
        check_shape(warped, &self.full_shape(3), "warped image")?;
        check_shape(rough, &self.full_shape(3), "rough image")?;
        let x = Tensor::concat(&[warped.clone(), rough.clone()]);
        let e0 = self.conv("wn.in", &x, 1).silu();
        let e0 = self.residual("wn.r0", &e0);
        let e1 = self.conv("wn.down", &e0, 2).silu();
        let e1 = self.residual("wn.r1", &e1);
        let d = Tensor::concat(&[e1.upsample2(), e0]);
        let d = self.conv("wn.up", &d, 1).silu();
        let d = self.residual("wn.r2", &d);
        Ok(self.conv("wn.head", &d, 1).sigmoid())
    }

    pub fn reference(&self, image: &Tensor, pose: &Tensor) -> Result<ReferenceContext> {
        Ok(ReferenceContext {
            image: image.clone(),
            pose: pose.clone(),
            image_features: self.extract_image_features(image)?,
            pose_features: self.extract_pose_features(pose)?,
        })
    }

    /// One frame from the reference, the previous result with its pose
    /// features, and the target pose features.
    pub fn synthesize_frame(
        &self,
        reference: &ReferenceContext,
        prev_image: &Tensor,
        prev_pose: &Pyramid,
        target_pose: &Pyramid,
        opts: SynthOptions,
    ) -> Result<(Tensor, Intermediates)> {
        let prev_feats = if prev_image.id() == reference.image.id() {
            reference.image_features.clone()
        } else {
            self.extract_image_features(prev_image)?
        };
        let flow = self.predict_flow(&reference.pose_features, target_pose)?;
        let warped = warp(&reference.image, &flow);
        let modulated = self.modulate(&reference.image_features, &prev_feats, target_pose, prev_pose)?;
        let rough = self.decode(&modulated)?;
        let map = match opts.force_map {
            Some(v) => Tensor::full(&[1, self.cfg.resolution.height, self.cfg.resolution.width], v),
            None => self.predict_occlusion(&warped, &rough)?,
        };
        let out = composite(&map, &warped, &rough);
        Ok((
            out,
            Intermediates {
                flow,
                warped,
                rough,
                map,
                modulated,
            },
        ))
    }

    /// Two chained frames: the second is conditioned on the first output.
    pub fn synthesize_move(
        &self,
        reference: &ReferenceContext,
        prev_image: &Tensor,
        prev_pose: &Pyramid,
        move_poses: (&Pyramid, &Pyramid),
        opts: SynthOptions,
    ) -> Result<(Tensor, Tensor)> {
        let (first, _) = self.synthesize_frame(reference, prev_image, prev_pose, move_poses.0, opts)?;
        let (prev2, pose2): (&Tensor, &Pyramid) = if opts.independent_frames {
            (&reference.image, &reference.pose_features)
        } else {
            (&first, move_poses.0)
        };
        let (second, _) = self.synthesize_frame(reference, prev2, pose2, move_poses.1, opts)?;
        Ok((first, second))
    }

    /// Synthesizes one frame per pose. Moves are chained: each frame uses the
    /// previous output, and the first uses the reference. The overlapping
    /// frame of an odd-length tail move is synthesized once and shared.
    pub fn synthesize_sequence(
        &self,
        reference: &ReferenceContext,
        poses: &[Tensor],
        opts: SynthOptions,
    ) -> Result<Vec<Tensor>> {
        if poses.is_empty() {
            return Err(Error::Length("pose sequence is empty".into()));
        }
        let feats = poses
            .iter()
            .map(|p| self.extract_pose_features(p))
            .collect::<Result<Vec<_>>>()?;
        let mut out: Vec<Tensor> = Vec::with_capacity(poses.len());
        let pairs = if poses.len() == 1 {
            vec![(0, 0)]
        } else {
            move_pairs(poses.len())?
        };
        for (a, b) in pairs {
            for t in [a, b] {
                if t < out.len() {
                    continue;
                }
                let (prev_img, prev_pose) = if t == 0 || opts.independent_frames {
                    (&reference.image, &reference.pose_features)
                } else {
                    (&out[t - 1], &feats[t - 1])
                };
                let (frame, _) = self.synthesize_frame(reference, prev_img, prev_pose, &feats[t], opts)?;
                out.push(frame);
            }
        }
        Ok(out)
    }
}

/// `map * warped + (1 - map) * rough`, with `map` broadcast over channels.
pub fn composite(map: &Tensor, warped: &Tensor, rough: &Tensor) -> Tensor {
    let c = warped.shape()[0];
    let m = map.expand_channels(c);
    let inv = map.scale(-1.0).add_scalar(1.0).expand_channels(c);
    m.mul(warped).add(&inv.mul(rough))
}
