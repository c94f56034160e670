//! Differentiable building blocks composed from primitive ops.

use std::rc::Rc;

use crate::kernels::GatherIndex;
use crate::tensor::Tensor;

/// Parameter-free per-channel spatial normalization of a `[C, H, W]` tensor.
pub fn instance_norm(x: &Tensor, eps: f64) -> Tensor {
    let (_, h, w) = x.chw();
    let n = (h * w) as f64;
    let mean = x.spatial_sum().scale(1.0 / n);
    let centered = x.sub(&mean.expand_spatial(h, w));
    let var = centered.square().spatial_sum().scale(1.0 / n);
    let inv_std = var.add_scalar(eps).powf(-0.5);
    centered.mul(&inv_std.expand_spatial(h, w))
}

struct AxisSample {
    /// Clamped sample coordinate, differentiable where not clamped.
    pos: Tensor,
    lo: Vec<usize>,
    hi: Vec<usize>,
}

fn sample_axis(disp: &Tensor, base: impl Fn(usize) -> f64, extent: usize) -> AxisSample {
    let n = disp.numel();
    let grid: Vec<f64> = (0..n).map(&base).collect();
    let pos = disp.add_const(&grid).clamp(0.0, (extent - 1) as f64);
    let max_lo = extent.saturating_sub(2);
    let lo: Vec<usize> = pos
        .data()
        .iter()
        .map(|&p| (p.floor() as usize).min(max_lo))
        .collect();
    let hi = lo.iter().map(|&l| (l + 1).min(extent - 1)).collect();
    AxisSample { pos, lo, hi }
}

/// Backward bilinear warp: `out(x) = img(x + flow(x))` with border clamping.
///
/// `img` is `[C, H, W]`; `flow` is `[2, H, W]` holding horizontal then
/// vertical displacement in pixels. Differentiable in both arguments.
pub fn warp(img: &Tensor, flow: &Tensor) -> Tensor {
    let (c, h, w) = img.chw();
    assert_eq!(flow.shape(), &[2, h, w], "warp: flow must be [2, H, W]");
    let sx = sample_axis(&flow.slice_channels(0, 1), |i| (i % w) as f64, w);
    let sy = sample_axis(&flow.slice_channels(1, 1), |i| (i / w) as f64, h);

    let lo_x: Vec<f64> = sx.lo.iter().map(|&v| -(v as f64)).collect();
    let lo_y: Vec<f64> = sy.lo.iter().map(|&v| -(v as f64)).collect();
    let ax = sx.pos.add_const(&lo_x);
    let ay = sy.pos.add_const(&lo_y);
    let bx = ax.scale(-1.0).add_scalar(1.0);
    let by = ay.scale(-1.0).add_scalar(1.0);

    let corner = |ys: &[usize], xs: &[usize]| {
        let idx = ys
            .iter()
            .zip(xs)
            .map(|(&y, &x)| (y * w + x) as u32)
            .collect();
        img.gather(Rc::new(GatherIndex {
            src_h: h,
            src_w: w,
            out_h: h,
            out_w: w,
            idx,
        }))
    };
    let weighted = |ys: &[usize], xs: &[usize], wy: &Tensor, wx: &Tensor| {
        corner(ys, xs).mul(&wy.mul(wx).expand_channels(c))
    };
    weighted(&sy.lo, &sx.lo, &by, &bx)
        .add(&weighted(&sy.lo, &sx.hi, &by, &ax))
        .add(&weighted(&sy.hi, &sx.lo, &ay, &bx))
        .add(&weighted(&sy.hi, &sx.hi, &ay, &ax))
}

/// Weight and bias of one convolution layer.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let y = x.conv2d(&self.weight, self.stride, self.pad);
        match &self.bias {
            Some(b) => y.add_channel_bias(b),
            None => y,
        }
    }
}
