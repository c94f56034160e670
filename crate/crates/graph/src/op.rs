use std::rc::Rc;

use crate::kernels::{ConvGeom, GatherIndex};
use crate::tensor::Tensor;

/// Recorded operation. Every backward rule below is itself written with
/// tensor ops, so gradients taken under `create_graph` are differentiable.
pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    Shift(Tensor),
    MulConst(Tensor, Rc<Vec<f64>>),
    Sigmoid(Tensor),
    Softplus(Tensor),
    Powf(Tensor, f64),
    SumAll(Tensor),
    ExpandScalar(Tensor),
    SumChannels(Tensor),
    ExpandChannels(Tensor),
    SpatialSum(Tensor),
    ExpandSpatial(Tensor),
    Concat(Vec<Tensor>),
    SliceChannels(Tensor, usize),
    PadChannels(Tensor, usize),
    Conv2d(Tensor, Tensor, ConvGeom),
    ConvInputGrad(Tensor, Tensor, ConvGeom),
    ConvWeightGrad(Tensor, Tensor, ConvGeom),
    Upsample2(Tensor),
    SumPool2(Tensor),
    Gather(Tensor, Rc<GatherIndex>),
    ScatterAdd(Tensor, Rc<GatherIndex>),
    Reshape(Tensor),
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        use Op::*;
        match self {
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![a, b],
            Conv2d(a, b, _) | ConvInputGrad(a, b, _) | ConvWeightGrad(a, b, _) => vec![a, b],
            Concat(parts) => parts.iter().collect(),
            Scale(a, _) | Shift(a) | MulConst(a, _) | Sigmoid(a) | Softplus(a) | Powf(a, _) => {
                vec![a]
            }
            SumAll(a) | ExpandScalar(a) | SumChannels(a) | ExpandChannels(a) => vec![a],
            SpatialSum(a) | ExpandSpatial(a) | SliceChannels(a, _) | PadChannels(a, _) => vec![a],
            Upsample2(a) | SumPool2(a) | Gather(a, _) | ScatterAdd(a, _) | Reshape(a) => vec![a],
        }
    }

    pub(crate) fn into_parents(self) -> Vec<Tensor> {
        use Op::*;
        match self {
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![a, b],
            Conv2d(a, b, _) | ConvInputGrad(a, b, _) | ConvWeightGrad(a, b, _) => vec![a, b],
            Concat(parts) => parts,
            Scale(a, _) | Shift(a) | MulConst(a, _) | Sigmoid(a) | Softplus(a) | Powf(a, _) => {
                vec![a]
            }
            SumAll(a) | ExpandScalar(a) | SumChannels(a) | ExpandChannels(a) => vec![a],
            SpatialSum(a) | ExpandSpatial(a) | SliceChannels(a, _) | PadChannels(a, _) => vec![a],
            Upsample2(a) | SumPool2(a) | Gather(a, _) | ScatterAdd(a, _) | Reshape(a) => vec![a],
        }
    }

    pub(crate) fn any_parent_requires_grad(&self) -> bool {
        self.parents().iter().any(|t| t.requires_grad())
    }

    /// Vector-Jacobian products: `(parent, d output / d parent applied to g)`.
    pub(crate) fn vjp(&self, out: &Tensor, g: &Tensor) -> Vec<(Tensor, Tensor)> {
        use Op::*;
        match self {
            Add(a, b) => vec![(a.clone(), g.clone()), (b.clone(), g.clone())],
            Sub(a, b) => vec![(a.clone(), g.clone()), (b.clone(), g.scale(-1.0))],
            Mul(a, b) => vec![(a.clone(), g.mul(b)), (b.clone(), g.mul(a))],
            Scale(a, c) => vec![(a.clone(), g.scale(*c))],
            Shift(a) => vec![(a.clone(), g.clone())],
            MulConst(a, m) => vec![(a.clone(), g.mul_const(m.clone()))],
            Sigmoid(a) => {
                // out * (1 - out), written with `out` so it stays differentiable
                let slope = out.mul(&out.scale(-1.0).add_scalar(1.0));
                vec![(a.clone(), g.mul(&slope))]
            }
            Softplus(a) => vec![(a.clone(), g.mul(&a.sigmoid()))],
            Powf(a, p) => vec![(a.clone(), g.mul(&a.powf(p - 1.0)).scale(*p))],
            SumAll(a) => vec![(a.clone(), g.expand_scalar(a.shape()))],
            ExpandScalar(a) => vec![(a.clone(), g.sum_all().reshape(a.shape()))],
            SumChannels(a) => {
                let (c, _, _) = a.chw();
                vec![(a.clone(), g.expand_channels(c))]
            }
            ExpandChannels(a) => vec![(a.clone(), g.sum_channels())],
            SpatialSum(a) => {
                let (_, h, w) = a.chw();
                vec![(a.clone(), g.expand_spatial(h, w))]
            }
            ExpandSpatial(a) => vec![(a.clone(), g.spatial_sum())],
            Concat(parts) => {
                let mut off = 0;
                parts
                    .iter()
                    .map(|p| {
                        let (c, _, _) = p.chw();
                        let s = g.slice_channels(off, c);
                        off += c;
                        (p.clone(), s)
                    })
                    .collect()
            }
            SliceChannels(a, start) => {
                let (c, _, _) = a.chw();
                vec![(a.clone(), g.pad_channels(*start, c))]
            }
            PadChannels(a, start) => {
                let (c, _, _) = a.chw();
                vec![(a.clone(), g.slice_channels(*start, c))]
            }
            Conv2d(x, w, geom) => vec![
                (x.clone(), g.conv_input_grad_geom(w, *geom)),
                (w.clone(), x.conv_weight_grad_geom(g, *geom)),
            ],
            ConvInputGrad(gy, w, geom) => vec![
                (gy.clone(), g.conv2d_geom(w, *geom)),
                (w.clone(), g.conv_weight_grad_geom(gy, *geom)),
            ],
            ConvWeightGrad(x, gy, geom) => vec![
                (x.clone(), gy.conv_input_grad_geom(g, *geom)),
                (gy.clone(), x.conv2d_geom(g, *geom)),
            ],
            Upsample2(a) => vec![(a.clone(), g.sum_pool2())],
            SumPool2(a) => vec![(a.clone(), g.upsample2())],
            Gather(a, gi) => vec![(a.clone(), g.scatter_add(gi.clone()))],
            ScatterAdd(a, gi) => vec![(a.clone(), g.gather(gi.clone()))],
            Reshape(a) => vec![(a.clone(), g.reshape(a.shape()))],
        }
    }
}
