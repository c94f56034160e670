use std::rc::Rc;

use crate::kernels::{self, ConvGeom, GatherIndex};
use crate::op::Op;
use crate::tensor::Tensor;

fn same_shape(a: &Tensor, b: &Tensor, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Vec<f64> {
    t.data().iter().map(|&v| f(v)).collect()
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_scalar(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        same_shape(self, other, "add");
        let data = zip(self, other, |a, b| a + b);
        Tensor::from_op(self.shape().to_vec(), data, Op::Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        same_shape(self, other, "sub");
        let data = zip(self, other, |a, b| a - b);
        Tensor::from_op(self.shape().to_vec(), data, Op::Sub(self.clone(), other.clone()))
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        same_shape(self, other, "mul");
        let data = zip(self, other, |a, b| a * b);
        Tensor::from_op(self.shape().to_vec(), data, Op::Mul(self.clone(), other.clone()))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = map(self, |v| v * c);
        Tensor::from_op(self.shape().to_vec(), data, Op::Scale(self.clone(), c))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = map(self, |v| v + c);
        Tensor::from_op(self.shape().to_vec(), data, Op::Shift(self.clone()))
    }

    /// Adds a constant array (no gradient flows into it).
    pub fn add_const(&self, c: &[f64]) -> Tensor {
        assert_eq!(c.len(), self.numel(), "add_const: length mismatch");
        let data = self.data().iter().zip(c).map(|(a, b)| a + b).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Shift(self.clone()))
    }

    /// Elementwise product with a constant array.
    pub fn mul_const(&self, m: Rc<Vec<f64>>) -> Tensor {
        assert_eq!(m.len(), self.numel(), "mul_const: length mismatch");
        let data = self.data().iter().zip(m.iter()).map(|(a, b)| a * b).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::MulConst(self.clone(), m))
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = map(self, sigmoid_scalar);
        Tensor::from_op(self.shape().to_vec(), data, Op::Sigmoid(self.clone()))
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&self) -> Tensor {
        let data = map(self, softplus_scalar);
        Tensor::from_op(self.shape().to_vec(), data, Op::Softplus(self.clone()))
    }

    pub fn powf(&self, p: f64) -> Tensor {
        let data = map(self, |v| v.powf(p));
        Tensor::from_op(self.shape().to_vec(), data, Op::Powf(self.clone(), p))
    }

    pub fn sum_all(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![], vec![s], Op::SumAll(self.clone()))
    }

    pub fn mean_all(&self) -> Tensor {
        self.sum_all().scale(1.0 / self.numel() as f64)
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand_scalar(&self, shape: &[usize]) -> Tensor {
        let v = self.item();
        let n = shape.iter().product();
        Tensor::from_op(shape.to_vec(), vec![v; n], Op::ExpandScalar(self.clone()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.numel(), "reshape: element count mismatch");
        Tensor::from_op(shape.to_vec(), self.to_vec(), Op::Reshape(self.clone()))
    }

    /// `[C, H, W] -> [1, H, W]`.
    pub fn sum_channels(&self) -> Tensor {
        let (c, h, w) = self.chw();
        let plane = h * w;
        let mut out = vec![0.0; plane];
        for ci in 0..c {
            for (o, v) in out.iter_mut().zip(&self.data()[ci * plane..(ci + 1) * plane]) {
                *o += v;
            }
        }
        Tensor::from_op(vec![1, h, w], out, Op::SumChannels(self.clone()))
    }

    /// `[1, H, W] -> [C, H, W]`.
    pub fn expand_channels(&self, c: usize) -> Tensor {
        let (c1, h, w) = self.chw();
        assert_eq!(c1, 1, "expand_channels expects a single channel");
        let mut out = Vec::with_capacity(c * h * w);
        for _ in 0..c {
            out.extend_from_slice(self.data());
        }
        Tensor::from_op(vec![c, h, w], out, Op::ExpandChannels(self.clone()))
    }

    /// `[C, H, W] -> [C]`.
    pub fn spatial_sum(&self) -> Tensor {
        let (c, h, w) = self.chw();
        let plane = h * w;
        let out = (0..c)
            .map(|ci| self.data()[ci * plane..(ci + 1) * plane].iter().sum())
            .collect();
        Tensor::from_op(vec![c], out, Op::SpatialSum(self.clone()))
    }

    /// `[C] -> [C, H, W]`.
    pub fn expand_spatial(&self, h: usize, w: usize) -> Tensor {
        assert_eq!(self.shape().len(), 1, "expand_spatial expects a rank-1 tensor");
        let c = self.numel();
        let mut out = Vec::with_capacity(c * h * w);
        for &v in self.data() {
            out.extend(std::iter::repeat(v).take(h * w));
        }
        Tensor::from_op(vec![c, h, w], out, Op::ExpandSpatial(self.clone()))
    }

    /// Channel concatenation of `[C_i, H, W]` tensors.
    pub fn concat(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat of nothing");
        let (_, h, w) = parts[0].chw();
        let mut c_total = 0;
        let mut out = Vec::new();
        for p in parts {
            let (c, ph, pw) = p.chw();
            assert_eq!((ph, pw), (h, w), "concat: spatial mismatch");
            c_total += c;
            out.extend_from_slice(p.data());
        }
        Tensor::from_op(vec![c_total, h, w], out, Op::Concat(parts.to_vec()))
    }

    pub fn slice_channels(&self, start: usize, len: usize) -> Tensor {
        let (c, h, w) = self.chw();
        assert!(start + len <= c, "slice_channels out of range");
        let plane = h * w;
        let out = self.data()[start * plane..(start + len) * plane].to_vec();
        Tensor::from_op(vec![len, h, w], out, Op::SliceChannels(self.clone(), start))
    }

    /// Embeds `self` at channel offset `start` in a zero tensor of `total` channels.
    pub fn pad_channels(&self, start: usize, total: usize) -> Tensor {
        let (c, h, w) = self.chw();
        assert!(start + c <= total, "pad_channels out of range");
        let plane = h * w;
        let mut out = vec![0.0; total * plane];
        out[start * plane..(start + c) * plane].copy_from_slice(self.data());
        Tensor::from_op(vec![total, h, w], out, Op::PadChannels(self.clone(), start))
    }

    fn conv_geom(&self, weight: &Tensor, stride: usize, pad: usize) -> ConvGeom {
        let (c_in, h, w) = self.chw();
        match weight.shape() {
            [o, i, k, k2] if *i == c_in && k == k2 => ConvGeom {
                c_in,
                h,
                w,
                c_out: *o,
                k: *k,
                stride,
                pad,
            },
            s => panic!("conv2d: weight shape {s:?} incompatible with input {:?}", self.shape()),
        }
    }

    /// Cross-correlation with a `[O, I, K, K]` kernel.
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Tensor {
        let geom = self.conv_geom(weight, stride, pad);
        self.conv2d_geom(weight, geom)
    }

    pub(crate) fn conv2d_geom(&self, weight: &Tensor, geom: ConvGeom) -> Tensor {
        let out = kernels::conv2d(self.data(), weight.data(), &geom);
        Tensor::from_op(
            vec![geom.c_out, geom.out_h(), geom.out_w()],
            out,
            Op::Conv2d(self.clone(), weight.clone(), geom),
        )
    }

    pub(crate) fn conv_input_grad_geom(&self, weight: &Tensor, geom: ConvGeom) -> Tensor {
        let out = kernels::conv2d_input_grad(self.data(), weight.data(), &geom);
        Tensor::from_op(
            vec![geom.c_in, geom.h, geom.w],
            out,
            Op::ConvInputGrad(self.clone(), weight.clone(), geom),
        )
    }

    pub(crate) fn conv_weight_grad_geom(&self, gy: &Tensor, geom: ConvGeom) -> Tensor {
        let out = kernels::conv2d_weight_grad(self.data(), gy.data(), &geom);
        Tensor::from_op(
            vec![geom.c_out, geom.c_in, geom.k, geom.k],
            out,
            Op::ConvWeightGrad(self.clone(), gy.clone(), geom),
        )
    }

    pub fn upsample2(&self) -> Tensor {
        let (c, h, w) = self.chw();
        let out = kernels::upsample2(self.data(), c, h, w);
        Tensor::from_op(vec![c, 2 * h, 2 * w], out, Op::Upsample2(self.clone()))
    }

    pub fn sum_pool2(&self) -> Tensor {
        let (c, h, w) = self.chw();
        assert!(h % 2 == 0 && w % 2 == 0, "sum_pool2 needs even dims");
        let out = kernels::sum_pool2(self.data(), c, h, w);
        Tensor::from_op(vec![c, h / 2, w / 2], out, Op::SumPool2(self.clone()))
    }

    /// `out[c, i] = self[c, idx[i]]` for every channel.
    pub fn gather(&self, gi: Rc<GatherIndex>) -> Tensor {
        let (c, h, w) = self.chw();
        assert_eq!((h, w), (gi.src_h, gi.src_w), "gather: source dims mismatch");
        let out = kernels::gather(self.data(), c, &gi);
        let (oh, ow) = (gi.out_h, gi.out_w);
        Tensor::from_op(vec![c, oh, ow], out, Op::Gather(self.clone(), gi))
    }

    pub fn scatter_add(&self, gi: Rc<GatherIndex>) -> Tensor {
        let (c, h, w) = self.chw();
        assert_eq!((h, w), (gi.out_h, gi.out_w), "scatter_add: dims mismatch");
        let out = kernels::scatter_add(self.data(), c, &gi);
        let (sh, sw) = (gi.src_h, gi.src_w);
        Tensor::from_op(vec![c, sh, sw], out, Op::ScatterAdd(self.clone(), gi))
    }

    // Composites.

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor {
        self.mul(&self.sigmoid())
    }

    /// `|x|`, with the subgradient sign(0) = 0.
    pub fn abs(&self) -> Tensor {
        let sign = map(self, |v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        self.mul_const(Rc::new(sign))
    }

    /// `ln(sigmoid(x)) = -softplus(-x)`.
    pub fn log_sigmoid(&self) -> Tensor {
        self.neg().softplus().neg()
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamped.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let mask: Vec<f64> = map(self, |v| if (lo..=hi).contains(&v) { 1.0 } else { 0.0 });
        let offset: Vec<f64> = map(self, |v| {
            if v < lo {
                lo
            } else if v > hi {
                hi
            } else {
                0.0
            }
        });
        self.mul_const(Rc::new(mask)).add_const(&offset)
    }

    /// Adds a per-channel `[C]` bias to a `[C, H, W]` tensor.
    pub fn add_channel_bias(&self, bias: &Tensor) -> Tensor {
        let (_, h, w) = self.chw();
        self.add(&bias.expand_spatial(h, w))
    }
}
