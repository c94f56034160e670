use gradgraph::fd::{central_diff, relative_error};
use gradgraph::layers::{instance_norm, warp};
use gradgraph::{grad, no_grad, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()
}

/// Checks first derivatives against finite differences and the
/// Hessian-vector product (double backward) against finite differences of
/// the first derivative.
fn check(shape: &[usize], seed: u64, f: impl Fn(&Tensor) -> Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let x0 = randn(&mut rng, n, 1.0);
    let v = randn(&mut rng, n, 1.0);
    let coords: Vec<usize> = (0..n).collect();

    let eval = |x: &[f64]| {
        let _g = no_grad();
        f(&Tensor::from_vec(shape, x.to_vec())).item()
    };
    let first = |x: &[f64]| {
        let xv = Tensor::variable(shape, x.to_vec());
        grad(&f(&xv), &[xv], false).unwrap()[0].to_vec()
    };

    let analytic = first(&x0);
    let numeric = central_diff(&x0, &coords, 1e-5, eval);
    let err = relative_error(&analytic, &numeric, 1e-8);
    assert!(err < 1e-6, "first-order rel err {err}");

    // Hessian-vector product via double backward.
    let xv = Tensor::variable(shape, x0.clone());
    let g = grad(&f(&xv), &[xv.clone()], true).unwrap().remove(0);
    let gv = g.mul(&Tensor::from_vec(shape, v.clone())).sum_all();
    let hv = grad(&gv, &[xv], false).unwrap()[0].to_vec();

    let h = 1e-5;
    let shifted = |s: f64| -> Vec<f64> {
        let x: Vec<f64> = x0.iter().zip(&v).map(|(a, b)| a + s * b).collect();
        first(&x)
    };
    let (up, down) = (shifted(h), shifted(-h));
    let hv_fd: Vec<f64> = up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * h)).collect();
    let err = relative_error(&hv, &hv_fd, 1e-8);
    assert!(err < 1e-5, "second-order rel err {err}");
}

#[test]
fn elementwise_chain() {
    check(&[2, 3, 4], 1, |x| {
        let a = x.sigmoid().mul(&x.softplus());
        let b = x.square().add_scalar(1.0).powf(-0.5);
        a.add(&b).sub(&x.scale(0.3)).sum_all()
    });
}

#[test]
fn silu_and_log_sigmoid() {
    check(&[1, 4, 4], 2, |x| x.silu().add(&x.log_sigmoid()).sum_all());
}

#[test]
fn channel_and_spatial_broadcasts() {
    check(&[3, 2, 5], 3, |x| {
        let s = x.sum_channels().expand_channels(3);
        let m = x.spatial_sum().expand_spatial(2, 5);
        x.mul(&s).add(&m.square()).mean_all()
    });
}

#[test]
fn concat_slice_pad() {
    check(&[4, 3, 3], 4, |x| {
        let a = x.slice_channels(0, 2);
        let b = x.slice_channels(2, 2).pad_channels(1, 4).slice_channels(1, 2);
        Tensor::concat(&[a.square(), b.sigmoid()]).sum_all()
    });
}

#[test]
fn conv_with_weight_and_input_nonlinear() {
    // The loss is nonlinear in both operands so every conv adjoint
    // appears in the double-backward graph.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let wdata = randn(&mut rng, 3 * 2 * 9, 0.5);
    for &(stride, pad) in &[(1, 1), (2, 1)] {
        let w = wdata.clone();
        check(&[2, 6, 8], 5 + stride as u64, move |x| {
            let wt = Tensor::from_vec(&[3, 2, 3, 3], w.clone());
            x.conv2d(&wt, stride, pad).silu().square().sum_all()
        });
    }
    // Differentiate through the weight as the variable.
    let xdata = randn(&mut rng, 2 * 6 * 8, 1.0);
    check(&[3, 2, 3, 3], 7, move |w| {
        let x = Tensor::from_vec(&[2, 6, 8], xdata.clone());
        x.conv2d(w, 2, 1).sigmoid().square().sum_all()
    });
}

#[test]
fn upsample_and_pool() {
    check(&[2, 3, 4], 8, |x| x.upsample2().silu().sum_pool2().square().sum_all());
}

#[test]
fn instance_norm_second_order() {
    check(&[2, 4, 4], 10, |x| instance_norm(x, 1e-5).sigmoid().square().sum_all());
}

#[test]
fn warp_in_flow_and_image() {
    let (h, w) = (5, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let img = randn(&mut rng, 2 * h * w, 1.0);
    // Small random flow keeps sample points off the integer lattice.
    check(&[2, h, w], 12, move |flow| {
        let im = Tensor::from_vec(&[2, h, w], img.clone());
        warp(&im, &flow.scale(0.4)).square().sum_all()
    });
    let fl: Vec<f64> = randn(&mut rng, 2 * h * w, 0.4);
    check(&[2, h, w], 13, move |im| {
        let flow = Tensor::from_vec(&[2, h, w], fl.clone());
        warp(im, &flow).silu().sum_all()
    });
}

#[test]
fn warp_zero_flow_is_bit_exact_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let img = Tensor::from_vec(&[3, 4, 7], randn(&mut rng, 84, 1.0));
    let out = warp(&img, &Tensor::zeros(&[2, 4, 7]));
    assert_eq!(out.data(), img.data());
}

#[test]
fn warp_integer_shift_moves_pixel() {
    let mut data = vec![0.0; 3 * 5];
    data[2 * 5 + 3] = 1.0; // row 2, col 3
    let img = Tensor::from_vec(&[1, 3, 5], data);
    let mut flow = vec![0.0; 2 * 15];
    flow[..15].iter_mut().for_each(|v| *v = 1.0);
    let out = warp(&img, &Tensor::from_vec(&[2, 3, 5], flow));
    // out(x) = img(x + 1): the lit pixel appears one column to the left.
    let lit: Vec<usize> = (0..15).filter(|&i| out.data()[i] != 0.0).collect();
    assert_eq!(lit, vec![2 * 5 + 2]);
}

#[test]
fn unreachable_input_gets_zeros() {
    let a = Tensor::variable(&[2], vec![1.0, 2.0]);
    let b = Tensor::variable(&[3], vec![1.0, 2.0, 3.0]);
    let g = grad(&a.square().sum_all(), &[a.clone(), b], false).unwrap();
    assert_eq!(g[0].data(), &[2.0, 4.0]);
    assert_eq!(g[1].data(), &[0.0; 3]);
}

#[test]
fn non_scalar_output_is_rejected() {
    let a = Tensor::variable(&[2], vec![1.0, 2.0]);
    assert!(grad(&a.square(), &[a], false).is_err());
}

#[test]
fn no_grad_results_are_constants() {
    let a = Tensor::variable(&[2], vec![1.0, 2.0]);
    let b = {
        let _g = no_grad();
        a.square()
    };
    assert!(!b.requires_grad());
    assert!(a.square().requires_grad());
}

#[test]
fn deep_chain_drops_without_overflow() {
    let x = Tensor::variable(&[1], vec![0.5]);
    let mut y = x.clone();
    for _ in 0..200_000 {
        y = y.scale(1.0).add_scalar(0.0);
    }
    let g = grad(&y.sum_all(), &[x], false).unwrap();
    assert_eq!(g[0].item(), 1.0);
}
