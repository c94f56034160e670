//! Raw numeric kernels on contiguous `[C, H, W]` buffers.

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn cols_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

/// C = alpha * op(A) * op(B) + beta * C with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass buffers sized for the given dims and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let mut cols = vec![0.0; g.cols_rows() * plane];
    for ci in 0..g.c_in {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * ow + ox] = srow[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let mut x = vec![0.0; g.c_in * g.h * g.w];
    for ci in 0..g.c_in {
        let dst = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[iy as usize * g.w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `y[O, OH, OW] = conv(x[I, H, W], w[O, I, K, K])`, cross-correlation.
pub fn conv2d(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.out_h() * g.out_w();
    let kk = g.cols_rows();
    let mut y = vec![0.0; g.c_out * plane];
    if g.k == 1 && g.stride == 1 && g.pad == 0 {
        gemm(g.c_out, kk, plane, w, kk as isize, 1, x, plane as isize, 1, &mut y, 0.0);
        return y;
    }
    let cols = im2col(x, g);
    gemm(g.c_out, kk, plane, w, kk as isize, 1, &cols, plane as isize, 1, &mut y, 0.0);
    y
}

/// Adjoint of [`conv2d`] in `x`: maps an output-space gradient to input space.
pub fn conv2d_input_grad(gy: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.out_h() * g.out_w();
    let kk = g.cols_rows();
    let mut cols = vec![0.0; kk * plane];
    // cols = w^T (kk x O) * gy (O x plane)
    gemm(kk, g.c_out, plane, w, 1, kk as isize, gy, plane as isize, 1, &mut cols, 0.0);
    if g.k == 1 && g.stride == 1 && g.pad == 0 {
        return cols;
    }
    col2im(&cols, g)
}

/// Adjoint of [`conv2d`] in `w`.
pub fn conv2d_weight_grad(x: &[f64], gy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.out_h() * g.out_w();
    let kk = g.cols_rows();
    let mut dw = vec![0.0; g.c_out * kk];
    // dw = gy (O x plane) * cols^T (plane x kk)
    if g.k == 1 && g.stride == 1 && g.pad == 0 {
        gemm(g.c_out, plane, kk, gy, plane as isize, 1, x, 1, plane as isize, &mut dw, 0.0);
        return dw;
    }
    let cols = im2col(x, g);
    gemm(g.c_out, plane, kk, gy, plane as isize, 1, &cols, 1, plane as isize, &mut dw, 0.0);
    dw
}

/// Nearest-neighbour x2 upsampling.
pub fn upsample2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut y = vec![0.0; c * h2 * w2];
    for ci in 0..c {
        for yy in 0..h2 {
            let src = &x[(ci * h + yy / 2) * w..(ci * h + yy / 2 + 1) * w];
            let dst = &mut y[(ci * h2 + yy) * w2..(ci * h2 + yy + 1) * w2];
            for (xx, d) in dst.iter_mut().enumerate() {
                *d = src[xx / 2];
            }
        }
    }
    y
}

/// 2x2 sum pooling, the adjoint of [`upsample2`]. `h`, `w` are the input dims.
pub fn sum_pool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut y = vec![0.0; c * h2 * w2];
    for ci in 0..c {
        for yy in 0..h {
            for xx in 0..w {
                y[(ci * h2 + yy / 2) * w2 + xx / 2] += x[(ci * h + yy) * w + xx];
            }
        }
    }
    y
}

/// Per-pixel source indices shared by all channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatherIndex {
    pub src_h: usize,
    pub src_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub idx: Vec<u32>,
}

pub fn gather(x: &[f64], c: usize, gi: &GatherIndex) -> Vec<f64> {
    let src_plane = gi.src_h * gi.src_w;
    let out_plane = gi.out_h * gi.out_w;
    let mut y = vec![0.0; c * out_plane];
    for ci in 0..c {
        let src = &x[ci * src_plane..(ci + 1) * src_plane];
        let dst = &mut y[ci * out_plane..(ci + 1) * out_plane];
        for (d, &i) in dst.iter_mut().zip(&gi.idx) {
            *d = src[i as usize];
        }
    }
    y
}

pub fn scatter_add(g: &[f64], c: usize, gi: &GatherIndex) -> Vec<f64> {
    let src_plane = gi.src_h * gi.src_w;
    let out_plane = gi.out_h * gi.out_w;
    let mut x = vec![0.0; c * src_plane];
    for ci in 0..c {
        let gsrc = &g[ci * out_plane..(ci + 1) * out_plane];
        let dst = &mut x[ci * src_plane..(ci + 1) * src_plane];
        for (&v, &i) in gsrc.iter().zip(&gi.idx) {
            dst[i as usize] += v;
        }
    }
    x
}
