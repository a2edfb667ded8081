//! 2-D convolution kernels. The im2col + GEMM path is used for training;
//! [`conv2d_direct`] is the plain seven-loop reference.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub height: usize,
    pub width: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(x: &Tensor4, kernel: &Tensor4, bias_len: usize, stride: usize, pad: usize) -> Result<Self> {
        let [batch, c_in, height, width] = x.dims();
        let [c_out, k_in, kh, kw] = kernel.dims();
        if k_in != c_in {
            return Err(shape_err!("kernel expects {k_in} input channels, input has {c_in}"));
        }
        if bias_len != c_out {
            return Err(shape_err!("bias has {bias_len} entries for {c_out} output channels"));
        }
        if stride == 0 {
            return Err(shape_err!("stride must be at least 1"));
        }
        if height + 2 * pad < kh || width + 2 * pad < kw {
            return Err(shape_err!("kernel {kh}x{kw} larger than padded input {height}x{width} (pad {pad})"));
        }
        let h_out = (height + 2 * pad - kh) / stride + 1;
        let w_out = (width + 2 * pad - kw) / stride + 1;
        Ok(Self { batch, c_in, height, width, c_out, kh, kw, stride, pad, h_out, w_out })
    }

    pub fn out_dims(&self) -> [usize; 4] {
        [self.batch, self.c_out, self.h_out, self.w_out]
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Input coordinate for output row `oh` and kernel row `ki`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let p = (o * self.stride + k) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < limit).then_some(p as usize)
    }
}

/// Unrolls one batch entry into a `(c_in*kh*kw) x (h_out*w_out)` row-major matrix.
fn im2col(g: &ConvGeometry, x: &[f64], cols: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..g.h_out {
                    let line = &mut dst[oh * g.w_out..(oh + 1) * g.w_out];
                    match g.src(oh, ki, g.height) {
                        None => line.fill(0.0),
                        Some(ih) => {
                            let base = (c * g.height + ih) * g.width;
                            for (ow, v) in line.iter_mut().enumerate() {
                                *v = g.src(ow, kj, g.width).map_or(0.0, |iw| x[base + iw]);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeometry, cols: &[f64], dx: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..g.h_out {
                    let Some(ih) = g.src(oh, ki, g.height) else { continue };
                    let base = (c * g.height + ih) * g.width;
                    for ow in 0..g.w_out {
                        if let Some(iw) = g.src(ow, kj, g.width) {
                            dx[base + iw] += src[oh * g.w_out + ow];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m x n] (+)= a[m x k] * b[k x n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward(x: &Tensor4, kernel: &Tensor4, bias: &[f64], stride: usize, pad: usize) -> Result<Tensor4> {
    let g = ConvGeometry::new(x, kernel, bias.len(), stride, pad)?;
    let (kl, p) = (g.patch_len(), g.positions());
    let mut out = Tensor4::zeros(g.out_dims());
    let mut cols = vec![0.0; kl * p];
    let in_item = x.item_len();
    let out_item = g.c_out * p;
    for b in 0..g.batch {
        im2col(&g, &x.data()[b * in_item..(b + 1) * in_item], &mut cols);
        let dst = &mut out.data_mut()[b * out_item..(b + 1) * out_item];
        for (o, chunk) in dst.chunks_mut(p).enumerate() {
            chunk.fill(bias[o]);
        }
        gemm(g.c_out, kl, p, kernel.data(), (kl, 1), &cols, (p, 1), 1.0, dst);
    }
    Ok(out)
}

/// Returns `(d_input, d_kernel, d_bias)` for upstream gradient `dout`.
pub fn conv2d_backward(
    x: &Tensor4,
    kernel: &Tensor4,
    dout: &[f64],
    stride: usize,
    pad: usize,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let g = ConvGeometry::new(x, kernel, kernel.batch(), stride, pad)?;
    let (kl, p) = (g.patch_len(), g.positions());
    let in_item = x.item_len();
    let out_item = g.c_out * p;
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kernel.len()];
    let mut db = vec![0.0; g.c_out];
    let mut cols = vec![0.0; kl * p];
    let mut dcols = vec![0.0; kl * p];
    for b in 0..g.batch {
        let go = &dout[b * out_item..(b + 1) * out_item];
        for (o, chunk) in go.chunks(p).enumerate() {
            db[o] += chunk.iter().sum::<f64>();
        }
        im2col(&g, &x.data()[b * in_item..(b + 1) * in_item], &mut cols);
        // dK += dOut * cols^T
        gemm(g.c_out, p, kl, go, (p, 1), &cols, (1, p), 1.0, &mut dk);
        // dcols = K^T * dOut
        gemm(kl, g.c_out, p, kernel.data(), (1, kl), go, (p, 1), 0.0, &mut dcols);
        col2im(&g, &dcols, &mut dx[b * in_item..(b + 1) * in_item]);
    }
    Ok((dx, dk, db))
}

/// Reference convolution by direct summation.
pub fn conv2d_direct(x: &Tensor4, kernel: &Tensor4, bias: &[f64], stride: usize, pad: usize) -> Result<Tensor4> {
    let g = ConvGeometry::new(x, kernel, bias.len(), stride, pad)?;
    let mut out = Tensor4::zeros(g.out_dims());
    for b in 0..g.batch {
        for o in 0..g.c_out {
            for oh in 0..g.h_out {
                for ow in 0..g.w_out {
                    let mut acc = bias[o];
                    for c in 0..g.c_in {
                        for ki in 0..g.kh {
                            let Some(ih) = g.src(oh, ki, g.height) else { continue };
                            for kj in 0..g.kw {
                                let Some(iw) = g.src(ow, kj, g.width) else { continue };
                                acc += kernel.at(o, c, ki, kj) * x.at(b, c, ih, iw);
                            }
                        }
                    }
                    out.set(b, o, oh, ow, acc);
                }
            }
        }
    }
    Ok(out)
}
