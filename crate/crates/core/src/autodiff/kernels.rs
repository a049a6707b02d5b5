//! Dense numeric kernels behind the tape operators.

use crate::par;

/// `c = beta * c + op(a) * op(b)` for row-major matrices, where `op(a)` is
/// `m×k` and `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
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

/// Geometry of a 3-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    /// Input extent (T, H, W).
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeometry {
    /// Output extent, or `None` when the kernel does not fit.
    pub fn output(&self) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for d in 0..3 {
            let span = self.input[d] + 2 * self.pad[d];
            if self.stride[d] == 0 || span < self.kernel[d] {
                return None;
            }
            out[d] = (span - self.kernel[d]) / self.stride[d] + 1;
        }
        Some(out)
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kernel.iter().product::<usize>()
    }
}

/// Unfold `x` (C_in×T×H×W) into a `patch_len × positions` matrix.
fn im2col(g: &ConvGeometry, out: [usize; 3], x: &[f32]) -> Vec<f32> {
    let [ti, hi, wi] = g.input;
    let [to, ho, wo] = out;
    let [kt, kh, kw] = g.kernel;
    let positions = to * ho * wo;
    let mut cols = vec![0.0f32; g.patch_len() * positions];
    par::for_each_chunk_mut(&mut cols, kt * kh * kw * positions, |ci, block| {
        let xc = &x[ci * ti * hi * wi..(ci + 1) * ti * hi * wi];
        for a in 0..kt {
            for b in 0..kh {
                for c in 0..kw {
                    let row = &mut block[((a * kh + b) * kw + c) * positions..][..positions];
                    for ot in 0..to {
                        let it = (ot * g.stride[0] + a) as isize - g.pad[0] as isize;
                        if it < 0 || it >= ti as isize {
                            continue;
                        }
                        for oh in 0..ho {
                            let ih = (oh * g.stride[1] + b) as isize - g.pad[1] as isize;
                            if ih < 0 || ih >= hi as isize {
                                continue;
                            }
                            let src = &xc[(it as usize * hi + ih as usize) * wi..][..wi];
                            let dst = &mut row[(ot * ho + oh) * wo..][..wo];
                            for (ow, d) in dst.iter_mut().enumerate() {
                                let iw = (ow * g.stride[2] + c) as isize - g.pad[2] as isize;
                                if iw >= 0 && iw < wi as isize {
                                    *d = src[iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    cols
}

/// Scatter-add a column matrix back onto an input-shaped buffer.
fn col2im(g: &ConvGeometry, out: [usize; 3], cols: &[f32]) -> Vec<f32> {
    let [ti, hi, wi] = g.input;
    let [to, ho, wo] = out;
    let [kt, kh, kw] = g.kernel;
    let positions = to * ho * wo;
    let mut dx = vec![0.0f32; g.c_in * ti * hi * wi];
    par::for_each_chunk_mut(&mut dx, ti * hi * wi, |ci, xc| {
        let block = &cols[ci * kt * kh * kw * positions..][..kt * kh * kw * positions];
        for a in 0..kt {
            for b in 0..kh {
                for c in 0..kw {
                    let row = &block[((a * kh + b) * kw + c) * positions..][..positions];
                    for ot in 0..to {
                        let it = (ot * g.stride[0] + a) as isize - g.pad[0] as isize;
                        if it < 0 || it >= ti as isize {
                            continue;
                        }
                        for oh in 0..ho {
                            let ih = (oh * g.stride[1] + b) as isize - g.pad[1] as isize;
                            if ih < 0 || ih >= hi as isize {
                                continue;
                            }
                            let dst = &mut xc[(it as usize * hi + ih as usize) * wi..][..wi];
                            let src = &row[(ot * ho + oh) * wo..][..wo];
                            for (ow, s) in src.iter().enumerate() {
                                let iw = (ow * g.stride[2] + c) as isize - g.pad[2] as isize;
                                if iw >= 0 && iw < wi as isize {
                                    dst[iw as usize] += *s;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Cross-correlation with zero padding: returns C_out×T'×H'×W'.
pub fn conv3d_forward(g: &ConvGeometry, x: &[f32], w: &[f32], bias: &[f32]) -> Vec<f32> {
    let out = g.output().expect("conv geometry checked by caller");
    let positions: usize = out.iter().product();
    let cols = im2col(g, out, x);
    let mut y = vec![0.0f32; g.c_out * positions];
    for (co, row) in y.chunks_mut(positions).enumerate() {
        row.fill(bias[co]);
    }
    gemm(g.c_out, g.patch_len(), positions, w, false, &cols, false, 1.0, &mut y);
    y
}

/// Gradient w.r.t. the input.
pub fn conv3d_backward_input(g: &ConvGeometry, w: &[f32], dy: &[f32]) -> Vec<f32> {
    let out = g.output().expect("conv geometry checked by caller");
    let positions: usize = out.iter().product();
    let mut dcols = vec![0.0f32; g.patch_len() * positions];
    gemm(g.patch_len(), g.c_out, positions, w, true, dy, false, 0.0, &mut dcols);
    col2im(g, out, &dcols)
}

/// Gradients w.r.t. the weights and bias.
pub fn conv3d_backward_params(g: &ConvGeometry, x: &[f32], dy: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let out = g.output().expect("conv geometry checked by caller");
    let positions: usize = out.iter().product();
    let cols = im2col(g, out, x);
    let mut dw = vec![0.0f32; g.c_out * g.patch_len()];
    gemm(g.c_out, positions, g.patch_len(), dy, false, &cols, true, 0.0, &mut dw);
    let db = dy
        .chunks(positions)
        .map(|r| r.iter().sum::<f32>())
        .collect();
    (dw, db)
}
