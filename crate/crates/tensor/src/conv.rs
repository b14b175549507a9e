//! Strided 2-D convolution kernels (im2col + GEMM) and a direct-summation reference.

use matrixmultiply::dgemm;

/// Output extent along one axis: `floor((n + 2p - k) / s) + 1`, or `None` if the kernel does not fit.
pub fn conv2d_output_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || k == 0 || k > n + 2 * pad {
        return None;
    }
    Some((n + 2 * pad - k) / stride + 1)
}

/// Geometry of one convolution call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn image_len(&self) -> usize {
        self.in_ch * self.h * self.w
    }

    /// Fills `cols` (patch_len x positions) from one image.
    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.in_ch {
            let plane = &image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let y = (oy * self.stride.0 + i) as isize - self.pad.0 as isize;
                        let out_row = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if y < 0 || y >= self.h as isize {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &plane[y as usize * self.w..(y as usize + 1) * self.w];
                        for (ox, slot) in out_row.iter_mut().enumerate() {
                            let x = (ox * self.stride.1 + j) as isize - self.pad.1 as isize;
                            *slot = if x < 0 || x >= self.w as isize {
                                0.0
                            } else {
                                src[x as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back into one image gradient.
    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.in_ch {
            let plane = &mut image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let y = (oy * self.stride.0 + i) as isize - self.pad.0 as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[y as usize * self.w..(y as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let x = (ox * self.stride.1 + j) as isize - self.pad.1 as isize;
                            if x >= 0 && x < self.w as isize {
                                dst[x as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `C (m x n) = alpha * A (m x k) * B (k x n) + beta * C`, with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!(m == 0 || n == 0 || (m - 1) * rsc + n - 1 < c.len());
    // SAFETY: the debug assertions above state the bounds every caller guarantees;
    // all strides index inside the borrowed slices and `c` does not alias `a` or `b`.
    unsafe {
        dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

pub(crate) fn forward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (pl, p) = (g.patch_len(), g.positions());
    let mut out = vec![0.0; g.batch * g.out_ch * p];
    let mut cols = vec![0.0; pl * p];
    for n in 0..g.batch {
        g.im2col(
            &input[n * g.image_len()..(n + 1) * g.image_len()],
            &mut cols,
        );
        let dst = &mut out[n * g.out_ch * p..(n + 1) * g.out_ch * p];
        gemm(
            g.out_ch,
            pl,
            p,
            1.0,
            kernel,
            (pl, 1),
            &cols,
            (p, 1),
            0.0,
            dst,
            p,
        );
        if let Some(b) = bias {
            for (o, plane) in dst.chunks_mut(p).enumerate() {
                plane.iter_mut().for_each(|v| *v += b[o]);
            }
        }
    }
    out
}

/// Accumulates gradients into the provided buffers (`None` = not needed).
pub(crate) fn backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    mut grad_kernel: Option<&mut [f64]>,
    mut grad_bias: Option<&mut [f64]>,
) {
    let (pl, p) = (g.patch_len(), g.positions());
    let mut cols = vec![0.0; pl * p];
    for n in 0..g.batch {
        let dout = &grad_out[n * g.out_ch * p..(n + 1) * g.out_ch * p];
        if let Some(db) = grad_bias.as_deref_mut() {
            for (o, plane) in dout.chunks(p).enumerate() {
                db[o] += plane.iter().sum::<f64>();
            }
        }
        if let Some(dk) = grad_kernel.as_deref_mut() {
            g.im2col(
                &input[n * g.image_len()..(n + 1) * g.image_len()],
                &mut cols,
            );
            // dK += dOut * cols^T
            gemm(
                g.out_ch,
                p,
                pl,
                1.0,
                dout,
                (p, 1),
                &cols,
                (1, p),
                1.0,
                dk,
                pl,
            );
        }
        if let Some(dx) = grad_input.as_deref_mut() {
            // dcols = K^T * dOut
            gemm(
                pl,
                g.out_ch,
                p,
                1.0,
                kernel,
                (1, pl),
                dout,
                (p, 1),
                0.0,
                &mut cols,
                p,
            );
            g.col2im(&cols, &mut dx[n * g.image_len()..(n + 1) * g.image_len()]);
        }
    }
}

/// Direct seven-loop convolution. Slow; the ground truth for the GEMM path.
///
/// Shapes: input `N x C x H x W`, kernel `O x C x kH x kW`. Returns `N x O x H' x W'` data
/// and the output shape, or `None` if the shapes are inconsistent.
pub fn conv2d_reference(
    input: &[f64],
    input_shape: [usize; 4],
    kernel: &[f64],
    kernel_shape: [usize; 4],
    bias: Option<&[f64]>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Option<(Vec<f64>, [usize; 4])> {
    let [n, c, h, w] = input_shape;
    let [o, kc, kh, kw] = kernel_shape;
    if kc != c {
        return None;
    }
    let oh = conv2d_output_extent(h, kh, stride.0, pad.0)?;
    let ow = conv2d_output_extent(w, kw, stride.1, pad.1)?;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bs| bs[oc]);
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let y = (oy * stride.0 + i) as isize - pad.0 as isize;
                                let x = (ox * stride.1 + j) as isize - pad.1 as isize;
                                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                                    continue;
                                }
                                acc += input[((b * c + ic) * h + y as usize) * w + x as usize]
                                    * kernel[((oc * c + ic) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Some((out, [n, o, oh, ow]))
}
