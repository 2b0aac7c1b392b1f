//! 2-D convolution kernels on raw row-major buffers (im2col + GEMM).
//!
//! A transposed convolution is run as the adjoint of the convolution that maps
//! its output shape back onto its input shape, so both directions share one
//! geometry type. Weights use the `[out, in, k, k]` layout for convolution
//! and `[in, out, k, k]` for transposed convolution, so the same buffer
//! describes a conv and its adjoint.

use crate::error::{Result, SvaeError};

/// Geometry of a forward convolution `[B, in_c, in_h, in_w] -> [B, out_c, out_h, out_w]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(SvaeError::contract("stride must be >= 1"));
    }
    let padded = input + 2 * padding;
    if kernel == 0 || kernel > padded {
        return Err(SvaeError::contract(format!(
            "kernel {kernel} does not fit padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

pub fn conv_transpose_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(SvaeError::contract("stride must be >= 1"));
    }
    let full = (input.saturating_sub(1)) * stride + kernel;
    if input == 0 || kernel == 0 || full <= 2 * padding {
        return Err(SvaeError::contract(format!(
            "transposed conv of size {input} with kernel {kernel}, padding {padding} is empty"
        )));
    }
    Ok(full - 2 * padding)
}

impl ConvGeom {
    /// Geometry for a convolution over `[batch, in_c, in_h, in_w]`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        batch: usize,
        in_c: usize,
        in_h: usize,
        in_w: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Ok(ConvGeom {
            batch,
            in_c,
            in_h,
            in_w,
            out_c,
            out_h: conv_output_size(in_h, kernel, stride, padding)?,
            out_w: conv_output_size(in_w, kernel, stride, padding)?,
            kernel,
            stride,
            padding,
        })
    }

    /// Geometry of the convolution whose adjoint is the transposed convolution
    /// `[batch, t_in_c, t_in_h, t_in_w] -> [batch, t_out_c, ..]`. The returned
    /// geometry has `in_*` = transposed output and `out_*` = transposed input.
    #[allow(clippy::too_many_arguments)]
    pub fn transpose(
        batch: usize,
        t_in_c: usize,
        t_in_h: usize,
        t_in_w: usize,
        t_out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let in_h = conv_transpose_output_size(t_in_h, kernel, stride, padding)?;
        let in_w = conv_transpose_output_size(t_in_w, kernel, stride, padding)?;
        let g = ConvGeom {
            batch,
            in_c: t_out_c,
            in_h,
            in_w,
            out_c: t_in_c,
            out_h: t_in_h,
            out_w: t_in_w,
            kernel,
            stride,
            padding,
        };
        debug_assert_eq!(conv_output_size(in_h, kernel, stride, padding).ok(), Some(t_in_h));
        Ok(g)
    }

    fn patch(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }
    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }
    fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }
    fn out_len(&self) -> usize {
        self.out_c * self.out_pixels()
    }
    pub fn weight_len(&self) -> usize {
        self.out_c * self.patch()
    }
    pub fn input_len(&self) -> usize {
        self.batch * self.in_len()
    }
    pub fn output_len(&self) -> usize {
        self.batch * self.out_len()
    }
}

fn im2col(g: &ConvGeom, img: &[f64], cols: &mut [f64], ld: usize) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let pix = g.out_pixels();
    for c in 0..g.in_c {
        let plane = &img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ld..row * ld + pix];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ki) as isize - p;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kj) as isize - p;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds patch columns back onto an image (adjoint of [`im2col`]).
fn col2im(g: &ConvGeom, cols: &[f64], ld: usize, img: &mut [f64]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let pix = g.out_pixels();
    for c in 0..g.in_c {
        let plane = &mut img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ld..row * ld + pix];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ki) as isize - p;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * s + kj) as isize - p;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `[B, C, P]` -> `[C, B*P]`.
fn channel_major(x: &[f64], batch: usize, channels: usize, pix: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let src = &x[(b * channels + c) * pix..(b * channels + c + 1) * pix];
            out[(c * batch + b) * pix..(c * batch + b + 1) * pix].copy_from_slice(src);
        }
    }
    out
}

/// `[C, B*P]` -> `[B, C, P]`.
fn batch_major(x: &[f64], batch: usize, channels: usize, pix: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let src = &x[(c * batch + b) * pix..(c * batch + b + 1) * pix];
            out[(b * channels + c) * pix..(b * channels + c + 1) * pix].copy_from_slice(src);
        }
    }
    out
}

/// `c = op(a) * op(b) + beta * c` on row-major buffers; `op(a)` is `m×k`,
/// `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the stated row-major
    // (or transposed) layouts.
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

fn check_len(op: &'static str, what: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(SvaeError::dim(op, what, expected, actual));
    }
    Ok(())
}

/// Patch-matrix entries per GEMM; images are processed in blocks that fit.
const COLS_BLOCK: usize = 1 << 16;

fn blocks(g: &ConvGeom) -> impl Iterator<Item = std::ops::Range<usize>> {
    let per = (g.patch() * g.out_pixels()).max(1);
    let nb = (COLS_BLOCK / per).clamp(1, g.batch.max(1));
    let batch = g.batch;
    (0..batch).step_by(nb).map(move |b0| b0..(b0 + nb).min(batch))
}

pub fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    check_len("conv2d", "input numel", g.input_len(), x.len())?;
    check_len("conv2d", "weight numel", g.weight_len(), w.len())?;
    check_len("conv2d", "bias numel", g.out_c, bias.len())?;
    let (patch, pix) = (g.patch(), g.out_pixels());
    let mut out = vec![0.0; g.output_len()];
    for r in blocks(g) {
        let ld = r.len() * pix;
        let mut cols = vec![0.0; patch * ld];
        for (i, b) in r.clone().enumerate() {
            im2col(g, &x[b * g.in_len()..(b + 1) * g.in_len()], &mut cols[i * pix..], ld);
        }
        let mut y = vec![0.0; g.out_c * ld];
        for (oc, row) in y.chunks_mut(ld).enumerate() {
            row.fill(bias[oc]);
        }
        gemm(g.out_c, patch, ld, w, false, &cols, false, 1.0, &mut y);
        out[r.start * g.out_len()..r.end * g.out_len()].copy_from_slice(&batch_major(&y, r.len(), g.out_c, pix));
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`]: `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward(g: &ConvGeom, x: &[f64], w: &[f64], dy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (patch, pix) = (g.patch(), g.out_pixels());
    let mut dx = vec![0.0; g.input_len()];
    let mut dw = vec![0.0; g.weight_len()];
    let mut db = vec![0.0; g.out_c];
    for r in blocks(g) {
        let ld = r.len() * pix;
        let dyt = channel_major(&dy[r.start * g.out_len()..r.end * g.out_len()], r.len(), g.out_c, pix);
        for (acc, row) in db.iter_mut().zip(dyt.chunks(ld)) {
            *acc += row.iter().sum::<f64>();
        }
        let mut cols = vec![0.0; patch * ld];
        for (i, b) in r.clone().enumerate() {
            im2col(g, &x[b * g.in_len()..(b + 1) * g.in_len()], &mut cols[i * pix..], ld);
        }
        // dW += dy [out_c, nb*pix] * cols^T [nb*pix, patch]
        gemm(g.out_c, ld, patch, &dyt, false, &cols, true, 1.0, &mut dw);
        // dcols = W^T [patch, out_c] * dy [out_c, nb*pix]
        gemm(patch, g.out_c, ld, w, true, &dyt, false, 0.0, &mut cols);
        for (i, b) in r.clone().enumerate() {
            col2im(g, &cols[i * pix..], ld, &mut dx[b * g.in_len()..(b + 1) * g.in_len()]);
        }
    }
    (dx, dw, db)
}

/// Transposed convolution: maps `[B, out_c, out_h, out_w]` of `g` to
/// `[B, in_c, in_h, in_w]`. `bias` has `in_c` entries.
pub fn conv_transpose2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    check_len("conv2d_transpose", "input numel", g.output_len(), x.len())?;
    check_len("conv2d_transpose", "weight numel", g.weight_len(), w.len())?;
    check_len("conv2d_transpose", "bias numel", g.in_c, bias.len())?;
    let (patch, pix) = (g.patch(), g.out_pixels());
    let plane = g.in_h * g.in_w;
    let mut out = vec![0.0; g.input_len()];
    for r in blocks(g) {
        let ld = r.len() * pix;
        let xt = channel_major(&x[r.start * g.out_len()..r.end * g.out_len()], r.len(), g.out_c, pix);
        let mut cols = vec![0.0; patch * ld];
        gemm(patch, g.out_c, ld, w, true, &xt, false, 0.0, &mut cols);
        for (i, b) in r.clone().enumerate() {
            let ob = &mut out[b * g.in_len()..(b + 1) * g.in_len()];
            for (c, p) in ob.chunks_mut(plane).enumerate() {
                p.fill(bias[c]);
            }
            col2im(g, &cols[i * pix..], ld, ob);
        }
    }
    Ok(out)
}

/// Gradients of [`conv_transpose2d_forward`]: `(d_input, d_weight, d_bias)`.
pub fn conv_transpose2d_backward(g: &ConvGeom, x: &[f64], w: &[f64], dy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (patch, pix) = (g.patch(), g.out_pixels());
    let plane = g.in_h * g.in_w;
    let mut dx = vec![0.0; g.output_len()];
    let mut dw = vec![0.0; g.weight_len()];
    let mut db = vec![0.0; g.in_c];
    for r in blocks(g) {
        let ld = r.len() * pix;
        let mut cols = vec![0.0; patch * ld];
        for (i, b) in r.clone().enumerate() {
            let dyb = &dy[b * g.in_len()..(b + 1) * g.in_len()];
            for (c, p) in dyb.chunks(plane).enumerate() {
                db[c] += p.iter().sum::<f64>();
            }
            im2col(g, dyb, &mut cols[i * pix..], ld);
        }
        // dx = W [out_c, patch] * cols [patch, nb*pix]
        let mut dxt = vec![0.0; g.out_c * ld];
        gemm(g.out_c, patch, ld, w, false, &cols, false, 0.0, &mut dxt);
        dx[r.start * g.out_len()..r.end * g.out_len()].copy_from_slice(&batch_major(&dxt, r.len(), g.out_c, pix));
        // dW += x [out_c, nb*pix] * cols^T [nb*pix, patch]
        let xt = channel_major(&x[r.start * g.out_len()..r.end * g.out_len()], r.len(), g.out_c, pix);
        gemm(g.out_c, ld, patch, &xt, false, &cols, true, 1.0, &mut dw);
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, standard_normals};

    /// Direct nested-loop convolution.
    fn conv_oracle(g: &ConvGeom, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.output_len()];
        for b in 0..g.batch {
            for oc in 0..g.out_c {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = bias[oc];
                        for ic in 0..g.in_c {
                            for ki in 0..g.kernel {
                                for kj in 0..g.kernel {
                                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                        continue;
                                    }
                                    let xv = x[((b * g.in_c + ic) * g.in_h + iy as usize) * g.in_w + ix as usize];
                                    let wv = w[((oc * g.in_c + ic) * g.kernel + ki) * g.kernel + kj];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((b * g.out_c + oc) * g.out_h + oy) * g.out_w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    /// Direct scatter form of the transposed convolution.
    fn conv_transpose_oracle(g: &ConvGeom, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.input_len()];
        for b in 0..g.batch {
            for c in 0..g.in_c {
                for v in &mut out[(b * g.in_c + c) * g.in_h * g.in_w..(b * g.in_c + c + 1) * g.in_h * g.in_w] {
                    *v = bias[c];
                }
            }
            for ic in 0..g.out_c {
                for iy in 0..g.out_h {
                    for ix in 0..g.out_w {
                        let xv = x[((b * g.out_c + ic) * g.out_h + iy) * g.out_w + ix];
                        for oc in 0..g.in_c {
                            for ki in 0..g.kernel {
                                for kj in 0..g.kernel {
                                    let oy = (iy * g.stride + ki) as isize - g.padding as isize;
                                    let ox = (ix * g.stride + kj) as isize - g.padding as isize;
                                    if oy < 0 || ox < 0 || oy >= g.in_h as isize || ox >= g.in_w as isize {
                                        continue;
                                    }
                                    let wv = w[((ic * g.in_c + oc) * g.kernel + ki) * g.kernel + kj];
                                    out[((b * g.in_c + oc) * g.in_h + oy as usize) * g.in_w + ox as usize] += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_returns_input() {
        let g = ConvGeom::conv(1, 1, 3, 3, 1, 1, 1, 0).unwrap();
        let x: Vec<f64> = (1..=9).map(f64::from).collect();
        assert_eq!(conv2d_forward(&g, &x, &[1.0], &[0.0]).unwrap(), x);
    }

    #[test]
    fn sum_kernel() {
        let g = ConvGeom::conv(1, 1, 2, 2, 1, 2, 1, 0).unwrap();
        let y = conv2d_forward(&g, &[1.0, 2.0, 3.0, 4.0], &[1.0; 4], &[0.0]).unwrap();
        assert_eq!(y, vec![10.0]);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = seeded(11);
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
            let g = ConvGeom::conv(1, 2, 5, 5, 3, 3, stride, pad).unwrap();
            let x = standard_normals(&mut rng, g.input_len());
            let w = standard_normals(&mut rng, g.weight_len());
            let b = standard_normals(&mut rng, 3);
            let fast = conv2d_forward(&g, &x, &w, &b).unwrap();
            let slow = conv_oracle(&g, &x, &w, &b);
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12, "stride {stride} pad {pad}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn output_size_formula() {
        assert_eq!(conv_output_size(28, 3, 2, 1).unwrap(), 14);
        assert_eq!(conv_output_size(7, 3, 2, 1).unwrap(), 4);
        assert_eq!(conv_transpose_output_size(3, 3, 2, 0).unwrap(), 7);
        assert_eq!(conv_transpose_output_size(7, 4, 2, 1).unwrap(), 14);
        assert!(conv_output_size(2, 5, 1, 0).is_err());
        assert!(conv_output_size(5, 3, 0, 0).is_err());
    }

    #[test]
    fn single_pixel_transpose_broadcasts_kernel() {
        let g = ConvGeom::transpose(1, 1, 1, 1, 1, 2, 1, 0).unwrap();
        assert_eq!((g.in_h, g.in_w), (2, 2));
        let k = [1.0, -2.0, 3.0, 0.5];
        let y = conv_transpose2d_forward(&g, &[2.0], &k, &[0.0]).unwrap();
        assert_eq!(y, vec![2.0, -4.0, 6.0, 1.0]);
    }

    #[test]
    fn stride_two_transpose_block_copies() {
        let g = ConvGeom::transpose(1, 1, 2, 2, 1, 2, 2, 0).unwrap();
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = conv_transpose2d_forward(&g, &x, &[1.0; 4], &[0.0]).unwrap();
        let oracle = conv_transpose_oracle(&g, &x, &[1.0; 4], &[0.0]);
        assert_eq!(y, oracle);
        #[rustfmt::skip]
        let expected = vec![
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(y, expected);
    }

    #[test]
    fn transpose_matches_scatter_oracle() {
        let mut rng = seeded(5);
        for &(k, s, p) in &[(3, 2, 0), (4, 2, 1), (3, 1, 1), (3, 2, 1)] {
            let g = ConvGeom::transpose(2, 3, 3, 3, 2, k, s, p).unwrap();
            let x = standard_normals(&mut rng, g.output_len());
            let w = standard_normals(&mut rng, g.weight_len());
            let b = standard_normals(&mut rng, g.in_c);
            let fast = conv_transpose2d_forward(&g, &x, &w, &b).unwrap();
            let slow = conv_transpose_oracle(&g, &x, &w, &b);
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = seeded(99);
        for &(h, k, s, p) in &[(5, 3, 1, 0), (28, 3, 2, 1), (7, 4, 2, 1), (9, 3, 2, 0), (4, 3, 2, 1)] {
            let g = ConvGeom::conv(2, 3, h, h, 4, k, s, p).unwrap();
            let u = standard_normals(&mut rng, g.input_len());
            let v = standard_normals(&mut rng, g.output_len());
            let w = standard_normals(&mut rng, g.weight_len());
            let conv_u = conv2d_forward(&g, &u, &w, &vec![0.0; g.out_c]).unwrap();
            let convt_v = conv_transpose2d_forward(&g, &v, &w, &vec![0.0; g.in_c]).unwrap();
            let lhs: f64 = conv_u.iter().zip(&v).map(|(a, b)| a * b).sum();
            let rhs: f64 = u.iter().zip(&convt_v).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn shape_errors_name_the_axis() {
        let g = ConvGeom::conv(1, 1, 3, 3, 1, 1, 1, 0).unwrap();
        let err = conv2d_forward(&g, &[0.0; 8], &[1.0], &[0.0]).unwrap_err();
        assert!(err.to_string().contains("input numel"), "{err}");
    }
}
