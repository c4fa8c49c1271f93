//! Stateless dense kernels with explicit backward passes.

use crate::bitcore::ConvGeometry;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`, all row-major unless
/// the strides say otherwise.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover every index reachable from the given strides
    // (checked by callers constructing them from the same m, k, n).
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

/// Geometry of one dense convolution call.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
}

impl ConvDims {
    pub fn new(x: &Tensor, wshape: &[usize], geom: &ConvGeometry) -> Result<Self> {
        let (_, c, h, w) = x.dims4()?;
        if wshape.len() != 4 || wshape[1] != c {
            return Err(Error::shape("conv input channels", &[wshape.get(1).copied().unwrap_or(0)], &[c]));
        }
        let out_hw = geom.output_hw((h, w), (wshape[2], wshape[3]))?;
        Ok(ConvDims {
            cin: c,
            cout: wshape[0],
            kernel: (wshape[2], wshape[3]),
            in_hw: (h, w),
            out_hw,
        })
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kernel.0 * self.kernel.1
    }

    fn col_cols(&self) -> usize {
        self.out_hw.0 * self.out_hw.1
    }
}

fn im2col(img: &[f64], d: &ConvDims, g: &ConvGeometry, pad: f64, col: &mut [f64]) {
    let (h, w) = d.in_hw;
    let (oh, ow) = d.out_hw;
    let p = oh * ow;
    for c in 0..d.cin {
        for ky in 0..d.kernel.0 {
            for kx in 0..d.kernel.1 {
                let row = (c * d.kernel.0 + ky) * d.kernel.1 + kx;
                let dst = &mut col[row * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * g.stride.0 + ky * g.dilation.0) as isize - g.padding.0 as isize;
                    let line = &mut dst[oy * ow..][..ow];
                    if iy < 0 || iy as usize >= h {
                        line.fill(pad);
                        continue;
                    }
                    let src = &img[(c * h + iy as usize) * w..][..w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride.1 + kx * g.dilation.1) as isize - g.padding.1 as isize;
                        *v = if ix < 0 || ix as usize >= w { pad } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], d: &ConvDims, g: &ConvGeometry, img: &mut [f64]) {
    let (h, w) = d.in_hw;
    let (oh, ow) = d.out_hw;
    let p = oh * ow;
    for c in 0..d.cin {
        for ky in 0..d.kernel.0 {
            for kx in 0..d.kernel.1 {
                let row = (c * d.kernel.0 + ky) * d.kernel.1 + kx;
                let src = &col[row * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * g.stride.0 + ky * g.dilation.0) as isize - g.padding.0 as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let dst = &mut img[(c * h + iy as usize) * w..][..w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride.1 + kx * g.dilation.1) as isize - g.padding.1 as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Dense convolution; positions outside the input read as `pad`.
pub fn conv2d(x: &Tensor, w: &[f64], wshape: &[usize], g: &ConvGeometry, pad: f64) -> Result<Tensor> {
    let d = ConvDims::new(x, wshape, g)?;
    let n = x.shape[0];
    let (rows, cols) = (d.col_rows(), d.col_cols());
    let in_len = d.cin * d.in_hw.0 * d.in_hw.1;
    let mut col = vec![0.0; rows * cols];
    let mut out = Tensor::zeros(&[n, d.cout, d.out_hw.0, d.out_hw.1]);
    for b in 0..n {
        im2col(&x.data[b * in_len..][..in_len], &d, g, pad, &mut col);
        let dst = &mut out.data[b * d.cout * cols..][..d.cout * cols];
        gemm(d.cout, rows, cols, w, (rows as isize, 1), &col, (cols as isize, 1), 0.0, dst);
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to its input (if asked) and weights.
pub fn conv2d_backward(
    x: &Tensor,
    w: &[f64],
    wshape: &[usize],
    g: &ConvGeometry,
    pad: f64,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> Result<(Option<Tensor>, Vec<f64>)> {
    let d = ConvDims::new(x, wshape, g)?;
    let n = x.shape[0];
    let (rows, cols) = (d.col_rows(), d.col_cols());
    let in_len = d.cin * d.in_hw.0 * d.in_hw.1;
    let mut col = vec![0.0; rows * cols];
    let mut dcol = vec![0.0; rows * cols];
    let mut dw = vec![0.0; d.cout * rows];
    let mut dx = need_input_grad.then(|| Tensor::zeros(&x.shape));
    for b in 0..n {
        let go = &grad_out.data[b * d.cout * cols..][..d.cout * cols];
        im2col(&x.data[b * in_len..][..in_len], &d, g, pad, &mut col);
        // dw[cout x rows] += go[cout x cols] * col^T
        gemm(d.cout, cols, rows, go, (cols as isize, 1), &col, (1, cols as isize), 1.0, &mut dw);
        if let Some(dx) = dx.as_mut() {
            // dcol[rows x cols] = w^T[rows x cout] * go
            gemm(rows, d.cout, cols, w, (1, rows as isize), go, (cols as isize, 1), 0.0, &mut dcol);
            col2im(&dcol, &d, g, &mut dx.data[b * in_len..][..in_len]);
        }
    }
    Ok((dx, dw))
}

/// `y[n x out] = x[n x in] * w^T + bias`.
pub fn linear(x: &Tensor, w: &[f64], out_features: usize, bias: &[f64]) -> Result<Tensor> {
    let (n, k) = match x.shape[..] {
        [n, k] => (n, k),
        _ => return Err(Error::invalid(format!("linear expects rank 2, got {:?}", x.shape))),
    };
    if w.len() != out_features * k {
        return Err(Error::shape("linear weight", &[out_features, k], &[w.len() / k.max(1), k]));
    }
    let mut y = Tensor::zeros(&[n, out_features]);
    for row in y.data.chunks_mut(out_features) {
        row.copy_from_slice(bias);
    }
    gemm(n, k, out_features, &x.data, (k as isize, 1), w, (1, k as isize), 1.0, &mut y.data);
    Ok(y)
}

/// Returns `(dx, dw, dbias)` for [`linear`].
pub fn linear_backward(x: &Tensor, w: &[f64], out_features: usize, grad: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (n, k) = (x.shape[0], x.shape[1]);
    let mut dx = Tensor::zeros(&x.shape);
    gemm(n, out_features, k, &grad.data, (out_features as isize, 1), w, (k as isize, 1), 0.0, &mut dx.data);
    let mut dw = vec![0.0; out_features * k];
    gemm(out_features, n, k, &grad.data, (1, out_features as isize), &x.data, (k as isize, 1), 0.0, &mut dw);
    let mut db = vec![0.0; out_features];
    for row in grad.data.chunks(out_features) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    (dx, dw, db)
}

/// 2x2 average pooling with stride 2 (odd trailing rows/cols dropped).
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::Geometry(format!("cannot pool {h}x{w}")));
    }
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    for nc in 0..n * c {
        let src = &x.data[nc * h * w..][..h * w];
        let dst = &mut y.data[nc * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let (y0, x0) = (2 * oy, 2 * ox);
                dst[oy * ow + ox] =
                    0.25 * (src[y0 * w + x0] + src[y0 * w + x0 + 1] + src[(y0 + 1) * w + x0] + src[(y0 + 1) * w + x0 + 1]);
            }
        }
    }
    Ok(y)
}

pub fn avg_pool2_backward(in_shape: &[usize], grad: &Tensor) -> Tensor {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (grad.shape[2], grad.shape[3]);
    let mut dx = Tensor::zeros(in_shape);
    for nc in 0..in_shape[0] * in_shape[1] {
        let src = &grad.data[nc * oh * ow..][..oh * ow];
        let dst = &mut dx.data[nc * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = 0.25 * src[oy * ow + ox];
                let (y0, x0) = (2 * oy, 2 * ox);
                dst[y0 * w + x0] += g;
                dst[y0 * w + x0 + 1] += g;
                dst[(y0 + 1) * w + x0] += g;
                dst[(y0 + 1) * w + x0 + 1] += g;
            }
        }
    }
    dx
}

/// Mean over the spatial axes: `N,C,H,W -> N,C`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let data = x.data.chunks(hw).map(|s| s.iter().sum::<f64>() / hw as f64).collect();
    Tensor::new(&[n, c], data)
}

pub fn global_avg_pool_backward(in_shape: &[usize], grad: &Tensor) -> Tensor {
    let hw = in_shape[2] * in_shape[3];
    let mut dx = Tensor::zeros(in_shape);
    for (dst, g) in dx.data.chunks_mut(hw).zip(&grad.data) {
        dst.fill(g / hw as f64);
    }
    dx
}

/// Source taps and weights for bilinear resampling (half-pixel centers).
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear upsampling by an integer factor.
pub fn upsample_bilinear(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    for nc in 0..n * c {
        let src = &x.data[nc * h * w..][..h * w];
        let dst = &mut y.data[nc * oh * ow..][..oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(y)
}

pub fn upsample_bilinear_backward(in_shape: &[usize], grad: &Tensor) -> Tensor {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (grad.shape[2], grad.shape[3]);
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let mut dx = Tensor::zeros(in_shape);
    for nc in 0..in_shape[0] * in_shape[1] {
        let src = &grad.data[nc * oh * ow..][..oh * ow];
        let dst = &mut dx.data[nc * h * w..][..h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = src[oy * ow + ox];
                dst[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += g * (1.0 - fy) * fx;
                dst[y1 * w + x0] += g * fy * (1.0 - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    dx
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean softmax cross-entropy over rows of `N,K` logits; returns the loss
/// and its gradient.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = match logits.shape[..] {
        [n, k] => (n, k),
        _ => return Err(Error::invalid("classification logits must be N,K")),
    };
    if labels.len() != n {
        return Err(Error::shape("labels", &[n], &[labels.len()]));
    }
    let mut grad = Tensor::zeros(&logits.shape);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::invalid(format!("label {y} out of range for {k} classes")));
        }
        let p = softmax(&logits.data[i * k..][..k]);
        loss -= p[y].max(1e-300).ln();
        let g = &mut grad.data[i * k..][..k];
        for (gj, pj) in g.iter_mut().zip(&p) {
            *gj = pj / n as f64;
        }
        g[y] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, grad))
}

/// Mean per-pixel softmax cross-entropy for `N,K,H,W` logits and `N*H*W` labels.
pub fn pixel_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k, h, w) = logits.dims4()?;
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(Error::shape("pixel labels", &[n * hw], &[labels.len()]));
    }
    let total = (n * hw) as f64;
    let mut grad = Tensor::zeros(&logits.shape);
    let mut loss = 0.0;
    let mut row = vec![0.0; k];
    for b in 0..n {
        for p in 0..hw {
            for (j, r) in row.iter_mut().enumerate() {
                *r = logits.data[(b * k + j) * hw + p];
            }
            let y = labels[b * hw + p];
            if y >= k {
                return Err(Error::invalid(format!("label {y} out of range for {k} classes")));
            }
            let prob = softmax(&row);
            loss -= prob[y].max(1e-300).ln();
            for (j, pj) in prob.iter().enumerate() {
                let t = if j == y { 1.0 } else { 0.0 };
                grad.data[(b * k + j) * hw + p] = (pj - t) / total;
            }
        }
    }
    Ok((loss / total, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central finite difference of `f` with respect to every element of `x`.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.numel())
            .map(|i| {
                let mut p = x.clone();
                p.data[i] += h;
                let mut m = x.clone();
                m.data[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "index {i}: {x} vs {y}");
        }
    }

    #[test]
    fn identity_1x1_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_tensor(&mut rng, &[2, 3, 4, 4]);
        let mut w = vec![0.0; 9];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let y = conv2d(&x, &w, &[3, 3, 1, 1], &ConvGeometry::default(), 0.0).unwrap();
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 2, 5, 5]);
        let ws = [3, 2, 3, 3];
        let w = rand_tensor(&mut rng, &ws);
        let g = ConvGeometry::new(2, 2, 2);
        let probe = rand_tensor(&mut rng, &[2, 3, 3, 3]);
        let loss = |xx: &Tensor, ww: &Tensor| conv2d(xx, &ww.data, &ws, &g, -1.0).unwrap().dot(&probe);
        let (dx, dw) = conv2d_backward(&x, &w.data, &ws, &g, -1.0, &probe, true).unwrap();
        close(&dx.unwrap().data, &numeric_grad(&x, |t| loss(t, &w)), 1e-6);
        close(&dw, &numeric_grad(&w, |t| loss(&x, t)), 1e-6);
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[2, 4]);
        let b = vec![0.1, -0.2];
        let probe = rand_tensor(&mut rng, &[3, 2]);
        let (dx, dw, db) = linear_backward(&x, &w.data, 2, &probe);
        close(&dx.data, &numeric_grad(&x, |t| linear(t, &w.data, 2, &b).unwrap().dot(&probe)), 1e-6);
        close(&dw, &numeric_grad(&w, |t| linear(&x, &t.data, 2, &b).unwrap().dot(&probe)), 1e-6);
        assert!((db[0] - (probe.data[0] + probe.data[2] + probe.data[4])).abs() < 1e-12);
    }

    #[test]
    fn pooling_and_upsampling_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[1, 2, 4, 6]);
        let p = rand_tensor(&mut rng, &[1, 2, 2, 3]);
        close(
            &avg_pool2_backward(&x.shape, &p).data,
            &numeric_grad(&x, |t| avg_pool2(t).unwrap().dot(&p)),
            1e-6,
        );
        let u = rand_tensor(&mut rng, &[1, 2, 12, 18]);
        close(
            &upsample_bilinear_backward(&x.shape, &u).data,
            &numeric_grad(&x, |t| upsample_bilinear(t, 3).unwrap().dot(&u)),
            1e-6,
        );
        let gp = rand_tensor(&mut rng, &[1, 2]);
        close(
            &global_avg_pool_backward(&x.shape, &gp).data,
            &numeric_grad(&x, |t| global_avg_pool(t).unwrap().dot(&gp)),
            1e-6,
        );
    }

    #[test]
    fn upsample_constant_is_constant() {
        let x = Tensor::full(&[1, 1, 3, 3], 2.5);
        let y = upsample_bilinear(&x, 4).unwrap();
        assert!(y.data.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = rand_tensor(&mut rng, &[3, 5]);
        let labels = [0, 4, 2];
        let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
        close(&g.data, &numeric_grad(&logits, |t| softmax_cross_entropy(t, &labels).unwrap().0), 1e-6);

        let pix = rand_tensor(&mut rng, &[2, 3, 2, 2]);
        let pl = [0, 1, 2, 1, 2, 2, 0, 0];
        let (_, g) = pixel_cross_entropy(&pix, &pl).unwrap();
        close(&g.data, &numeric_grad(&pix, |t| pixel_cross_entropy(t, &pl).unwrap().0), 1e-6);
    }
}
