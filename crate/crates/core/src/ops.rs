//! Forward and backward kernels for the three layer types: bias-free
//! convolution, ReLU and bias-free (RMS) batch normalization.
//!
//! All tensors are `B×C×H×W`. Convolutions use zero padding `(k-1)/2` so
//! spatial size is preserved, and are computed as im2col + GEMM per batch
//! item. Work is split across batch items; every reduction across items is
//! summed in item order so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor};

/// Running-statistic momentum for batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;
/// Default batch-normalization epsilon.
pub const BN_EPSILON: f64 = 1e-5;

fn check_kernel<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>) -> Result<(usize, usize)> {
    let (_, c, _, _) = input.dims4()?;
    let (o, kc, kh, kw) = kernel.dims4()?;
    if kh != kw || kh % 2 == 0 {
        return Err(Error::dim(format!(
            "kernels must be square with odd size, got {kh}×{kw}"
        )));
    }
    if kc != c {
        return Err(Error::dim(format!(
            "kernel expects {kc} input channels, input has {c}"
        )));
    }
    Ok((o, kh))
}

/// Unfolds one `C×H×W` item into a `(C·k·k)×(H·W)` matrix.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut col[((ch * k + ki) * k + kj) * hw..][..hw];
                let dy = ki as isize - p;
                let dx = kj as isize - p;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    dst[..x0].iter_mut().for_each(|v| *v = T::zero());
                    dst[x1..].iter_mut().for_each(|v| *v = T::zero());
                    let sx0 = (x0 as isize + dx) as usize;
                    dst[x0..x1].copy_from_slice(&src[sx0..sx0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds the columns back onto `C×H×W`.
fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, k: usize, x: &mut [T]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    x.iter_mut().for_each(|v| *v = T::zero());
    for ch in 0..c {
        let plane = &mut x[ch * hw..(ch + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = &col[((ch * k + ki) * k + kj) * hw..][..hw];
                let dy = ki as isize - p;
                let dx = kj as isize - p;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sx0 = (x0 as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + sx0..][..x1 - x0];
                    for (d, &s) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

/// Bias-free "same" cross-correlation: `out[b,o] = Σ_c kernel[o,c] ⋆ input[b,c]`.
pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let (o, k) = check_kernel(input, kernel)?;
    let (b, c, h, w) = input.dims4()?;
    let hw = h * w;
    let ckk = c * k * k;
    let mut out = Tensor::zeros(&[b, o, h, w]);
    let wk = kernel.data();
    out.data_mut()
        .par_chunks_mut(o * hw)
        .zip(input.data().par_chunks(c * hw))
        .for_each_init(Vec::new, |col, (y, x)| {
            if k == 1 {
                gemm(o, c, hw, wk, false, x, false, y, false);
            } else {
                col.resize(ckk * hw, T::zero());
                im2col(x, c, h, w, k, col);
                gemm(o, ckk, hw, wk, false, col, false, y, false);
            }
        });
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to the input and/or the kernel.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    want_input: bool,
    want_kernel: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (o, k) = check_kernel(input, kernel)?;
    let (b, c, h, w) = input.dims4()?;
    if grad_out.shape() != [b, o, h, w] {
        return Err(Error::dim(format!(
            "output gradient {:?} does not match conv output [{b}, {o}, {h}, {w}]",
            grad_out.shape()
        )));
    }
    let hw = h * w;
    let ckk = c * k * k;
    let wk = kernel.data();

    let per_item: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = input
        .data()
        .par_chunks(c * hw)
        .zip(grad_out.data().par_chunks(o * hw))
        .map(|(x, gy)| {
            let mut col = Vec::new();
            let col_ref: &[T] = if k == 1 {
                x
            } else {
                col.resize(ckk * hw, T::zero());
                im2col(x, c, h, w, k, &mut col);
                &col
            };
            let gk = want_kernel.then(|| {
                let mut gk = vec![T::zero(); o * ckk];
                gemm(o, hw, ckk, gy, false, col_ref, true, &mut gk, false);
                gk
            });
            let gx = want_input.then(|| {
                let mut gx = vec![T::zero(); c * hw];
                if k == 1 {
                    gemm(c, o, hw, wk, true, gy, false, &mut gx, false);
                } else {
                    let mut gcol = vec![T::zero(); ckk * hw];
                    gemm(ckk, o, hw, wk, true, gy, false, &mut gcol, false);
                    col2im(&gcol, c, h, w, k, &mut gx);
                }
                gx
            });
            (gx, gk)
        })
        .collect();

    let mut grad_in = want_input.then(|| Vec::with_capacity(b * c * hw));
    let mut grad_k = want_kernel.then(|| vec![T::zero(); o * ckk]);
    for (gx, gk) in per_item {
        if let (Some(acc), Some(gx)) = (grad_in.as_mut(), gx) {
            acc.extend_from_slice(&gx);
        }
        if let (Some(acc), Some(gk)) = (grad_k.as_mut(), gk) {
            for (a, v) in acc.iter_mut().zip(gk) {
                *a = *a + v;
            }
        }
    }
    Ok((
        grad_in
            .map(|v| Tensor::from_vec(&[b, c, h, w], v))
            .transpose()?,
        grad_k
            .map(|v| Tensor::from_vec(kernel.shape(), v))
            .transpose()?,
    ))
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient convention: zero at the kink.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(grad_out, |v, g| if v > T::zero() { g } else { T::zero() })
}

/// Per-channel mean of squares over batch and space.
pub fn channel_mean_square<T: Scalar>(x: &Tensor<T>) -> Result<Vec<T>> {
    let (b, c, h, w) = x.dims4()?;
    if c == 0 {
        return Err(Error::dim("batch normalization over zero channels"));
    }
    let hw = h * w;
    let count = T::lit((b * hw).max(1) as f64);
    let d = x.data();
    Ok((0..c)
        .map(|ch| {
            let mut acc = T::zero();
            for item in 0..b {
                for &v in &d[(item * c + ch) * hw..][..hw] {
                    acc = acc + v * v;
                }
            }
            acc / count
        })
        .collect())
}

fn per_channel<T: Scalar>(x: &Tensor<T>, factor: &[T]) -> Result<Tensor<T>> {
    let (_, c, h, w) = x.dims4()?;
    if factor.len() != c {
        return Err(Error::dim(format!(
            "{} per-channel factors for {c} channels",
            factor.len()
        )));
    }
    let hw = h * w;
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
        let f = factor[i % c];
        chunk.iter_mut().for_each(|v| *v = *v * f);
    }
    Ok(out)
}

/// `y = scale · x / sqrt(ms + eps)` per channel, with no mean subtraction and
/// no shift. Returns the output and the per-channel `1/sqrt(ms + eps)` used.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    mean_square: &[T],
    epsilon: f64,
) -> Result<(Tensor<T>, Vec<T>)> {
    if epsilon <= 0.0 {
        return Err(Error::config(format!("batch-norm epsilon must be > 0, got {epsilon}")));
    }
    let (_, c, _, _) = x.dims4()?;
    if c == 0 {
        return Err(Error::dim("batch normalization over zero channels"));
    }
    if scale.len() != c || mean_square.len() != c {
        return Err(Error::dim(format!(
            "batch norm over {c} channels given {} scales and {} statistics",
            scale.len(),
            mean_square.len()
        )));
    }
    let eps = T::lit(epsilon);
    let inv_rms: Vec<T> = mean_square.iter().map(|&m| (m + eps).sqrt().recip()).collect();
    let factor: Vec<T> = inv_rms
        .iter()
        .zip(scale.data())
        .map(|(&r, &s)| r * s)
        .collect();
    Ok((per_channel(x, &factor)?, inv_rms))
}

/// Gradients of [`batchnorm_forward`]. In training mode the statistics are a
/// function of `x` and contribute to the input gradient.
pub fn batchnorm_backward<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    inv_rms: &[T],
    grad_out: &Tensor<T>,
    train: bool,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = x.dims4()?;
    x.same_shape(grad_out)?;
    let hw = h * w;
    let xd = x.data();
    let gd = grad_out.data();
    // Σ gy·x per channel
    let mut gx_dot = vec![T::zero(); c];
    for (ch, acc) in gx_dot.iter_mut().enumerate() {
        for item in 0..b {
            let o = (item * c + ch) * hw;
            for (&xv, &gv) in xd[o..o + hw].iter().zip(&gd[o..o + hw]) {
                *acc = *acc + xv * gv;
            }
        }
    }
    let grad_scale: Vec<T> = gx_dot.iter().zip(inv_rms).map(|(&s, &r)| s * r).collect();
    let count = T::lit((b * hw).max(1) as f64);
    let mut gx = Tensor::zeros(x.shape());
    {
        let out = gx.data_mut();
        for item in 0..b {
            for ch in 0..c {
                let s = scale.data()[ch];
                let r = inv_rms[ch];
                let a = s * r;
                let corr = if train {
                    s * r * r * r * gx_dot[ch] / count
                } else {
                    T::zero()
                };
                let o = (item * c + ch) * hw;
                for i in o..o + hw {
                    out[i] = a * gd[i] - corr * xd[i];
                }
            }
        }
    }
    Ok((gx, Tensor::from_vec(scale.shape(), grad_scale)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct quadruple-loop convolution used as the reference.
    fn conv_naive(x: &Tensor<f64>, k: &Tensor<f64>) -> Tensor<f64> {
        let (b, c, h, w) = x.dims4().unwrap();
        let (o, _, ks, _) = k.dims4().unwrap();
        let p = (ks / 2) as isize;
        let mut out = Tensor::zeros(&[b, o, h, w]);
        for bi in 0..b {
            for oi in 0..o {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for i in 0..ks {
                                for j in 0..ks {
                                    let sy = y as isize + i as isize - p;
                                    let sx = xx as isize + j as isize - p;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    acc += k.get(&[oi, ci, i, j]).unwrap()
                                        * x.get(&[bi, ci, sy as usize, sx as usize]).unwrap();
                                }
                            }
                        }
                        out.set(&[bi, oi, y, xx], acc).unwrap();
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(ks, c, o) in &[(1usize, 3usize, 2usize), (3, 2, 4), (5, 1, 2)] {
            let x = Tensor::<f64>::randn(&[2, c, 5, 7], 1.0, &mut rng);
            let k = Tensor::<f64>::randn(&[o, c, ks, ks], 1.0, &mut rng);
            let a = conv2d_forward(&x, &k).unwrap();
            let b = conv_naive(&x, &k);
            assert!(a.sub(&b).unwrap().max_abs() < 1e-12, "k={ks}");
        }
    }

    #[test]
    fn conv_pointwise_scaling() {
        let x = Tensor::<f32>::randn(&[1, 1, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let k = Tensor::<f32>::full(&[1, 1, 1, 1], 2.0);
        let y = conv2d_forward(&x, &k).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn conv_box_filter_at_corner_and_interior() {
        let x = Tensor::<f32>::full(&[1, 1, 5, 5], 1.0);
        let k = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0 / 9.0);
        let y = conv2d_forward(&x, &k).unwrap();
        assert!((y.get(&[0, 0, 2, 2]).unwrap() - 1.0).abs() < 1e-6);
        assert!((y.get(&[0, 0, 0, 0]).unwrap() - 4.0 / 9.0).abs() < 1e-6);
    }

    #[test]
    fn conv_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::randn(&[2, 3, 6, 6], 1.0, &mut rng);
        let y = Tensor::<f32>::randn(&[2, 3, 6, 6], 1.0, &mut rng);
        let k = Tensor::<f32>::randn(&[4, 3, 3, 3], 1.0, &mut rng);
        let lhs = conv2d_forward(&x.add(&y).unwrap(), &k).unwrap();
        let rhs = conv2d_forward(&x, &k)
            .unwrap()
            .add(&conv2d_forward(&y, &k).unwrap())
            .unwrap();
        assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-5);
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let k = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        assert!(matches!(conv2d_forward(&x, &k), Err(Error::Dimension(_))));
        let k = Tensor::<f32>::zeros(&[1, 2, 2, 2]);
        assert!(matches!(conv2d_forward(&x, &k), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> = <x, conv_backward_input(g)> and likewise for the kernel.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn(&[2, 3, 5, 6], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[2, 3, 3, 3], 1.0, &mut rng);
        let g = Tensor::<f64>::randn(&[2, 2, 5, 6], 1.0, &mut rng);
        let y = conv2d_forward(&x, &k).unwrap();
        let (gx, gk) = conv2d_backward(&x, &k, &g, true, true).unwrap();
        let lhs = y.dot(&g).unwrap();
        assert!((lhs - x.dot(&gx.unwrap()).unwrap()).abs() < 1e-10);
        assert!((lhs - k.dot(&gk.unwrap()).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn relu_values_and_homogeneity() {
        let x = Tensor::<f64>::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu_forward(&x.scale(3.0)), relu_forward(&x).scale(3.0));
        let g = Tensor::<f64>::full(&[3], 1.0);
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn batchnorm_normalizes_rms() {
        let x = Tensor::<f64>::full(&[2, 1, 3, 3], 2.0);
        let ms = channel_mean_square(&x).unwrap();
        let (y, _) = batchnorm_forward(&x, &Tensor::full(&[1], 1.0), &ms, 1e-12).unwrap();
        let rms = (y.sum_sq() / y.len() as f64).sqrt();
        assert!((rms - 1.0).abs() < 1e-9);
        let (z, _) = batchnorm_forward(&x, &Tensor::zeros(&[1]), &ms, 1e-5).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_frozen_stats_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[1, 2, 3, 3], 1.0, &mut rng);
        let scale = Tensor::from_vec(&[2], vec![0.5, 2.0]).unwrap();
        let ms = vec![0.7, 1.3];
        let (a, _) = batchnorm_forward(&x.scale(3.0), &scale, &ms, 1e-5).unwrap();
        let (b, _) = batchnorm_forward(&x, &scale, &ms, 1e-5).unwrap();
        assert!(a.sub(&b.scale(3.0)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn batchnorm_errors() {
        let x = Tensor::<f64>::zeros(&[1, 0, 2, 2]);
        assert!(matches!(channel_mean_square(&x), Err(Error::Dimension(_))));
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert!(batchnorm_forward(&x, &Tensor::full(&[1], 1.0), &[1.0], 0.0).is_err());
    }
}
