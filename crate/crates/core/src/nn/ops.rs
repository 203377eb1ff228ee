//! Forward and backward kernels for the encoder's layers.
//!
//! Feature maps are `[channels × height × width]` row-major slices.

pub const NORM_EPS: f64 = 1e-5;

/// `c = alpha * op(a) * op(b) + beta * c` with `op(a)` m×k and `op(b)` k×n.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel can touch for
    // the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `y = W x + b` for `W` stored `[out × in]`.
pub fn linear(weight: &[f64], bias: Option<&[f64]>, out: usize, x: &[f64]) -> Vec<f64> {
    let inp = x.len();
    debug_assert_eq!(weight.len(), out * inp);
    let mut y = match bias {
        Some(b) => b.to_vec(),
        None => vec![0.0; out],
    };
    for (o, yo) in y.iter_mut().enumerate() {
        let row = &weight[o * inp..(o + 1) * inp];
        *yo += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
    }
    y
}

/// Accumulates `dW += dy xᵀ`, `db += dy` and returns `dx = Wᵀ dy`.
pub fn linear_backward(
    weight: &[f64],
    x: &[f64],
    dy: &[f64],
    d_weight: &mut [f64],
    d_bias: Option<&mut [f64]>,
) -> Vec<f64> {
    let inp = x.len();
    let mut dx = vec![0.0; inp];
    for (o, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &weight[o * inp..(o + 1) * inp];
        let drow = &mut d_weight[o * inp..(o + 1) * inp];
        for i in 0..inp {
            drow[i] += g * x[i];
            dx[i] += g * row[i];
        }
    }
    if let Some(db) = d_bias {
        for (b, g) in db.iter_mut().zip(dy) {
            *b += g;
        }
    }
    dx
}

/// 3×3, stride 1, zero padding 1: `[c × h × w]` → `[(c·9) × (h·w)]`.
pub fn im2col3(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; c * 9 * hw];
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`].
pub fn col2im3(cols: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut x = vec![0.0; c * hw];
    for ch in 0..c {
        let plane = &mut x[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
    x
}

/// Per-channel normalization over the spatial extent of one item.
/// Returns `(normalized, inverse std per channel)`.
pub fn instance_norm(x: &[f64], c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        let mean = plane.iter().sum::<f64>() / hw as f64;
        let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / hw as f64;
        let s = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[ch] = s;
        for (o, v) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(plane) {
            *o = (v - mean) * s;
        }
    }
    (out, inv_std)
}

pub fn instance_norm_backward(normed: &[f64], inv_std: &[f64], d_out: &[f64], hw: usize) -> Vec<f64> {
    let mut dx = vec![0.0; d_out.len()];
    for (ch, &s) in inv_std.iter().enumerate() {
        let xh = &normed[ch * hw..(ch + 1) * hw];
        let g = &d_out[ch * hw..(ch + 1) * hw];
        let mean_g = g.iter().sum::<f64>() / hw as f64;
        let mean_gx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / hw as f64;
        for ((d, &gi), &xi) in dx[ch * hw..(ch + 1) * hw].iter_mut().zip(g).zip(xh) {
            *d = s * (gi - mean_g - xi * mean_gx);
        }
    }
    dx
}

/// 2×2 average pooling; odd trailing rows/columns are dropped.
pub fn avg_pool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                out[ch * oh * ow + y * ow + xx] =
                    0.25 * (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(d_out: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let g = 0.25 * d_out[ch * oh * ow + y * ow + xx];
                let i = ch * h * w + 2 * y * w + 2 * xx;
                dx[i] += g;
                dx[i + 1] += g;
                dx[i + w] += g;
                dx[i + w + 1] += g;
            }
        }
    }
    dx
}

/// Global average pooling per channel.
pub fn global_avg(x: &[f64], c: usize, hw: usize) -> Vec<f64> {
    (0..c)
        .map(|ch| x[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|z| z - lse).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::rng(seed);
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    fn naive_conv(x: &[f64], wt: &[f64], c_in: usize, c_out: usize, h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; c_out * h * w];
        for o in 0..c_out {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for i in 0..c_in {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += wt[o * c_in * 9 + i * 9 + ky * 3 + kx]
                                    * x[i * h * w + sy as usize * w + sx as usize];
                            }
                        }
                    }
                    out[o * h * w + y * w + xx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        let (c_in, c_out, h, w) = (3, 4, 5, 7);
        let x = rand_vec(c_in * h * w, 1);
        let wt = rand_vec(c_out * c_in * 9, 2);
        let cols = im2col3(&x, c_in, h, w);
        let mut out = vec![0.0; c_out * h * w];
        gemm(c_out, c_in * 9, h * w, 1.0, &wt, false, &cols, false, 0.0, &mut out);
        let want = naive_conv(&x, &wt, c_in, c_out, h, w);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w) = (2, 4, 6);
        let x = rand_vec(c * h * w, 3);
        let y = rand_vec(c * 9 * h * w, 4);
        let lhs = dot(&im2col3(&x, c, h, w), &y);
        let rhs = dot(&x, &col2im3(&y, c, h, w));
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pool_backward_is_adjoint() {
        let (c, h, w) = (2, 6, 8);
        let x = rand_vec(c * h * w, 5);
        let y = rand_vec(c * 3 * 4, 6);
        let lhs = dot(&avg_pool2(&x, c, h, w), &y);
        let rhs = dot(&x, &avg_pool2_backward(&y, c, h, w));
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn gemm_transposes() {
        // a: 2×3, b: 3×2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, 1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // aᵀ stored as 3×2 and flagged transposed gives the same product.
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c2 = [0.0; 4];
        gemm(2, 3, 2, 1.0, &at, true, &b, false, 0.0, &mut c2);
        assert_eq!(c, c2);
    }

    #[test]
    fn instance_norm_gradient_matches_finite_differences() {
        let (c, hw) = (2, 6);
        let x = rand_vec(c * hw, 7);
        let probe = rand_vec(c * hw, 8);
        let f = |x: &[f64]| dot(&instance_norm(x, c, hw).0, &probe);
        let (normed, inv) = instance_norm(&x, c, hw);
        let grad = instance_norm_backward(&normed, &inv, &probe, hw);
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += 1e-5;
            xm[i] -= 1e-5;
            let fd = (f(&xp) - f(&xm)) / 2e-5;
            assert!((fd - grad[i]).abs() < 1e-7, "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn softmax_and_argmax_basics() {
        let p = softmax(&[0.0, 0.0]);
        assert!((p[0] - 0.5).abs() < 1e-15);
        let lp = log_softmax(&[1000.0, 0.0]);
        assert!(lp[0].abs() < 1e-12 && lp[1].is_finite());
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert!((silu_grad(0.0) - 0.5).abs() < 1e-15);
        assert_eq!(silu(0.0), 0.0);
    }
}
