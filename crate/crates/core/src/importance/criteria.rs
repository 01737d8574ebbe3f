//! Per-layer criteria `I(W)`: one nonnegative score per index of a prunable axis.

use nalgebra::DMatrix;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::kernels::{im2col, ConvGeom};
use crate::tensor::Tensor;

/// Slices of `t` along `axis`, widened to f64.
pub fn axis_slices(t: &Tensor, axis: usize) -> Vec<Vec<f64>> {
    let (_, n, _) = t.axis_split(axis);
    (0..n)
        .map(|k| t.axis_slice(axis, k).into_iter().map(f64::from).collect())
        .collect()
}

fn check_same_shape(w: &Tensor, g: &Tensor, what: &str) -> Result<()> {
    if w.shape() != g.shape() {
        return Err(Error::Config(format!(
            "{what} shape {:?} does not match weight shape {:?}",
            g.shape(),
            w.shape()
        )));
    }
    Ok(())
}

/// `p`-norm of each slice (`p` = 1 or 2).
pub fn magnitude_score(w: &Tensor, axis: usize, p: u32) -> Vec<f64> {
    axis_slices(w, axis)
        .iter()
        .map(|s| match p {
            1 => s.iter().map(|v| v.abs()).sum(),
            _ => s.iter().map(|v| v * v).sum::<f64>().sqrt(),
        })
        .collect()
}

/// LAMP: squared norm divided by the sum of squared norms of every index
/// that is at least as large (in sorted order).
pub fn lamp_score(w: &Tensor, axis: usize) -> Vec<f64> {
    let u: Vec<f64> = magnitude_score(w, axis, 2).iter().map(|v| v * v).collect();
    let mut order: Vec<usize> = (0..u.len()).collect();
    order.sort_by(|&a, &b| u[a].total_cmp(&u[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; u.len()];
    let mut tail: f64 = u.iter().sum();
    for &k in &order {
        out[k] = if tail > 0.0 { u[k] / tail } else { 0.0 };
        tail -= u[k];
    }
    out
}

/// FPGM: sum of Euclidean distances from each slice to every other slice.
pub fn fpgm_score(w: &Tensor, axis: usize) -> Vec<f64> {
    let s = axis_slices(w, axis);
    let n = s.len();
    let mut d = vec![0.0; n];
    for i in 0..n {
        for j in i + 1..n {
            let dist = s[i]
                .iter()
                .zip(&s[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d[i] += dist;
            d[j] += dist;
        }
    }
    d
}

pub fn bnscale_score(gamma: &Tensor) -> Vec<f64> {
    gamma.data().iter().map(|v| f64::from(v.abs())).collect()
}

/// Uniform `[0,1)` draws; the stream is keyed by `(seed, group)`.
pub fn random_score(width: usize, seed: u64, group: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(group as u64);
    (0..width).map(|_| rng.random::<f64>()).collect()
}

/// First-order Taylor: `(Σ_slice g·w)²`.
pub fn taylor_score(w: &Tensor, grad: &Tensor, axis: usize) -> Result<Vec<f64>> {
    check_same_shape(w, grad, "gradient")?;
    Ok(axis_slices(w, axis)
        .iter()
        .zip(axis_slices(grad, axis))
        .map(|(ws, gs)| ws.iter().zip(&gs).map(|(a, b)| a * b).sum::<f64>().powi(2))
        .collect())
}

/// Diagonal-Fisher OBD: `h_i = mean_b g_{b,i}²`, score = `Σ_slice ½·h_i·w_i²`.
pub fn obd_hessian_score(w: &Tensor, per_sample: &[Tensor], axis: usize) -> Result<Vec<f64>> {
    if per_sample.is_empty() {
        return Err(Error::Config("obd_hessian needs at least one per-sample gradient".into()));
    }
    for g in per_sample {
        check_same_shape(w, g, "per-sample gradient")?;
    }
    let b = per_sample.len() as f64;
    let mut h = vec![0.0f64; w.numel()];
    for g in per_sample {
        for (hi, &gi) in h.iter_mut().zip(g.data()) {
            *hi += f64::from(gi) * f64::from(gi);
        }
    }
    let (outer, n, inner) = w.axis_split(axis);
    let mut out = vec![0.0; n];
    for o in 0..outer {
        for (k, score) in out.iter_mut().enumerate() {
            let base = (o * n + k) * inner;
            for i in base..base + inner {
                let wi = f64::from(w.data()[i]);
                *score += 0.5 * (h[i] / b) * wi * wi;
            }
        }
    }
    Ok(out)
}

/// Numerical rank of an `h×w` row-major matrix: singular values above
/// `1e-6·σ_max`. A zero matrix has rank 0.
pub fn matrix_rank(map: &[f64], h: usize, w: usize) -> usize {
    let sv = DMatrix::from_row_slice(h, w, map).singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > 1e-6 * smax).count()
}

/// HRank: mean over the batch of each channel's feature-map rank.
/// `act` is `[B,C,H,W]`.
pub fn hrank_score(act: &[f32], shape: &[usize]) -> Result<Vec<f64>> {
    let &[b, c, h, w] = shape else {
        return Err(Error::Config(format!("hrank needs [B,C,H,W] feature maps, got {shape:?}")));
    };
    if h < 2 || w < 2 {
        return Err(Error::Config(format!("hrank needs feature maps of at least 2x2, got {h}x{w}")));
    }
    let mut out = vec![0.0; c];
    let mut buf = vec![0.0; h * w];
    for bi in 0..b {
        for (ch, score) in out.iter_mut().enumerate() {
            let src = &act[(bi * c + ch) * h * w..][..h * w];
            for (d, &s) in buf.iter_mut().zip(src) {
                *d = f64::from(s);
            }
            *score += matrix_rank(&buf, h, w) as f64;
        }
    }
    Ok(out.into_iter().map(|s| s / b as f64).collect())
}

/// ThiNet for a conv consumer: for each input channel `c`, the squared
/// contribution `conv(x_c, W[:,c])` summed over samples, filters and positions.
/// `x` is `[B,C,H,W]`, `weight` is `[O,C,K,K]`.
pub fn thinet_conv_score(
    x: &[f32],
    x_shape: &[usize],
    weight: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Vec<f64>> {
    let (&[b, c, h, w], &[o, wc, k, _]) = (x_shape, weight.shape()) else {
        return Err(Error::Config("thinet conv consumer needs 4-d input and weight".into()));
    };
    if wc != c {
        return Err(Error::Config(format!("consumer expects {wc} channels, activation has {c}")));
    }
    let g = ConvGeom {
        c,
        h,
        w,
        o,
        k,
        stride,
        pad,
        oh: (h + 2 * pad - k) / stride + 1,
        ow: (w + 2 * pad - k) / stride + 1,
    };
    let (p, kk) = (g.p(), k * k);
    let wd: Vec<f64> = weight.data().iter().map(|&v| f64::from(v)).collect();
    let mut col = vec![0.0; g.ckk() * p];
    let mut acc = vec![0.0; p];
    let mut out = vec![0.0; c];
    for bi in 0..b {
        im2col(&x[bi * c * h * w..(bi + 1) * c * h * w], &g, &mut col);
        for (ch, score) in out.iter_mut().enumerate() {
            for f in 0..o {
                acc.fill(0.0);
                for j in 0..kk {
                    let wj = wd[(f * c + ch) * kk + j];
                    let row = &col[(ch * kk + j) * p..][..p];
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a += wj * v;
                    }
                }
                *score += acc.iter().map(|v| v * v).sum::<f64>();
            }
        }
    }
    Ok(out)
}

/// ThiNet for a linear consumer whose input feature `f` belongs to channel
/// `f / block`. `x` is `[B,F]`, `weight` is `[O,F]`.
pub fn thinet_linear_score(x: &[f32], batch: usize, weight: &Tensor, block: usize) -> Result<Vec<f64>> {
    let &[o, fin] = weight.shape() else {
        return Err(Error::Config("thinet linear consumer needs a 2-d weight".into()));
    };
    if block == 0 || fin % block != 0 || x.len() != batch * fin {
        return Err(Error::Config(format!(
            "thinet linear consumer: {fin} features, block {block}, activation length {}",
            x.len()
        )));
    }
    let c = fin / block;
    let wd = weight.data();
    let mut out = vec![0.0; c];
    for bi in 0..batch {
        let xb = &x[bi * fin..(bi + 1) * fin];
        for (ch, score) in out.iter_mut().enumerate() {
            for f in 0..o {
                let contrib: f64 = (ch * block..(ch + 1) * block)
                    .map(|j| f64::from(wd[f * fin + j]) * f64::from(xb[j]))
                    .sum();
                *score += contrib * contrib;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn magnitude_hand_values() {
        let w = t(&[2, 2], &[1.0, -2.0, 0.5, 0.5]);
        assert_eq!(magnitude_score(&w, 0, 1), vec![3.0, 1.0]);
        let l2 = magnitude_score(&w, 0, 2);
        assert!((l2[0] - 2.2360679).abs() < 1e-7 && (l2[1] - 0.5f64.sqrt()).abs() < 1e-7);
        assert_eq!(magnitude_score(&t(&[1, 3], &[0.0; 3]), 0, 2), vec![0.0]);
        // Input-axis slicing picks columns.
        assert_eq!(magnitude_score(&w, 1, 1), vec![1.5, 2.5]);
    }

    #[test]
    fn lamp_definition() {
        let w = t(&[3, 1], &[1.0, 2f32.sqrt(), 3f32.sqrt()]);
        let s = lamp_score(&w, 0);
        for (a, b) in s.iter().zip([1.0 / 6.0, 2.0 / 5.0, 1.0]) {
            assert!((a - b).abs() < 1e-6, "{s:?}");
        }
        assert_eq!(lamp_score(&t(&[1, 2], &[3.0, 4.0]), 0), vec![1.0]);
        let uni = lamp_score(&t(&[4, 1], &[1.0; 4]), 0);
        assert!(uni.windows(2).all(|p| p[0] < p[1]), "{uni:?}");
        assert_eq!(lamp_score(&t(&[2, 1], &[0.0, 0.0]), 0), vec![0.0, 0.0]);
    }

    #[test]
    fn fpgm_definition() {
        assert_eq!(fpgm_score(&t(&[3, 1], &[0.0, 1.0, 2.0]), 0), vec![3.0, 2.0, 3.0]);
        assert_eq!(fpgm_score(&t(&[2, 2], &[1.0, 2.0, 1.0, 2.0]), 0), vec![0.0, 0.0]);
        assert_eq!(fpgm_score(&t(&[1, 2], &[1.0, 2.0]), 0), vec![0.0]);
    }

    #[test]
    fn bnscale_and_random() {
        assert_eq!(bnscale_score(&t(&[3], &[0.5, -1.2, 0.0])), vec![0.5f32 as f64, 1.2f32 as f64, 0.0]);
        assert_eq!(random_score(5, 1, 2), random_score(5, 1, 2));
        assert_ne!(random_score(5, 1, 2), random_score(5, 2, 2));
        assert_ne!(random_score(5, 1, 2), random_score(5, 1, 3));
        let one = random_score(1, 9, 0);
        assert!(one.len() == 1 && (0.0..1.0).contains(&one[0]));
    }

    #[test]
    fn taylor_and_obd_hand_values() {
        let w = t(&[1, 2], &[1.0, 2.0]);
        let g = t(&[1, 2], &[0.5, -0.25]);
        assert_eq!(taylor_score(&w, &g, 0).unwrap(), vec![0.0]);
        assert!(taylor_score(&w, &t(&[2, 1], &[0.0, 0.0]), 0).is_err());

        let w = t(&[1], &[1.0]);
        let per = [t(&[1], &[1.0]), t(&[1], &[-1.0])];
        assert_eq!(obd_hessian_score(&w, &per, 0).unwrap(), vec![0.5]);
        assert!(obd_hessian_score(&w, &[], 0).is_err());
    }

    #[test]
    fn ranks() {
        assert_eq!(matrix_rank(&[1.0, 0.0, 0.0, 1.0], 2, 2), 2);
        assert_eq!(matrix_rank(&[1.0, 1.0, 1.0, 1.0], 2, 2), 1);
        assert_eq!(matrix_rank(&[0.0; 4], 2, 2), 0);
        let s = hrank_score(&[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0], &[1, 2, 2, 2]).unwrap();
        assert_eq!(s, vec![2.0, 1.0]);
        assert!(hrank_score(&[1.0, 2.0], &[1, 2, 1, 1]).is_err());
    }

    #[test]
    fn thinet_linear_hand_values() {
        // Two channels, one output: channel 0 contributes 1 per sample, channel 1 nothing.
        let w = t(&[1, 2], &[1.0, 1.0]);
        let x = [1.0, 0.0, 1.0, 0.0];
        assert_eq!(thinet_linear_score(&x, 2, &w, 1).unwrap(), vec![2.0, 0.0]);
    }
}
