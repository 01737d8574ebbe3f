//! Forward and backward kernels. Storage type `T`, accumulation always `f64`.
//! Every output element is produced by one fixed-order loop, so results are
//! bit-reproducible.

use super::Scalar;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub(crate) fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }
    pub(crate) fn p(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one sample `[C,H,W]` into `[C·K·K, OH·OW]` (zero padding).
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [f64]) {
    let p = g.p();
    for c in 0..g.c {
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = &mut col[((c * g.k + kh) * g.k + kw) * p..][..p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + kh) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kw) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize].to_f64()
                        };
                    }
                }
            }
        }
    }
}

fn col2im(dcol: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.p();
    for c in 0..g.c {
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = &dcol[((c * g.k + kh) * g.k + kw) * p..][..p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + kh) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kw) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (y, &v) in acc.iter_mut().zip(x) {
        *y += a * v;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let (ckk, p) = (g.ckk(), g.p());
    let in_len = g.c * g.h * g.w;
    let w64: Vec<f64> = weight.iter().map(|v| v.to_f64()).collect();
    let mut col = vec![0.0; ckk * p];
    let mut acc = vec![0.0; p];
    let mut y = Vec::with_capacity(batch * g.o * p);
    for b in 0..batch {
        im2col(&x[b * in_len..(b + 1) * in_len], g, &mut col);
        for o in 0..g.o {
            acc.fill(bias.map_or(0.0, |bb| bb[o].to_f64()));
            let wrow = &w64[o * ckk..(o + 1) * ckk];
            for (j, &wj) in wrow.iter().enumerate() {
                axpy(&mut acc, wj, &col[j * p..(j + 1) * p]);
            }
            y.extend(acc.iter().map(|&v| T::from_f64(v)));
        }
    }
    y
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    batch: usize,
    weight: &[T],
    g: &ConvGeom,
    need_dx: bool,
) -> ConvGrads<T> {
    let (ckk, p) = (g.ckk(), g.p());
    let in_len = g.c * g.h * g.w;
    let w64: Vec<f64> = weight.iter().map(|v| v.to_f64()).collect();
    let mut col = vec![0.0; ckk * p];
    let mut dcol = vec![0.0; ckk * p];
    let mut dxb = vec![0.0; in_len];
    let mut dyo = vec![0.0; p];
    let mut dw = vec![0.0; g.o * ckk];
    let mut db = vec![0.0; g.o];
    let mut dx = if need_dx { Vec::with_capacity(batch * in_len) } else { Vec::new() };
    for b in 0..batch {
        im2col(&x[b * in_len..(b + 1) * in_len], g, &mut col);
        if need_dx {
            dcol.fill(0.0);
        }
        for o in 0..g.o {
            let src = &dy[(b * g.o + o) * p..][..p];
            for (d, s) in dyo.iter_mut().zip(src) {
                *d = s.to_f64();
            }
            db[o] += dyo.iter().sum::<f64>();
            let dwrow = &mut dw[o * ckk..(o + 1) * ckk];
            for (j, dwj) in dwrow.iter_mut().enumerate() {
                *dwj += dot(&dyo, &col[j * p..(j + 1) * p]);
            }
            if need_dx {
                let wrow = &w64[o * ckk..(o + 1) * ckk];
                for (j, &wj) in wrow.iter().enumerate() {
                    axpy(&mut dcol[j * p..(j + 1) * p], wj, &dyo);
                }
            }
        }
        if need_dx {
            dxb.fill(0.0);
            col2im(&dcol, g, &mut dxb);
            dx.extend(dxb.iter().map(|&v| T::from_f64(v)));
        }
    }
    ConvGrads {
        dx: need_dx.then_some(dx),
        dw: dw.into_iter().map(T::from_f64).collect(),
        db: db.into_iter().map(T::from_f64).collect(),
    }
}

pub(crate) fn linear_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    weight: &[T],
    bias: Option<&[T]>,
    fin: usize,
    fout: usize,
) -> Vec<T> {
    let mut y = Vec::with_capacity(batch * fout);
    let mut xb = vec![0.0; fin];
    for b in 0..batch {
        for (d, s) in xb.iter_mut().zip(&x[b * fin..(b + 1) * fin]) {
            *d = s.to_f64();
        }
        for o in 0..fout {
            let wrow = &weight[o * fin..(o + 1) * fin];
            let mut acc = bias.map_or(0.0, |bb| bb[o].to_f64());
            for (w, xv) in wrow.iter().zip(&xb) {
                acc += w.to_f64() * xv;
            }
            y.push(T::from_f64(acc));
        }
    }
    y
}

pub(crate) fn linear_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    batch: usize,
    weight: &[T],
    fin: usize,
    fout: usize,
    need_dx: bool,
) -> ConvGrads<T> {
    let mut dw = vec![0.0; fout * fin];
    let mut db = vec![0.0; fout];
    let mut dx = if need_dx { Vec::with_capacity(batch * fin) } else { Vec::new() };
    let mut xb = vec![0.0; fin];
    let mut dxb = vec![0.0; fin];
    for b in 0..batch {
        for (d, s) in xb.iter_mut().zip(&x[b * fin..(b + 1) * fin]) {
            *d = s.to_f64();
        }
        dxb.fill(0.0);
        for o in 0..fout {
            let g = dy[b * fout + o].to_f64();
            db[o] += g;
            axpy(&mut dw[o * fin..(o + 1) * fin], g, &xb);
            if need_dx {
                for (d, w) in dxb.iter_mut().zip(&weight[o * fin..(o + 1) * fin]) {
                    *d += w.to_f64() * g;
                }
            }
        }
        if need_dx {
            dx.extend(dxb.iter().map(|&v| T::from_f64(v)));
        }
    }
    ConvGrads {
        dx: need_dx.then_some(dx),
        dw: dw.into_iter().map(T::from_f64).collect(),
        db: db.into_iter().map(T::from_f64).collect(),
    }
}

/// Per-channel statistics used by a batchnorm forward pass.
#[derive(Debug, Clone)]
pub(crate) struct BnStats {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Unbiased batch variance, for the running estimate (train mode only).
    pub var_unbiased: Vec<f64>,
}

pub(crate) fn bn_batch_stats<T: Scalar>(x: &[T], batch: usize, c: usize, hw: usize, eps: f64) -> BnStats {
    let n = (batch * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut inv_std = vec![0.0; c];
    let mut var_unbiased = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..batch {
            s += x[(b * c + ch) * hw..][..hw].iter().map(|v| v.to_f64()).sum::<f64>();
        }
        let mu = s / n;
        let mut ss = 0.0;
        for b in 0..batch {
            ss += x[(b * c + ch) * hw..][..hw]
                .iter()
                .map(|v| {
                    let d = v.to_f64() - mu;
                    d * d
                })
                .sum::<f64>();
        }
        let var = ss / n;
        mean[ch] = mu;
        inv_std[ch] = 1.0 / (var + eps).sqrt();
        var_unbiased[ch] = if n > 1.0 { ss / (n - 1.0) } else { 0.0 };
    }
    BnStats {
        mean,
        inv_std,
        var_unbiased,
    }
}

pub(crate) fn bn_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    c: usize,
    hw: usize,
    stats: &BnStats,
    gamma: &[T],
    beta: &[T],
) -> Vec<T> {
    let mut y = Vec::with_capacity(x.len());
    for b in 0..batch {
        for ch in 0..c {
            let (mu, inv) = (stats.mean[ch], stats.inv_std[ch]);
            let (gm, bt) = (gamma[ch].to_f64(), beta[ch].to_f64());
            y.extend(
                x[(b * c + ch) * hw..][..hw]
                    .iter()
                    .map(|v| T::from_f64(gm * (v.to_f64() - mu) * inv + bt)),
            );
        }
    }
    y
}

pub(crate) struct BnGrads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

/// `batch_stats`: true when the forward normalised with batch statistics (train mode).
pub(crate) fn bn_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    batch: usize,
    c: usize,
    hw: usize,
    stats: &BnStats,
    gamma: &[T],
    batch_stats: bool,
) -> BnGrads<T> {
    let n = (batch * hw) as f64;
    let mut dx = vec![T::default(); x.len()];
    let mut dgamma = Vec::with_capacity(c);
    let mut dbeta = Vec::with_capacity(c);
    for ch in 0..c {
        let (mu, inv) = (stats.mean[ch], stats.inv_std[ch]);
        let gm = gamma[ch].to_f64();
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..batch {
            let off = (b * c + ch) * hw;
            for (xv, dv) in x[off..off + hw].iter().zip(&dy[off..off + hw]) {
                let d = dv.to_f64();
                sum_dy += d;
                sum_dy_xhat += d * (xv.to_f64() - mu) * inv;
            }
        }
        dgamma.push(T::from_f64(sum_dy_xhat));
        dbeta.push(T::from_f64(sum_dy));
        for b in 0..batch {
            let off = (b * c + ch) * hw;
            for j in off..off + hw {
                let d = dy[j].to_f64();
                let v = if batch_stats {
                    let xhat = (x[j].to_f64() - mu) * inv;
                    gm * inv / n * (n * d - sum_dy - xhat * sum_dy_xhat)
                } else {
                    gm * inv * d
                };
                dx[j] = T::from_f64(v);
            }
        }
    }
    BnGrads { dx, dgamma, dbeta }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PoolGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Returns outputs and, per output, the flat input index of the (first) maximum.
pub(crate) fn maxpool_forward<T: Scalar>(x: &[T], batch: usize, g: &PoolGeom) -> (Vec<T>, Vec<u32>) {
    let in_len = g.c * g.h * g.w;
    let mut y = Vec::with_capacity(batch * g.c * g.oh * g.ow);
    let mut arg = Vec::with_capacity(y.capacity());
    for b in 0..batch {
        for ch in 0..g.c {
            let base = b * in_len + ch * g.h * g.w;
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut best = base + (oy * g.stride) * g.w + ox * g.stride;
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            let idx = base + (oy * g.stride + ky) * g.w + ox * g.stride + kx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    y.push(x[best]);
                    arg.push(best as u32);
                }
            }
        }
    }
    (y, arg)
}

pub(crate) fn maxpool_backward<T: Scalar>(dy: &[T], arg: &[u32], in_total: usize) -> Vec<T> {
    let mut dx = vec![0.0f64; in_total];
    for (d, &a) in dy.iter().zip(arg) {
        dx[a as usize] += d.to_f64();
    }
    dx.into_iter().map(T::from_f64).collect()
}

pub(crate) fn avgpool_forward<T: Scalar>(x: &[T], batch: usize, g: &PoolGeom) -> Vec<T> {
    let in_len = g.c * g.h * g.w;
    let area = (g.k * g.k) as f64;
    let mut y = Vec::with_capacity(batch * g.c * g.oh * g.ow);
    for b in 0..batch {
        for ch in 0..g.c {
            let base = b * in_len + ch * g.h * g.w;
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut s = 0.0;
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            s += x[base + (oy * g.stride + ky) * g.w + ox * g.stride + kx].to_f64();
                        }
                    }
                    y.push(T::from_f64(s / area));
                }
            }
        }
    }
    y
}

pub(crate) fn avgpool_backward<T: Scalar>(dy: &[T], batch: usize, g: &PoolGeom) -> Vec<T> {
    let in_len = g.c * g.h * g.w;
    let area = (g.k * g.k) as f64;
    let mut dx = vec![0.0f64; batch * in_len];
    let mut it = dy.iter();
    for b in 0..batch {
        for ch in 0..g.c {
            let base = b * in_len + ch * g.h * g.w;
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let d = it.next().expect("dy length").to_f64() / area;
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            dx[base + (oy * g.stride + ky) * g.w + ox * g.stride + kx] += d;
                        }
                    }
                }
            }
        }
    }
    dx.into_iter().map(T::from_f64).collect()
}

pub(crate) fn gap_forward<T: Scalar>(x: &[T], batch: usize, c: usize, hw: usize) -> Vec<T> {
    (0..batch * c)
        .map(|bc| {
            let s: f64 = x[bc * hw..(bc + 1) * hw].iter().map(|v| v.to_f64()).sum();
            T::from_f64(s / hw as f64)
        })
        .collect()
}

pub(crate) fn gap_backward<T: Scalar>(dy: &[T], hw: usize) -> Vec<T> {
    dy.iter()
        .flat_map(|d| std::iter::repeat_n(T::from_f64(d.to_f64() / hw as f64), hw))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution, independent of im2col.
    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut y = vec![0.0; g.o * g.oh * g.ow];
        for o in 0..g.o {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut s = 0.0;
                    for c in 0..g.c {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                    s += w[((o * g.c + c) * g.k + ky) * g.k + kx]
                                        * x[(c * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                    }
                    y[(o * g.oh + oy) * g.ow + ox] = s;
                }
            }
        }
        y
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        for &(stride, pad) in &[(1, 1), (2, 1), (1, 0), (2, 0)] {
            let g = ConvGeom {
                c: 2,
                h: 7,
                w: 6,
                o: 3,
                k: 3,
                stride,
                pad,
                oh: (7 + 2 * pad - 3) / stride + 1,
                ow: (6 + 2 * pad - 3) / stride + 1,
            };
            let x: Vec<f64> = (0..84).map(|i| ((i * 37 % 23) as f64 - 11.0) / 7.0).collect();
            let w: Vec<f64> = (0..54).map(|i| ((i * 13 % 17) as f64 - 8.0) / 5.0).collect();
            let fast = conv2d_forward(&x, 1, &w, None, &g);
            let slow = naive_conv(&x, &w, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}
