//! Slow reference implementations used to check the fast paths.
//!
//! Everything here is written as direct loops over the defining formula and
//! shares no code with the GEMM/FFT kernels it is compared against.

use num_complex::Complex;

use crate::tensor::{ComplexTensor, Tensor};

/// Quadruple-loop convolution with zero padding.
pub fn conv2d_naive(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let [n, cin, h, w] = x.dims();
    let [cout, _, kh, kw] = k.dims();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    for s in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.get(co).copied().unwrap_or(0.0);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.at(s, ci, iy as usize, ix as usize)
                                        * k.at(co, ci, ky, kx);
                                }
                            }
                        }
                    }
                    *out.at_mut(s, co, oy, ox) = acc;
                }
            }
        }
    }
    out
}

/// Scatter form of the transposed convolution: each input cell spreads
/// its kernel-weighted value into the target grid.
pub fn conv_transpose2d_naive(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    bias: &[f64],
    stride: usize,
    pad: usize,
    target: (usize, usize),
) -> Tensor<f64> {
    let [n, a, hi, wi] = x.dims();
    let [_, b, kh, kw] = k.dims();
    let mut out = Tensor::zeros([n, b, target.0, target.1]);
    for s in 0..n {
        for co in 0..b {
            for y in 0..target.0 {
                for xx in 0..target.1 {
                    *out.at_mut(s, co, y, xx) = bias.get(co).copied().unwrap_or(0.0);
                }
            }
        }
        for ci in 0..a {
            for iy in 0..hi {
                for ix in 0..wi {
                    let v = x.at(s, ci, iy, ix);
                    for co in 0..b {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let oy = (iy * stride + ky) as isize - pad as isize;
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if oy >= 0
                                    && ox >= 0
                                    && (oy as usize) < target.0
                                    && (ox as usize) < target.1
                                {
                                    *out.at_mut(s, co, oy as usize, ox as usize) +=
                                        v * k.at(ci, co, ky, kx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn max_pool_naive(x: &Tensor<f64>, k: usize, stride: usize) -> Tensor<f64> {
    let [n, c, h, w] = x.dims();
    let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    for s in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut m = f64::NEG_INFINITY;
                    for ky in 0..k {
                        for kx in 0..k {
                            m = m.max(x.at(s, ch, oy * stride + ky, ox * stride + kx));
                        }
                    }
                    *out.at_mut(s, ch, oy, ox) = m;
                }
            }
        }
    }
    out
}

/// O(n²) direct 2-D DFT, `X[u,v] = Σ x[y,x]·exp(−2πi(uy/h + vx/w))`.
pub fn dft2d_direct(x: &Tensor<f64>) -> ComplexTensor<f64> {
    let [n, c, h, w] = x.dims();
    let mut data = Vec::with_capacity(x.len());
    for s in 0..n {
        for ch in 0..c {
            for u in 0..h {
                for v in 0..w {
                    let mut acc = Complex::new(0.0, 0.0);
                    for yy in 0..h {
                        for xx in 0..w {
                            let phase = -2.0
                                * std::f64::consts::PI
                                * ((u * yy) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                            acc += Complex::from_polar(x.at(s, ch, yy, xx), phase);
                        }
                    }
                    data.push(acc);
                }
            }
        }
    }
    ComplexTensor::from_vec([n, c, h, w], data).expect("dft dims")
}

/// Circular cross-correlation of two equally sized single planes:
/// `r[u] = Σ_n f[n]·z[(n + u) mod size]`.
pub fn circular_xcorr(f: &[f64], z: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut r = vec![0.0; h * w];
    for uy in 0..h {
        for ux in 0..w {
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    acc += f[y * w + x] * z[((y + uy) % h) * w + (x + ux) % w];
                }
            }
            r[uy * w + ux] = acc;
        }
    }
    r
}

/// Sliding inner product of a template over a search map, all channels.
pub fn xcorr_naive(template: &Tensor<f64>, search: &Tensor<f64>) -> Vec<f64> {
    let [_, c, hz, wz] = template.dims();
    let [_, _, hy, wy] = search.dims();
    let (mh, mw) = (hy - hz + 1, wy - wz + 1);
    let mut out = vec![0.0; mh * mw];
    for u in 0..mh {
        for v in 0..mw {
            let mut acc = 0.0;
            for ch in 0..c {
                for y in 0..hz {
                    for x in 0..wz {
                        acc += template.at(0, ch, y, x) * search.at(0, ch, y + u, x + v);
                    }
                }
            }
            out[u * mw + v] = acc;
        }
    }
    out
}

/// Non-local attention written as explicit loops: returns the row-stochastic
/// map `s` (N×N) and `x + delta·Σ_j s_ij (W_g x_j)` for a single sample.
pub fn pixel_correlation_naive(
    x: &Tensor<f64>,
    wq: &Tensor<f64>,
    bq: &[f64],
    wk: &Tensor<f64>,
    bk: &[f64],
    wg: &Tensor<f64>,
    bg: &[f64],
    delta: f64,
) -> (Vec<f64>, Tensor<f64>) {
    let [_, c, h, w] = x.dims();
    let n = h * w;
    let feat = |i: usize, ch: usize| x.at(0, ch, i / w, i % w);
    let project = |wt: &Tensor<f64>, b: &[f64], i: usize| -> Vec<f64> {
        (0..wt.n())
            .map(|o| b[o] + (0..c).map(|ch| wt.at(o, ch, 0, 0) * feat(i, ch)).sum::<f64>())
            .collect()
    };
    let q: Vec<Vec<f64>> = (0..n).map(|i| project(wq, bq, i)).collect();
    let k: Vec<Vec<f64>> = (0..n).map(|i| project(wk, bk, i)).collect();
    let g: Vec<Vec<f64>> = (0..n).map(|i| project(wg, bg, i)).collect();
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for j in 0..n {
            s[i * n + j] = (logits[j] - m).exp() / z;
        }
    }
    let mut out = x.clone();
    for i in 0..n {
        for ch in 0..c {
            let agg: f64 = (0..n).map(|j| s[i * n + j] * g[j][ch]).sum();
            *out.at_mut(0, ch, i / w, i % w) += delta * agg;
        }
    }
    (s, out)
}
