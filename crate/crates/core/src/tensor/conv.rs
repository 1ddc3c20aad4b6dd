//! Convolution and transposed convolution via im2col + GEMM.

use super::{gemm, Real, Tensor};
use crate::error::{Error, Result};

/// Output length of a strided, padded convolution along one axis, or
/// `None` when the kernel does not fit.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Geometry shared by im2col and col2im: an image of `h`×`w` is sampled on
/// an `ho`×`wo` grid; grid cell (oy, ox) with tap (ky, kx) reads image
/// pixel (oy·s − p + ky, ox·s − p + kx), zero outside the image.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self, channels: usize) -> usize {
        channels * self.kh * self.kw
    }
    fn cols(&self) -> usize {
        self.ho * self.wo
    }
    fn is_identity(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose tap `kx` lands inside a row of width `w`.
fn valid_cols(g: &Geometry, kx: usize) -> (usize, usize) {
    let (s, off) = (g.stride as isize, kx as isize - g.pad as isize);
    // smallest ox with ox·s + off ≥ 0, and one past the largest with < w
    let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
    let hi = if off >= g.w as isize {
        0
    } else {
        (((g.w as isize - off + s - 1) / s) as usize).min(g.wo)
    };
    (lo.min(hi), hi)
}

fn im2col<T: Real>(img: &[T], channels: usize, g: &Geometry, cols: &mut [T]) {
    let p = g.cols();
    let (s, pad) = (g.stride as isize, g.pad as isize);
    for c in 0..channels {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kx);
                let off = kx as isize - pad;
                for oy in 0..g.ho {
                    let iy = oy as isize * s - pad + ky as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].iter_mut().for_each(|v| *v = T::zero());
                    line[hi..].iter_mut().for_each(|v| *v = T::zero());
                    if lo < hi {
                        let start = (lo as isize * s + off) as usize;
                        if g.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (v, &x) in line[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                                *v = x;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], channels: usize, g: &Geometry, img: &mut [T]) {
    let p = g.cols();
    let (s, pad) = (g.stride as isize, g.pad as isize);
    for c in 0..channels {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                let off = kx as isize - pad;
                for oy in 0..g.ho {
                    let iy = oy as isize * s - pad + ky as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.wo + lo..oy * g.wo + hi];
                    let start = (lo as isize * s + off) as usize;
                    for (d, &v) in dst[start..].iter_mut().step_by(g.stride).zip(line) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

fn check_bias<T: Real>(op: &'static str, bias: Option<&[T]>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != channels => Err(Error::shape(
            op,
            format!("bias has {} entries for {channels} output channels", b.len()),
        )),
        _ => Ok(()),
    }
}

fn add_bias<T: Real>(out: &mut Tensor<T>, bias: Option<&[T]>) {
    if let Some(b) = bias {
        let [n, c, _, _] = out.dims();
        for s in 0..n {
            for (ch, &bv) in b.iter().enumerate().take(c) {
                out.plane_mut(s, ch).iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
}

fn bias_grad<T: Real>(dout: &Tensor<T>) -> Vec<T> {
    let [n, c, _, _] = dout.dims();
    (0..c)
        .map(|ch| (0..n).map(|s| dout.plane(s, ch).iter().copied().sum::<T>()).sum())
        .collect()
}

/// Gradients of a convolution-like layer.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dkernel: Tensor<T>,
    pub dbias: Vec<T>,
}

fn conv_geometry(
    op: &'static str,
    x: [usize; 4],
    k: [usize; 4],
    stride: usize,
    pad: usize,
) -> Result<Geometry> {
    let [_, cin, h, w] = x;
    let [_, kcin, kh, kw] = k;
    if kcin != cin {
        return Err(Error::shape(
            op,
            format!("channel axis: input has {cin}, kernel expects {kcin}"),
        ));
    }
    if stride == 0 {
        return Err(Error::shape(op, "stride must be at least 1"));
    }
    let ho = conv_out_size(h, kh, stride, pad).ok_or_else(|| {
        Error::shape(op, format!("height axis: kernel {kh} exceeds padded input {}", h + 2 * pad))
    })?;
    let wo = conv_out_size(w, kw, stride, pad).ok_or_else(|| {
        Error::shape(op, format!("width axis: kernel {kw} exceeds padded input {}", w + 2 * pad))
    })?;
    Ok(Geometry {
        h,
        w,
        kh,
        kw,
        stride,
        pad,
        ho,
        wo,
    })
}

/// 2-D cross-correlation (deep-learning "convolution").
///
/// `x` is (n, cin, h, w), `kernel` is (cout, cin, kh, kw); output is
/// (n, cout, ho, wo) with `ho = (h + 2·pad − kh)/stride + 1`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry("conv2d", x.dims(), kernel.dims(), stride, pad)?;
    let cout = kernel.n();
    check_bias("conv2d", bias, cout)?;
    let cin = x.c();
    let (kr, p) = (g.rows(cin), g.cols());
    let mut out = Tensor::zeros([x.n(), cout, g.ho, g.wo]);
    let mut cols = if g.is_identity() {
        Vec::new()
    } else {
        vec![T::zero(); kr * p]
    };
    for s in 0..x.n() {
        let colref: &[T] = if g.is_identity() {
            x.sample(s)
        } else {
            im2col(x.sample(s), cin, &g, &mut cols);
            &cols
        };
        gemm(false, false, cout, p, kr, kernel.data(), colref, out.sample_mut(s), false);
    }
    add_bias(&mut out, bias);
    Ok(out)
}

/// Backward pass of [`conv2d`].
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
    dout: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (dx, dkernel, dbias) = conv2d_backward_impl(x, kernel, stride, pad, dout, true)?;
    Ok(ConvGrads {
        dx: dx.expect("input gradient requested"),
        dkernel,
        dbias,
    })
}

/// Kernel and bias gradients of [`conv2d`] without the input gradient, for
/// layers fed directly by data.
pub fn conv2d_backward_params<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (_, dk, db) = conv2d_backward_impl(x, kernel, stride, pad, dout, false)?;
    Ok((dk, db))
}

type BackwardParts<T> = (Option<Tensor<T>>, Tensor<T>, Vec<T>);

fn conv2d_backward_impl<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
    dout: &Tensor<T>,
    want_dx: bool,
) -> Result<BackwardParts<T>> {
    let g = conv_geometry("conv2d_backward", x.dims(), kernel.dims(), stride, pad)?;
    let cout = kernel.n();
    if dout.dims() != [x.n(), cout, g.ho, g.wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream gradient dims {:?}", dout.dims()),
        ));
    }
    let cin = x.c();
    let (kr, p) = (g.rows(cin), g.cols());
    let mut dx = want_dx.then(|| Tensor::zeros(x.dims()));
    let mut dk = Tensor::zeros(kernel.dims());
    let mut cols = vec![T::zero(); if g.is_identity() { 0 } else { kr * p }];
    let mut dcols = vec![T::zero(); if want_dx { kr * p } else { 0 }];
    for s in 0..x.n() {
        let colref: &[T] = if g.is_identity() {
            x.sample(s)
        } else {
            im2col(x.sample(s), cin, &g, &mut cols);
            &cols
        };
        gemm(false, true, cout, kr, p, dout.sample(s), colref, dk.data_mut(), true);
        let Some(dx) = dx.as_mut() else { continue };
        if g.is_identity() {
            gemm(true, false, kr, p, cout, kernel.data(), dout.sample(s), dx.sample_mut(s), false);
        } else {
            gemm(true, false, kr, p, cout, kernel.data(), dout.sample(s), &mut dcols, false);
            col2im(&dcols, cin, &g, dx.sample_mut(s));
        }
    }
    Ok((dx, dk, bias_grad(dout)))
}

fn transpose_geometry(
    op: &'static str,
    x: [usize; 4],
    k: [usize; 4],
    stride: usize,
    pad: usize,
    target: (usize, usize),
) -> Result<Geometry> {
    let [_, a, hi, wi] = x;
    let [ka, _, kh, kw] = k;
    if ka != a {
        return Err(Error::shape(
            op,
            format!("channel axis: input has {a}, kernel expects {ka}"),
        ));
    }
    if stride == 0 || hi == 0 || wi == 0 {
        return Err(Error::shape(op, "stride and input size must be positive"));
    }
    let check = |axis: &str, inp: usize, k: usize, t: usize| -> Result<()> {
        let natural = ((inp - 1) * stride + k) as isize - 2 * pad as isize;
        if t == 0 || (t as isize - natural).unsigned_abs() >= stride {
            return Err(Error::shape(
                op,
                format!("{axis} axis: target {t} unreachable from {inp} (natural size {natural}, stride {stride})"),
            ));
        }
        Ok(())
    };
    check("height", hi, kh, target.0)?;
    check("width", wi, kw, target.1)?;
    Ok(Geometry {
        h: target.0,
        w: target.1,
        kh,
        kw,
        stride,
        pad,
        ho: hi,
        wo: wi,
    })
}

/// Transposed convolution: the adjoint of [`conv2d`] with the same kernel,
/// stride and padding, producing exactly `target_hw`.
///
/// `kernel` is (a, b, kh, kw) with `a` = input channels here and `b` =
/// output channels, i.e. the kernel of the forward convolution b → a.
/// `target_hw` may differ from the natural output size `(in−1)·s − 2p + k`
/// by less than one stride; extra rows are cropped or left zero.
pub fn conv_transpose2d<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
    target_hw: (usize, usize),
) -> Result<Tensor<T>> {
    let g = transpose_geometry("conv_transpose2d", x.dims(), kernel.dims(), stride, pad, target_hw)?;
    let (a, b) = (kernel.n(), kernel.c());
    check_bias("conv_transpose2d", bias, b)?;
    let (kr, p) = (g.rows(b), g.cols());
    let mut out = Tensor::zeros([x.n(), b, g.h, g.w]);
    let mut cols = vec![T::zero(); kr * p];
    for s in 0..x.n() {
        gemm(true, false, kr, p, a, kernel.data(), x.sample(s), &mut cols, false);
        col2im(&cols, b, &g, out.sample_mut(s));
    }
    add_bias(&mut out, bias);
    Ok(out)
}

/// Backward pass of [`conv_transpose2d`].
pub fn conv_transpose2d_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
    dout: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let target = (dout.h(), dout.w());
    let g = transpose_geometry(
        "conv_transpose2d_backward",
        x.dims(),
        kernel.dims(),
        stride,
        pad,
        target,
    )?;
    let (a, b) = (kernel.n(), kernel.c());
    if dout.n() != x.n() || dout.c() != b {
        return Err(Error::shape(
            "conv_transpose2d_backward",
            format!("upstream gradient dims {:?}", dout.dims()),
        ));
    }
    let (kr, p) = (g.rows(b), g.cols());
    let mut dx = Tensor::zeros(x.dims());
    let mut dk = Tensor::zeros(kernel.dims());
    let mut dcols = vec![T::zero(); kr * p];
    for s in 0..x.n() {
        im2col(dout.sample(s), b, &g, &mut dcols);
        gemm(false, false, a, p, kr, kernel.data(), &dcols, dx.sample_mut(s), false);
        gemm(false, true, a, kr, p, x.sample(s), &dcols, dk.data_mut(), true);
    }
    Ok(ConvGrads {
        dx,
        dkernel: dk,
        dbias: bias_grad(dout),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Xoshiro256;
    use crate::verify::oracles;

    #[test]
    fn constant_field() {
        let x = Tensor::<f32>::full([1, 1, 3, 3], 1.0);
        let k = Tensor::<f32>::full([1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &k, Some(&[0.0]), 1, 0).unwrap();
        assert_eq!(y.dims(), [1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn delta_kernel_crops() {
        let mut rng = Xoshiro256::seed_from(5);
        let x = Tensor::<f32>::randn([1, 1, 6, 7], 1.0, &mut rng);
        let mut k = Tensor::<f32>::zeros([1, 1, 3, 2]);
        k.data_mut()[0] = 1.0;
        let y = conv2d(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.dims(), [1, 1, 4, 6]);
        for yy in 0..4 {
            for xx in 0..6 {
                assert_eq!(y.at(0, 0, yy, xx), x.at(0, 0, yy, xx));
            }
        }
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = Xoshiro256::seed_from(11);
        let x = Tensor::<f32>::randn([1, 2, 5, 5], 1.0, &mut rng);
        let k = Tensor::<f32>::randn([3, 2, 3, 3], 1.0, &mut rng);
        let b = [0.1f32, -0.2, 0.3];
        for (stride, pad) in [(1, 0), (2, 1), (1, 2)] {
            let y = conv2d(&x, &k, Some(&b), stride, pad).unwrap();
            let x64: Tensor<f64> = x.cast();
            let k64: Tensor<f64> = k.cast();
            let b64: Vec<f64> = b.iter().map(|&v| v as f64).collect();
            let o = oracles::conv2d_naive(&x64, &k64, &b64, stride, pad);
            assert_eq!(y.dims(), o.dims());
            // f32 accumulation: bound relative to the output magnitude
            for (a, b) in y.data().iter().zip(o.data()) {
                assert!((*a as f64 - b).abs() < 1e-6 * b.abs().max(1.0), "{a} vs {b}");
            }
            let y64 = conv2d(&x64, &k64, Some(&b64), stride, pad).unwrap();
            for (a, b) in y64.data().iter().zip(o.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn shape_errors_name_axis() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let k = Tensor::<f32>::zeros([1, 3, 3, 3]);
        let e = conv2d(&x, &k, None, 1, 0).unwrap_err().to_string();
        assert!(e.contains("channel"), "{e}");
        let k = Tensor::<f32>::zeros([1, 2, 5, 3]);
        let e = conv2d(&x, &k, None, 1, 0).unwrap_err().to_string();
        assert!(e.contains("height"), "{e}");
    }

    #[test]
    fn transpose_single_tap_spread() {
        let x = Tensor::<f32>::full([1, 1, 1, 1], 3.0);
        let k = Tensor::<f32>::full([1, 1, 2, 2], 1.0);
        let y = conv_transpose2d(&x, &k, None, 1, 0, (2, 2)).unwrap();
        assert_eq!(y.data(), &[3.0; 4]);
    }

    #[test]
    fn transpose_is_adjoint() {
        let mut rng = Xoshiro256::seed_from(3);
        for (h, k, s, p) in [(7usize, 3usize, 1usize, 0usize), (8, 4, 2, 1), (9, 5, 2, 2), (10, 4, 2, 1)] {
            let x = Tensor::<f64>::randn([2, 3, h, h], 1.0, &mut rng);
            let w = Tensor::<f64>::randn([4, 3, k, k], 1.0, &mut rng);
            let cx = conv2d(&x, &w, None, s, p).unwrap();
            let u = Tensor::<f64>::randn(cx.dims(), 1.0, &mut rng);
            let ctu = conv_transpose2d(&u, &w, None, s, p, (h, h)).unwrap();
            let lhs = cx.dot(&u);
            let rhs = x.dot(&ctu);
            assert!(((lhs - rhs) / lhs.abs().max(1.0)).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn transpose_upsample_shape() {
        let x = Tensor::<f32>::zeros([1, 2, 3, 3]);
        let k = Tensor::<f32>::zeros([2, 5, 4, 4]);
        let y = conv_transpose2d(&x, &k, None, 2, 1, (6, 6)).unwrap();
        assert_eq!(y.dims(), [1, 5, 6, 6]);
        // natural size 6; 5 is within the band, 8 is not
        assert!(conv_transpose2d(&x, &k, None, 2, 1, (5, 5)).is_ok());
        assert!(conv_transpose2d(&x, &k, None, 2, 1, (8, 8)).is_err());
    }

    #[test]
    fn transpose_matches_scatter_oracle() {
        let mut rng = Xoshiro256::seed_from(8);
        let x = Tensor::<f64>::randn([1, 2, 3, 4], 1.0, &mut rng);
        let w = Tensor::<f64>::randn([2, 3, 4, 4], 1.0, &mut rng);
        let y = conv_transpose2d(&x, &w, Some(&[0.5, 0.0, -1.0]), 2, 1, (5, 8)).unwrap();
        let o = oracles::conv_transpose2d_naive(&x, &w, &[0.5, 0.0, -1.0], 2, 1, (5, 8));
        for (a, b) in y.data().iter().zip(o.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
