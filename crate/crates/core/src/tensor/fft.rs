//! Plane-wise 2-D DFT on top of rustfft.
//!
//! Transforms run at the exact plane size (rustfft handles any length), so
//! no padding or cropping is involved. Forward is unnormalized; inverse
//! carries the 1/(h·w) factor.

use num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};

use super::{ComplexTensor, Real, Tensor};

fn transform_planes<T: Real>(x: &mut ComplexTensor<T>, direction: FftDirection) {
    let [n, c, h, w] = x.dims();
    if h == 0 || w == 0 {
        return;
    }
    let mut planner = FftPlanner::<T>::new();
    let row_fft = planner.plan_fft(w, direction);
    let col_fft = planner.plan_fft(h, direction);
    let mut scratch = vec![Complex::new(T::zero(), T::zero()); h * w];
    for s in 0..n {
        for ch in 0..c {
            let plane = x.plane_mut(s, ch);
            row_fft.process(plane);
            for y in 0..h {
                for xx in 0..w {
                    scratch[xx * h + y] = plane[y * w + xx];
                }
            }
            col_fft.process(&mut scratch);
            for y in 0..h {
                for xx in 0..w {
                    plane[y * w + xx] = scratch[xx * h + y];
                }
            }
        }
    }
    if direction == FftDirection::Inverse {
        let inv = T::one() / T::of((h * w) as f64);
        x.data_mut().iter_mut().for_each(|z| *z = *z * inv);
    }
}

/// Forward 2-D DFT of every (h, w) plane of a real tensor.
pub fn fft2d<T: Real>(x: &Tensor<T>) -> ComplexTensor<T> {
    let mut out = ComplexTensor::from_real(x);
    transform_planes(&mut out, FftDirection::Forward);
    out
}

pub fn fft2d_complex<T: Real>(x: &ComplexTensor<T>) -> ComplexTensor<T> {
    let mut out = x.clone();
    transform_planes(&mut out, FftDirection::Forward);
    out
}

/// Inverse 2-D DFT keeping the full complex result.
pub fn ifft2d_complex<T: Real>(x: &ComplexTensor<T>) -> ComplexTensor<T> {
    let mut out = x.clone();
    transform_planes(&mut out, FftDirection::Inverse);
    out
}

/// Inverse 2-D DFT, real part.
pub fn ifft2d<T: Real>(x: &ComplexTensor<T>) -> Tensor<T> {
    ifft2d_complex(x).real()
}
