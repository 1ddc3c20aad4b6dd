use super::{Real, Tensor};

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Routes gradient through where the forward input was positive.
pub fn relu_backward<T: Real>(x: &Tensor<T>, dout: &Tensor<T>) -> Tensor<T> {
    x.zip_with(dout, "relu_backward", |xv, g| if xv > T::zero() { g } else { T::zero() })
        .expect("relu_backward dims")
}

#[inline]
pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Backward pass of [`sigmoid`] in terms of its output `y`.
pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, dout: &Tensor<T>) -> Tensor<T> {
    y.zip_with(dout, "sigmoid_backward", |yv, g| g * yv * (T::one() - yv))
        .expect("sigmoid_backward dims")
}

/// Softmax over each contiguous row of `cols` elements.
pub fn softmax_rows<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    assert!(cols > 0 && x.len() % cols == 0, "softmax row length");
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - m).exp();
            total = total + *d;
        }
        let inv = T::one() / total;
        dst.iter_mut().for_each(|d| *d = *d * inv);
    }
    out
}

/// Jacobian-vector product of [`softmax_rows`] given its output `y`.
pub fn softmax_rows_backward<T: Real>(y: &[T], dy: &[T], cols: usize) -> Vec<T> {
    assert_eq!(y.len(), dy.len());
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, gr), dr) in y
        .chunks_exact(cols)
        .zip(dy.chunks_exact(cols))
        .zip(dx.chunks_exact_mut(cols))
    {
        let inner: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - inner);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid_scalar(0.0f32), 0.5);
        let hi = sigmoid_scalar(500.0f32);
        let lo = sigmoid_scalar(-500.0f32);
        assert!((hi - 1.0).abs() < 1e-6 && hi.is_finite());
        assert!(lo.abs() < 1e-6 && lo.is_finite());
    }

    #[test]
    fn relu_values() {
        let x = Tensor::<f32>::from_vec([1, 1, 1, 2], vec![-3.0, 3.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 3.0]);
    }

    #[test]
    fn softmax_cases() {
        let y = softmax_rows(&[0.0f64, 0.0, 0.0], 3);
        assert!(y.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let y = softmax_rows(&[2.0f64.ln(), 0.0], 2);
        assert!((y[0] - 2.0 / 3.0).abs() < 1e-15 && (y[1] - 1.0 / 3.0).abs() < 1e-15);
        let y = softmax_rows(&[1000.0f32, 1000.0], 2);
        assert_eq!(y, vec![0.5, 0.5]);
    }

    proptest! {
        #[test]
        fn softmax_rows_are_stochastic(v in proptest::collection::vec(-50.0f32..50.0, 12)) {
            let y = softmax_rows(&v, 4);
            for row in y.chunks(4) {
                let s: f32 = row.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }
}
