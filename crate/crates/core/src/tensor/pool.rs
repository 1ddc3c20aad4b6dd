use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Flat in-plane argmax position for every pooled output, needed by the
/// backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolIndices {
    input_dims: [usize; 4],
    argmax: Vec<u32>,
}

/// Max pooling without padding. Ties resolve to the first row-major index
/// in the window.
pub fn max_pool2d<T: Real>(x: &Tensor<T>, k: usize, stride: usize) -> Result<(Tensor<T>, PoolIndices)> {
    let [n, c, h, w] = x.dims();
    if k == 0 || stride == 0 {
        return Err(Error::shape("max_pool2d", "window and stride must be positive"));
    }
    if k > h || k > w {
        return Err(Error::shape(
            "max_pool2d",
            format!("window {k} exceeds spatial size {h}x{w}"),
        ));
    }
    let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for s in 0..n {
        for ch in 0..c {
            let plane = x.plane(s, ch);
            let dst = out.plane_mut(s, ch);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = (oy * stride) * w + ox * stride;
                    for ky in 0..k {
                        let row = (oy * stride + ky) * w + ox * stride;
                        for i in row..row + k {
                            if plane[i] > plane[best] {
                                best = i;
                            }
                        }
                    }
                    dst[oy * wo + ox] = plane[best];
                    argmax.push(best as u32);
                }
            }
        }
    }
    Ok((
        out,
        PoolIndices {
            input_dims: x.dims(),
            argmax,
        },
    ))
}

pub fn max_pool2d_backward<T: Real>(dout: &Tensor<T>, idx: &PoolIndices) -> Tensor<T> {
    assert_eq!(dout.len(), idx.argmax.len(), "pool gradient size");
    let mut dx = Tensor::zeros(idx.input_dims);
    let [n, c, ho, wo] = dout.dims();
    let per = ho * wo;
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * per;
            let g = dout.plane(s, ch);
            let plane = dx.plane_mut(s, ch);
            for (j, &gv) in g.iter().enumerate() {
                let i = idx.argmax[base + j] as usize;
                plane[i] = plane[i] + gv;
            }
        }
    }
    dx
}

/// Per-channel spatial mean: (n, c, h, w) → (n, c, 1, 1).
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims();
    if h * w == 0 {
        return Err(Error::shape("global_avg_pool", "empty spatial extent"));
    }
    let inv = T::one() / T::of((h * w) as f64);
    let mut out = Tensor::zeros([n, c, 1, 1]);
    for s in 0..n {
        for ch in 0..c {
            *out.at_mut(s, ch, 0, 0) = x.plane(s, ch).iter().copied().sum::<T>() * inv;
        }
    }
    Ok(out)
}

pub fn global_avg_pool_backward<T: Real>(dout: &Tensor<T>, input_dims: [usize; 4]) -> Tensor<T> {
    let [n, c, h, w] = input_dims;
    let inv = T::one() / T::of((h * w) as f64);
    let mut dx = Tensor::zeros(input_dims);
    for s in 0..n {
        for ch in 0..c {
            let g = dout.at(s, ch, 0, 0) * inv;
            dx.plane_mut(s, ch).iter_mut().for_each(|v| *v = g);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Xoshiro256;
    use crate::verify::oracles;

    #[test]
    fn two_by_two() {
        let x = Tensor::<f32>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = max_pool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn ties_route_to_first_index() {
        let x = Tensor::<f32>::full([1, 1, 4, 4], 7.0);
        let (y, idx) = max_pool2d(&x, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
        let dx = max_pool2d_backward(&Tensor::full(y.dims(), 1.0), &idx);
        let hot: Vec<usize> = dx
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect();
        // top-left of each window
        assert_eq!(hot, vec![0, 2, 8, 10]);
    }

    #[test]
    fn matches_window_oracle() {
        let mut rng = Xoshiro256::seed_from(21);
        let x = Tensor::<f64>::randn([1, 1, 7, 7], 1.0, &mut rng);
        let (y, _) = max_pool2d(&x, 3, 2).unwrap();
        assert_eq!(y, oracles::max_pool_naive(&x, 3, 2));
    }

    #[test]
    fn oversized_window_errors() {
        let x = Tensor::<f32>::zeros([1, 1, 2, 5]);
        assert!(max_pool2d(&x, 3, 1).is_err());
    }

    #[test]
    fn gap_constant_and_permutation() {
        let x = Tensor::<f32>::full([1, 1, 3, 3], 2.5);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);

        let mut rng = Xoshiro256::seed_from(4);
        let x = Tensor::<f64>::randn([1, 3, 4, 4], 1.0, &mut rng);
        let y = global_avg_pool(&x).unwrap();
        for ch in 0..3 {
            let direct: f64 = x.plane(0, ch).iter().sum::<f64>() / 16.0;
            assert!((y.at(0, ch, 0, 0) - direct).abs() < 1e-7);
        }
        let mut perm = x.clone();
        perm.plane_mut(0, 1).reverse();
        perm.plane_mut(0, 2).rotate_left(5);
        let yp = global_avg_pool(&perm).unwrap();
        for (a, b) in y.data().iter().zip(yp.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gap_empty_errors() {
        let x = Tensor::<f32>::zeros([1, 1, 0, 3]);
        assert!(global_avg_pool(&x).is_err());
    }
}
