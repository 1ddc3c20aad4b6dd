//! Matching heads, the CF block, the classifier and the training losses.

pub mod cf;
pub mod loss;

pub use cf::{cf_block, cf_block_backward, cf_block_cached, gaussian_label, hann, hann2d, CfCache, CfConfig};
pub use loss::{
    cross_entropy, logistic_loss, make_label_map, make_label_map_at, multi_task_loss, LabelMap,
    TaskWeights,
};

use crate::error::{Error, Result};
use crate::rng::Xoshiro256;
use crate::tensor::{
    conv2d, conv2d_backward, global_avg_pool, global_avg_pool_backward, ParamSet, Real, Tensor,
};

pub const DIS_GAIN: &str = "heads.dis.gain";
pub const DIS_BIAS: &str = "heads.dis.bias";
pub const FIN_GAIN: &str = "heads.fin.gain";
pub const FIN_BIAS: &str = "heads.fin.bias";
pub const CLS_WEIGHT: &str = "heads.cls.weight";
pub const CLS_BIAS: &str = "heads.cls.bias";

/// Initial response gain; raw inner products are large.
pub const INIT_GAIN: f64 = 1e-3;

/// Which matching branch a response belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Discriminative,
    FineGrained,
}

impl Branch {
    pub fn gain_name(self) -> &'static str {
        match self {
            Branch::Discriminative => DIS_GAIN,
            Branch::FineGrained => FIN_GAIN,
        }
    }

    pub fn bias_name(self) -> &'static str {
        match self {
            Branch::Discriminative => DIS_BIAS,
            Branch::FineGrained => FIN_BIAS,
        }
    }
}

/// Response gains/biases and a `classes`-way classifier over `c5` channels.
pub fn build_heads<T: Real>(c5: usize, classes: usize, seed: u64) -> Result<ParamSet<T>> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    let mut rng = Xoshiro256::seed_from(seed);
    let mut p = ParamSet::new();
    p.insert(DIS_GAIN, Tensor::scalar(T::of(INIT_GAIN)))?;
    p.insert(DIS_BIAS, Tensor::scalar(T::zero()))?;
    p.insert(FIN_GAIN, Tensor::scalar(T::of(INIT_GAIN)))?;
    p.insert(FIN_BIAS, Tensor::scalar(T::zero()))?;
    p.insert(
        CLS_WEIGHT,
        Tensor::randn([classes, c5, 1, 1], (1.0 / c5 as f64).sqrt(), &mut rng),
    )?;
    p.insert(CLS_BIAS, Tensor::zeros([classes, 1, 1, 1]))?;
    Ok(p)
}

/// Number of classifier outputs.
pub fn num_classes<T: Real>(params: &ParamSet<T>) -> usize {
    params.get(CLS_WEIGHT).n()
}

/// Valid-mode sliding inner product of each template with its search map.
///
/// Both inputs carry the same batch size; output is (n, 1, M, M) with
/// `M = hy − hz + 1`.
pub fn cross_correlate<T: Real>(template: &Tensor<T>, search: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, hz, wz] = template.dims();
    let [ny, cy, hy, wy] = search.dims();
    if n != ny || c != cy {
        return Err(Error::shape(
            "cross_correlate",
            format!("template {:?} vs search {:?}", template.dims(), search.dims()),
        ));
    }
    if hz > hy || wz > wy {
        return Err(Error::shape(
            "cross_correlate",
            format!("template {hz}x{wz} larger than search {hy}x{wy}"),
        ));
    }
    let mut maps = Vec::with_capacity(n);
    for s in 0..n {
        let k = template.take_sample(s);
        maps.push(conv2d(&search.take_sample(s), &k, None, 1, 0)?);
    }
    Tensor::stack(&maps)
}

/// Gradients of [`cross_correlate`] w.r.t. template and search.
pub fn cross_correlate_backward<T: Real>(
    template: &Tensor<T>,
    search: &Tensor<T>,
    dresp: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let n = template.n();
    let (mut dt, mut ds) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for s in 0..n {
        let g = conv2d_backward(
            &search.take_sample(s),
            &template.take_sample(s),
            1,
            0,
            &dresp.take_sample(s),
        )?;
        dt.push(g.dkernel);
        ds.push(g.dx);
    }
    Ok((Tensor::stack(&dt)?, Tensor::stack(&ds)?))
}

/// `gain · r + bias` with the branch's scalars.
pub fn apply_affine<T: Real>(raw: &Tensor<T>, params: &ParamSet<T>, branch: Branch) -> Tensor<T> {
    let (g, b) = (params.scalar(branch.gain_name()), params.scalar(branch.bias_name()));
    raw.map(|v| g * v + b)
}

/// Accumulates gain/bias gradients and returns the gradient w.r.t. `raw`.
pub fn affine_backward<T: Real>(
    raw: &Tensor<T>,
    dout: &Tensor<T>,
    params: &ParamSet<T>,
    branch: Branch,
    grads: &mut ParamSet<T>,
) -> Tensor<T> {
    let dg = raw.dot(dout);
    let db = dout.sum();
    let g = grads.get_mut(branch.gain_name()).data_mut();
    g[0] = g[0] + dg;
    let b = grads.get_mut(branch.bias_name()).data_mut();
    b[0] = b[0] + db;
    dout.scale(params.scalar(branch.gain_name()))
}

/// Global average pool followed by the 1×1 classifier conv. Output is
/// (n, K, 1, 1).
pub fn classification_forward<T: Real>(conv5: &Tensor<T>, params: &ParamSet<T>) -> Result<Tensor<T>> {
    let w = params.get(CLS_WEIGHT);
    if w.c() != conv5.c() {
        return Err(Error::shape(
            "classification",
            format!("classifier expects {} channels, got {}", w.c(), conv5.c()),
        ));
    }
    let pooled = global_avg_pool(conv5)?;
    conv2d(&pooled, w, Some(params.get(CLS_BIAS).data()), 1, 0)
}

/// Accumulates classifier gradients; returns the gradient w.r.t. `conv5`.
pub fn classification_backward<T: Real>(
    conv5: &Tensor<T>,
    params: &ParamSet<T>,
    dlogits: &Tensor<T>,
    grads: &mut ParamSet<T>,
) -> Result<Tensor<T>> {
    let pooled = global_avg_pool(conv5)?;
    let g = conv2d_backward(&pooled, params.get(CLS_WEIGHT), 1, 0, dlogits)?;
    grads.get_mut(CLS_WEIGHT).axpy(T::one(), &g.dkernel);
    for (a, v) in grads.get_mut(CLS_BIAS).data_mut().iter_mut().zip(&g.dbias) {
        *a = *a + *v;
    }
    Ok(global_avg_pool_backward(&g.dx, conv5.dims()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, FnOp, GradCheckOptions};
    use crate::verify::oracles;

    #[test]
    fn planted_peak() {
        let mut rng = Xoshiro256::seed_from(5);
        let search = Tensor::<f64>::randn([1, 3, 22, 22], 1.0, &mut rng);
        let (oy, ox) = (11, 4);
        let mut t = Tensor::zeros([1, 3, 6, 6]);
        for c in 0..3 {
            for y in 0..6 {
                for x in 0..6 {
                    *t.at_mut(0, c, y, x) = search.at(0, c, oy + y, ox + x);
                }
            }
        }
        let r = cross_correlate(&t, &search).unwrap();
        assert_eq!(r.dims(), [1, 1, 17, 17]);
        assert_eq!(r.argmax(), oy * 17 + ox);
        let naive = oracles::xcorr_naive(&t, &search);
        for (a, b) in r.data().iter().zip(&naive) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_inputs() {
        let t = Tensor::<f64>::full([1, 4, 6, 6], 0.5);
        let s = Tensor::<f64>::full([1, 4, 22, 22], 3.0);
        let r = cross_correlate(&t, &s).unwrap();
        assert!(r.data().iter().all(|&v| (v - 4.0 * 36.0 * 1.5).abs() < 1e-9));
    }

    #[test]
    fn branch_sizes_align() {
        let r5 = cross_correlate(&Tensor::<f32>::zeros([1, 2, 6, 6]), &Tensor::zeros([1, 2, 22, 22])).unwrap();
        let r3 = cross_correlate(&Tensor::<f32>::zeros([1, 2, 10, 10]), &Tensor::zeros([1, 2, 26, 26])).unwrap();
        assert_eq!(r5.dims(), [1, 1, 17, 17]);
        assert_eq!(r3.dims(), r5.dims());
        assert!(cross_correlate(&Tensor::<f32>::zeros([1, 2, 7, 7]), &Tensor::zeros([1, 2, 6, 6])).is_err());
    }

    #[test]
    fn loss_through_cf_and_xcorr_grad() {
        let mut rng = Xoshiro256::seed_from(9);
        let mut p = ParamSet::new();
        p.insert("template", Tensor::<f64>::randn([1, 2, 6, 6], 1.0, &mut rng)).unwrap();
        let search = Tensor::<f64>::randn([1, 2, 10, 10], 1.0, &mut rng);
        let labels = make_label_map(5, 1.0, 0.5).unwrap();
        let cfg = CfConfig::default();
        let op = FnOp::new("logistic∘xcorr∘cf", |ps: &ParamSet<f64>| {
            let (f, cache) = cf_block_cached(ps.get("template"), &cfg)?;
            let r = cross_correlate(&f, &search)?;
            let (l, dr) = logistic_loss(&r, &labels)?;
            let (df, _) = cross_correlate_backward(&f, &search, &dr)?;
            let mut g = ps.zeros_like();
            *g.get_mut("template") = cf_block_backward(&cache, &df);
            Ok((l, g))
        });
        let r = grad_check(&op, &p, &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn classifier_cases() {
        let mut p = build_heads::<f64>(8, 30, 1).unwrap();
        let mut rng = Xoshiro256::seed_from(2);
        let x = Tensor::<f64>::randn([3, 8, 5, 5], 1.0, &mut rng);

        // mean-then-matrix-multiply oracle
        let logits = classification_forward(&x, &p).unwrap();
        assert_eq!(logits.dims(), [3, 30, 1, 1]);
        let w = p.get(CLS_WEIGHT);
        for s in 0..3 {
            let means: Vec<f64> = (0..8).map(|c| x.plane(s, c).iter().sum::<f64>() / 25.0).collect();
            for k in 0..30 {
                let v: f64 = (0..8).map(|c| w.at(k, c, 0, 0) * means[c]).sum();
                assert!((logits.at(s, k, 0, 0) - v).abs() < 1e-6);
            }
        }

        // spatial permutation invariance
        let mut perm = x.clone();
        for s in 0..3 {
            for c in 0..8 {
                perm.plane_mut(s, c).reverse();
            }
        }
        let lp = classification_forward(&perm, &p).unwrap();
        for (a, b) in lp.data().iter().zip(logits.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        // zero weights leave the bias
        *p.get_mut(CLS_WEIGHT) = Tensor::zeros([30, 8, 1, 1]);
        *p.get_mut(CLS_BIAS) = Tensor::full([30, 1, 1, 1], 0.25);
        let lz = classification_forward(&x, &p).unwrap();
        assert!(lz.data().iter().all(|&v| v == 0.25));

        assert!(classification_forward(&Tensor::<f64>::zeros([1, 7, 5, 5]), &p).is_err());
        assert!(build_heads::<f32>(8, 1, 0).is_err());
    }

    #[test]
    fn classifier_gradient() {
        let mut rng = Xoshiro256::seed_from(4);
        let mut p = build_heads::<f64>(4, 5, 3).unwrap();
        p.insert("x", Tensor::randn([2, 4, 3, 3], 1.0, &mut rng)).unwrap();
        let op = FnOp::new("classification", |ps: &ParamSet<f64>| {
            let logits = classification_forward(ps.get("x"), ps)?;
            let (l, dl) = cross_entropy(&logits, &[1, 3])?;
            let mut g = ps.zeros_like();
            let dx = classification_backward(ps.get("x"), ps, &dl, &mut g)?;
            *g.get_mut("x") = dx;
            Ok((l, g))
        });
        let r = grad_check(&op, &p, &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}
