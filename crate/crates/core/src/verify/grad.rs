//! Finite-difference checks of every hand-written backward pass.

use rand_core::RngCore;

use super::Check;
use crate::backbone::BackboneConfig;
use crate::error::Result;
use crate::fanet::{
    build_fanet, fanet_backward, fanet_forward_cached, holistic_backward, holistic_correlation_cached,
    pixel_backward, pixel_correlation_cached, FanetLayout, DELTA,
};
use crate::heads::{
    cf_block_backward, cf_block_cached, classification_backward, classification_forward, cross_entropy,
    logistic_loss, make_label_map, CfConfig, TaskWeights, DIS_GAIN, FIN_GAIN,
};
use crate::network::{batch_loss, build_model, Model, ModelConfig, PairBatch};
use crate::rng::Xoshiro256;
use crate::tensor::{
    conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward, global_avg_pool,
    global_avg_pool_backward, grad_check, max_pool2d, max_pool2d_backward, sigmoid, sigmoid_backward,
    softmax_rows, softmax_rows_backward, FnOp, GradCheckOptions, ParamSet, Tensor,
};

/// Pass bound on the worst relative error.
pub const GRAD_TOL: f64 = 1e-4;

fn check<F>(name: &str, params: &ParamSet<f64>, opts: &GradCheckOptions, f: F) -> Check
where
    F: Fn(&ParamSet<f64>) -> Result<(f64, ParamSet<f64>)>,
{
    let op = FnOp::new(name, f);
    match grad_check(&op, params, opts) {
        Ok(r) => Check::new(
            name,
            r.max_rel_err < GRAD_TOL,
            format!(
                "max rel err {:.2e} over {} coords (worst {}[{}]: {:.6e} vs {:.6e})",
                r.max_rel_err, r.checked, r.worst.0, r.worst.1, r.analytic, r.numeric
            ),
        ),
        Err(e) => Check::new(name, false, e.to_string()),
    }
}

fn params_of(entries: Vec<(&str, Tensor<f64>)>) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for (name, t) in entries {
        p.insert(name, t).expect("distinct names");
    }
    p
}

fn tensor_ops(rng: &mut Xoshiro256, out: &mut Vec<Check>) {
    let opts = GradCheckOptions::default();

    let p = params_of(vec![
        ("x", Tensor::randn([2, 3, 7, 7], 1.0, rng)),
        ("k", Tensor::randn([4, 3, 3, 3], 0.5, rng)),
        ("b", Tensor::randn([4, 1, 1, 1], 0.5, rng)),
    ]);
    let probe = Tensor::randn([2, 4, 4, 4], 1.0, rng);
    out.push(check("conv2d", &p, &opts, |ps| {
        let y = conv2d(ps.get("x"), ps.get("k"), Some(ps.get("b").data()), 2, 1)?;
        let g = conv2d_backward(ps.get("x"), ps.get("k"), 2, 1, &probe)?;
        let mut grads = ps.zeros_like();
        *grads.get_mut("x") = g.dx;
        *grads.get_mut("k") = g.dkernel;
        grads.get_mut("b").data_mut().copy_from_slice(&g.dbias);
        Ok((y.dot(&probe), grads))
    }));

    // natural output side is (4 − 1)·2 − 2 + 4 = 8; ask for one more row
    let p = params_of(vec![
        ("x", Tensor::randn([1, 3, 4, 4], 1.0, rng)),
        ("k", Tensor::randn([3, 2, 4, 4], 0.5, rng)),
        ("b", Tensor::randn([2, 1, 1, 1], 0.5, rng)),
    ]);
    let probe = Tensor::randn([1, 2, 9, 9], 1.0, rng);
    out.push(check("conv_transpose2d", &p, &opts, |ps| {
        let y = conv_transpose2d(ps.get("x"), ps.get("k"), Some(ps.get("b").data()), 2, 1, (9, 9))?;
        let g = conv_transpose2d_backward(ps.get("x"), ps.get("k"), 2, 1, &probe)?;
        let mut grads = ps.zeros_like();
        *grads.get_mut("x") = g.dx;
        *grads.get_mut("k") = g.dkernel;
        grads.get_mut("b").data_mut().copy_from_slice(&g.dbias);
        Ok((y.dot(&probe), grads))
    }));

    let p = params_of(vec![("x", Tensor::randn([1, 2, 9, 9], 1.0, rng))]);
    let probe = Tensor::randn([1, 2, 4, 4], 1.0, rng);
    out.push(check("max_pool2d", &p, &opts, |ps| {
        let (y, idx) = max_pool2d(ps.get("x"), 3, 2)?;
        let mut grads = ps.zeros_like();
        *grads.get_mut("x") = max_pool2d_backward(&probe, &idx);
        Ok((y.dot(&probe), grads))
    }));

    let p = params_of(vec![("x", Tensor::randn([2, 3, 5, 5], 1.0, rng))]);
    let probe = Tensor::randn([2, 3, 1, 1], 1.0, rng);
    out.push(check("global_avg_pool", &p, &opts, |ps| {
        let y = global_avg_pool(ps.get("x"))?;
        let mut grads = ps.zeros_like();
        *grads.get_mut("x") = global_avg_pool_backward(&probe, ps.get("x").dims());
        Ok((y.dot(&probe), grads))
    }));

    let p = params_of(vec![("x", Tensor::randn([1, 1, 3, 5], 2.0, rng))]);
    let probe = Tensor::randn([1, 1, 3, 5], 1.0, rng);
    out.push(check("softmax", &p, &opts, |ps| {
        let y = softmax_rows(ps.get("x").data(), 5);
        let v = y.iter().zip(probe.data()).map(|(a, b)| a * b).sum();
        let dx = softmax_rows_backward(&y, probe.data(), 5);
        let mut grads = ps.zeros_like();
        grads.get_mut("x").data_mut().copy_from_slice(&dx);
        Ok((v, grads))
    }));

    let p = params_of(vec![("x", Tensor::randn([1, 2, 4, 4], 2.0, rng))]);
    let probe = Tensor::randn([1, 2, 4, 4], 1.0, rng);
    out.push(check("sigmoid", &p, &opts, |ps| {
        let y = sigmoid(ps.get("x"));
        let mut grads = ps.zeros_like();
        *grads.get_mut("x") = sigmoid_backward(&y, &probe);
        Ok((y.dot(&probe), grads))
    }));
}

/// FANet parameters at a generic point: random biases and a nonzero delta.
fn fanet_params(c: usize, rng: &mut Xoshiro256) -> Result<ParamSet<f64>> {
    let mut p = build_fanet::<f64>(FanetLayout::new(c)?, rng.next_u64())?;
    for (name, t) in p.iter_mut() {
        if name.ends_with(".bias") || name == DELTA {
            *t = Tensor::randn(t.dims(), 0.3, rng);
        }
    }
    Ok(p)
}

fn fanet_ops(rng: &mut Xoshiro256, out: &mut Vec<Check>) -> Result<()> {
    let mut p = fanet_params(4, rng)?;
    p.insert("input", Tensor::randn([1, 4, 6, 6], 1.0, rng))?;
    let probe = Tensor::randn([1, 4, 6, 6], 1.0, rng);
    // the key bias shifts a whole softmax row, so its true gradient is zero and
    // only rounding noise (about u·|f|/eps) is compared; a wider step keeps it small
    let opts = GradCheckOptions {
        eps: 1e-5,
        floor: 1e-5,
        ..Default::default()
    };
    out.push(check("fanet holistic", &p, &opts, |ps| {
        let (y, cache) = holistic_correlation_cached(ps.get("input"), ps)?;
        let mut grads = ps.zeros_like();
        let d = holistic_backward(ps, &cache, &probe, &mut grads)?;
        *grads.get_mut("input") = d;
        Ok((y.dot(&probe), grads))
    }));
    out.push(check("fanet pixel", &p, &opts, |ps| {
        let (y, cache) = pixel_correlation_cached(ps.get("input"), ps)?;
        let mut grads = ps.zeros_like();
        let d = pixel_backward(ps, &cache, &probe, &mut grads)?;
        *grads.get_mut("input") = d;
        Ok((y.dot(&probe), grads))
    }));
    out.push(check("fanet", &p, &opts, |ps| {
        let (y, cache) = fanet_forward_cached(ps.get("input"), ps)?;
        let mut grads = ps.zeros_like();
        let d = fanet_backward(ps, &cache, &probe, &mut grads)?;
        *grads.get_mut("input") = d;
        Ok((y.dot(&probe), grads))
    }));
    Ok(())
}

fn cf_and_losses(rng: &mut Xoshiro256, out: &mut Vec<Check>) -> Result<()> {
    let opts = GradCheckOptions::default();
    let p = params_of(vec![("template", Tensor::randn([1, 2, 6, 6], 1.0, rng))]);
    let probe = Tensor::randn([1, 2, 6, 6], 1.0, rng);
    for window in [false, true] {
        let cfg = CfConfig {
            lambda: 0.05,
            window,
            sigma_frac: 0.15,
        };
        let name = if window { "cf block (windowed)" } else { "cf block" };
        out.push(check(name, &p, &opts, |ps| {
            let (f, cache) = cf_block_cached(ps.get("template"), &cfg)?;
            let mut grads = ps.zeros_like();
            *grads.get_mut("template") = cf_block_backward(&cache, &probe);
            Ok((f.dot(&probe), grads))
        }));
    }

    let labels = make_label_map(17, 2.0, 0.5)?;
    let p = params_of(vec![("response", Tensor::randn([1, 1, 17, 17], 2.0, rng))]);
    out.push(check("logistic loss", &p, &opts, |ps| {
        let (l, d) = logistic_loss(ps.get("response"), &labels)?;
        let mut grads = ps.zeros_like();
        *grads.get_mut("response") = d;
        Ok((l, grads))
    }));

    let p = params_of(vec![("logits", Tensor::randn([3, 5, 1, 1], 2.0, rng))]);
    out.push(check("cross-entropy loss", &p, &opts, |ps| {
        let (l, d) = cross_entropy(ps.get("logits"), &[0, 4, 2])?;
        let mut grads = ps.zeros_like();
        *grads.get_mut("logits") = d;
        Ok((l, grads))
    }));

    let mut p = crate::heads::build_heads::<f64>(4, 5, rng.next_u64())?;
    p.insert("conv5", Tensor::randn([2, 4, 3, 3], 1.0, rng))?;
    out.push(check("classification head", &p, &opts, |ps| {
        let logits = classification_forward(ps.get("conv5"), ps)?;
        let (l, dl) = cross_entropy(&logits, &[1, 3])?;
        let mut grads = ps.zeros_like();
        let d = classification_backward(ps.get("conv5"), ps, &dl, &mut grads)?;
        *grads.get_mut("conv5") = d;
        Ok((l, grads))
    }));
    Ok(())
}

/// A model at a generic point: small random biases so no ReLU input sits
/// on the kink, a nonzero pixel-attention weight and distinct branch gains.
fn generic_model(cfg: &ModelConfig, rng: &mut Xoshiro256) -> Result<Model<f64>> {
    let mut m = build_model::<f64>(cfg, rng.next_u64())?;
    for (name, t) in m.params.iter_mut() {
        if name.ends_with(".bias") && !name.starts_with("heads.") {
            *t = Tensor::randn(t.dims(), 0.05, rng);
        }
    }
    *m.params.get_mut(DELTA) = Tensor::scalar(0.3);
    *m.params.get_mut(DIS_GAIN) = Tensor::scalar(0.7);
    *m.params.get_mut(FIN_GAIN) = Tensor::scalar(0.4);
    Ok(m)
}

fn random_batch(cfg: &ModelConfig, n: usize, rng: &mut Xoshiro256) -> Result<PairBatch<f64>> {
    let (e, s) = (cfg.backbone.exemplar_size, cfg.backbone.search_size);
    Ok(PairBatch {
        exemplars: Tensor::uniform([n, 1, e, e], 0.0, 1.0, rng),
        searches: Tensor::uniform([n, 1, s, s], 0.0, 1.0, rng),
        classes: (0..n).map(|i| i % cfg.num_classes).collect(),
        labels: (0..n)
            .map(|i| cfg.label_map((0.0, i as f64 - 1.0)))
            .collect::<Result<_>>()?,
    })
}

/// Network-level checks on the desk preset: each branch alone through the
/// whole network, then the weighted composite.
fn network_ops(rng: &mut Xoshiro256, out: &mut Vec<Check>) -> Result<()> {
    let cfg = ModelConfig::new(BackboneConfig::desk());
    let m = generic_model(&cfg, rng)?;
    let batch = random_batch(&cfg, 2, rng)?;
    let opts = GradCheckOptions {
        per_tensor: 2,
        full_sweep_limit: 0,
        floor: 1e-5,
        ..Default::default()
    };
    let cases = [
        ("discriminative branch", TaskWeights { dis: 1.0, cls: 0.0, fin: 0.0 }),
        ("fine-grained branch", TaskWeights { dis: 0.0, cls: 0.0, fin: 1.0 }),
        ("multi-task composite", TaskWeights { dis: 1.0, cls: 0.5, fin: 2.0 }),
    ];
    for (name, weights) in cases {
        out.push(check(name, &m.params, &opts, |ps| {
            let mm = Model {
                config: cfg.clone(),
                params: ps.clone(),
            };
            let (l, _, g) = batch_loss(&mm, &batch, weights, true)?;
            Ok((l.total, g.expect("gradients requested")))
        }));
    }
    Ok(())
}

pub fn grad_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = Xoshiro256::seed_from(seed);
    let mut out = Vec::new();
    tensor_ops(&mut rng, &mut out);
    fanet_ops(&mut rng, &mut out)?;
    cf_and_losses(&mut rng, &mut out)?;
    network_ops(&mut rng, &mut out)?;
    Ok(out)
}
