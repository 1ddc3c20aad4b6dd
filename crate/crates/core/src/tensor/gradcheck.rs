//! Central finite-difference gradient checker (64-bit).

use super::ParamSet;
use crate::error::{Error, Result};
use crate::rng::Xoshiro256;

/// A scalar function of a parameter set with a hand-written gradient.
pub trait Differentiable {
    fn name(&self) -> &str;

    fn value_and_grad(&self, params: &ParamSet<f64>) -> Result<(f64, ParamSet<f64>)>;

    fn value(&self, params: &ParamSet<f64>) -> Result<f64> {
        Ok(self.value_and_grad(params)?.0)
    }
}

/// Wraps a closure as a [`Differentiable`].
pub struct FnOp<F> {
    name: String,
    f: F,
}

impl<F> FnOp<F>
where
    F: Fn(&ParamSet<f64>) -> Result<(f64, ParamSet<f64>)>,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self {
            name: name.into(),
            f,
        }
    }
}

impl<F> Differentiable for FnOp<F>
where
    F: Fn(&ParamSet<f64>) -> Result<(f64, ParamSet<f64>)>,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn value_and_grad(&self, params: &ParamSet<f64>) -> Result<(f64, ParamSet<f64>)> {
        (self.f)(params)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Denominator floor for the relative error, so that coordinates whose
    /// true gradient is zero are judged by absolute error instead.
    pub floor: f64,
    /// Above this many scalars, coordinates are sampled instead of swept.
    pub full_sweep_limit: usize,
    /// Coordinates sampled per tensor when sampling.
    pub per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            floor: 1e-6,
            full_sweep_limit: 10_000,
            per_tensor: 6,
            seed: 0x6772_6164,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: (String, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares the analytic gradient of `op` with central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε` and returns the worst relative error
/// `|a − n| / max(|a|, |n|, floor)`.
pub fn grad_check(
    op: &dyn Differentiable,
    params: &ParamSet<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (f0, grad) = op.value_and_grad(params)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite(format!("{}: value {f0}", op.name())));
    }
    grad.check_aligned(params)?;

    let sweep_all = params.num_scalars() <= opts.full_sweep_limit;
    let mut rng = Xoshiro256::seed_from(opts.seed);
    let mut coords: Vec<(String, usize)> = Vec::new();
    for (name, t) in params.iter() {
        if sweep_all || t.len() <= opts.per_tensor {
            coords.extend((0..t.len()).map(|i| (name.to_string(), i)));
        } else {
            for _ in 0..opts.per_tensor {
                coords.push((name.to_string(), rng.below(t.len() as u64) as usize));
            }
        }
    }

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        op: op.name().to_string(),
        max_rel_err: 0.0,
        worst: (String::new(), 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: coords.len(),
    };
    for (name, i) in coords {
        let orig = params.get(&name).data()[i];
        probe.get_mut(&name).data_mut()[i] = orig + opts.eps;
        let fp = op.value(&probe)?;
        probe.get_mut(&name).data_mut()[i] = orig - opts.eps;
        let fm = op.value(&probe)?;
        probe.get_mut(&name).data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "{}: perturbing {name}[{i}] gave {fp} / {fm}",
                op.name()
            )));
        }
        let numeric = (fp - fm) / (2.0 * opts.eps);
        let analytic = grad.get(&name).data()[i];
        if !analytic.is_finite() {
            return Err(Error::NonFinite(format!(
                "{}: analytic gradient of {name}[{i}] is {analytic}",
                op.name()
            )));
        }
        let denom = analytic.abs().max(numeric.abs()).max(opts.floor);
        let rel = (analytic - numeric).abs() / denom;
        if report.worst.0.is_empty() || rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = (name.clone(), i);
            report.analytic = analytic;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let op = FnOp::new("square", |p: &ParamSet<f64>| {
            let t = p.scalar("theta");
            let mut g = p.zeros_like();
            g.get_mut("theta").data_mut()[0] = 2.0 * t;
            Ok((t * t, g))
        });
        let mut p = ParamSet::new();
        p.insert("theta", Tensor::scalar(3.0)).unwrap();
        let opts = GradCheckOptions {
            eps: 1e-5,
            ..Default::default()
        };
        let r = grad_check(&op, &p, &opts).unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let op = FnOp::new("bad", |p: &ParamSet<f64>| {
            let t = p.scalar("theta");
            let mut g = p.zeros_like();
            g.get_mut("theta").data_mut()[0] = 3.0 * t;
            Ok((t * t, g))
        });
        let mut p = ParamSet::new();
        p.insert("theta", Tensor::scalar(1.5)).unwrap();
        let r = grad_check(&op, &p, &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_err > 0.3);
    }

    #[test]
    fn non_finite_value_names_op() {
        let op = FnOp::new("blowup", |p: &ParamSet<f64>| Ok((f64::NAN, p.zeros_like())));
        let mut p = ParamSet::new();
        p.insert("theta", Tensor::scalar(1.0)).unwrap();
        let e = grad_check(&op, &p, &GradCheckOptions::default()).unwrap_err();
        assert!(e.to_string().contains("blowup"));
    }
}
