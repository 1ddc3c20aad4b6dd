//! Correlation-filter block: turns template features into a discriminative
//! filter by per-channel ridge regression in the Fourier domain.
//!
//! For windowed template channels `z_c` with spectra `Ẑ_c` and a Gaussian
//! label `g` with spectrum `Ĝ`:
//!
//! ```text
//! filter_c = Re ifft( conj(Ĝ) · Ẑ_c / (Σ_c |Ẑ_c|² + λ) )
//! ```
//!
//! The label peaks at zero displacement (index (0, 0), wrapping), so a
//! filter computed from a centered target stays spatially aligned with it.

use crate::error::{Error, Result};
use crate::tensor::{fft2d, ifft2d_complex, ComplexTensor, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct CfConfig {
    /// Ridge coefficient added to the shared spectral energy.
    pub lambda: f64,
    /// Gaussian label bandwidth as a fraction of the template side.
    pub sigma_frac: f64,
    pub window: bool,
}

impl Default for CfConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            sigma_frac: 0.1,
            window: true,
        }
    }
}

impl CfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("cf lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.sigma_frac > 0.0) {
            return Err(Error::Config(format!(
                "cf label bandwidth must be > 0, got {}",
                self.sigma_frac
            )));
        }
        Ok(())
    }
}

/// Raised-cosine window without zero endpoints, `0.5·(1 − cos(2πk/(n+1)))`
/// for k = 1..=n.
pub fn hann<T: Real>(n: usize) -> Vec<T> {
    (1..=n)
        .map(|k| {
            T::of(0.5 * (1.0 - (2.0 * std::f64::consts::PI * k as f64 / (n + 1) as f64).cos()))
        })
        .collect()
}

/// Separable 2-D window as an h×w row-major plane.
pub fn hann2d<T: Real>(h: usize, w: usize) -> Vec<T> {
    let (wy, wx) = (hann::<T>(h), hann::<T>(w));
    wy.iter().flat_map(|&a| wx.iter().map(move |&b| a * b)).collect()
}

/// Zero-displacement Gaussian label on an h×w torus.
pub fn gaussian_label<T: Real>(h: usize, w: usize, sigma_frac: f64) -> Tensor<T> {
    let sigma = sigma_frac * h.min(w) as f64;
    let mut g = Tensor::zeros([1, 1, h, w]);
    for y in 0..h {
        let dy = y.min(h - y) as f64;
        for x in 0..w {
            let dx = x.min(w - x) as f64;
            *g.at_mut(0, 0, y, x) = T::of((-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp());
        }
    }
    g
}

/// State needed to differentiate through the block.
#[derive(Clone, Debug)]
pub struct CfCache<T> {
    window: Option<Vec<T>>,
    z_hat: ComplexTensor<T>,
    g_hat: ComplexTensor<T>,
    denom: Vec<T>,
    h_hat: ComplexTensor<T>,
}

pub fn cf_block_cached<T: Real>(template: &Tensor<T>, cfg: &CfConfig) -> Result<(Tensor<T>, CfCache<T>)> {
    cfg.validate()?;
    let [n, c, h, w] = template.dims();
    if n != 1 {
        return Err(Error::shape("cf_block", format!("batch axis must be 1, got {n}")));
    }
    if h < 3 || w < 3 {
        return Err(Error::shape("cf_block", format!("template {h}x{w} smaller than 3x3")));
    }
    let p = h * w;
    let window = cfg.window.then(|| hann2d::<T>(h, w));
    let mut z = template.clone();
    if let Some(win) = &window {
        for ch in 0..c {
            for (v, &wv) in z.plane_mut(0, ch).iter_mut().zip(win) {
                *v = *v * wv;
            }
        }
    }
    let z_hat = fft2d(&z);
    let g_hat = fft2d(&gaussian_label::<T>(h, w, cfg.sigma_frac));
    let lambda = T::of(cfg.lambda);
    let mut denom = vec![lambda; p];
    for ch in 0..c {
        for (d, zv) in denom.iter_mut().zip(z_hat.plane(0, ch)) {
            *d = *d + zv.norm_sqr();
        }
    }
    if denom.iter().any(|d| !(*d > T::zero())) {
        return Err(Error::NonFinite(
            "cf_block: zero spectral energy with lambda = 0".into(),
        ));
    }
    let mut h_hat = ComplexTensor::zeros(template.dims());
    for ch in 0..c {
        let zp = z_hat.plane(0, ch);
        let gp = g_hat.plane(0, 0);
        for (k, hv) in h_hat.plane_mut(0, ch).iter_mut().enumerate() {
            *hv = gp[k].conj() * zp[k] / denom[k];
        }
    }
    let filter = ifft2d_complex(&h_hat).real();
    Ok((
        filter,
        CfCache {
            window,
            z_hat,
            g_hat,
            denom,
            h_hat,
        },
    ))
}

/// Per-channel discriminative correlation filter of a (1, C, h, w) template.
pub fn cf_block<T: Real>(template: &Tensor<T>, cfg: &CfConfig) -> Result<Tensor<T>> {
    cf_block_cached(template, cfg).map(|(f, _)| f)
}

/// Gradient w.r.t. the template given the gradient w.r.t. the filter.
pub fn cf_block_backward<T: Real>(cache: &CfCache<T>, dfilter: &Tensor<T>) -> Tensor<T> {
    let [_, c, h, w] = dfilter.dims();
    let n = T::of((h * w) as f64);
    // gradient w.r.t. the filter spectrum H (as ∂/∂Re + i∂/∂Im)
    let mut g_h = fft2d(dfilter);
    g_h.data_mut().iter_mut().for_each(|v| *v = *v / n);

    let p = h * w;
    let mut d_denom = vec![T::zero(); p];
    for ch in 0..c {
        for ((dd, gh), hh) in d_denom
            .iter_mut()
            .zip(g_h.plane(0, ch))
            .zip(cache.h_hat.plane(0, ch))
        {
            *dd = *dd - (gh.conj() * hh).re;
        }
    }
    for (dd, d) in d_denom.iter_mut().zip(&cache.denom) {
        *dd = *dd / *d;
    }

    let two = T::of(2.0);
    let mut g_z = ComplexTensor::zeros(dfilter.dims());
    let gp = cache.g_hat.plane(0, 0);
    for ch in 0..c {
        let gh = g_h.plane(0, ch).to_vec();
        let zp = cache.z_hat.plane(0, ch);
        for (k, out) in g_z.plane_mut(0, ch).iter_mut().enumerate() {
            *out = gp[k] * gh[k] / cache.denom[k] + zp[k] * (two * d_denom[k]);
        }
    }
    // adjoint of the real-input forward DFT: N · Re(ifft(G))
    let back = ifft2d_complex(&g_z);
    let mut dz = Tensor::zeros(dfilter.dims());
    for ch in 0..c {
        let src = back.plane(0, ch);
        for (k, v) in dz.plane_mut(0, ch).iter_mut().enumerate() {
            let wv = cache.window.as_ref().map_or(T::one(), |win| win[k]);
            *v = src[k].re * n * wv;
        }
    }
    dz
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Xoshiro256;
    use crate::tensor::{grad_check, FnOp, GradCheckOptions, ParamSet};
    use crate::verify::oracles;

    #[test]
    fn reproduces_label_on_delta_template() {
        let (h, w) = (6, 6);
        let mut z = Tensor::<f64>::zeros([1, 1, h, w]);
        *z.at_mut(0, 0, h / 2, w / 2) = 1.0;
        let cfg = CfConfig {
            lambda: 0.0,
            window: false,
            ..Default::default()
        };
        let f = cf_block(&z, &cfg).unwrap();
        let r = oracles::circular_xcorr(f.plane(0, 0), z.plane(0, 0), h, w);
        let g = gaussian_label::<f64>(h, w, cfg.sigma_frac);
        for (a, b) in r.iter().zip(g.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn reproduces_label_on_generic_template() {
        let mut rng = Xoshiro256::seed_from(1);
        let z = Tensor::<f64>::randn([1, 1, 10, 10], 1.0, &mut rng);
        let cfg = CfConfig {
            lambda: 0.0,
            window: false,
            sigma_frac: 0.2,
        };
        let f = cf_block(&z, &cfg).unwrap();
        let r = oracles::circular_xcorr(f.plane(0, 0), z.plane(0, 0), 10, 10);
        let g = gaussian_label::<f64>(10, 10, 0.2);
        for (a, b) in r.iter().zip(g.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn large_lambda_is_scaled_label_correlation() {
        let mut rng = Xoshiro256::seed_from(2);
        let z = Tensor::<f64>::randn([1, 2, 6, 6], 1.0, &mut rng);
        let lambda = 1e9;
        let cfg = CfConfig {
            lambda,
            window: false,
            sigma_frac: 0.1,
        };
        let f = cf_block(&z, &cfg).unwrap();
        // asymptote: filter ≈ corr(g, z) / λ, with corr(g, z)[n] = Σ_m g[m] z[m + n]
        let g = gaussian_label::<f64>(6, 6, 0.1);
        for ch in 0..2 {
            let expect = oracles::circular_xcorr(g.plane(0, 0), z.plane(0, ch), 6, 6);
            for (a, b) in f.plane(0, ch).iter().zip(&expect) {
                let scaled = a * lambda;
                assert!((scaled - b).abs() <= 1e-3 * b.abs().max(1e-3), "{scaled} vs {b}");
            }
        }
    }

    #[test]
    fn negative_lambda_rejected() {
        let cfg = CfConfig {
            lambda: -1.0,
            ..Default::default()
        };
        assert!(matches!(
            cf_block(&Tensor::<f32>::full([1, 1, 6, 6], 1.0), &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Xoshiro256::seed_from(3);
        let mut p = ParamSet::new();
        p.insert("template", Tensor::<f64>::randn([1, 2, 6, 6], 1.0, &mut rng)).unwrap();
        let probe = Tensor::<f64>::randn([1, 2, 6, 6], 1.0, &mut rng);
        for window in [false, true] {
            let cfg = CfConfig {
                lambda: 0.05,
                window,
                sigma_frac: 0.15,
            };
            let op = FnOp::new("cf_block", |ps: &ParamSet<f64>| {
                let (f, cache) = cf_block_cached(ps.get("template"), &cfg)?;
                let mut g = ps.zeros_like();
                *g.get_mut("template") = cf_block_backward(&cache, &probe);
                Ok((f.dot(&probe), g))
            });
            let r = grad_check(&op, &p, &GradCheckOptions::default()).unwrap();
            assert!(r.max_rel_err < 1e-4, "{r:?}");
        }
    }
}
