//! Solves the correlation filter for an impulse template and shows how the
//! regularizer flattens the recovered response.
//!
//! `cargo run --example cf_filter`

use mmnet::heads::{cf_block, gaussian_label, CfConfig};
use mmnet::tensor::Tensor;

/// Circular cross-correlation of filter `f` with plane `x`.
fn response(f: &[f64], x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for (dy, dx) in (0..n).flat_map(|dy| (0..n).map(move |dx| (dy, dx))) {
        out[dy * n + dx] = (0..n * n)
            .map(|k| {
                let (y, x0) = (k / n, k % n);
                f[k] * x[((y + dy) % n) * n + (x0 + dx) % n]
            })
            .sum();
    }
    out
}

fn main() -> mmnet::Result<()> {
    let n = 9;
    let mut z = Tensor::<f64>::zeros([1, 1, n, n]);
    *z.at_mut(0, 0, n / 2, n / 2) = 1.0;
    let label = gaussian_label::<f64>(n, n, CfConfig::default().sigma_frac);

    for lambda in [0.0, 1e-2, 1.0] {
        let cfg = CfConfig {
            lambda,
            window: false,
            ..Default::default()
        };
        let f = cf_block(&z, &cfg)?;
        let r = response(f.plane(0, 0), z.plane(0, 0), n);
        let err = r.iter().zip(label.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let peak = r.iter().cloned().fold(f64::MIN, f64::max);
        println!("lambda {lambda:<5}  peak {peak:.4}  max dev from label {err:.2e}");
    }
    Ok(())
}
