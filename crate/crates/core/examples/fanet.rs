//! Runs both attention modules on a random feature map: the holistic gate
//! in (0, 1), attention rows that are distributions, and the learned scale
//! that starts the pixel branch as the identity.
//!
//! `cargo run --example fanet`

use mmnet::fanet::{
    build_fanet, fanet_forward, holistic_correlation, pixel_correlation, pixel_correlation_map, FanetLayout, DELTA,
};
use mmnet::rng::Xoshiro256;
use mmnet::tensor::Tensor;

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn main() -> mmnet::Result<()> {
    let mut rng = Xoshiro256::seed_from(5);
    let mut p = build_fanet::<f64>(FanetLayout::new(32)?, 5)?;
    let x = Tensor::<f64>::randn([1, 32, 26, 26], 1.0, &mut rng);

    let h = holistic_correlation(&x, &p)?;
    let ratio: Vec<f64> = h.data().iter().zip(x.data()).filter(|(_, a)| a.abs() > 1e-3).map(|(o, a)| o / a).collect();
    let (lo, hi) = ratio.iter().fold((f64::MAX, f64::MIN), |(l, u), &r| (l.min(r), u.max(r)));
    println!("holistic gate range [{lo:.3}, {hi:.3}]");

    let s = pixel_correlation_map(&x, &p)?;
    let n = x.plane_len();
    let worst = s.data().chunks(n).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    println!("attention {n}x{n}, worst row-sum error {worst:.1e}");

    println!("delta 0: pixel branch moves X by {:.1e}", max_abs_diff(&pixel_correlation(&x, &p)?, &x));
    *p.get_mut(DELTA) = Tensor::scalar(0.5);
    println!("delta 0.5: pixel branch moves X by {:.3}", max_abs_diff(&pixel_correlation(&x, &p)?, &x));

    let y = fanet_forward(&x, &p)?;
    println!("fused output {:?}", y.dims());
    Ok(())
}
