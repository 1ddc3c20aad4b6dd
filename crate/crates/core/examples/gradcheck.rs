//! Checks a hand-written backward pass against central differences: a
//! strided convolution followed by a sigmoid and a weighted sum.
//!
//! `cargo run --example gradcheck`

use mmnet::rng::Xoshiro256;
use mmnet::tensor::{
    conv2d, conv2d_backward, grad_check, sigmoid, sigmoid_backward, FnOp, GradCheckOptions, ParamSet, Tensor,
};

fn main() -> mmnet::Result<()> {
    let mut rng = Xoshiro256::seed_from(1);
    let mut p = ParamSet::new();
    p.insert("x", Tensor::<f64>::randn([1, 3, 9, 9], 1.0, &mut rng))?;
    p.insert("k", Tensor::randn([4, 3, 3, 3], 0.4, &mut rng))?;
    p.insert("b", Tensor::randn([4, 1, 1, 1], 0.1, &mut rng))?;
    let w = Tensor::<f64>::randn([1, 4, 5, 5], 1.0, &mut rng);

    let op = FnOp::new("conv-sigmoid", |ps: &ParamSet<f64>| {
        let z = conv2d(ps.get("x"), ps.get("k"), Some(ps.get("b").data()), 2, 1)?;
        let y = sigmoid(&z);
        let dz = sigmoid_backward(&y, &w);
        let c = conv2d_backward(ps.get("x"), ps.get("k"), 2, 1, &dz)?;
        let mut g = ps.zeros_like();
        *g.get_mut("x") = c.dx;
        *g.get_mut("k") = c.dkernel;
        g.get_mut("b").data_mut().copy_from_slice(&c.dbias);
        Ok((y.dot(&w), g))
    });
    let r = grad_check(&op, &p, &GradCheckOptions::default())?;
    println!(
        "{}: max rel err {:.2e} over {} coords, worst {}[{}]",
        r.op, r.max_rel_err, r.checked, r.worst.0, r.worst.1
    );
    Ok(())
}
