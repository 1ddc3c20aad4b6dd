//! Fine-grained aware network applied to conv3 features.
//!
//! Two parallel modules see the same input `X` (n, C, H, W):
//!
//! * holistic correlation: an encoder-decoder (two stride-2 convs, two
//!   stride-2 transposed convs) produces a single-channel map; its sigmoid
//!   gates `X` with a channel broadcast.
//! * pixel correlation: non-local attention, `X + delta · Σ_j s_ij W_g x_j`
//!   with `s_ij = softmax_j(⟨W_q x_i, W_k x_j⟩)`.
//!
//! The two outputs are concatenated on the channel axis and fused back to
//! `C` channels by a 1×1 conv.

use crate::error::{Error, Result};
use crate::rng::Xoshiro256;
use crate::tensor::{
    conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward, gemm, relu,
    relu_backward, sigmoid, sigmoid_backward, softmax_rows, softmax_rows_backward, ParamSet,
    Real, Tensor,
};

pub const ENC1: &str = "fanet.enc1";
pub const ENC2: &str = "fanet.enc2";
pub const DEC1: &str = "fanet.dec1";
pub const DEC2: &str = "fanet.dec2";
pub const WQ: &str = "fanet.wq";
pub const WK: &str = "fanet.wk";
pub const WG: &str = "fanet.wg";
pub const FUSE: &str = "fanet.fuse";
pub const DELTA: &str = "fanet.delta";

const ENC_K: usize = 5;
const ENC_PAD: usize = 2;
const DEC_K: usize = 4;
const DEC_PAD: usize = 1;
const STRIDE: usize = 2;

fn w(layer: &str) -> String {
    format!("{layer}.weight")
}

fn b(layer: &str) -> String {
    format!("{layer}.bias")
}

/// Channel schedule of a FANet over `channels` input channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FanetLayout {
    pub channels: usize,
}

impl FanetLayout {
    pub fn new(channels: usize) -> Result<Self> {
        if channels < 4 || channels % 4 != 0 {
            return Err(Error::Config(format!(
                "FANet needs a channel count divisible by 4, got {channels}"
            )));
        }
        Ok(Self { channels })
    }

    fn half(&self) -> usize {
        self.channels / 2
    }

    fn quarter(&self) -> usize {
        self.channels / 4
    }

    /// Reads the layout back from existing parameters.
    pub fn of<T: Real>(params: &ParamSet<T>) -> Self {
        Self {
            channels: params.get(&w(WG)).n(),
        }
    }
}

/// Builds the FANet parameters: He-initialized encoder/decoder, small
/// projections, fuse conv set to the branch average plus noise, delta 0.
pub fn build_fanet<T: Real>(layout: FanetLayout, seed: u64) -> Result<ParamSet<T>> {
    let (c, h, q) = (layout.channels, layout.half(), layout.quarter());
    let mut rng = Xoshiro256::seed_from(seed);
    let mut p = ParamSet::new();
    let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
    p.insert(w(ENC1), Tensor::randn([h, c, ENC_K, ENC_K], he(c * 25), &mut rng))?;
    p.insert(b(ENC1), Tensor::zeros([h, 1, 1, 1]))?;
    p.insert(w(ENC2), Tensor::randn([q, h, ENC_K, ENC_K], he(h * 25), &mut rng))?;
    p.insert(b(ENC2), Tensor::zeros([q, 1, 1, 1]))?;
    // transposed kernels are (in, out, k, k); fan-in counts overlapping taps
    p.insert(w(DEC1), Tensor::randn([q, h, DEC_K, DEC_K], he(q * 4), &mut rng))?;
    p.insert(b(DEC1), Tensor::zeros([h, 1, 1, 1]))?;
    p.insert(w(DEC2), Tensor::randn([h, 1, DEC_K, DEC_K], (1.0 / (h * 4) as f64).sqrt(), &mut rng))?;
    p.insert(b(DEC2), Tensor::zeros([1, 1, 1, 1]))?;
    let proj = (1.0 / c as f64).sqrt();
    p.insert(w(WQ), Tensor::randn([h, c, 1, 1], proj, &mut rng))?;
    p.insert(b(WQ), Tensor::zeros([h, 1, 1, 1]))?;
    p.insert(w(WK), Tensor::randn([h, c, 1, 1], proj, &mut rng))?;
    p.insert(b(WK), Tensor::zeros([h, 1, 1, 1]))?;
    p.insert(w(WG), Tensor::randn([c, c, 1, 1], proj, &mut rng))?;
    p.insert(b(WG), Tensor::zeros([c, 1, 1, 1]))?;
    let mut fuse = Tensor::<T>::randn([c, 2 * c, 1, 1], 0.01, &mut rng);
    for o in 0..c {
        let half = T::of(0.5);
        *fuse.at_mut(o, o, 0, 0) = *fuse.at_mut(o, o, 0, 0) + half;
        *fuse.at_mut(o, c + o, 0, 0) = *fuse.at_mut(o, c + o, 0, 0) + half;
    }
    p.insert(w(FUSE), fuse)?;
    p.insert(b(FUSE), Tensor::zeros([c, 1, 1, 1]))?;
    p.insert(DELTA, Tensor::scalar(T::zero()))?;
    Ok(p)
}

fn check_input<T: Real>(x: &Tensor<T>, params: &ParamSet<T>) -> Result<()> {
    let layout = FanetLayout::of(params);
    if x.c() != layout.channels {
        return Err(Error::shape(
            "fanet",
            format!("channel axis: expected {}, got {}", layout.channels, x.c()),
        ));
    }
    if x.h() < 4 || x.w() < 4 {
        return Err(Error::shape(
            "fanet",
            format!("spatial size {}x{} below 4", x.h(), x.w()),
        ));
    }
    Ok(())
}

fn bias<'a, T: Real>(params: &'a ParamSet<T>, layer: &str) -> &'a [T] {
    params.get(&b(layer)).data()
}

fn accumulate<T: Real>(grads: &mut ParamSet<T>, layer: &str, dk: &Tensor<T>, db: &[T]) {
    grads.get_mut(&w(layer)).axpy(T::one(), dk);
    for (a, v) in grads.get_mut(&b(layer)).data_mut().iter_mut().zip(db) {
        *a = *a + *v;
    }
}

/// Values kept from the holistic forward pass.
#[derive(Clone, Debug)]
pub struct HolisticCache<T> {
    x: Tensor<T>,
    e1: Tensor<T>,
    a1: Tensor<T>,
    e2: Tensor<T>,
    a2: Tensor<T>,
    d1: Tensor<T>,
    a3: Tensor<T>,
    gate: Tensor<T>,
}

impl<T: Real> HolisticCache<T> {
    /// The (n, 1, H, W) sigmoid gate.
    pub fn gate(&self) -> &Tensor<T> {
        &self.gate
    }
}

fn broadcast_gate<T: Real>(x: &Tensor<T>, gate: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for s in 0..x.n() {
        let g = gate.plane(s, 0).to_vec();
        for ch in 0..x.c() {
            for (v, &gv) in out.plane_mut(s, ch).iter_mut().zip(&g) {
                *v = *v * gv;
            }
        }
    }
    out
}

pub fn holistic_correlation_cached<T: Real>(
    x: &Tensor<T>,
    params: &ParamSet<T>,
) -> Result<(Tensor<T>, HolisticCache<T>)> {
    check_input(x, params)?;
    let e1 = conv2d(x, params.get(&w(ENC1)), Some(bias(params, ENC1)), STRIDE, ENC_PAD)?;
    let a1 = relu(&e1);
    let e2 = conv2d(&a1, params.get(&w(ENC2)), Some(bias(params, ENC2)), STRIDE, ENC_PAD)?;
    let a2 = relu(&e2);
    let d1 = conv_transpose2d(
        &a2,
        params.get(&w(DEC1)),
        Some(bias(params, DEC1)),
        STRIDE,
        DEC_PAD,
        (a1.h(), a1.w()),
    )?;
    let a3 = relu(&d1);
    let d2 = conv_transpose2d(
        &a3,
        params.get(&w(DEC2)),
        Some(bias(params, DEC2)),
        STRIDE,
        DEC_PAD,
        (x.h(), x.w()),
    )?;
    let gate = sigmoid(&d2);
    let out = broadcast_gate(x, &gate);
    Ok((
        out,
        HolisticCache {
            x: x.clone(),
            e1,
            a1,
            e2,
            a2,
            d1,
            a3,
            gate,
        },
    ))
}

/// `X ⊙ sigmoid(decoder(encoder(X)))`, gate broadcast over channels.
pub fn holistic_correlation<T: Real>(x: &Tensor<T>, params: &ParamSet<T>) -> Result<Tensor<T>> {
    holistic_correlation_cached(x, params).map(|(o, _)| o)
}

/// Returns the gradient w.r.t. the module input; parameter gradients are
/// accumulated into `grads`.
pub fn holistic_backward<T: Real>(
    params: &ParamSet<T>,
    cache: &HolisticCache<T>,
    dout: &Tensor<T>,
    grads: &mut ParamSet<T>,
) -> Result<Tensor<T>> {
    let x = &cache.x;
    let mut dx = broadcast_gate(dout, &cache.gate);
    let mut dgate = Tensor::zeros(cache.gate.dims());
    for s in 0..x.n() {
        let dst = dgate.plane_mut(s, 0);
        for ch in 0..x.c() {
            for ((d, &g), &xv) in dst.iter_mut().zip(dout.plane(s, ch)).zip(x.plane(s, ch)) {
                *d = *d + g * xv;
            }
        }
    }
    let dd2 = sigmoid_backward(&cache.gate, &dgate);
    let g = conv_transpose2d_backward(&cache.a3, params.get(&w(DEC2)), STRIDE, DEC_PAD, &dd2)?;
    accumulate(grads, DEC2, &g.dkernel, &g.dbias);
    let dd1 = relu_backward(&cache.d1, &g.dx);
    let g = conv_transpose2d_backward(&cache.a2, params.get(&w(DEC1)), STRIDE, DEC_PAD, &dd1)?;
    accumulate(grads, DEC1, &g.dkernel, &g.dbias);
    let de2 = relu_backward(&cache.e2, &g.dx);
    let g = conv2d_backward(&cache.a1, params.get(&w(ENC2)), STRIDE, ENC_PAD, &de2)?;
    accumulate(grads, ENC2, &g.dkernel, &g.dbias);
    let de1 = relu_backward(&cache.e1, &g.dx);
    let g = conv2d_backward(x, params.get(&w(ENC1)), STRIDE, ENC_PAD, &de1)?;
    accumulate(grads, ENC1, &g.dkernel, &g.dbias);
    dx.axpy(T::one(), &g.dx);
    Ok(dx)
}

/// Values kept from the pixel-correlation forward pass.
#[derive(Clone, Debug)]
pub struct PixelCache<T> {
    x: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// Row-stochastic N×N map per sample, concatenated.
    s: Vec<T>,
    sp: Tensor<T>,
}

impl<T: Real> PixelCache<T> {
    /// Correlation map of sample `i` as an N×N row-major matrix.
    pub fn map(&self, i: usize) -> &[T] {
        let n = self.x.plane_len();
        &self.s[i * n * n..(i + 1) * n * n]
    }
}

pub fn pixel_correlation_cached<T: Real>(
    x: &Tensor<T>,
    params: &ParamSet<T>,
) -> Result<(Tensor<T>, PixelCache<T>)> {
    let layout = FanetLayout::of(params);
    if x.c() != layout.channels {
        return Err(Error::shape(
            "pixel_correlation",
            format!("channel axis: expected {}, got {}", layout.channels, x.c()),
        ));
    }
    let n = x.plane_len();
    let h = layout.half();
    let c = layout.channels;
    let q = conv2d(x, params.get(&w(WQ)), Some(bias(params, WQ)), 1, 0)?;
    let k = conv2d(x, params.get(&w(WK)), Some(bias(params, WK)), 1, 0)?;
    let v = conv2d(x, params.get(&w(WG)), Some(bias(params, WG)), 1, 0)?;
    let delta = params.scalar(DELTA);
    let mut s_all = Vec::with_capacity(x.n() * n * n);
    let mut sp = Tensor::zeros(x.dims());
    let mut logits = vec![T::zero(); n * n];
    for smp in 0..x.n() {
        gemm(true, false, n, n, h, q.sample(smp), k.sample(smp), &mut logits, false);
        let s = softmax_rows(&logits, n);
        gemm(false, true, c, n, n, v.sample(smp), &s, sp.sample_mut(smp), false);
        s_all.extend_from_slice(&s);
    }
    let mut out = x.clone();
    out.axpy(delta, &sp);
    Ok((
        out,
        PixelCache {
            x: x.clone(),
            q,
            k,
            v,
            s: s_all,
            sp,
        },
    ))
}

/// Row-stochastic spatial correlation map, one N×N matrix per sample
/// (returned as an (n, 1, N, N) tensor).
pub fn pixel_correlation_map<T: Real>(x: &Tensor<T>, params: &ParamSet<T>) -> Result<Tensor<T>> {
    let (_, cache) = pixel_correlation_cached(x, params)?;
    let n = x.plane_len();
    Tensor::from_vec([x.n(), 1, n, n], cache.s)
}

/// `X + delta · S_p`.
pub fn pixel_correlation<T: Real>(x: &Tensor<T>, params: &ParamSet<T>) -> Result<Tensor<T>> {
    pixel_correlation_cached(x, params).map(|(o, _)| o)
}

pub fn pixel_backward<T: Real>(
    params: &ParamSet<T>,
    cache: &PixelCache<T>,
    dout: &Tensor<T>,
    grads: &mut ParamSet<T>,
) -> Result<Tensor<T>> {
    let layout = FanetLayout::of(params);
    let (c, h) = (layout.channels, layout.half());
    let x = &cache.x;
    let n = x.plane_len();
    let delta = params.scalar(DELTA);

    let ddelta = dout.dot(&cache.sp);
    let g = grads.get_mut(DELTA).data_mut();
    g[0] = g[0] + ddelta;

    let mut dq = Tensor::zeros(cache.q.dims());
    let mut dk = Tensor::zeros(cache.k.dims());
    let mut dv = Tensor::zeros(cache.v.dims());
    let mut ds = vec![T::zero(); n * n];
    for smp in 0..x.n() {
        let dsp: Vec<T> = dout.sample(smp).iter().map(|&g| g * delta).collect();
        let s = cache.map(smp);
        gemm(false, false, c, n, n, &dsp, s, dv.sample_mut(smp), false);
        gemm(true, false, n, n, c, &dsp, cache.v.sample(smp), &mut ds, false);
        let dlog = softmax_rows_backward(s, &ds, n);
        gemm(false, true, h, n, n, cache.k.sample(smp), &dlog, dq.sample_mut(smp), false);
        gemm(false, false, h, n, n, cache.q.sample(smp), &dlog, dk.sample_mut(smp), false);
    }
    let mut dx = dout.clone();
    for (layer, d) in [(WQ, &dq), (WK, &dk), (WG, &dv)] {
        let g = conv2d_backward(x, params.get(&w(layer)), 1, 0, d)?;
        accumulate(grads, layer, &g.dkernel, &g.dbias);
        dx.axpy(T::one(), &g.dx);
    }
    Ok(dx)
}

/// Intermediate values of a full FANet pass.
#[derive(Clone, Debug)]
pub struct FanetCache<T> {
    holistic: HolisticCache<T>,
    pixel: PixelCache<T>,
    cat: Tensor<T>,
}

pub fn fanet_forward_cached<T: Real>(
    x: &Tensor<T>,
    params: &ParamSet<T>,
) -> Result<(Tensor<T>, FanetCache<T>)> {
    let (hol, hc) = holistic_correlation_cached(x, params)?;
    let (pix, pc) = pixel_correlation_cached(x, params)?;
    let cat = Tensor::concat_channels(&hol, &pix)?;
    let out = conv2d(&cat, params.get(&w(FUSE)), Some(bias(params, FUSE)), 1, 0)?;
    Ok((
        out,
        FanetCache {
            holistic: hc,
            pixel: pc,
            cat,
        },
    ))
}

/// Concat of both modules followed by the 1×1 fuse conv; output has the
/// input's dims.
pub fn fanet_forward<T: Real>(x: &Tensor<T>, params: &ParamSet<T>) -> Result<Tensor<T>> {
    fanet_forward_cached(x, params).map(|(o, _)| o)
}

pub fn fanet_backward<T: Real>(
    params: &ParamSet<T>,
    cache: &FanetCache<T>,
    dout: &Tensor<T>,
    grads: &mut ParamSet<T>,
) -> Result<Tensor<T>> {
    let g = conv2d_backward(&cache.cat, params.get(&w(FUSE)), 1, 0, dout)?;
    accumulate(grads, FUSE, &g.dkernel, &g.dbias);
    let (dh, dp) = g.dx.split_channels(FanetLayout::of(params).channels);
    let mut dx = holistic_backward(params, &cache.holistic, &dh, grads)?;
    dx.axpy(T::one(), &pixel_backward(params, &cache.pixel, &dp, grads)?);
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Differentiable, FnOp, GradCheckOptions};
    use crate::verify::oracles;

    fn random_params(c: usize, seed: u64) -> ParamSet<f64> {
        let mut p = build_fanet::<f64>(FanetLayout::new(c).unwrap(), seed).unwrap();
        let mut rng = Xoshiro256::seed_from(seed ^ 77);
        // generic point: random biases and a nonzero delta
        for (name, t) in p.iter_mut() {
            if name.ends_with(".bias") || name == DELTA {
                *t = Tensor::randn(t.dims(), 0.3, &mut rng);
            }
        }
        p
    }

    fn zero_gate(p: &mut ParamSet<f64>) {
        for l in [ENC1, ENC2, DEC1, DEC2] {
            for name in [w(l), b(l)] {
                let d = p.get(&name).dims();
                *p.get_mut(&name) = Tensor::zeros(d);
            }
        }
    }

    fn select_holistic(p: &mut ParamSet<f64>, c: usize) {
        let mut fuse = Tensor::zeros([c, 2 * c, 1, 1]);
        for o in 0..c {
            *fuse.at_mut(o, o, 0, 0) = 1.0;
        }
        *p.get_mut(&w(FUSE)) = fuse;
        *p.get_mut(&b(FUSE)) = Tensor::zeros([c, 1, 1, 1]);
    }

    #[test]
    fn zero_transform_gives_half_gate() {
        let mut p = random_params(8, 1);
        zero_gate(&mut p);
        let mut rng = Xoshiro256::seed_from(2);
        let x = Tensor::<f64>::randn([1, 8, 10, 10], 1.0, &mut rng);
        let y = holistic_correlation(&x, &p).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn gate_strictly_inside_unit_interval() {
        let p = build_fanet::<f32>(FanetLayout::new(8).unwrap(), 3).unwrap();
        let mut rng = Xoshiro256::seed_from(4);
        let x = Tensor::<f32>::randn([2, 8, 26, 26], 1.0, &mut rng);
        let (y, cache) = holistic_correlation_cached(&x, &p).unwrap();
        assert!(cache.gate().data().iter().all(|&g| g > 0.0 && g < 1.0));
        for (a, b) in y.data().iter().zip(x.data()) {
            if *b != 0.0 {
                let r = a / b;
                assert!(r > 0.0 && r < 1.0);
            }
        }
    }

    #[test]
    fn holistic_matches_primitive_composition() {
        let p = random_params(8, 5);
        let mut rng = Xoshiro256::seed_from(6);
        let x = Tensor::<f64>::randn([1, 8, 10, 10], 1.0, &mut rng);
        let y = holistic_correlation(&x, &p).unwrap();
        // composition oracle from naive loops
        let e1 = oracles::conv2d_naive(&x, p.get(&w(ENC1)), bias(&p, ENC1), 2, 2).map(|v| v.max(0.0));
        let e2 = oracles::conv2d_naive(&e1, p.get(&w(ENC2)), bias(&p, ENC2), 2, 2).map(|v| v.max(0.0));
        let d1 = oracles::conv_transpose2d_naive(&e2, p.get(&w(DEC1)), bias(&p, DEC1), 2, 1, (5, 5))
            .map(|v| v.max(0.0));
        let d2 = oracles::conv_transpose2d_naive(&d1, p.get(&w(DEC2)), bias(&p, DEC2), 2, 1, (10, 10));
        for ch in 0..8 {
            for yy in 0..10 {
                for xx in 0..10 {
                    let g = 1.0 / (1.0 + (-d2.at(0, 0, yy, xx)).exp());
                    let o = x.at(0, ch, yy, xx) * g;
                    assert!((y.at(0, ch, yy, xx) - o).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn pixel_map_rows_and_symmetry() {
        let p = random_params(4, 7);
        let mut rng = Xoshiro256::seed_from(8);
        let x = Tensor::<f64>::randn([1, 4, 3, 3], 1.0, &mut rng);
        let s = pixel_correlation_map(&x, &p).unwrap();
        for row in s.data().chunks(9) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        // identical feature units
        let mut same = Tensor::<f64>::zeros([1, 4, 3, 3]);
        for ch in 0..4 {
            same.plane_mut(0, ch).iter_mut().for_each(|v| *v = ch as f64 - 1.5);
        }
        let s = pixel_correlation_map(&same, &p).unwrap();
        assert!(s.data().iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-12));
        let single = Tensor::<f64>::randn([1, 4, 1, 1], 1.0, &mut rng);
        let s = pixel_correlation_map(&single, &p).unwrap();
        assert_eq!(s.data(), &[1.0]);
    }

    #[test]
    fn pixel_matches_loop_oracle() {
        let mut p = random_params(4, 9);
        *p.get_mut(DELTA) = Tensor::scalar(0.7);
        let mut rng = Xoshiro256::seed_from(10);
        let x = Tensor::<f64>::randn([1, 4, 3, 3], 1.0, &mut rng);
        let (y, cache) = pixel_correlation_cached(&x, &p).unwrap();
        let (s, o) = oracles::pixel_correlation_naive(
            &x,
            p.get(&w(WQ)),
            bias(&p, WQ),
            p.get(&w(WK)),
            bias(&p, WK),
            p.get(&w(WG)),
            bias(&p, WG),
            0.7,
        );
        for (a, b) in cache.map(0).iter().zip(&s) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in y.data().iter().zip(o.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn delta_zero_is_identity() {
        let p = build_fanet::<f32>(FanetLayout::new(8).unwrap(), 11).unwrap();
        let mut rng = Xoshiro256::seed_from(12);
        let x = Tensor::<f32>::randn([1, 8, 6, 6], 1.0, &mut rng);
        assert_eq!(pixel_correlation(&x, &p).unwrap(), x);
    }

    #[test]
    fn identical_units_with_unit_delta() {
        let mut p = random_params(4, 13);
        *p.get_mut(DELTA) = Tensor::scalar(1.0);
        let mut x = Tensor::<f64>::zeros([1, 4, 3, 3]);
        for ch in 0..4 {
            x.plane_mut(0, ch).iter_mut().for_each(|v| *v = 0.25 * ch as f64);
        }
        let y = pixel_correlation(&x, &p).unwrap();
        let g = conv2d(&x, p.get(&w(WG)), Some(bias(&p, WG)), 1, 0).unwrap();
        let expect = x.add(&g).unwrap();
        for (a, b) in y.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_fuse_reduces_to_holistic() {
        let mut p = random_params(8, 14);
        *p.get_mut(DELTA) = Tensor::scalar(0.0);
        select_holistic(&mut p, 8);
        let mut rng = Xoshiro256::seed_from(15);
        let x = Tensor::<f64>::randn([1, 8, 10, 10], 1.0, &mut rng);
        let y = fanet_forward(&x, &p).unwrap();
        assert_eq!(y.dims(), x.dims());
        assert_eq!(y, holistic_correlation(&x, &p).unwrap());
    }

    #[test]
    fn small_input_rejected() {
        let p = build_fanet::<f32>(FanetLayout::new(8).unwrap(), 0).unwrap();
        assert!(fanet_forward(&Tensor::zeros([1, 8, 3, 6]), &p).is_err());
        assert!(FanetLayout::new(6).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = random_params(4, 16);
        let mut rng = Xoshiro256::seed_from(17);
        let x = Tensor::<f64>::randn([2, 4, 10, 10], 1.0, &mut rng);
        let probe = Tensor::<f64>::randn([2, 4, 10, 10], 1.0, &mut rng);
        let mut full = p.clone();
        full.insert("input", x).unwrap();
        let op = FnOp::new("fanet", |ps: &ParamSet<f64>| {
            let x = ps.get("input");
            let (y, cache) = fanet_forward_cached(x, ps)?;
            let mut g = ps.zeros_like();
            let dx = fanet_backward(ps, &cache, &probe, &mut g)?;
            *g.get_mut("input") = dx;
            Ok((y.dot(&probe), g))
        });
        // the key bias shifts every logit of a softmax row equally, so its
        // gradient is exactly zero and only rounding noise (~1e-9) remains
        let opts = GradCheckOptions {
            floor: 1e-5,
            ..Default::default()
        };
        let r = grad_check(&op, &full, &opts).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
        let (_, g) = op.value_and_grad(&full).unwrap();
        assert!(g.get(&b(WK)).max_abs() < 1e-12);
    }

    #[test]
    fn every_parameter_gets_gradient() {
        let mut p = build_fanet::<f64>(FanetLayout::new(8).unwrap(), 18).unwrap();
        *p.get_mut(DELTA) = Tensor::scalar(0.1);
        let mut rng = Xoshiro256::seed_from(19);
        let x = Tensor::<f64>::randn([1, 8, 10, 10], 1.0, &mut rng);
        let probe = Tensor::<f64>::randn([1, 8, 10, 10], 1.0, &mut rng);
        let (_, cache) = fanet_forward_cached(&x, &p).unwrap();
        let mut g = p.zeros_like();
        fanet_backward(&p, &cache, &probe, &mut g).unwrap();
        for (name, t) in g.iter() {
            if name == b(WK) {
                continue;
            }
            assert!(t.max_abs() > 1e-10, "{name} has zero gradient");
        }
    }
}
