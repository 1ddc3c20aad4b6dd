//! Separable bicubic upsampling of a square response map. The map is signed,
//! so no clamping to an intensity range is applied.

/// Keys cubic convolution kernel with `a = −0.5`.
pub fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Taps and weights for each output sample along one axis. Output pixel `p`
/// samples input coordinate `(p + 0.5)/factor − 0.5`; borders replicate.
fn axis_taps(n: usize, factor: usize) -> Vec<([usize; 4], [f64; 4])> {
    (0..n * factor)
        .map(|p| {
            let x = (p as f64 + 0.5) / factor as f64 - 0.5;
            let x0 = x.floor();
            let mut idx = [0usize; 4];
            let mut w = [0.0; 4];
            for k in 0..4 {
                let xi = x0 + k as f64 - 1.0;
                idx[k] = xi.clamp(0.0, (n - 1) as f64) as usize;
                w[k] = cubic_weight(x - xi);
            }
            (idx, w)
        })
        .collect()
}

/// Upsamples an `n × n` row-major map by `factor` in both directions.
pub fn bicubic_upsample(src: &[f64], n: usize, factor: usize) -> Vec<f64> {
    assert_eq!(src.len(), n * n, "bicubic_upsample: map is not {n}×{n}");
    let taps = axis_taps(n, factor);
    let big = n * factor;
    // rows first: n × big
    let mut tmp = vec![0.0; n * big];
    for r in 0..n {
        let row = &src[r * n..(r + 1) * n];
        for (q, (idx, w)) in taps.iter().enumerate() {
            tmp[r * big + q] = (0..4).map(|k| w[k] * row[idx[k]]).sum();
        }
    }
    let mut out = vec![0.0; big * big];
    for (p, (idx, w)) in taps.iter().enumerate() {
        for q in 0..big {
            out[p * big + q] = (0..4).map(|k| w[k] * tmp[idx[k] * big + q]).sum();
        }
    }
    out
}
