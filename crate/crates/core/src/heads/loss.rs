use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// ±1 ground truth over an M×M response map with per-cell loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub size: usize,
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
}

impl LabelMap {
    pub fn positives(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }
}

/// Label map centered on the map center.
pub fn make_label_map(size: usize, radius_cells: f64, pos_weight_share: f64) -> Result<LabelMap> {
    let c = (size as f64 - 1.0) / 2.0;
    make_label_map_at(size, (c, c), radius_cells, pos_weight_share)
}

/// `+1` within Euclidean `radius_cells` of `center` (row, col), `-1`
/// elsewhere. Positives share `pos_weight_share` of the total weight
/// uniformly, negatives the rest.
pub fn make_label_map_at(
    size: usize,
    center: (f64, f64),
    radius_cells: f64,
    pos_weight_share: f64,
) -> Result<LabelMap> {
    if size == 0 {
        return Err(Error::Config("label map size must be at least 1".into()));
    }
    if !(radius_cells >= 0.0) {
        return Err(Error::Config(format!("label radius must be >= 0, got {radius_cells}")));
    }
    if !(pos_weight_share > 0.0 && pos_weight_share < 1.0) {
        return Err(Error::Config(format!(
            "positive weight share must be in (0, 1), got {pos_weight_share}"
        )));
    }
    let mut values = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 - center.0, x as f64 - center.1);
            let inside = dy * dy + dx * dx <= radius_cells * radius_cells + 1e-9;
            values.push(if inside { 1.0 } else { -1.0 });
        }
    }
    let pos = values.iter().filter(|&&v| v > 0.0).count();
    let neg = values.len() - pos;
    if pos == 0 {
        return Err(Error::Config(format!(
            "no positive cell within radius {radius_cells} of {center:?}"
        )));
    }
    if neg == 0 {
        return Err(Error::Config(format!(
            "radius {radius_cells} leaves no negative cell in a {size}x{size} map"
        )));
    }
    let (wp, wn) = (pos_weight_share / pos as f64, (1.0 - pos_weight_share) / neg as f64);
    let weights = values.iter().map(|&v| if v > 0.0 { wp } else { wn }).collect();
    Ok(LabelMap {
        size,
        values,
        weights,
    })
}

/// `log(1 + exp(z))` without overflow.
#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Weighted mean of `log(1 + exp(−y·o))` and its gradient w.r.t. the
/// response. With uniform weights this is the plain mean over the map.
pub fn logistic_loss<T: Real>(response: &Tensor<T>, labels: &LabelMap) -> Result<(T, Tensor<T>)> {
    if response.len() != labels.size * labels.size || response.h() != labels.size {
        return Err(Error::shape(
            "logistic_loss",
            format!(
                "response {:?} vs {}x{} labels",
                response.dims(),
                labels.size,
                labels.size
            ),
        ));
    }
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(response.dims());
    for (i, (&o, g)) in response.data().iter().zip(grad.data_mut()).enumerate() {
        let (y, wt) = (labels.values[i], labels.weights[i]);
        let o = o.to_f64().unwrap_or(f64::NAN);
        let z = -y * o;
        loss += wt * softplus(z);
        // d/do softplus(−y·o) = −y · sigmoid(−y·o)
        let sig = if z >= 0.0 {
            1.0 / (1.0 + (-z).exp())
        } else {
            let e = z.exp();
            e / (1.0 + e)
        };
        *g = T::of(-y * wt * sig);
    }
    Ok((T::of(loss), grad))
}

/// Mean over the batch of `−log softmax(logits)[class]` and its gradient.
/// `logits` is (n, K, 1, 1).
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, classes: &[usize]) -> Result<(T, Tensor<T>)> {
    let [n, k, h, w] = logits.dims();
    if h * w != 1 || classes.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {:?} with {} labels", logits.dims(), classes.len()),
        ));
    }
    let mut grad = Tensor::zeros(logits.dims());
    let mut total = 0.0;
    for (s, &cls) in classes.iter().enumerate() {
        if cls >= k {
            return Err(Error::Input(format!("class {cls} out of range for {k} classes")));
        }
        let row: Vec<f64> = logits.sample(s).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[cls];
        for (j, g) in grad.sample_mut(s).iter_mut().enumerate() {
            let p = (row[j] - lse).exp();
            let t = if j == cls { 1.0 } else { 0.0 };
            *g = T::of((p - t) / n as f64);
        }
    }
    Ok((T::of(total / n as f64), grad))
}

/// Loss weights of the three tasks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskWeights {
    pub dis: f64,
    pub cls: f64,
    pub fin: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        Self {
            dis: 1.0,
            cls: 1.0,
            fin: 1.0,
        }
    }
}

/// `λ1·l_dis + λ2·l_cls + λ3·l_fin`. The partial derivative w.r.t. each
/// component is its weight.
pub fn multi_task_loss(l_dis: f64, l_cls: f64, l_fin: f64, weights: TaskWeights) -> f64 {
    weights.dis * l_dis + weights.cls * l_cls + weights.fin * l_fin
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn label_map_cases() {
        let l = make_label_map(17, 0.0, 0.5).unwrap();
        assert_eq!(l.positives(), 1);
        assert_eq!(l.values[8 * 17 + 8], 1.0);
        let l = make_label_map(17, 2.0, 0.5).unwrap();
        // counting oracle: integer offsets with dx² + dy² ≤ 4
        let count = (-2i32..=2)
            .flat_map(|dy| (-2i32..=2).map(move |dx| (dy, dx)))
            .filter(|(dy, dx)| dy * dy + dx * dx <= 4)
            .count();
        assert_eq!(count, 13);
        assert_eq!(l.positives(), count);
        assert!((l.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(make_label_map(3, 5.0, 0.5).is_err());
    }

    #[test]
    fn logistic_known_values() {
        let labels = make_label_map(17, 2.0, 0.5).unwrap();
        let (l, _) = logistic_loss(&Tensor::<f64>::zeros([1, 1, 17, 17]), &labels).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);

        let single = LabelMap {
            size: 1,
            values: vec![1.0],
            weights: vec![1.0],
        };
        let (l, _) = logistic_loss(&Tensor::<f64>::full([1, 1, 1, 1], 10.0), &single).unwrap();
        assert!((l - (1.0 + (-10f64).exp()).ln()).abs() < 1e-15);
        assert!((l - 4.5399e-5).abs() < 1e-8);

        let neg = LabelMap {
            size: 1,
            values: vec![-1.0],
            weights: vec![1.0],
        };
        let (l, g) = logistic_loss(&Tensor::<f32>::full([1, 1, 1, 1], 1000.0), &neg).unwrap();
        assert!(l.is_finite() && (l - 1000.0).abs() < 1e-3);
        assert!(g.is_finite());
    }

    #[test]
    fn logistic_dim_mismatch() {
        let labels = make_label_map(17, 2.0, 0.5).unwrap();
        assert!(logistic_loss(&Tensor::<f32>::zeros([1, 1, 16, 16]), &labels).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let mut logits = Tensor::<f64>::zeros([1, 30, 1, 1]);
        let (l, g) = cross_entropy(&logits, &[4]).unwrap();
        assert!((l - 30f64.ln()).abs() < 1e-12);
        assert!((l - 3.4012).abs() < 1e-4);
        assert!(g.sum().abs() < 1e-15);
        logits.data_mut()[4] = 1000.0;
        let (l, _) = cross_entropy(&logits, &[4]).unwrap();
        assert!(l.abs() < 1e-12);
        assert!(matches!(cross_entropy(&logits, &[30]), Err(Error::Input(_))));
    }

    #[test]
    fn multi_task_arithmetic() {
        let w = TaskWeights::default();
        assert_eq!(multi_task_loss(0.5, 1.0, 0.25, w), 1.75);
        assert_eq!(multi_task_loss(0.25, 1.0, 0.5, w), multi_task_loss(1.0, 0.5, 0.25, w));
    }

    proptest! {
        #[test]
        fn logistic_nonnegative_and_monotone(o in -30.0f64..30.0, step in 0.01f64..5.0) {
            let single = LabelMap { size: 1, values: vec![1.0], weights: vec![1.0] };
            let (a, _) = logistic_loss(&Tensor::full([1, 1, 1, 1], o), &single).unwrap();
            let (b, _) = logistic_loss(&Tensor::full([1, 1, 1, 1], o + step), &single).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!(b < a);
        }

        #[test]
        fn cross_entropy_shift_invariant(v in proptest::collection::vec(-20.0f64..20.0, 5), shift in -50.0f64..50.0, cls in 0usize..5) {
            let a = Tensor::from_vec([1, 5, 1, 1], v.clone()).unwrap();
            let b = a.map(|x| x + shift);
            let (la, ga) = cross_entropy(&a, &[cls]).unwrap();
            let (lb, _) = cross_entropy(&b, &[cls]).unwrap();
            prop_assert!((la - lb).abs() < 1e-9);
            prop_assert!(ga.sum().abs() < 1e-12);
        }
    }
}
