//! Padding-free AlexNet-style feature extractor shared by both matching
//! branches and the classifier. Two taps are exposed: conv3 (after its
//! relu) for the fine-grained branch and conv5 (linear) for the
//! discriminative branch.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Xoshiro256;
use crate::tensor::{
    conv2d, conv2d_backward, conv2d_backward_params, conv_out_size, max_pool2d, max_pool2d_backward, relu,
    relu_backward, ParamSet, PoolIndices, Real, Tensor,
};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Max pool (3×3, stride 2) after this layer's activation.
    pub pool_after: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub preset: String,
    pub in_channels: usize,
    pub layers: Vec<ConvLayer>,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub exemplar_size: usize,
    pub search_size: usize,
}

impl BackboneConfig {
    fn with_channels(preset: &str, ch: [usize; 5]) -> Self {
        let geo = [(11, 2, true), (5, 1, true), (3, 1, false), (3, 1, false), (3, 1, false)];
        Self {
            preset: preset.to_string(),
            in_channels: 1,
            layers: ch
                .iter()
                .zip(geo)
                .map(|(&out_channels, (kernel, stride, pool_after))| ConvLayer {
                    out_channels,
                    kernel,
                    stride,
                    pool_after,
                })
                .collect(),
            pool_kernel: 3,
            pool_stride: 2,
            exemplar_size: 127,
            search_size: 255,
        }
    }

    /// AlexNet channel widths.
    pub fn full() -> Self {
        Self::with_channels("full", [96, 256, 384, 384, 256])
    }

    /// Narrow channels, identical spatial arithmetic.
    pub fn desk() -> Self {
        Self::with_channels("desk", [16, 32, 32, 32, 24])
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!(
                "unknown backbone preset {other:?} (expected full or desk)"
            ))),
        }
    }

    pub fn conv3_channels(&self) -> usize {
        self.layers[2].out_channels
    }

    pub fn conv5_channels(&self) -> usize {
        self.layers[4].out_channels
    }

    /// Spatial side of (conv3, conv5) taps for a square input, or an error
    /// naming the first layer that underflows.
    pub fn tap_sizes(&self, input: usize) -> Result<(usize, usize)> {
        let mut side = input;
        let mut conv3 = 0;
        for (i, l) in self.layers.iter().enumerate() {
            side = conv_out_size(side, l.kernel, l.stride, 0).ok_or_else(|| {
                Error::shape(
                    "backbone",
                    format!("conv{} kernel {} does not fit input side {side}", i + 1, l.kernel),
                )
            })?;
            if i == 2 {
                conv3 = side;
            }
            if l.pool_after {
                side = conv_out_size(side, self.pool_kernel, self.pool_stride, 0).ok_or_else(|| {
                    Error::shape("backbone", format!("pool after conv{} underflows at side {side}", i + 1))
                })?;
            }
        }
        Ok((conv3, side))
    }

    /// Total stride from input pixels to conv5 cells.
    pub fn total_stride(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.stride * if l.pool_after { self.pool_stride } else { 1 })
            .product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != 5 {
            return Err(Error::Config(format!(
                "backbone needs exactly 5 conv layers, got {}",
                self.layers.len()
            )));
        }
        if self.layers.iter().any(|l| l.out_channels == 0 || l.stride == 0) {
            return Err(Error::Config("backbone layers need positive channels and strides".into()));
        }
        for size in [self.exemplar_size, self.search_size] {
            self.tap_sizes(size)
                .map_err(|e| Error::Config(format!("input {size}: {e}")))?;
        }
        let (_, z5) = self.tap_sizes(self.exemplar_size)?;
        let (_, x5) = self.tap_sizes(self.search_size)?;
        if z5 > x5 {
            return Err(Error::Config("exemplar taps larger than search taps".into()));
        }
        Ok(())
    }
}

pub fn weight_name(layer: usize) -> String {
    format!("backbone.conv{layer}.weight")
}

pub fn bias_name(layer: usize) -> String {
    format!("backbone.conv{layer}.bias")
}

/// Fresh backbone weights: Gaussian with std `sqrt(2 / fan_in)`, zero biases.
pub fn build_backbone<T: Real>(cfg: &BackboneConfig, seed: u64) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut rng = Xoshiro256::seed_from(seed);
    let mut params = ParamSet::new();
    let mut cin = cfg.in_channels;
    for (i, l) in cfg.layers.iter().enumerate() {
        let fan_in = cin * l.kernel * l.kernel;
        let w = Tensor::randn(
            [l.out_channels, cin, l.kernel, l.kernel],
            (2.0 / fan_in as f64).sqrt(),
            &mut rng,
        );
        params.insert(weight_name(i + 1), w)?;
        params.insert(bias_name(i + 1), Tensor::zeros([l.out_channels, 1, 1, 1]))?;
        cin = l.out_channels;
    }
    Ok(params)
}

/// The two backbone taps for one input batch.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePair<T = f32> {
    pub conv3: Tensor<T>,
    pub conv5: Tensor<T>,
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BackboneCache<T> {
    /// Input of each conv layer.
    inputs: Vec<Tensor<T>>,
    /// Pre-activation output of each conv layer.
    pre: Vec<Tensor<T>>,
    pools: Vec<Option<PoolIndices>>,
}

pub fn backbone_forward<T: Real>(
    params: &ParamSet<T>,
    cfg: &BackboneConfig,
    images: &Tensor<T>,
) -> Result<FeaturePair<T>> {
    forward_impl(params, cfg, images, false).map(|(f, _)| f)
}

pub fn backbone_forward_cached<T: Real>(
    params: &ParamSet<T>,
    cfg: &BackboneConfig,
    images: &Tensor<T>,
) -> Result<(FeaturePair<T>, BackboneCache<T>)> {
    forward_impl(params, cfg, images, true).map(|(f, c)| (f, c.expect("cache requested")))
}

fn forward_impl<T: Real>(
    params: &ParamSet<T>,
    cfg: &BackboneConfig,
    images: &Tensor<T>,
    keep: bool,
) -> Result<(FeaturePair<T>, Option<BackboneCache<T>>)> {
    if images.c() != cfg.in_channels {
        return Err(Error::shape(
            "backbone",
            format!("expected {} input channel(s), got {}", cfg.in_channels, images.c()),
        ));
    }
    cfg.tap_sizes(images.h().min(images.w()))?;
    let mut cache = BackboneCache {
        inputs: Vec::new(),
        pre: Vec::new(),
        pools: Vec::new(),
    };
    let mut x = images.clone();
    let mut conv3 = None;
    for (i, l) in cfg.layers.iter().enumerate() {
        let w = params.get(&weight_name(i + 1));
        let b = params.get(&bias_name(i + 1));
        let z = conv2d(&x, w, Some(b.data()), l.stride, 0)?;
        let a = if i < 4 { relu(&z) } else { z.clone() };
        if i == 2 {
            conv3 = Some(a.clone());
        }
        let (next, pool) = if l.pool_after {
            let (p, idx) = max_pool2d(&a, cfg.pool_kernel, cfg.pool_stride)?;
            (p, Some(idx))
        } else {
            (a, None)
        };
        if keep {
            cache.inputs.push(std::mem::replace(&mut x, next));
            cache.pre.push(z);
            cache.pools.push(pool);
        } else {
            x = next;
        }
    }
    let feats = FeaturePair {
        conv3: conv3.expect("five layers"),
        conv5: x,
    };
    Ok((feats, keep.then_some(cache)))
}

/// Accumulates parameter gradients given upstream gradients at the taps.
pub fn backbone_backward<T: Real>(
    params: &ParamSet<T>,
    cfg: &BackboneConfig,
    cache: &BackboneCache<T>,
    d_conv3: Option<&Tensor<T>>,
    d_conv5: Option<&Tensor<T>>,
    grads: &mut ParamSet<T>,
) -> Result<()> {
    let mut upstream: Option<Tensor<T>> = d_conv5.cloned();
    for i in (0..cfg.layers.len()).rev() {
        let l = &cfg.layers[i];
        // gradient w.r.t. this layer's activation output (before pooling)
        let mut d_act = match (&upstream, &cache.pools[i]) {
            (Some(g), Some(idx)) => Some(max_pool2d_backward(g, idx)),
            (Some(g), None) => Some(g.clone()),
            (None, _) => None,
        };
        if i == 2 {
            if let Some(g3) = d_conv3 {
                match d_act.as_mut() {
                    Some(d) => d.axpy(T::one(), g3),
                    None => d_act = Some(g3.clone()),
                }
            }
        }
        let Some(d_act) = d_act else {
            upstream = None;
            continue;
        };
        let d_pre = if i < 4 {
            relu_backward(&cache.pre[i], &d_act)
        } else {
            d_act
        };
        let w = params.get(&weight_name(i + 1));
        // the first layer reads the image, whose gradient nobody needs
        let (dk, db, dx) = if i == 0 {
            let (dk, db) = conv2d_backward_params(&cache.inputs[i], w, l.stride, 0, &d_pre)?;
            (dk, db, None)
        } else {
            let g = conv2d_backward(&cache.inputs[i], w, l.stride, 0, &d_pre)?;
            (g.dkernel, g.dbias, Some(g.dx))
        };
        grads.get_mut(&weight_name(i + 1)).axpy(T::one(), &dk);
        for (acc, v) in grads
            .get_mut(&bias_name(i + 1))
            .data_mut()
            .iter_mut()
            .zip(&db)
        {
            *acc = *acc + *v;
        }
        upstream = dx;
    }
    Ok(())
}

/// Which parameter groups are held fixed during an optimization stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FreezePolicy {
    None,
    First3,
    ClassifierOnly,
    FineGrainedBranch,
}

impl FreezePolicy {
    fn prefixes(self) -> &'static [&'static str] {
        match self {
            FreezePolicy::None => &[],
            FreezePolicy::First3 => &["backbone.conv1.", "backbone.conv2.", "backbone.conv3."],
            FreezePolicy::ClassifierOnly => &["heads.cls."],
            FreezePolicy::FineGrainedBranch => &["fanet.", "heads.fin."],
        }
    }
}

impl FromStr for FreezePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "first3" => Ok(Self::First3),
            "classifier-only" => Ok(Self::ClassifierOnly),
            "fine-grained-branch" => Ok(Self::FineGrainedBranch),
            other => Err(Error::Config(format!("unknown freeze policy {other:?}"))),
        }
    }
}

impl fmt::Display for FreezePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::First3 => "first3",
            Self::ClassifierOnly => "classifier-only",
            Self::FineGrainedBranch => "fine-grained-branch",
        })
    }
}

/// One flag per parameter (in set order): `true` means frozen.
pub fn freeze_mask<T: Real>(params: &ParamSet<T>, policy: FreezePolicy) -> Result<Vec<bool>> {
    let prefixes = policy.prefixes();
    let mask: Vec<bool> = params
        .names()
        .map(|n| prefixes.iter().any(|p| n.starts_with(p)))
        .collect();
    if !prefixes.is_empty() && !mask.iter().any(|&m| m) {
        return Err(Error::Config(format!(
            "freeze policy {policy} matches no parameter"
        )));
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let cfg = BackboneConfig::desk();
        let a = build_backbone::<f32>(&cfg, 17).unwrap();
        let b = build_backbone::<f32>(&cfg, 17).unwrap();
        assert_eq!(a, b);
        let c = build_backbone::<f32>(&cfg, 18).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn desk_channels() {
        let p = build_backbone::<f32>(&BackboneConfig::desk(), 0).unwrap();
        let ch: Vec<usize> = (1..=5).map(|i| p.get(&weight_name(i)).n()).collect();
        assert_eq!(ch, vec![16, 32, 32, 32, 24]);
    }

    #[test]
    fn full_parameter_count() {
        let p = build_backbone::<f32>(&BackboneConfig::full(), 0).unwrap();
        let expected = (96 * 11 * 11 + 96)
            + (256 * 96 * 5 * 5 + 256)
            + (384 * 256 * 3 * 3 + 384)
            + (384 * 384 * 3 * 3 + 384)
            + (256 * 384 * 3 * 3 + 256);
        assert_eq!(p.num_scalars(), expected);
        assert_eq!(expected, 3_723_968);
    }

    #[test]
    fn tap_arithmetic() {
        let cfg = BackboneConfig::desk();
        assert_eq!(cfg.tap_sizes(127).unwrap(), (10, 6));
        assert_eq!(cfg.tap_sizes(255).unwrap(), (26, 22));
        assert_eq!(cfg.total_stride(), 8);
    }

    #[test]
    fn underflow_is_config_error() {
        let mut cfg = BackboneConfig::desk();
        cfg.exemplar_size = 40;
        assert!(matches!(build_backbone::<f32>(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn forward_shapes_and_zero_input() {
        let cfg = BackboneConfig::desk();
        let p = build_backbone::<f32>(&cfg, 1).unwrap();
        let z = backbone_forward(&p, &cfg, &Tensor::zeros([1, 1, 127, 127])).unwrap();
        assert_eq!(z.conv3.dims(), [1, 32, 10, 10]);
        assert_eq!(z.conv5.dims(), [1, 24, 6, 6]);
        assert!(z.conv3.data().iter().chain(z.conv5.data()).all(|&v| v == 0.0));
        let x = backbone_forward(&p, &cfg, &Tensor::zeros([1, 1, 255, 255])).unwrap();
        assert_eq!(x.conv3.dims(), [1, 32, 26, 26]);
        assert_eq!(x.conv5.dims(), [1, 24, 22, 22]);
    }

    #[test]
    fn too_small_input_names_layer() {
        let cfg = BackboneConfig::desk();
        let p = build_backbone::<f32>(&cfg, 1).unwrap();
        let e = backbone_forward(&p, &cfg, &Tensor::zeros([1, 1, 40, 40])).unwrap_err();
        assert!(e.to_string().contains("conv"), "{e}");
    }

    #[test]
    fn translation_covariance_interior() {
        let cfg = BackboneConfig::desk();
        let p = build_backbone::<f32>(&cfg, 2).unwrap();
        let mut rng = Xoshiro256::seed_from(3);
        let big = Tensor::<f32>::uniform([1, 1, 263, 263], 0.0, 1.0, &mut rng);
        let crop = |ox: usize| {
            let mut t = Tensor::<f32>::zeros([1, 1, 255, 255]);
            for y in 0..255 {
                for x in 0..255 {
                    *t.at_mut(0, 0, y, x) = big.at(0, 0, y, x + ox);
                }
            }
            t
        };
        let a = backbone_forward(&p, &cfg, &crop(0)).unwrap().conv5;
        let b = backbone_forward(&p, &cfg, &crop(8)).unwrap().conv5;
        // b's cell x equals a's cell x + 1 away from the borders
        for c in 0..a.c() {
            for y in 2..20 {
                for x in 2..19 {
                    let (va, vb) = (a.at(0, c, y, x + 1), b.at(0, c, y, x));
                    assert!((va - vb).abs() <= 1e-4 * va.abs().max(1.0), "{va} vs {vb}");
                }
            }
        }
    }

    #[test]
    fn freeze_policies() {
        let p = build_backbone::<f32>(&BackboneConfig::desk(), 0).unwrap();
        assert!(freeze_mask(&p, FreezePolicy::None).unwrap().iter().all(|&m| !m));
        let m = freeze_mask(&p, FreezePolicy::First3).unwrap();
        let frozen: Vec<&str> = p.names().zip(&m).filter(|(_, &f)| f).map(|(n, _)| n).collect();
        assert_eq!(
            frozen,
            vec![
                "backbone.conv1.weight",
                "backbone.conv1.bias",
                "backbone.conv2.weight",
                "backbone.conv2.bias",
                "backbone.conv3.weight",
                "backbone.conv3.bias"
            ]
        );
        assert!(freeze_mask(&p, FreezePolicy::ClassifierOnly).is_err());
        assert!("bogus".parse::<FreezePolicy>().is_err());
    }
}
