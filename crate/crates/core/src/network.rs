//! Whole-model assembly: shared backbone, the two matching branches and the
//! classifier, with a joint forward/backward over a batch of training pairs.

use crate::backbone::{
    backbone_backward, backbone_forward, backbone_forward_cached, build_backbone, BackboneCache,
    BackboneConfig, FeaturePair,
};
use crate::error::{Error, Result};
use crate::fanet::{build_fanet, fanet_backward, fanet_forward, fanet_forward_cached, FanetCache, FanetLayout};
use crate::heads::{
    affine_backward, apply_affine, build_heads, cf_block, cf_block_backward, cf_block_cached,
    classification_backward, classification_forward, cross_correlate, cross_correlate_backward,
    cross_entropy, logistic_loss, make_label_map_at, multi_task_loss, Branch, CfCache, CfConfig,
    LabelMap, TaskWeights, CLS_BIAS, CLS_WEIGHT,
};
use crate::tensor::{ParamSet, Real, Tensor};

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub cf: CfConfig,
    pub num_classes: usize,
    /// Positive label radius in response cells.
    pub label_radius: f64,
    pub pos_weight_share: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(BackboneConfig::desk())
    }
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig) -> Self {
        Self {
            backbone,
            cf: CfConfig::default(),
            num_classes: 30,
            label_radius: 2.0,
            pos_weight_share: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.cf.validate()?;
        FanetLayout::new(self.backbone.conv3_channels())?;
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        self.response_size().map(|_| ())
    }

    /// Side of the response maps, checking that both branches agree.
    pub fn response_size(&self) -> Result<usize> {
        let (z3, z5) = self.backbone.tap_sizes(self.backbone.exemplar_size)?;
        let (x3, x5) = self.backbone.tap_sizes(self.backbone.search_size)?;
        let (m3, m5) = (x3 + 1 - z3, x5 + 1 - z5);
        if m3 != m5 {
            return Err(Error::Config(format!(
                "branch response maps disagree: {m3}x{m3} vs {m5}x{m5}"
            )));
        }
        Ok(m5)
    }

    /// Ground truth for a target displaced by `(dy, dx)` response cells
    /// from the search center.
    pub fn label_map(&self, displacement: (f64, f64)) -> Result<LabelMap> {
        let m = self.response_size()?;
        let c = (m as f64 - 1.0) / 2.0;
        make_label_map_at(
            m,
            (c + displacement.0, c + displacement.1),
            self.label_radius,
            self.pos_weight_share,
        )
    }
}

/// A model: its layout plus one flat parameter set (backbone, FANet, heads).
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

pub fn build_model<T: Real>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut params = build_backbone::<T>(&config.backbone, seed)?;
    let fanet = build_fanet::<T>(
        FanetLayout::new(config.backbone.conv3_channels())?,
        seed.wrapping_add(1),
    )?;
    let heads = build_heads::<T>(
        config.backbone.conv5_channels(),
        config.num_classes,
        seed.wrapping_add(2),
    )?;
    for (name, t) in fanet.iter().chain(heads.iter()) {
        params.insert(name, t.clone())?;
    }
    Ok(Model {
        config: config.clone(),
        params,
    })
}

impl<T: Real> Model<T> {
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// The same model without classifier parameters, as used for tracking.
    pub fn pruned(&self) -> Self {
        let mut params = self.params.clone();
        params.remove(CLS_WEIGHT);
        params.remove(CLS_BIAS);
        Self {
            config: self.config.clone(),
            params,
        }
    }
}

/// Pre-CF template features of both branches for a single exemplar.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateFeatures<T> {
    pub dis: Tensor<T>,
    pub fin: Tensor<T>,
}

impl<T: Real> TemplateFeatures<T> {
    /// `(1 − rate)·self + rate·other`.
    pub fn blend(&self, other: &Self, rate: T) -> Self {
        let mix = |a: &Tensor<T>, b: &Tensor<T>| {
            let mut out = a.scale(T::one() - rate);
            out.axpy(rate, b);
            out
        };
        Self {
            dis: mix(&self.dis, &other.dis),
            fin: mix(&self.fin, &other.fin),
        }
    }
}

/// CF filters computed from [`TemplateFeatures`].
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateFilters<T> {
    pub dis: Tensor<T>,
    pub fin: Tensor<T>,
}

/// Branch inputs of a single exemplar (1, 1, h, w).
pub fn template_features<T: Real>(model: &Model<T>, exemplar: &Tensor<T>) -> Result<TemplateFeatures<T>> {
    let FeaturePair { conv3, conv5 } = backbone_forward(&model.params, &model.config.backbone, exemplar)?;
    Ok(TemplateFeatures {
        dis: conv5,
        fin: fanet_forward(&conv3, &model.params)?,
    })
}

pub fn template_filters<T: Real>(model: &Model<T>, feats: &TemplateFeatures<T>) -> Result<TemplateFilters<T>> {
    Ok(TemplateFilters {
        dis: cf_block(&feats.dis, &model.config.cf)?,
        fin: cf_block(&feats.fin, &model.config.cf)?,
    })
}

/// Both branch responses (after gain/bias) for a batch of search patches
/// against one set of filters. Each output is (n, 1, M, M).
pub fn search_responses<T: Real>(
    model: &Model<T>,
    filters: &TemplateFilters<T>,
    searches: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let FeaturePair { conv3, conv5 } = backbone_forward(&model.params, &model.config.backbone, searches)?;
    let fx = fanet_forward(&conv3, &model.params)?;
    let n = searches.n();
    let (mut dis, mut fin) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for s in 0..n {
        dis.push(cross_correlate(&filters.dis, &conv5.take_sample(s))?);
        fin.push(cross_correlate(&filters.fin, &fx.take_sample(s))?);
    }
    Ok((
        apply_affine(&Tensor::stack(&dis)?, &model.params, Branch::Discriminative),
        apply_affine(&Tensor::stack(&fin)?, &model.params, Branch::FineGrained),
    ))
}

/// Discriminative similarity of one exemplar/search pair.
pub fn discriminative_similarity<T: Real>(
    model: &Model<T>,
    exemplar: &Tensor<T>,
    search: &Tensor<T>,
) -> Result<Tensor<T>> {
    let z5 = backbone_forward(&model.params, &model.config.backbone, exemplar)?.conv5;
    let x5 = backbone_forward(&model.params, &model.config.backbone, search)?.conv5;
    let f = cf_block(&z5, &model.config.cf)?;
    Ok(apply_affine(&cross_correlate(&f, &x5)?, &model.params, Branch::Discriminative))
}

/// Fine-grained similarity of one exemplar/search pair.
pub fn fine_grained_similarity<T: Real>(
    model: &Model<T>,
    exemplar: &Tensor<T>,
    search: &Tensor<T>,
) -> Result<Tensor<T>> {
    let z3 = backbone_forward(&model.params, &model.config.backbone, exemplar)?.conv3;
    let x3 = backbone_forward(&model.params, &model.config.backbone, search)?.conv3;
    let f = cf_block(&fanet_forward(&z3, &model.params)?, &model.config.cf)?;
    let y = fanet_forward(&x3, &model.params)?;
    Ok(apply_affine(&cross_correlate(&f, &y)?, &model.params, Branch::FineGrained))
}

/// A batch of training pairs.
#[derive(Clone, Debug)]
pub struct PairBatch<T = f32> {
    /// (n, 1, exemplar, exemplar)
    pub exemplars: Tensor<T>,
    /// (n, 1, search, search)
    pub searches: Tensor<T>,
    pub classes: Vec<usize>,
    pub labels: Vec<LabelMap>,
}

/// Component losses of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub dis: f64,
    pub cls: f64,
    pub fin: f64,
    pub total: f64,
}

/// Responses of one batch, kept for diagnostics.
#[derive(Clone, Debug)]
pub struct BatchOutputs<T> {
    pub dis: Tensor<T>,
    pub fin: Tensor<T>,
    pub logits: Tensor<T>,
}

impl<T: Real> BatchOutputs<T> {
    /// `dis + fin` per pair.
    pub fn fused(&self) -> Tensor<T> {
        self.dis.add(&self.fin).expect("branch maps share dims")
    }
}

struct BranchSample<T> {
    cf: CfCache<T>,
    filter: Tensor<T>,
    search: Tensor<T>,
    raw: Tensor<T>,
}

fn branch_sample<T: Real>(z: &Tensor<T>, x: &Tensor<T>, cfg: &CfConfig) -> Result<BranchSample<T>> {
    let (filter, cf) = cf_block_cached(z, cfg)?;
    let raw = cross_correlate(&filter, x)?;
    Ok(BranchSample {
        cf,
        filter,
        search: x.clone(),
        raw,
    })
}

/// Weighted logistic loss over the batch (mean over pairs); returns the
/// loss and the gradient w.r.t. each pair's raw response.
fn branch_loss<T: Real>(
    samples: &[BranchSample<T>],
    params: &ParamSet<T>,
    branch: Branch,
    labels: &[LabelMap],
) -> Result<(f64, Vec<Tensor<T>>, Tensor<T>)> {
    let n = samples.len();
    let mut total = 0.0;
    let mut douts = Vec::with_capacity(n);
    let mut outs = Vec::with_capacity(n);
    for (s, lab) in samples.iter().zip(labels) {
        let out = apply_affine(&s.raw, params, branch);
        let (l, d) = logistic_loss(&out, lab)?;
        total += l.to_f64().unwrap_or(f64::NAN) / n as f64;
        douts.push(d.scale(T::of(1.0 / n as f64)));
        outs.push(out);
    }
    Ok((total, douts, Tensor::stack(&outs)?))
}

/// Backward of one branch for all pairs: gradients w.r.t. template and
/// search features, stacked over the batch.
fn branch_backward<T: Real>(
    samples: &[BranchSample<T>],
    douts: &[Tensor<T>],
    scale: T,
    params: &ParamSet<T>,
    branch: Branch,
    grads: &mut ParamSet<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (mut dz, mut dx) = (Vec::new(), Vec::new());
    for (s, d) in samples.iter().zip(douts) {
        let draw = affine_backward(&s.raw, &d.scale(scale), params, branch, grads);
        let (dfilter, dsearch) = cross_correlate_backward(&s.filter, &s.search, &draw)?;
        dz.push(cf_block_backward(&s.cf, &dfilter));
        dx.push(dsearch);
    }
    Ok((Tensor::stack(&dz)?, Tensor::stack(&dx)?))
}

struct Forward<T> {
    zc: BackboneCache<T>,
    xc: BackboneCache<T>,
    z5: Tensor<T>,
    fz: FanetCache<T>,
    fx: FanetCache<T>,
    dis: Vec<BranchSample<T>>,
    fin: Vec<BranchSample<T>>,
}

/// Multi-task loss of a batch and, when `want_grads`, the gradient of the
/// weighted total w.r.t. every parameter. Terms with zero weight are not
/// differentiated, so their branches receive exactly zero gradient.
pub fn batch_loss<T: Real>(
    model: &Model<T>,
    batch: &PairBatch<T>,
    weights: TaskWeights,
    want_grads: bool,
) -> Result<(LossBreakdown, BatchOutputs<T>, Option<ParamSet<T>>)> {
    let n = batch.exemplars.n();
    if batch.searches.n() != n || batch.classes.len() != n || batch.labels.len() != n {
        return Err(Error::shape(
            "batch",
            format!(
                "{} exemplars, {} searches, {} classes, {} labels",
                n,
                batch.searches.n(),
                batch.classes.len(),
                batch.labels.len()
            ),
        ));
    }
    let (params, bcfg, cf) = (&model.params, &model.config.backbone, &model.config.cf);
    let (zf, zc) = backbone_forward_cached(params, bcfg, &batch.exemplars)?;
    let (xf, xc) = backbone_forward_cached(params, bcfg, &batch.searches)?;
    let (fz_out, fz) = fanet_forward_cached(&zf.conv3, params)?;
    let (fx_out, fx) = fanet_forward_cached(&xf.conv3, params)?;

    let mut dis = Vec::with_capacity(n);
    let mut fin = Vec::with_capacity(n);
    for s in 0..n {
        dis.push(branch_sample(&zf.conv5.take_sample(s), &xf.conv5.take_sample(s), cf)?);
        fin.push(branch_sample(&fz_out.take_sample(s), &fx_out.take_sample(s), cf)?);
    }
    let (l_dis, d_dis, o_dis) = branch_loss(&dis, params, Branch::Discriminative, &batch.labels)?;
    let (l_fin, d_fin, o_fin) = branch_loss(&fin, params, Branch::FineGrained, &batch.labels)?;
    let logits = classification_forward(&zf.conv5, params)?;
    let (l_cls, d_logits) = cross_entropy(&logits, &batch.classes)?;
    let l_cls = l_cls.to_f64().unwrap_or(f64::NAN);

    let losses = LossBreakdown {
        dis: l_dis,
        cls: l_cls,
        fin: l_fin,
        total: multi_task_loss(l_dis, l_cls, l_fin, weights),
    };
    let outputs = BatchOutputs {
        dis: o_dis,
        fin: o_fin,
        logits,
    };
    if !want_grads {
        return Ok((losses, outputs, None));
    }
    let fwd = Forward {
        zc,
        xc,
        z5: zf.conv5,
        fz,
        fx,
        dis,
        fin,
    };
    let grads = backward(model, &fwd, weights, &d_dis, &d_fin, &d_logits)?;
    Ok((losses, outputs, Some(grads)))
}

fn backward<T: Real>(
    model: &Model<T>,
    fwd: &Forward<T>,
    weights: TaskWeights,
    d_dis: &[Tensor<T>],
    d_fin: &[Tensor<T>],
    d_logits: &Tensor<T>,
) -> Result<ParamSet<T>> {
    let params = &model.params;
    let mut grads = params.zeros_like();
    let mut dz5 = Tensor::zeros(fwd.z5.dims());
    let mut dx5 = None;
    let (mut dz3, mut dx3) = (None, None);

    if weights.dis != 0.0 {
        let (dz, dx) = branch_backward(
            &fwd.dis,
            d_dis,
            T::of(weights.dis),
            params,
            Branch::Discriminative,
            &mut grads,
        )?;
        dz5.axpy(T::one(), &dz);
        dx5 = Some(dx);
    }
    if weights.cls != 0.0 {
        let dl = d_logits.scale(T::of(weights.cls));
        dz5.axpy(T::one(), &classification_backward(&fwd.z5, params, &dl, &mut grads)?);
    }
    if weights.fin != 0.0 {
        let (dfz, dfx) = branch_backward(
            &fwd.fin,
            d_fin,
            T::of(weights.fin),
            params,
            Branch::FineGrained,
            &mut grads,
        )?;
        dz3 = Some(fanet_backward(params, &fwd.fz, &dfz, &mut grads)?);
        dx3 = Some(fanet_backward(params, &fwd.fx, &dfx, &mut grads)?);
    }
    let bcfg = &model.config.backbone;
    let any_z = weights.dis != 0.0 || weights.cls != 0.0;
    backbone_backward(params, bcfg, &fwd.zc, dz3.as_ref(), any_z.then_some(&dz5), &mut grads)?;
    backbone_backward(params, bcfg, &fwd.xc, dx3.as_ref(), dx5.as_ref(), &mut grads)?;
    Ok(grads)
}
