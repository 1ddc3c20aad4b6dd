//! Multi-task optimization: SGD with momentum, exponential learning-rate
//! decay, the multi-domain strategies and the training loop.

pub mod checkpoint;

pub use checkpoint::{load_checkpoint, model_echo, parse_model_echo, save_checkpoint, Checkpoint};

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use crate::backbone::{freeze_mask, BackboneConfig, FreezePolicy};
use crate::dataio::{MixedSampler, PairQueue, PairSampler, SamplePair, SamplerConfig, SequenceRecord};
use crate::error::{Error, Result};
use crate::heads::TaskWeights;
use crate::network::{batch_loss, build_model, BatchOutputs, LossBreakdown, Model, ModelConfig, PairBatch};
use crate::rng::Xoshiro256;
use crate::tensor::{ParamSet, Tensor};
use rand_core::RngCore;

/// `hi · (lo/hi)^(epoch/(total−1))`; a single epoch runs at `hi`.
pub fn lr_schedule(epoch: usize, total: usize, lr_hi: f64, lr_lo: f64) -> f64 {
    if total <= 1 {
        return lr_hi;
    }
    lr_hi * (lr_lo / lr_hi).powf(epoch as f64 / (total - 1) as f64)
}

/// `v ← μ·v + g; θ ← θ − lr·v` for every unfrozen parameter. Frozen
/// parameters are left untouched and their velocity is zeroed.
pub fn sgd_momentum_step(
    params: &mut ParamSet<f32>,
    grads: &ParamSet<f32>,
    velocity: &mut ParamSet<f32>,
    lr: f64,
    momentum: f64,
    frozen: &[bool],
) -> Result<()> {
    params.check_aligned(grads)?;
    params.check_aligned(velocity)?;
    if frozen.len() != params.len() {
        return Err(Error::shape(
            "sgd_momentum_step",
            format!("{} freeze flags for {} parameters", frozen.len(), params.len()),
        ));
    }
    let (lr, mu) = (lr as f32, momentum as f32);
    for (((_, p), (_, g)), ((_, v), &fz)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(velocity.iter_mut().zip(frozen))
    {
        if fz {
            v.data_mut().iter_mut().for_each(|x| *x = 0.0);
            continue;
        }
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = mu * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut ParamSet<f32>, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        grads.scale_all((max_norm / norm) as f32);
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    VidOnly,
    TirOnly,
    Retrain,
    Finetune,
    Mix,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::VidOnly,
        Strategy::TirOnly,
        Strategy::Retrain,
        Strategy::Finetune,
        Strategy::Mix,
    ];
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::VidOnly => "vid-only",
            Strategy::TirOnly => "tir-only",
            Strategy::Retrain => "retrain",
            Strategy::Finetune => "finetune",
            Strategy::Mix => "mix",
        })
    }
}

/// Which data a stage draws from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DataPlan {
    Grayscale,
    Tir,
    Mixed(f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub data: DataPlan,
    pub freeze: Vec<FreezePolicy>,
    pub epochs: usize,
    pub lr_hi: f64,
    pub lr_lo: f64,
}

/// The training stages of a strategy.
pub fn apply_strategy(strategy: Strategy) -> Vec<StagePlan> {
    let stage = |data, freeze: &[FreezePolicy], epochs, lr_hi| StagePlan {
        data,
        freeze: freeze.to_vec(),
        epochs,
        lr_hi,
        lr_lo: 1e-5,
    };
    let vid = stage(DataPlan::Grayscale, &[], 60, 1e-2);
    match strategy {
        Strategy::VidOnly => vec![vid],
        Strategy::TirOnly => vec![stage(DataPlan::Tir, &[], 60, 1e-2)],
        Strategy::Retrain => vec![vid, stage(DataPlan::Tir, &[], 30, 1e-3)],
        Strategy::Finetune => vec![
            vid,
            stage(
                DataPlan::Tir,
                &[FreezePolicy::First3, FreezePolicy::FineGrainedBranch],
                30,
                1e-3,
            ),
        ],
        Strategy::Mix => vec![stage(
            DataPlan::Mixed(1.0, 1.0),
            &[FreezePolicy::ClassifierOnly],
            70,
            1e-2,
        )],
    }
}

/// Union of the masks of several policies.
pub fn combined_mask(params: &ParamSet<f32>, policies: &[FreezePolicy]) -> Result<Vec<bool>> {
    let mut mask = vec![false; params.len()];
    for &p in policies {
        for (m, f) in mask.iter_mut().zip(freeze_mask(params, p)?) {
            *m |= f;
        }
    }
    Ok(mask)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub strategy: Strategy,
    /// Overrides every stage's epoch count.
    pub epochs: Option<usize>,
    pub pairs_per_epoch: usize,
    pub batch: usize,
    pub momentum: f64,
    /// Override every stage's learning-rate endpoints.
    pub lr_hi: Option<f64>,
    pub lr_lo: Option<f64>,
    pub weights: TaskWeights,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub preset: String,
    pub sampler: SamplerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::VidOnly,
            epochs: None,
            pairs_per_epoch: 2000,
            batch: 8,
            momentum: 0.9,
            lr_hi: None,
            lr_lo: None,
            weights: TaskWeights::default(),
            weight_decay: 0.0,
            grad_clip: Some(10.0),
            seed: 0,
            preset: "desk".into(),
            sampler: SamplerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.pairs_per_epoch < self.batch {
            return Err(Error::Config(format!(
                "pairs_per_epoch {} smaller than batch {}",
                self.pairs_per_epoch, self.batch
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.epochs == Some(0) {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        for plan in self.stages() {
            if !(plan.lr_lo > 0.0 && plan.lr_hi >= plan.lr_lo) {
                return Err(Error::Config(format!(
                    "need lr_hi >= lr_lo > 0, got {} / {}",
                    plan.lr_hi, plan.lr_lo
                )));
            }
        }
        Ok(())
    }

    /// Strategy stages with this config's overrides applied.
    pub fn stages(&self) -> Vec<StagePlan> {
        apply_strategy(self.strategy)
            .into_iter()
            .map(|mut s| {
                s.epochs = self.epochs.unwrap_or(s.epochs);
                s.lr_hi = self.lr_hi.unwrap_or(s.lr_hi);
                s.lr_lo = self.lr_lo.unwrap_or(s.lr_lo);
                s
            })
            .collect()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.pairs_per_epoch / self.batch
    }
}

/// Stacks sampled pairs into a training batch with label maps.
pub fn make_batch(pairs: &[SamplePair], cfg: &ModelConfig) -> Result<PairBatch<f32>> {
    let ex: Vec<Tensor<f32>> = pairs.iter().map(|p| p.exemplar.clone()).collect();
    let se: Vec<Tensor<f32>> = pairs.iter().map(|p| p.search.clone()).collect();
    Ok(PairBatch {
        exemplars: Tensor::stack(&ex)?,
        searches: Tensor::stack(&se)?,
        classes: pairs.iter().map(|p| p.class_id).collect(),
        labels: pairs
            .iter()
            .map(|p| cfg.label_map(p.displacement))
            .collect::<Result<_>>()?,
    })
}

/// One optimizer step's worth of state: model, momentum and freeze mask.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model<f32>,
    pub velocity: ParamSet<f32>,
    pub frozen: Vec<bool>,
    pub weights: TaskWeights,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
}

impl Trainer {
    pub fn new(model: Model<f32>, cfg: &TrainConfig) -> Self {
        let velocity = model.params.zeros_like();
        let frozen = vec![false; model.params.len()];
        Self {
            model,
            velocity,
            frozen,
            weights: cfg.weights,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            grad_clip: cfg.grad_clip,
        }
    }

    /// Starts a stage: new freeze mask, momentum reset.
    pub fn begin_stage(&mut self, freeze: &[FreezePolicy]) -> Result<()> {
        self.frozen = combined_mask(&self.model.params, freeze)?;
        self.velocity = self.model.params.zeros_like();
        Ok(())
    }

    /// Forward, backward and one masked SGD step.
    pub fn step(&mut self, batch: &PairBatch<f32>, lr: f64) -> Result<(LossBreakdown, BatchOutputs<f32>)> {
        let (loss, outputs, grads) = batch_loss(&self.model, batch, self.weights, true)?;
        let mut grads = grads.expect("gradients requested");
        for (term, v) in [("l_dis", loss.dis), ("l_cls", loss.cls), ("l_fin", loss.fin)] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{term} = {v}")));
            }
        }
        if self.weight_decay > 0.0 {
            grads.axpy(self.weight_decay as f32, &self.model.params);
        }
        if let Some(c) = self.grad_clip {
            let norm = clip_global_norm(&mut grads, c);
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!("gradient norm {norm}")));
            }
        }
        sgd_momentum_step(
            &mut self.model.params,
            &grads,
            &mut self.velocity,
            lr,
            self.momentum,
            &self.frozen,
        )?;
        Ok((loss, outputs))
    }
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub batch: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch,batch,l_dis,l_cls,l_fin,total,lr";

impl fmt::Display for LogRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{}",
            self.epoch, self.batch, self.loss.dis, self.loss.cls, self.loss.fin, self.loss.total, self.lr
        )
    }
}

/// Training data by domain.
#[derive(Clone, Debug, Default)]
pub struct Datasets {
    pub grayscale: Option<Arc<Vec<SequenceRecord>>>,
    pub tir: Option<Arc<Vec<SequenceRecord>>>,
}

impl Datasets {
    fn pick(&self, plan: DataPlan) -> Result<(Arc<Vec<SequenceRecord>>, Option<Arc<Vec<SequenceRecord>>>)> {
        let need = |d: &Option<Arc<Vec<SequenceRecord>>>, name: &str| {
            d.clone()
                .filter(|v| !v.is_empty())
                .ok_or_else(|| Error::Config(format!("strategy needs a {name} dataset")))
        };
        Ok(match plan {
            DataPlan::Grayscale => (need(&self.grayscale, "grayscale")?, None),
            DataPlan::Tir => (need(&self.tir, "tir")?, None),
            DataPlan::Mixed(..) => (need(&self.grayscale, "grayscale")?, Some(need(&self.tir, "tir")?)),
        })
    }
}

/// Where training writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// Rewritten after every epoch.
    pub checkpoint: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

fn train_echo(cfg: &TrainConfig) -> Vec<(String, String)> {
    vec![
        ("strategy".into(), cfg.strategy.to_string()),
        ("seed".into(), cfg.seed.to_string()),
        ("batch".into(), cfg.batch.to_string()),
        ("pairs_per_epoch".into(), cfg.pairs_per_epoch.to_string()),
        ("momentum".into(), cfg.momentum.to_string()),
    ]
}

/// Runs every stage of the configured strategy from a fresh model (or
/// `init`). Deterministic for a given config, data and seed.
pub fn train(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    data: &Datasets,
    init: Option<Model<f32>>,
    outputs: &TrainOutputs,
) -> Result<TrainResult> {
    cfg.validate()?;
    let model = match init {
        Some(m) => m,
        None => build_model::<f32>(model_cfg, cfg.seed)?,
    };
    let mut master = Xoshiro256::seed_from(cfg.seed ^ 0x7472_6169_6e00);
    let mut trainer = Trainer::new(model, cfg);
    let mut log = Vec::new();
    let mut log_file = match &outputs.loss_log {
        Some(p) => {
            let mut f = fs::File::create(p).map_err(|e| Error::io(p, e))?;
            writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(p, e))?;
            Some((f, p.clone()))
        }
        None => None,
    };
    let mut epoch_global = 0;
    let mut checkpoint = None;
    for (si, plan) in cfg.stages().iter().enumerate() {
        trainer.begin_stage(&plan.freeze)?;
        let (a, b) = data.pick(plan.data)?;
        let seed = master.next_u64();
        let source: Box<dyn Iterator<Item = Result<SamplePair>> + Send> = match (plan.data, b) {
            (DataPlan::Mixed(wa, wb), Some(b)) => {
                Box::new(MixedSampler::new(a, b, (wa, wb), seed, cfg.sampler.clone())?)
            }
            _ => Box::new(PairSampler::new(a, seed, cfg.sampler.clone())),
        };
        let mut queue = PairQueue::spawn(source, cfg.batch);
        for e in 0..plan.epochs {
            let lr = lr_schedule(e, plan.epochs, plan.lr_hi, plan.lr_lo);
            for bi in 0..cfg.batches_per_epoch() {
                let pairs: Vec<SamplePair> = (&mut queue)
                    .take(cfg.batch)
                    .collect::<Result<_>>()?;
                let batch = make_batch(&pairs, &trainer.model.config)?;
                let (loss, _) = trainer.step(&batch, lr).map_err(|err| match err {
                    Error::NonFinite(d) => Error::NonFinite(format!(
                        "stage {}, epoch {epoch_global}, batch {bi}: {d}",
                        si + 1
                    )),
                    other => other,
                })?;
                let row = LogRow {
                    epoch: epoch_global,
                    batch: bi,
                    loss,
                    lr,
                };
                if let Some((f, p)) = log_file.as_mut() {
                    writeln!(f, "{row}").map_err(|e| Error::io(p.as_path(), e))?;
                }
                log.push(row);
            }
            epoch_global += 1;
            let mut ck = Checkpoint::new(&trainer.model, trainer.velocity.clone(), master.state());
            for (k, v) in train_echo(cfg) {
                ck.echo.insert(k, v);
            }
            ck.echo.insert("stage".into(), (si + 1).to_string());
            ck.echo.insert("epoch".into(), epoch_global.to_string());
            if let Some(p) = &outputs.checkpoint {
                save_checkpoint(&ck, p)?;
            }
            checkpoint = Some(ck);
        }
    }
    Ok(TrainResult {
        checkpoint: checkpoint.expect("at least one epoch"),
        log,
    })
}

/// Model layout for a named backbone preset with default heads.
pub fn model_config_for(preset: &str) -> Result<ModelConfig> {
    Ok(ModelConfig::new(BackboneConfig::preset(preset)?))
}
