//! Memorization check: a fresh model trained on a handful of fixed pairs
//! must drive the multi-task loss down and put the fused peak on the
//! labelled cell of every pair.

use std::time::Instant;

use crate::dataio::{make_pair, synth_sequence, Domain, SamplePair, SamplerConfig, SynthSpec};
use crate::error::{Error, Result};
use crate::network::{batch_loss, build_model, LossBreakdown, Model, ModelConfig};
use crate::trainer::{apply_strategy, lr_schedule, make_batch, Strategy, TrainConfig, Trainer};

#[derive(Clone, Debug)]
pub struct OverfitConfig {
    pub pairs: usize,
    pub batches: usize,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for OverfitConfig {
    fn default() -> Self {
        Self {
            pairs: 8,
            batches: 500,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct OverfitReport {
    pub initial: LossBreakdown,
    pub last: LossBreakdown,
    /// Total loss before each update.
    pub losses: Vec<f64>,
    /// Per pair: fused argmax on the labelled cell after training.
    pub hits: Vec<bool>,
    pub model: Model<f32>,
    pub seconds: f64,
}

impl OverfitReport {
    pub fn loss_ratio(&self) -> f64 {
        self.last.total / self.initial.total
    }
}

/// Whole-cell target offsets (dy, dx) cycled over the pairs.
const OFFSETS: [(i32, i32); 8] = [(0, 0), (1, -1), (-2, 1), (2, 2), (-1, 0), (0, -2), (1, 2), (-2, -1)];

/// Fixed grayscale pairs from synthetic sequences, two per sequence, with
/// targets on whole response cells. Every synthetic target is the same kind
/// of object, so all pairs carry class 0.
pub fn overfit_pairs(n: usize, seed: u64, cfg: &SamplerConfig) -> Result<Vec<SamplePair>> {
    let mut out = Vec::with_capacity(n);
    for k in 0..n.div_ceil(2) {
        let spec = SynthSpec {
            frames: 12,
            size: 192,
            target_size: 24.0,
            domain: Domain::Grayscale,
            ..Default::default()
        };
        let seq = synth_sequence(&spec, seed.wrapping_add(k as u64))?.record;
        for (i, j) in [(0, 6), (3, 11)] {
            if out.len() == n {
                break;
            }
            let (dy, dx) = OFFSETS[out.len() % OFFSETS.len()];
            let s = cfg.stride as f64;
            out.push(make_pair(&seq, i, j, (dy as f64 * s, dx as f64 * s), cfg)?);
        }
    }
    Ok(out)
}

/// Row-major index of the labelled cell of `pair` in an `m × m` map.
pub fn target_cell(pair: &SamplePair, m: usize) -> usize {
    let c = (m / 2) as f64;
    let (dy, dx) = pair.displacement;
    ((c + dy).round() as usize) * m + (c + dx).round() as usize
}

/// Trains on the fixed pairs for `batches` full-batch steps, each one a
/// training batch of the vid-only schedule, so the learning rate moves
/// once per epoch of default-sized batches.
pub fn run_overfit(cfg: &OverfitConfig, mut progress: impl FnMut(usize, &LossBreakdown)) -> Result<OverfitReport> {
    let t0 = Instant::now();
    let sampler = SamplerConfig {
        exemplar_size: cfg.model.backbone.exemplar_size,
        search_size: cfg.model.backbone.search_size,
        stride: cfg.model.backbone.total_stride(),
        ..Default::default()
    };
    let pairs = overfit_pairs(cfg.pairs, cfg.seed, &sampler)?;
    let batch = make_batch(&pairs, &cfg.model)?;
    let plan = &apply_strategy(Strategy::VidOnly)[0];
    let tc = TrainConfig {
        strategy: Strategy::VidOnly,
        seed: cfg.seed,
        ..Default::default()
    };
    let per_epoch = tc.batches_per_epoch().max(1);
    let mut trainer = Trainer::new(build_model::<f32>(&cfg.model, cfg.seed)?, &tc);
    trainer.begin_stage(&plan.freeze)?;
    let mut losses = Vec::with_capacity(cfg.batches);
    let mut initial = None;
    for step in 0..cfg.batches {
        let lr = lr_schedule(step / per_epoch, plan.epochs, plan.lr_hi, plan.lr_lo);
        let (loss, _) = trainer.step(&batch, lr)?;
        initial.get_or_insert(loss);
        losses.push(loss.total);
        progress(step, &loss);
    }
    let (last, out, _) = batch_loss(&trainer.model, &batch, trainer.weights, false)?;
    if !last.total.is_finite() {
        return Err(Error::NonFinite(format!("final loss {}", last.total)));
    }
    let fused = out.fused();
    let m = fused.h();
    let hits = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| fused.take_sample(i).argmax() == target_cell(p, m))
        .collect();
    Ok(OverfitReport {
        initial: initial.ok_or_else(|| Error::Config("overfit needs at least one batch".into()))?,
        last,
        losses,
        hits,
        model: trainer.model,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_sit_on_whole_cells() {
        let pairs = overfit_pairs(8, 0, &SamplerConfig::default()).unwrap();
        assert_eq!(pairs.len(), 8);
        for (p, &(dy, dx)) in pairs.iter().zip(&OFFSETS) {
            assert_eq!(p.displacement, (dy as f64, dx as f64));
        }
        assert_eq!(target_cell(&pairs[0], 17), 8 * 17 + 8);
        assert_eq!(target_cell(&pairs[1], 17), 9 * 17 + 7);
    }

    #[test]
    fn short_run_reduces_loss() {
        let cfg = OverfitConfig {
            pairs: 2,
            batches: 6,
            ..Default::default()
        };
        let r = run_overfit(&cfg, |_, _| {}).unwrap();
        assert_eq!(r.losses.len(), 6);
        assert!(r.last.total < r.initial.total, "{:?}", r.losses);
    }
}
