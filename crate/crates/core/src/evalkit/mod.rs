//! Benchmark metrics: center error precision, overlap success with AUC,
//! and a reset-based accuracy / robustness / expected-overlap protocol.

mod report;

pub use report::{read_sequence_csv, write_report, AGGREGATE_FILE, REPORT_HEADER, SEQUENCE_FILE};

use std::fmt;
use std::str::FromStr;

use image::GrayImage;

use crate::dataio::{BBox, SequenceRecord};
use crate::error::{Error, Result};

/// Precision thresholds 0..=50 px.
pub const PRECISION_THRESHOLDS: usize = 51;
/// Success thresholds 0, 0.05, …, 1.
pub const SUCCESS_THRESHOLDS: usize = 21;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Center location error in pixels.
pub fn cle(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}

fn check_lengths(pred: &[BBox], gt: &[BBox]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Input(format!(
            "trajectory has {} boxes, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::Input("empty trajectory".into()));
    }
    Ok(())
}

/// Fraction of frames with CLE ≤ τ for τ = 0..=50, and the value at 20 px.
pub fn precision_curve(pred: &[BBox], gt: &[BBox]) -> Result<(Vec<f64>, f64)> {
    check_lengths(pred, gt)?;
    let errs: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| cle(p, g)).collect();
    let n = errs.len() as f64;
    let curve: Vec<f64> = (0..PRECISION_THRESHOLDS)
        .map(|t| errs.iter().filter(|&&e| e <= t as f64).count() as f64 / n)
        .collect();
    let pre20 = curve[20];
    Ok((curve, pre20))
}

/// Success threshold `k`: exactly `k/20`.
pub fn success_threshold(k: usize) -> f64 {
    k as f64 / 20.0
}

/// Fraction of frames with IoU strictly above τ, and the curve mean (AUC).
pub fn success_curve(pred: &[BBox], gt: &[BBox]) -> Result<(Vec<f64>, f64)> {
    check_lengths(pred, gt)?;
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| iou(p, g)).collect();
    let n = ious.len() as f64;
    let curve: Vec<f64> = (0..SUCCESS_THRESHOLDS)
        .map(|k| ious.iter().filter(|&&v| v > success_threshold(k)).count() as f64 / n)
        .collect();
    let auc = curve.iter().sum::<f64>() / SUCCESS_THRESHOLDS as f64;
    Ok((curve, auc))
}

/// A tracker that can be (re)started at any frame.
pub trait TrackerRunner {
    fn init(&mut self, frame: &GrayImage, bbox: BBox) -> Result<()>;
    fn track(&mut self, frame: &GrayImage) -> Result<BBox>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VotLiteParams {
    /// Frames between a failure and the re-initialization.
    pub reinit_skip: usize,
    /// Frames from each initialization left out of accuracy.
    pub burnin: usize,
}

impl Default for VotLiteParams {
    fn default() -> Self {
        Self {
            reinit_skip: 5,
            burnin: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VotLiteResult {
    /// Mean IoU over tracked frames outside burn-in; 0 when no frame qualifies.
    pub accuracy: f64,
    pub robustness: usize,
    /// Mean per-frame IoU with zeros from each failure until re-initialization.
    /// A single-sequence simplification, not the length-stratified EAO.
    pub eao_lite: f64,
    /// Per-frame overlap as used for `eao_lite`.
    pub overlaps: Vec<f64>,
    pub failures: Vec<usize>,
}

/// Reset protocol on one sequence. An initialization frame scores the IoU
/// of the initializing box with itself (1 for a valid box). A frame whose
/// prediction has zero overlap is a failure; the runner restarts
/// `reinit_skip` frames later at the first frame with a valid box. Frames
/// `[init, init + burnin)` and failure frames are excluded from accuracy.
pub fn vot_lite(runner: &mut dyn TrackerRunner, seq: &SequenceRecord, p: VotLiteParams) -> Result<VotLiteResult> {
    let n = seq.frames.len();
    if seq.boxes.len() != n {
        return Err(Error::Input(format!(
            "{}: {} frames but {} boxes",
            seq.name,
            n,
            seq.boxes.len()
        )));
    }
    if n < p.reinit_skip + 2 {
        return Err(Error::Input(format!(
            "{}: {n} frames, need at least reinit_skip + 2 = {}",
            seq.name,
            p.reinit_skip + 2
        )));
    }
    let mut overlaps = vec![0.0; n];
    let mut scored = vec![false; n];
    let mut failures = Vec::new();
    let next_valid = |from: usize| (from..n).find(|&t| !seq.boxes[t].is_degenerate());
    let mut start = next_valid(0);
    while let Some(init) = start {
        runner.init(&seq.frames[init], seq.boxes[init])?;
        overlaps[init] = iou(&seq.boxes[init], &seq.boxes[init]);
        start = None;
        for t in init + 1..n {
            let pred = runner.track(&seq.frames[t])?;
            let o = iou(&pred, &seq.boxes[t]);
            if o <= 0.0 {
                failures.push(t);
                start = next_valid(t + p.reinit_skip);
                break;
            }
            overlaps[t] = o;
            scored[t] = t >= init + p.burnin;
        }
    }
    let acc: Vec<f64> = overlaps.iter().zip(&scored).filter(|(_, &s)| s).map(|(&o, _)| o).collect();
    let accuracy = if acc.is_empty() {
        0.0
    } else {
        acc.iter().sum::<f64>() / acc.len() as f64
    };
    Ok(VotLiteResult {
        accuracy,
        robustness: failures.len(),
        eao_lite: overlaps.iter().sum::<f64>() / n as f64,
        overlaps,
        failures,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// One-pass evaluation of precomputed trajectories.
    Ptb,
    /// Reset-based evaluation that reruns the tracker.
    VotLite,
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ptb" => Ok(Self::Ptb),
            "vot-lite" => Ok(Self::VotLite),
            _ => Err(Error::Config(format!("unknown protocol {s:?} (ptb, vot-lite)"))),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ptb => "ptb",
            Self::VotLite => "vot-lite",
        })
    }
}

/// Metrics of one sequence. Fields a protocol does not produce are `None`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SequenceMetrics {
    pub name: String,
    pub precision: Vec<f64>,
    pub success: Vec<f64>,
    pub pre20: Option<f64>,
    pub auc: Option<f64>,
    pub accuracy: Option<f64>,
    pub robustness: Option<f64>,
    pub eao_lite: Option<f64>,
}

impl SequenceMetrics {
    /// One-pass metrics of a trajectory.
    pub fn one_pass(name: &str, pred: &[BBox], gt: &[BBox]) -> Result<Self> {
        let (precision, pre20) = precision_curve(pred, gt)?;
        let (success, auc) = success_curve(pred, gt)?;
        Ok(Self {
            name: name.to_string(),
            precision,
            success,
            pre20: Some(pre20),
            auc: Some(auc),
            ..Default::default()
        })
    }

    pub fn reset_based(name: &str, r: &VotLiteResult) -> Self {
        Self {
            name: name.to_string(),
            accuracy: Some(r.accuracy),
            robustness: Some(r.robustness as f64),
            eao_lite: Some(r.eao_lite),
            ..Default::default()
        }
    }

    fn values(&self) -> [Option<f64>; 5] {
        [self.pre20, self.auc, self.accuracy, self.robustness, self.eao_lite]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub protocol: Protocol,
    pub sequences: Vec<SequenceMetrics>,
}

impl MetricReport {
    /// Unweighted mean over sequences, field by field; curves averaged pointwise.
    pub fn aggregate(&self) -> SequenceMetrics {
        let n = self.sequences.len();
        let mean_curve = |get: fn(&SequenceMetrics) -> &Vec<f64>| -> Vec<f64> {
            let with: Vec<&Vec<f64>> = self.sequences.iter().map(get).filter(|c| !c.is_empty()).collect();
            match with.first() {
                None => Vec::new(),
                Some(c0) => (0..c0.len())
                    .map(|k| with.iter().map(|c| c[k]).sum::<f64>() / with.len() as f64)
                    .collect(),
            }
        };
        let mut out = SequenceMetrics {
            name: "mean".into(),
            precision: mean_curve(|s| &s.precision),
            success: mean_curve(|s| &s.success),
            ..Default::default()
        };
        let slots: [&mut Option<f64>; 5] = [
            &mut out.pre20,
            &mut out.auc,
            &mut out.accuracy,
            &mut out.robustness,
            &mut out.eao_lite,
        ];
        for (k, slot) in slots.into_iter().enumerate() {
            let vals: Vec<f64> = self.sequences.iter().filter_map(|s| s.values()[k]).collect();
            if n > 0 && !vals.is_empty() {
                *slot = Some(vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests;
