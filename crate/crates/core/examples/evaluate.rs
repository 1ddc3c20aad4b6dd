//! One-pass and reset-based metrics for a jittered trajectory and a
//! tracker that loses the target halfway.
//!
//! `cargo run --example evaluate`

use image::GrayImage;
use mmnet::dataio::{synth_sequence, BBox, SynthSpec};
use mmnet::evalkit::{vot_lite, MetricReport, Protocol, SequenceMetrics, TrackerRunner, VotLiteParams};

/// Follows the ground truth, except between frames 40 and 44 where it
/// jumps away.
struct Flaky {
    gt: Vec<BBox>,
    t: usize,
}

impl TrackerRunner for Flaky {
    fn init(&mut self, _frame: &GrayImage, bbox: BBox) -> mmnet::Result<()> {
        self.t = self.gt.iter().position(|b| *b == bbox).unwrap_or(0);
        Ok(())
    }

    fn track(&mut self, _frame: &GrayImage) -> mmnet::Result<BBox> {
        self.t += 1;
        let b = self.gt[self.t];
        Ok(if (40..45).contains(&self.t) { BBox::new(b.x + 200.0, b.y, b.w, b.h) } else { b })
    }
}

fn main() -> mmnet::Result<()> {
    let seq = synth_sequence(&SynthSpec::default(), 3)?.record;
    let pred: Vec<BBox> = seq
        .boxes
        .iter()
        .enumerate()
        .map(|(i, b)| BBox::new(b.x + (i % 7) as f64 * 2.0, b.y, b.w, b.h))
        .collect();
    let one = SequenceMetrics::one_pass(&seq.name, &pred, &seq.boxes)?;
    println!("ptb: pre20 {:.3}  auc {:.3}", one.pre20.unwrap(), one.auc.unwrap());

    let mut runner = Flaky { gt: seq.boxes.clone(), t: 0 };
    let r = vot_lite(&mut runner, &seq, VotLiteParams::default())?;
    println!(
        "vot-lite: accuracy {:.3}  failures {:?}  eao-lite {:.3}",
        r.accuracy, r.failures, r.eao_lite
    );
    let report = MetricReport {
        protocol: Protocol::Ptb,
        sequences: vec![one],
    };
    println!("aggregate auc {:.3}", report.aggregate().auc.unwrap());
    Ok(())
}
