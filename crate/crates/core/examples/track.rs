//! Tracks a synthetic sequence with a checkpoint and compares the fused
//! response against the discriminative branch alone.
//!
//! `cargo run --release --example track -- <model.mmn> [distractors] [seed]`

use mmnet::dataio::{synth_sequence, SynthSpec};
use mmnet::evalkit::iou;
use mmnet::trainer::load_checkpoint;
use mmnet::tracker::{track_sequence, TrackerConfig};

fn main() -> mmnet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(path) = args.first() else {
        eprintln!("usage: track <model.mmn> [distractors] [seed]");
        std::process::exit(2);
    };
    let model = load_checkpoint(path.as_ref())?.model()?;
    let spec = SynthSpec {
        n_distractors: args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2),
        ..Default::default()
    };
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let seq = synth_sequence(&spec, seed)?.record;

    for beta in [0.5, 1.0] {
        let cfg = TrackerConfig {
            branch_mix: beta,
            ..Default::default()
        };
        let run = track_sequence(&model, &seq, &cfg)?;
        let boxes = &run.trajectory.boxes;
        let mean = boxes.iter().zip(&seq.boxes).map(|(p, g)| iou(p, g)).sum::<f64>() / boxes.len() as f64;
        println!("beta {beta}: mean iou {mean:.3}  {:.1} fps", run.fps);
    }
    Ok(())
}
