//! Generates a white-hot synthetic sequence with distractors and writes it
//! in the on-disk sequence layout.
//!
//! `cargo run --example synth -- <out-dir> [distractors] [seed]`

use mmnet::dataio::{load_sequence, save_sequence, synth_sequence, SynthSpec};

fn main() -> mmnet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = args.first().map_or("synth-seq", String::as_str);
    let spec = SynthSpec {
        n_distractors: args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2),
        ..Default::default()
    };
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let seq = synth_sequence(&spec, seed)?;
    save_sequence(&seq.record, out.as_ref())?;

    let back = load_sequence(out.as_ref())?;
    let (first, last) = (back.boxes[0], back.boxes[back.len() - 1]);
    println!("{}: {} frames of {}x{}", out, back.len(), spec.size, spec.size);
    println!("target moves {:.1} px", (first.center().0 - last.center().0).hypot(first.center().1 - last.center().1));
    println!("{} distractors, class {}, domain {}", seq.distractors.len(), back.class_id, back.domain);
    Ok(())
}
