//! Trains the desk-preset network on synthetic sequences and writes a
//! checkpoint plus a per-batch loss log.
//!
//! `cargo run --release --example train -- [strategy] [epochs] [out.mmn]`

use std::sync::Arc;

use mmnet::dataio::{synth_sequence, Domain, SynthSpec};
use mmnet::network::ModelConfig;
use mmnet::trainer::{train, Datasets, TrainConfig, TrainOutputs};

fn main() -> mmnet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let strategy = args.first().map_or("mix", String::as_str).parse()?;
    let epochs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let out = args.get(2).map_or("train.mmn", String::as_str);

    let make = |domain, class_id, seeds: std::ops::Range<u64>| -> mmnet::Result<Vec<_>> {
        seeds
            .map(|s| {
                let spec = SynthSpec {
                    frames: 30,
                    size: 160,
                    target_size: 20.0,
                    class_id,
                    domain,
                    ..Default::default()
                };
                Ok(synth_sequence(&spec, s)?.record)
            })
            .collect()
    };
    let data = Datasets {
        grayscale: Some(Arc::new(make(Domain::Grayscale, 1, 0..4)?)),
        tir: Some(Arc::new(make(Domain::Tir, 2, 10..14)?)),
    };
    let cfg = TrainConfig {
        strategy,
        epochs: Some(epochs),
        pairs_per_epoch: 32,
        batch: 8,
        ..Default::default()
    };
    let outputs = TrainOutputs {
        checkpoint: Some(out.into()),
        loss_log: Some(format!("{out}.loss.csv").into()),
    };
    let r = train(&cfg, &ModelConfig::default(), &data, None, &outputs)?;
    for row in r.log.iter().step_by(4) {
        println!("epoch {} batch {}  lr {:.2e}  loss {:.4}", row.epoch, row.batch, row.lr, row.loss.total);
    }
    println!("wrote {out} after {} batches", r.log.len());
    Ok(())
}
