//! Memorizes eight fixed synthetic pairs and reports the loss drop and
//! whether every fused peak lands on its labelled cell.
//!
//! `cargo run --example overfit -- [batches] [checkpoint]`

use mmnet::trainer::{save_checkpoint, Checkpoint};
use mmnet::verify::overfit::{run_overfit, OverfitConfig};

fn main() -> mmnet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let batches = args.first().and_then(|s| s.parse().ok()).unwrap_or(500);
    let cfg = OverfitConfig {
        batches,
        ..Default::default()
    };
    let r = run_overfit(&cfg, |step, loss| {
        if step % 25 == 0 {
            println!(
                "step {step:4}  total {:.4}  dis {:.4}  cls {:.4}  fin {:.4}",
                loss.total, loss.dis, loss.cls, loss.fin
            );
        }
    })?;
    println!(
        "initial {:.4}  final {:.4}  ratio {:.4}  hits {}/{}  {:.0}s",
        r.initial.total,
        r.last.total,
        r.loss_ratio(),
        r.hits.iter().filter(|&&h| h).count(),
        r.hits.len(),
        r.seconds
    );
    if let Some(path) = args.get(1) {
        let ck = Checkpoint::new(&r.model, r.model.params.zeros_like(), [0; 4]);
        save_checkpoint(&ck, path.as_ref())?;
        println!("saved {path}");
    }
    Ok(())
}
