//! Saves a model with its optimizer state, reloads it, and shows that the
//! bytes and the parameters survive the trip.
//!
//! `cargo run --example checkpoint -- [path]`

use mmnet::network::{build_model, ModelConfig};
use mmnet::trainer::{load_checkpoint, save_checkpoint, Checkpoint};

fn main() -> mmnet::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "example.mmn".into());
    let model = build_model::<f32>(&ModelConfig::default(), 11)?;
    let ck = Checkpoint::new(&model, model.params.zeros_like(), [1, 2, 3, 4]);
    save_checkpoint(&ck, path.as_ref())?;

    let back = load_checkpoint(path.as_ref())?;
    let restored = back.model()?;
    println!("{} tensors, {} scalars", restored.params.len(), restored.params.num_scalars());
    println!("params identical: {}", restored.params == model.params);
    println!("bytes identical: {}", back.to_bytes() == ck.to_bytes());
    for (k, v) in back.echo.iter().take(4) {
        println!("  {k} = {v}");
    }
    Ok(())
}
