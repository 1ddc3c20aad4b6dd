//! Runs acceptance suites and prints the pass/fail table.
//!
//! `cargo run --release --example verify -- [suite|all] [seed]`

use mmnet::verify::{format_table, Suite, Verifier};

fn main() -> mmnet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let suites = Suite::select(args.first().map_or("oracle", String::as_str))?;
    let seed = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut v = Verifier::new(seed);
    for s in suites {
        let r = v.run(s)?;
        print!("{}", format_table(&[r]));
    }
    Ok(())
}
