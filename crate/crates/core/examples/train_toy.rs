//! Trains the desk model on two procedural identities and prints the loss curve.
//!
//! cargo run --release --example train_toy -- [steps]

use gen3d::data::{generate_corpus, DataMix};
use gen3d::training::{build_examples, fit, FitOptions, TrainConfig};

fn main() -> gen3d::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let cfg = TrainConfig { steps, ..TrainConfig::desk() };
    let records = generate_corpus(2, cfg.seed, DataMix::Both, cfg.model.image_size)?;
    let examples = build_examples(&records, &cfg)?;
    let out = fit(&cfg, &examples, &FitOptions { progress_every: 25, ..Default::default() })?;
    let window = |a: usize| out.losses[a.saturating_sub(50)..a].iter().sum::<f64>() / 50f64.min(a as f64);
    println!("loss window at 50: {:.4}, at end: {:.4}", window(50.min(out.losses.len())), window(out.losses.len()));
    Ok(())
}
