//! Trains briefly, saves a checkpoint, reloads it and samples a 16-view grid.
//!
//! cargo run --release --example sample_grid -- [steps] [out.png]

use gen3d::camera::uniform_azimuths;
use gen3d::data::{generate_corpus, DataMix};
use gen3d::imageio::{grid_columns, tensor_to_images, tile_grid};
use gen3d::rng::SeededRng;
use gen3d::training::{build_examples, fit, sample_views, Checkpoint, FitOptions, TrainConfig};

fn main() -> gen3d::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let out = args.next().unwrap_or_else(|| "sample_grid.png".into());
    let cfg = TrainConfig { steps, ..TrainConfig::desk() };
    let records = generate_corpus(2, cfg.seed, DataMix::Both, cfg.model.image_size)?;
    let examples = build_examples(&records, &cfg)?;
    let dir = std::env::temp_dir().join("gen3d_sample_grid");
    let trained = fit(&cfg, &examples, &FitOptions { progress_every: 50, ..Default::default() })?;
    trained.checkpoint.save(&dir.join("final.bin"))?;

    let ck = Checkpoint::load(&dir.join("final.bin"))?;
    let model = ck.model()?;
    let poses: Vec<_> = uniform_azimuths(16).iter().map(|&a| cfg.model.pose(a)).collect::<gen3d::Result<_>>()?;
    let views = sample_views(&model, &examples[0].cond, &cfg.model, &poses, &ck.schedule, cfg.ddim_steps, cfg.eta, &mut SeededRng::new(1))?;
    let images = tensor_to_images(&views)?;
    tile_grid(&images, grid_columns(images.len()))?.save(&out)?;
    println!("wrote {out}");
    Ok(())
}
