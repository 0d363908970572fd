//! Runs the conditioning chain for four noisy views and prints every volume shape.
//!
//! cargo run --release --example conditioning_volumes

use candle_core::DType;
use gen3d::camera::uniform_azimuths;
use gen3d::conditioning::{build_appearance_volume, build_frustum_volume, fuse_geometry};
use gen3d::data::{generate_corpus, DataMix};
use gen3d::model::{Condition, Gen3dModel, ModelConfig};
use gen3d::nn::NeighborCache;
use gen3d::rng::SeededRng;

fn main() -> gen3d::Result<()> {
    let cfg = ModelConfig::desk();
    let model = Gen3dModel::new(&cfg, 0, DType::F32)?;
    let record = &generate_corpus(1, 3, DataMix::Both, cfg.image_size)?[0];
    let cond = Condition::from_image(&record.view_at(0.0).expect("frontal view").image, 0.0, &cfg, "toy-parametric", &cfg.mesh_providers(), DType::F32)?;
    let poses: Vec<_> = uniform_azimuths(4).iter().map(|&a| cfg.pose(a)).collect::<gen3d::Result<_>>()?;
    let x_t = SeededRng::new(1).normal_tensor(&[4, 3, cfg.image_size, cfg.image_size], DType::F32)?;
    let ts = vec![60; 4];
    let cache = NeighborCache::default();

    let ctx = model.conditioner.encoder.encode(&x_t, &ts, &poses)?;
    println!("context features     {:?}", ctx.0.dims());
    let fa = build_appearance_volume(&ctx, &poses, &model.rig, model.conditioner.aggregation)?;
    println!("appearance volume    {:?} ({} blocks)", fa.features.dims(), fa.blocks);
    let fag = fuse_geometry(&fa, &cond.geometry, &model.conditioner.fuser, &model.rig.grid, &cache)?;
    println!("hybrid volume        {:?}", fag.0.dims());
    let fvf = build_frustum_volume(&fag, &poses, &ts, &model.rig, &model.conditioner.frustum, &cache)?;
    for (i, level) in fvf.levels.iter().enumerate() {
        println!("frustum level {i}      {:?}", level.dims());
    }
    println!("depths {:?}", fvf.depths.iter().map(|d| format!("{d:.2}")).collect::<Vec<_>>());
    Ok(())
}
