//! Predicts noise for several views at once and shows how attention couples them.
//!
//! cargo run --release --example joint_denoiser

use candle_core::{DType, Device, Tensor};
use gen3d::camera::uniform_azimuths;
use gen3d::data::{generate_corpus, DataMix};
use gen3d::denoiser::AttentionMode;
use gen3d::model::{Condition, Gen3dModel, ModelConfig};
use gen3d::rng::SeededRng;

fn main() -> gen3d::Result<()> {
    let cfg = ModelConfig::desk();
    let mut model = Gen3dModel::new(&cfg, 0, DType::F32)?;
    println!("{} parameter tensors, {} scalars", model.store.len(), model.store.num_scalars());
    let record = &generate_corpus(1, 5, DataMix::Both, cfg.image_size)?[0];
    let cond = Condition::from_image(&record.view_at(0.0).expect("frontal view").image, 0.0, &cfg, "toy-parametric", &cfg.mesh_providers(), DType::F32)?;
    let poses: Vec<_> = uniform_azimuths(4).iter().map(|&a| cfg.pose(a)).collect::<gen3d::Result<_>>()?;
    let x = SeededRng::new(2).normal_tensor(&[4, 3, cfg.image_size, cfg.image_size], DType::F32)?;
    let fvf = model.conditioner.condition(&x, 40, &poses, &cond.geometry, &model.rig, &Default::default())?;
    let bumped = Tensor::cat(&[(x.narrow(0, 0, 1)? + 1.0)?, x.narrow(0, 1, 3)?], 0)?;
    let rest = Tensor::new(&[1u32, 2, 3], &Device::Cpu)?;
    for mode in [AttentionMode::Joint, AttentionMode::PerView, AttentionMode::Off] {
        model.set_attention(mode);
        let a = model.denoiser.predict_noise(&x, &cond.y, &fvf, 40, &poses, &cond.y_pose)?;
        let b = model.denoiser.predict_noise(&bumped, &cond.y, &fvf, 40, &poses, &cond.y_pose)?;
        let change = (a.index_select(&rest, 0)? - b.index_select(&rest, 0)?)?.abs()?.max_keepdim(0)?.flatten_all()?.max(0)?;
        println!("{mode:?}: perturbing view 0 moves the other views by up to {:.3e}", change.to_scalar::<f32>()?);
    }
    Ok(())
}
