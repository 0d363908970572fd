//! Scores noise and a lightly perturbed copy of the references with the full metric suite.
//!
//! cargo run --release --example metrics_suite

use gen3d::camera::uniform_azimuths;
use gen3d::data::{generate_corpus, DataMix};
use gen3d::imageio::{images_to_tensor, tensor_to_images};
use gen3d::metrics::{evaluate, EvalIdentity, MetricBackends};
use gen3d::rng::SeededRng;

fn main() -> gen3d::Result<()> {
    let records = generate_corpus(4, 8, DataMix::Both, 32)?;
    let backends = MetricBackends::desk();
    let mut rng = SeededRng::new(3);
    let azimuths = uniform_azimuths(8);
    for (label, noise) in [("near-copies", 0.05), ("pure noise", f64::INFINITY)] {
        let mut idents = Vec::new();
        for r in &records {
            let reference: Vec<_> = azimuths.iter().map(|&a| r.view_at(a).expect("view").image.clone()).collect();
            let refs: Vec<_> = reference.iter().collect();
            let clean = images_to_tensor(&refs, 32, candle_core::DType::F32)?;
            let z = rng.normal_tensor(clean.dims(), candle_core::DType::F32)?;
            let generated = if noise.is_finite() { (clean + z.affine(noise, 0.0)?)? } else { z };
            idents.push(EvalIdentity {
                id: r.id,
                input: r.view_at(0.0).expect("frontal view").image.clone(),
                generated: tensor_to_images(&generated.clamp(-1.0, 1.0)?)?,
                reference: Some(reference),
            });
        }
        let m = evaluate(&idents, &backends)?;
        println!(
            "{label:>12}: FID {:.4}  CLIP-sim {:.4}  I2OID {:.4}  O2OID {:.4}  Re-ID {:.2} (dist {:.3})  SSIM {:.4}",
            m.fid.unwrap_or(f64::NAN),
            m.clip_sim,
            m.i2oid,
            m.o2oid.unwrap_or(f64::NAN),
            m.reid_match.unwrap_or(f64::NAN),
            m.reid_dist.unwrap_or(f64::NAN),
            m.ssim_mean.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
