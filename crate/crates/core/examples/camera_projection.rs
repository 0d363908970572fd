//! Projects the voxel grid into cameras around the head and samples a ramp image.
//!
//! cargo run --release --example camera_projection

use candle_core::{Device, Tensor};
use gen3d::camera::{build_voxel_grid, project, sample_view_features, uniform_azimuths, Intrinsics};

fn main() -> gen3d::Result<()> {
    let grid = build_voxel_grid(8, 1.0)?;
    let k = Intrinsics::centered(1.3 * 32.0, 32, 32)?;
    let ramp: Vec<f64> = (0..32 * 32).map(|i| (i % 32) as f64).collect();
    let features = Tensor::from_vec(ramp, (1, 32, 32), &Device::Cpu)?;
    for az in uniform_azimuths(8) {
        let pose = gen3d::camera::pose_from_angles(az, 0.0, 2.7)?;
        let centre = project([0.0, 0.0, 0.0], &pose, &k);
        let (vol, valid) = sample_view_features(&features, &pose, &k, &grid)?;
        let seen = valid.sum_all()?.to_scalar::<f64>()?;
        let mean_u = vol.sum_all()?.to_scalar::<f64>()? / seen.max(1.0);
        println!(
            "azimuth {az:>7.1}  origin -> ({:.2}, {:.2}) depth {:.2}  visible vertices {seen:>3}/{}  mean u {mean_u:.2}",
            centre.u,
            centre.v,
            centre.depth,
            grid.len()
        );
    }
    Ok(())
}
