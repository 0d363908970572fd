//! Estimates a coarse head mesh from one rendered view and voxelizes it.
//!
//! cargo run --release --example mesh_prior

use gen3d::camera::build_voxel_grid;
use gen3d::data::{generate_corpus, DataMix};
use gen3d::mesh::{estimate_mesh, voxelize_mesh};
use gen3d::model::ModelConfig;

fn main() -> gen3d::Result<()> {
    let cfg = ModelConfig::desk();
    let providers = cfg.mesh_providers();
    let grid = build_voxel_grid(cfg.grid_size, cfg.extent)?;
    for record in generate_corpus(3, 1, DataMix::Both, cfg.image_size)? {
        let front = &record.view_at(0.0).expect("frontal view").image;
        for provider in providers.ids() {
            let mesh = estimate_mesh(front, provider, &providers)?;
            let (lo, hi) = mesh.bounding_box();
            let occ = voxelize_mesh(&mesh.normalized_to(&grid), &grid);
            println!(
                "identity {} {provider:>15}: {} vertices, box x [{:.2}, {:.2}] y [{:.2}, {:.2}], {} occupied voxels of {}",
                record.id,
                mesh.vertices.len(),
                lo[0],
                hi[0],
                lo[1],
                hi[1],
                occ.len(),
                grid.len()
            );
        }
    }
    Ok(())
}
