//! Exercises the rasterizer's optimization toggles: exact tile culling never
//! changes the image, and the opacity-scaled cutoff only drops contributions
//! the blend threshold hides anyway.

use nalgebra::Vector3;
use resplat::decoder::decode_anchors;
use resplat::raster::{rasterize_with_stats, CutoffMode, RasterOptions};
use resplat::scene::{generate_synthetic_scene, Camera, SceneGenParams};

fn main() -> resplat::Result<()> {
    let scene = generate_synthetic_scene(&SceneGenParams {
        seed: 5,
        n_anchors: 8_000,
        ..SceneGenParams::default()
    })?;
    let camera = Camera::look_at(
        Vector3::new(55.0, 20.0, 55.0),
        Vector3::new(0.0, 5.0, 0.0),
        Vector3::new(0.0, 1.0, 0.0),
        60f64.to_radians(),
        256,
        256,
        0.1,
        1e4,
    )?;
    let ids: Vec<u32> = (0..scene.n_anchors()).collect();
    let batch = decode_anchors(&scene, &ids, &camera.position)?;

    let mut opts = RasterOptions::reference();
    let (reference, st_ref) = rasterize_with_stats(&batch, &camera, &opts)?;

    opts.exact_tile_culling = true;
    let (culled, st_cull) = rasterize_with_stats(&batch, &camera, &opts)?;
    println!(
        "exact culling: {} -> {} tile entries, image bit-identical: {}",
        st_ref.n_tile_entries,
        st_cull.n_tile_entries,
        reference.bit_eq(&culled)
    );

    let fast = RasterOptions::fast();
    let (optimized, st_fast) = rasterize_with_stats(&batch, &camera, &fast)?;
    println!(
        "opacity-scaled cutoff: {} tile entries, {} splats culled outright, max pixel diff {:.6}",
        st_fast.n_tile_entries,
        st_fast.n_zero_extent,
        reference.max_abs_diff(&optimized)
    );
    assert_eq!(
        CutoffMode::OpacityScaled,
        fast.cutoff,
        "fast options pair the scaled cutoff with exact culling"
    );
    Ok(())
}
