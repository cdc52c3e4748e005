//! Renders one stereo frame and writes both eyes as PNGs.

use nalgebra::Vector3;
use resplat::cache::ComputationCache;
use resplat::scene::{generate_synthetic_scene, Camera, SceneGenParams, StereoRig};
use resplat::stereo::{render_stereo, RenderOptions};

fn main() -> resplat::Result<()> {
    let scene = generate_synthetic_scene(&SceneGenParams {
        seed: 7,
        n_anchors: 20_000,
        ..SceneGenParams::default()
    })?;

    let eye = |x: f64| {
        Camera::look_at(
            Vector3::new(x, 12.0, 70.0),
            Vector3::new(0.0, 8.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            60f64.to_radians(),
            512,
            512,
            0.1,
            1e4,
        )
    };
    let ipd = 0.064;
    let rig = StereoRig::new(eye(-ipd / 2.0)?, eye(ipd / 2.0)?)?;

    let mut cache = ComputationCache::new(10)?;
    let (left, right, rec) = render_stereo(&scene, &rig, &mut cache, &RenderOptions::default())?;

    println!(
        "filter {:.1} ms, decode {:.1} ms, raster {:.1} + {:.1} ms, {} gaussians",
        rec.filter_ms, rec.decode_ms, rec.raster_left_ms, rec.raster_right_ms, rec.n_gaussians
    );
    let dir = std::env::temp_dir();
    let l = dir.join("stereo_left.png");
    let r = dir.join("stereo_right.png");
    left.save_png(&l)?;
    right.save_png(&r)?;
    println!("wrote {} and {}", l.display(), r.display());
    Ok(())
}
