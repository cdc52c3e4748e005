//! Measures cached-pipeline quality against the all-off reference with the
//! harness metrics: per-frame worst-eye PSNR and SSIM along a short orbit.

use resplat::cache::ComputationCache;
use resplat::harness::{psnr_db, ssim};
use resplat::scene::{generate_orbit_trajectory, generate_synthetic_scene, OrbitParams, SceneGenParams};
use resplat::stereo::{render_stereo, RenderOptions};

fn main() -> resplat::Result<()> {
    let scene = generate_synthetic_scene(&SceneGenParams {
        seed: 17,
        n_anchors: 15_000,
        ..SceneGenParams::default()
    })?;
    let orbit = generate_orbit_trajectory(&OrbitParams {
        n_frames: 20,
        width: 128,
        height: 128,
        ..OrbitParams::default()
    })?;

    let mut cached = RenderOptions::baseline();
    cached.use_cache = true;
    let reference = RenderOptions::baseline();
    let mut cache = ComputationCache::new(10)?;
    let mut ref_cache = ComputationCache::new(10)?;

    println!("frame  psnr_db   ssim");
    for (k, tf) in orbit.frames.iter().enumerate() {
        let (cl, cr, _) = render_stereo(&scene, &tf.rig, &mut cache, &cached)?;
        let (bl, br, _) = render_stereo(&scene, &tf.rig, &mut ref_cache, &reference)?;
        let psnr = psnr_db(&cl, &bl)?.min(psnr_db(&cr, &br)?);
        let s = ssim(&cl, &bl)?.min(ssim(&cr, &br)?);
        println!("{k:5}  {psnr:7.2}  {s:.4}");
    }
    Ok(())
}
