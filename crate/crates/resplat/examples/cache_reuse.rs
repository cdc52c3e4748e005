//! Shows the decode cache at work along an orbit: after the first full
//! decode, most frames reuse almost everything, and the reuse depth follows
//! the miss rate. A static camera afterwards decodes nothing new until its
//! cohort expires.

use resplat::cache::ComputationCache;
use resplat::scene::{generate_orbit_trajectory, generate_synthetic_scene, OrbitParams, SceneGenParams};
use resplat::stereo::{render_stereo, RenderOptions};

fn main() -> resplat::Result<()> {
    let scene = generate_synthetic_scene(&SceneGenParams {
        seed: 3,
        n_anchors: 30_000,
        ..SceneGenParams::default()
    })?;
    let orbit = generate_orbit_trajectory(&OrbitParams {
        n_frames: 24,
        width: 128,
        height: 128,
        ..OrbitParams::default()
    })?;

    let options = RenderOptions::default();
    let mut cache = ComputationCache::new(8)?;

    println!("frame  required  misses  update  depth  decode_ms");
    for (k, tf) in orbit.frames.iter().enumerate() {
        let (_, _, rec) = render_stereo(&scene, &tf.rig, &mut cache, &options)?;
        println!(
            "{k:5}  {:8}  {:6}  {:6.3}  {:5}  {:9.2}",
            rec.cache.n_required,
            rec.cache.n_misses,
            rec.cache.update_rate,
            rec.cache.depth_after,
            rec.decode_ms
        );
    }

    let hold = &orbit.frames[orbit.frames.len() - 1];
    let mut decoded = 0;
    for _ in 0..8 {
        let (_, _, rec) = render_stereo(&scene, &hold.rig, &mut cache, &options)?;
        decoded += rec.cache.n_misses;
    }
    println!("static camera, 8 frames: {decoded} anchors decoded (cohort refresh only)");
    Ok(())
}
