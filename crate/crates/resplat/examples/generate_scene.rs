//! Generates a synthetic anchor scene, saves it, and reloads it bit-exactly.

use resplat::scene::{generate_synthetic_scene, load_scene, save_scene, SceneGenParams};
use sha2::{Digest, Sha256};

fn main() -> resplat::Result<()> {
    let params = SceneGenParams { seed: 42, n_anchors: 5_000, ..SceneGenParams::default() };
    let scene = generate_synthetic_scene(&params)?;

    println!("anchors:            {}", scene.n_anchors());
    println!("feature dim:        {}", scene.meta.feature_dim);
    println!("gaussians / anchor: {}", scene.meta.gaussians_per_anchor);
    println!("lod levels:         {}", scene.meta.lod_levels);
    println!("approx size:        {:.1} MiB", scene.approx_bytes() as f64 / (1 << 20) as f64);

    let path = std::env::temp_dir().join("generate_scene_example.scene");
    save_scene(&scene, &path)?;
    let reloaded = load_scene(&path)?;

    let digest = |s: &resplat::scene::SceneModel| {
        let mut h = Sha256::new();
        h.update(resplat::scene::scene_to_bytes(s));
        format!("{:x}", h.finalize())
    };
    assert_eq!(digest(&scene), digest(&reloaded));
    println!("round-trip sha256:  {}", &digest(&scene)[..16]);
    println!("saved to {}", path.display());
    Ok(())
}
