//! Runs one end-to-end benchmark through the harness: generated scene and
//! orbit, all pipeline flags on, frames.csv and summary.json written to a
//! temp directory.

use resplat::harness::{run_benchmark, RunConfig, SceneSource, TrajectorySource};
use resplat::scene::{OrbitParams, SceneGenParams};

fn main() -> resplat::Result<()> {
    let out = std::env::temp_dir().join("benchmark_run_example");
    std::fs::create_dir_all(&out)?;

    let mut config = RunConfig::new(
        SceneSource::Generated(SceneGenParams {
            seed: 9,
            n_anchors: 15_000,
            ..SceneGenParams::default()
        }),
        TrajectorySource::Orbit(OrbitParams {
            n_frames: 30,
            width: 128,
            height: 128,
            ..OrbitParams::default()
        }),
    );
    config.out_dir = Some(out.clone());

    let summary = run_benchmark(&config)?;
    let report = &summary.report;
    println!("run: {}", summary.label);
    println!("frames:        {}", report.n_frames);
    println!("avg fps:       {:.1}", report.avg_fps);
    println!("mean frame:    {:.1} ms", report.mean_total_ms);
    println!("peak memory:   {:.1} MiB", report.peak_memory_bytes as f64 / (1 << 20) as f64);
    if let Some(q) = &report.quality {
        println!("mean psnr:     {:.2} dB (min {:.2})", q.mean_psnr_db, q.min_psnr_db);
        println!("mean ssim:     {:.4} (min {:.4})", q.mean_ssim, q.min_ssim);
    }
    println!("artifacts in {}", out.display());
    Ok(())
}
