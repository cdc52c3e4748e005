//! Replays the elastic scheduler on a simulated clock: a mid-run cost step
//! drops the frame rate below the floor and the controller grows the worker
//! pool within one control period. Deterministic: run it twice, the numbers
//! do not move.

use resplat::scene::{generate_orbit_trajectory, generate_synthetic_scene, OrbitParams, SceneGenParams};
use resplat::scheduler::{run_session, SessionConfig, SimCost, SimWorkload};

fn main() -> resplat::Result<()> {
    let scene = generate_synthetic_scene(&SceneGenParams {
        seed: 1,
        n_anchors: 100,
        ..SceneGenParams::default()
    })?;
    let poses = generate_orbit_trajectory(&OrbitParams {
        n_frames: 1200,
        fps: 240.0,
        ..OrbitParams::default()
    })?;

    // 8 ms per frame until t = 2.5 s, then 24 ms: one worker can no longer
    // hold 60 fps.
    let mut config = SessionConfig::simulated(SimWorkload {
        cost: SimCost::StepsMs(vec![(0.0, 8.0), (2.5, 24.0)]),
        worker_speeds: Vec::new(),
    });
    config.min_fps = 60.0;
    config.max_fps = 120.0;
    config.workers_max = 3;

    let report = run_session(&scene, &poses, &config)?;
    println!("worker pool over time:");
    for (t, n) in &report.worker_timeline {
        println!("  t = {t:6.2} s  workers = {n}");
    }
    println!(
        "displayed {} of {} rendered, avg {:.1} fps, p1 {:.1} fps",
        report.n_displayed,
        report.records.len(),
        report.avg_fps,
        report.p1_fps
    );
    println!(
        "drops: {} stale, {} over capacity, {} rejected as near-duplicates",
        report.n_dropped_stale, report.n_dropped_capacity, report.n_rejected_pose
    );
    Ok(())
}
