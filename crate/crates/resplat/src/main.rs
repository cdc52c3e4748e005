//! Command-line front end. All behavior lives in the library; this binary
//! only maps arguments onto library configs and errors onto exit codes.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use resplat::error::{Error, Result};
use resplat::harness::{
    ablate, compare_reports, load_summary, run_benchmark, RunConfig, RunSummary, SceneSource,
    TrajectorySource,
};
use resplat::scene::{
    generate_orbit_trajectory, generate_synthetic_scene, save_scene, save_trajectory, OrbitParams,
    SceneGenParams,
};

#[derive(Parser)]
#[command(
    name = "resplat",
    version,
    about = "Stereo Gaussian-splatting benchmark: cached derivation, shared binocular decoding, elastic workers"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic anchor scene and write it to a file.
    GenScene(GenSceneArgs),
    /// Generate an orbit trajectory and write it as JSON lines.
    GenTraj(GenTrajArgs),
    /// Render a trajectory under a flag set; write frames.csv and summary.json.
    Run(RunArgs),
    /// Run the four-row feature ablation grid and print the table.
    Ablate(RunArgs),
    /// Compare two saved runs (summary.json files or their directories).
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenSceneArgs {
    /// Output scene file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 20_000)]
    anchors: u32,
    #[arg(long, default_value_t = 3)]
    lod_levels: u32,
    #[arg(long, default_value_t = 32)]
    feature_dim: u32,
    #[arg(long, default_value_t = 10)]
    gaussians_per_anchor: u32,
}

#[derive(Args)]
struct GenTrajArgs {
    /// Output trajectory file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    frames: u32,
    #[arg(long, default_value_t = 60.0)]
    radius: f64,
    #[arg(long, default_value_t = 0.064)]
    ipd: f64,
    #[arg(long, default_value_t = 256)]
    width: u32,
    #[arg(long, default_value_t = 256)]
    height: u32,
    /// Pose rate in poses per second.
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
}

#[derive(Args)]
struct RunArgs {
    /// Scene file; omitted generates a synthetic scene from --seed.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Trajectory file; omitted generates the default orbit.
    #[arg(long)]
    traj: Option<PathBuf>,
    /// Seed for the generated scene when --scene is not given.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Anchor count for the generated scene.
    #[arg(long, default_value_t = 20_000)]
    anchors: u32,
    /// Frame count for the generated orbit.
    #[arg(long, default_value_t = 100)]
    frames: u32,
    #[arg(long, default_value_t = 256)]
    width: u32,
    #[arg(long, default_value_t = 256)]
    height: u32,
    /// Reuse decoded Gaussians across frames.
    #[arg(long)]
    cache: bool,
    /// Share one filter and decode pass between the two eyes.
    #[arg(long)]
    dered: bool,
    /// Use the fast decode and rasterization kernels.
    #[arg(long)]
    fast: bool,
    /// Drive frames through the elastic worker pool.
    #[arg(long)]
    elastic: bool,
    /// Maximum cache reuse depth.
    #[arg(long, default_value_t = 10)]
    dmax: u32,
    #[arg(long, default_value_t = 60.0)]
    min_fps: f64,
    #[arg(long, default_value_t = 120.0)]
    max_fps: f64,
    #[arg(long, default_value_t = 2)]
    workers_max: u32,
    /// Elastic only: simulate the schedule on a fixed per-frame cost
    /// instead of rendering.
    #[arg(long)]
    sim_time: bool,
    #[arg(long, default_value_t = 12.0)]
    sim_cost_ms: f64,
    /// Skip the reference-pipeline quality comparison.
    #[arg(long)]
    no_quality: bool,
    /// Output directory for frames.csv, summary.json, and PNG dumps.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Save every Nth frame as PNGs (requires --out); 0 disables.
    #[arg(long, default_value_t = 0)]
    dump_every: u32,
}

impl RunArgs {
    fn to_config(&self) -> RunConfig {
        let scene = match &self.scene {
            Some(p) => SceneSource::File(p.clone()),
            None => SceneSource::Generated(SceneGenParams {
                seed: self.seed,
                n_anchors: self.anchors,
                ..SceneGenParams::default()
            }),
        };
        let trajectory = match &self.traj {
            Some(p) => TrajectorySource::File(p.clone()),
            None => TrajectorySource::Orbit(OrbitParams {
                n_frames: self.frames,
                width: self.width,
                height: self.height,
                ..OrbitParams::default()
            }),
        };
        let mut config = RunConfig::new(scene, trajectory);
        config.cache = self.cache;
        config.de_redundancy = self.dered;
        config.fast_kernels = self.fast;
        config.elastic = self.elastic;
        config.cache_depth = self.dmax;
        config.min_fps = self.min_fps;
        config.max_fps = self.max_fps;
        config.workers_max = self.workers_max;
        config.sim_time = self.sim_time;
        config.sim_cost_ms = self.sim_cost_ms;
        config.quality = !self.no_quality;
        config.out_dir = self.out.clone();
        config.dump_every = self.dump_every;
        config
    }
}

#[derive(Args)]
struct CompareArgs {
    /// First run: a summary.json or the directory containing one.
    run_a: PathBuf,
    /// Second run, same form.
    run_b: PathBuf,
    /// Write the comparison as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn summary_path(p: &PathBuf) -> PathBuf {
    if p.is_dir() {
        p.join("summary.json")
    } else {
        p.clone()
    }
}

fn print_run(summary: &RunSummary) {
    let r = &summary.report;
    println!("run: {}", summary.label);
    println!("frames: {}  avg_fps: {:.3}  p1_fps: {:.3}", r.n_frames, r.avg_fps, r.p1_fps);
    println!(
        "stage means (ms): filter {:.3}  decode {:.3}  raster {:.3}  total {:.3}",
        r.mean_filter_ms, r.mean_decode_ms, r.mean_raster_ms, r.mean_total_ms
    );
    println!("peak tracked memory: {} bytes", r.peak_memory_bytes);
    if let Some(q) = &r.quality {
        let db = |v: f64| if v.is_finite() { format!("{v:.3}") } else { "inf".to_string() };
        println!(
            "quality vs reference: mean_psnr {} dB  min_psnr {} dB  mean_ssim {:.4}",
            db(q.mean_psnr_db),
            db(q.min_psnr_db),
            q.mean_ssim
        );
    }
    if let Some(s) = &r.session {
        println!(
            "session: displayed {}  discarded {}  pose rejections {}  drops {} capacity / {} stale",
            s.n_displayed, s.n_discarded, s.n_rejected_pose, s.n_dropped_capacity, s.n_dropped_stale
        );
        if let Some((t, n)) = s.worker_timeline.last() {
            println!("workers at end: {n} (last change at {t:.3}s)");
        }
    }
}

fn run_cmd(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenScene(a) => {
            let params = SceneGenParams {
                seed: a.seed,
                n_anchors: a.anchors,
                lod_levels: a.lod_levels,
                feature_dim: a.feature_dim,
                gaussians_per_anchor: a.gaussians_per_anchor,
                ..SceneGenParams::default()
            };
            let scene = generate_synthetic_scene(&params)?;
            save_scene(&scene, &a.out)?;
            println!(
                "wrote {} ({} anchors, {} levels of detail)",
                a.out.display(),
                scene.n_anchors(),
                params.lod_levels
            );
            Ok(())
        }
        Cmd::GenTraj(a) => {
            let params = OrbitParams {
                n_frames: a.frames,
                radius: a.radius,
                ipd: a.ipd,
                width: a.width,
                height: a.height,
                fps: a.fps,
                ..OrbitParams::default()
            };
            let traj = generate_orbit_trajectory(&params)?;
            save_trajectory(&traj, &a.out)?;
            println!("wrote {} ({} poses)", a.out.display(), traj.frames.len());
            Ok(())
        }
        Cmd::Run(a) => {
            let summary = run_benchmark(&a.to_config())?;
            print_run(&summary);
            if let Some(out) = &a.out {
                println!("reports in {}", out.display());
            }
            Ok(())
        }
        Cmd::Ablate(a) => {
            let report = ablate(&a.to_config())?;
            print!("{}", report.to_text());
            if let Some(out) = &a.out {
                let mut json = serde_json::to_string_pretty(&report)
                    .map_err(Error::from)?;
                json.push('\n');
                std::fs::write(out.join("ablation.json"), json)?;
                println!("reports in {}", out.display());
            }
            Ok(())
        }
        Cmd::Compare(a) => {
            let sa = load_summary(&summary_path(&a.run_a))?;
            let sb = load_summary(&summary_path(&a.run_b))?;
            let report = compare_reports(&sa, &sb)?;
            print!("{}", report.to_text());
            if let Some(out) = &a.out {
                let mut json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
                json.push('\n');
                std::fs::write(out, json)?;
            }
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run_cmd(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
