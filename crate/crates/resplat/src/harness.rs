//! Benchmark harness: image quality metrics, run orchestration, and report
//! artifacts.
//!
//! A run renders a trajectory under a flag set and writes frames.csv plus
//! summary.json. Quality is measured against the all-flags-off pipeline on
//! the same poses, so every number answers "what did the optimization cost".
//! Comparison and ablation reports are ratios between such runs; they are
//! only meaningful when both runs saw the same scene and trajectory, which
//! the report functions enforce through content fingerprints.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cache::ComputationCache;
use crate::error::{Error, Result};
use crate::raster::{Image, RasterOptions};
use crate::scene::{
    generate_orbit_trajectory, generate_synthetic_scene, load_trajectory,
    scene_to_bytes, trajectory_to_bytes, OrbitParams, SceneGenParams, SceneModel, Trajectory,
};
use crate::scheduler::{
    run_session, DisplayTape, SessionConfig, SessionMode, SimWorkload,
};
use crate::stereo::{render_stereo, FrameRecord, RenderOptions};

// ---------------------------------------------------------------------------
// Image metrics
// ---------------------------------------------------------------------------

fn check_same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::InvalidArgument(format!(
            "image dimensions differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Mean squared error over all pixels and channels, values in [0, 1].
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same_dims(a, b)?;
    if a.data.is_empty() {
        return Err(Error::InvalidArgument("mse of an empty image".into()));
    }
    let mut acc = 0.0f64;
    for (x, y) in a.data.iter().zip(&b.data) {
        let d = f64::from(*x) - f64::from(*y);
        acc += d * d;
    }
    Ok(acc / a.data.len() as f64)
}

/// Peak signal-to-noise ratio in dB: 10 log10(1 / mse). Identical images
/// have no noise floor to compare against, so the result is infinite; report
/// writers render that as the string "inf".
pub fn psnr_db(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / m).log10() })
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
// Stabilizers for a [0, 1] dynamic range: (0.01)^2 and (0.03)^2.
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;

fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let mut t = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in t.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut t {
        *v /= sum;
    }
    t
}

fn luma_plane(img: &Image) -> Vec<f64> {
    img.data
        .chunks_exact(3)
        .map(|p| 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]))
        .collect()
}

/// Separable valid-mode Gaussian filter; output shrinks by window-1 per axis.
fn blur_valid(p: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - (SSIM_WINDOW - 1);
    let oh = h - (SSIM_WINDOW - 1);
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (j, t) in taps.iter().enumerate() {
                acc += t * p[y * w + x + j];
            }
            horiz[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (j, t) in taps.iter().enumerate() {
                acc += t * horiz[(y + j) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Structural similarity on the luma plane: 11x11 Gaussian window with sigma
/// 1.5, no border padding, mean over the windows that fit entirely inside
/// the image. Images must therefore be at least 11x11.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same_dims(a, b)?;
    let (w, h) = (a.width as usize, a.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {w}x{h}"
        )));
    }
    let taps = ssim_taps();
    let la = luma_plane(a);
    let lb = luma_plane(b);
    let sq = |p: &[f64]| p.iter().map(|v| v * v).collect::<Vec<_>>();
    let prod: Vec<f64> = la.iter().zip(&lb).map(|(x, y)| x * y).collect();

    let mu_a = blur_valid(&la, w, h, &taps);
    let mu_b = blur_valid(&lb, w, h, &taps);
    let e_aa = blur_valid(&sq(&la), w, h, &taps);
    let e_bb = blur_valid(&sq(&lb), w, h, &taps);
    let e_ab = blur_valid(&prod, w, h, &taps);

    let mut acc = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        // Variances can dip epsilon-negative from cancellation.
        let va = (e_aa[i] - ma * ma).max(0.0);
        let vb = (e_bb[i] - mb * mb).max(0.0);
        let cov = e_ab[i] - ma * mb;
        acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(acc / mu_a.len() as f64)
}

// ---------------------------------------------------------------------------
// Report types
// ---------------------------------------------------------------------------

fn ser_db<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str("inf")
    }
}

fn de_db<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    struct DbVisitor;
    impl serde::de::Visitor<'_> for DbVisitor {
        type Value = f64;
        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("a dB value or the string \"inf\"")
        }
        fn visit_f64<E: serde::de::Error>(self, v: f64) -> std::result::Result<f64, E> {
            Ok(v)
        }
        fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<f64, E> {
            Ok(v as f64)
        }
        fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<f64, E> {
            Ok(v as f64)
        }
        fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<f64, E> {
            if v == "inf" {
                Ok(f64::INFINITY)
            } else {
                Err(E::custom(format!("unexpected dB string {v:?}")))
            }
        }
    }
    d.deserialize_any(DbVisitor)
}

/// Formats a dB value for text output, matching the JSON "inf" sentinel.
fn fmt_db(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.3}")
    } else {
        "inf".to_string()
    }
}

/// Quality of one rendered frame against its reference render. Stereo frames
/// report the worse eye, so thresholds on these values bound both eyes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameQuality {
    pub frame_id: u64,
    pub mse: f64,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QualitySummary {
    pub per_frame: Vec<FrameQuality>,
    pub mean_mse: f64,
    /// Mean over frames with nonzero error; infinite only when every frame
    /// matched its reference exactly.
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub mean_psnr_db: f64,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub min_psnr_db: f64,
    pub mean_ssim: f64,
    pub min_ssim: f64,
}

fn summarize_quality(per_frame: Vec<FrameQuality>) -> QualitySummary {
    let n = per_frame.len().max(1) as f64;
    let mean_mse = per_frame.iter().map(|q| q.mse).sum::<f64>() / n;
    let finite: Vec<f64> =
        per_frame.iter().map(|q| q.psnr_db).filter(|v| v.is_finite()).collect();
    let mean_psnr_db = if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    let min_psnr_db =
        per_frame.iter().map(|q| q.psnr_db).fold(f64::INFINITY, f64::min);
    let mean_ssim = per_frame.iter().map(|q| q.ssim).sum::<f64>() / n;
    let min_ssim = per_frame.iter().map(|q| q.ssim).fold(f64::INFINITY, f64::min).min(1.0);
    QualitySummary { per_frame, mean_mse, mean_psnr_db, min_psnr_db, mean_ssim, min_ssim }
}

/// Queue and worker-pool counters, present for elastic runs only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionStats {
    pub n_displayed: u32,
    pub n_discarded: u32,
    pub n_rejected_pose: u64,
    pub n_dropped_capacity: u64,
    pub n_dropped_stale: u64,
    pub worker_timeline: Vec<(f64, u32)>,
}

/// Aggregate quality and throughput for one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_frames: u32,
    /// Per-frame comparison against the all-flags-off pipeline. Absent for
    /// elastic sessions (their frames are scheduled, not paired) and when
    /// the comparison was not requested.
    pub quality: Option<QualitySummary>,
    /// Perceptual-metric placeholder; no learned network ships with this
    /// crate, so the column always reads "n/a".
    pub lpips: String,
    pub avg_fps: f64,
    /// 1st percentile of instantaneous FPS, the rate sustained 99% of the
    /// time.
    pub p1_fps: f64,
    pub mean_filter_ms: f64,
    pub mean_decode_ms: f64,
    /// Mean of the two eyes' rasterization times summed per frame.
    pub mean_raster_ms: f64,
    pub mean_total_ms: f64,
    /// High-water mark of tracked buffers: scene residency plus the largest
    /// per-frame cache footprint and transient scratch seen by any worker.
    pub peak_memory_bytes: u64,
    pub session: Option<SessionStats>,
}

/// Flag set identifying a pipeline variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlagSet {
    pub cache: bool,
    pub de_redundancy: bool,
    pub fast_kernels: bool,
    pub elastic: bool,
}

impl FlagSet {
    fn label(&self) -> String {
        let onoff = |b: bool| if b { "on" } else { "off" };
        format!(
            "cache={} dered={} fast={} elastic={}",
            onoff(self.cache),
            onoff(self.de_redundancy),
            onoff(self.fast_kernels),
            onoff(self.elastic)
        )
    }
}

/// Everything summary.json records about a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub flags: FlagSet,
    /// SHA-256 of the scene's serialized bytes.
    pub scene_sha256: String,
    /// SHA-256 of the trajectory's serialized bytes.
    pub trajectory_sha256: String,
    pub cache_depth: u32,
    pub report: MetricReport,
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum SceneSource {
    File(PathBuf),
    Generated(SceneGenParams),
}

#[derive(Debug, Clone)]
pub enum TrajectorySource {
    File(PathBuf),
    Orbit(OrbitParams),
}

/// One benchmark run: where the inputs come from, which pipeline features
/// are enabled, and what to write where.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scene: SceneSource,
    pub trajectory: TrajectorySource,
    pub cache: bool,
    pub de_redundancy: bool,
    pub fast_kernels: bool,
    /// Drive frames through the elastic worker pool instead of a plain
    /// per-pose loop.
    pub elastic: bool,
    pub cache_depth: u32,
    pub min_fps: f64,
    pub max_fps: f64,
    pub workers_max: u32,
    /// Elastic only: replay the scheduler on a simulated clock instead of
    /// rendering. The per-frame cost is `sim_cost_ms`, fixed by config
    /// rather than measured, so two identical runs schedule identically.
    pub sim_time: bool,
    pub sim_cost_ms: f64,
    /// Render the all-flags-off reference on every pose and report
    /// per-frame quality. Ignored by elastic runs.
    pub quality: bool,
    pub out_dir: Option<PathBuf>,
    /// Save every Nth optimized frame as PNGs when an output directory is
    /// set; 0 disables.
    pub dump_every: u32,
}

impl RunConfig {
    pub fn new(scene: SceneSource, trajectory: TrajectorySource) -> Self {
        Self {
            scene,
            trajectory,
            cache: true,
            de_redundancy: true,
            fast_kernels: true,
            elastic: false,
            cache_depth: 10,
            min_fps: 60.0,
            max_fps: 120.0,
            workers_max: 2,
            sim_time: false,
            sim_cost_ms: 12.0,
            quality: true,
            out_dir: None,
            dump_every: 0,
        }
    }

    pub fn flags(&self) -> FlagSet {
        FlagSet {
            cache: self.cache,
            de_redundancy: self.de_redundancy,
            fast_kernels: self.fast_kernels,
            elastic: self.elastic,
        }
    }

    fn render_options(&self) -> RenderOptions {
        RenderOptions {
            use_cache: self.cache,
            de_redundancy: self.de_redundancy,
            fast_decode: self.fast_kernels,
            raster: if self.fast_kernels {
                RasterOptions::fast()
            } else {
                RasterOptions::reference()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cache_depth == 0 {
            return Err(Error::InvalidArgument("cache depth must be >= 1".into()));
        }
        if !(self.min_fps > 0.0) || !(self.max_fps >= self.min_fps) {
            return Err(Error::InvalidArgument("need 0 < min_fps <= max_fps".into()));
        }
        if self.workers_max == 0 {
            return Err(Error::InvalidArgument("workers_max must be >= 1".into()));
        }
        if !(self.sim_cost_ms > 0.0) {
            return Err(Error::InvalidArgument("sim_cost_ms must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

struct LoadedInputs {
    scene: SceneModel,
    trajectory: Trajectory,
    scene_sha256: String,
    trajectory_sha256: String,
}

fn sha_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

fn load_inputs(config: &RunConfig) -> Result<LoadedInputs> {
    let (scene, scene_sha256) = match &config.scene {
        SceneSource::File(p) => {
            let bytes = std::fs::read(p)?;
            (crate::scene::scene_from_bytes(&bytes)?, sha_hex(&bytes))
        }
        SceneSource::Generated(params) => {
            let scene = generate_synthetic_scene(params)?;
            let sha = sha_hex(&scene_to_bytes(&scene));
            (scene, sha)
        }
    };
    let (trajectory, trajectory_sha256) = match &config.trajectory {
        TrajectorySource::File(p) => {
            let traj = load_trajectory(p)?;
            (traj.clone(), sha_hex(&trajectory_to_bytes(&traj)?))
        }
        TrajectorySource::Orbit(params) => {
            let traj = generate_orbit_trajectory(params)?;
            let sha = sha_hex(&trajectory_to_bytes(&traj)?);
            (traj, sha)
        }
    };
    Ok(LoadedInputs { scene, trajectory, scene_sha256, trajectory_sha256 })
}

/// Worst-eye quality for one stereo frame.
fn frame_quality(
    frame_id: u64,
    left: (&Image, &Image),
    right: (&Image, &Image),
) -> Result<FrameQuality> {
    let mse_l = mse(left.0, left.1)?;
    let mse_r = mse(right.0, right.1)?;
    let m = mse_l.max(mse_r);
    let psnr = if m == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / m).log10() };
    let s = ssim(left.0, left.1)?.min(ssim(right.0, right.1)?);
    Ok(FrameQuality { frame_id, mse: m, psnr_db: psnr, ssim: s })
}

fn mean_of(records: &[FrameRecord], f: impl Fn(&FrameRecord) -> f64) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().map(f).sum::<f64>() / records.len() as f64
}

fn timing_aggregates(records: &[FrameRecord], scene_bytes: u64) -> (f64, f64, f64, f64, u64) {
    let peak = scene_bytes
        + records.iter().map(|r| r.scratch_bytes + r.cache_bytes).max().unwrap_or(0);
    (
        mean_of(records, |r| r.filter_ms),
        mean_of(records, |r| r.decode_ms),
        mean_of(records, |r| r.raster_left_ms + r.raster_right_ms),
        mean_of(records, |r| r.total_ms),
        peak,
    )
}

fn run_direct(inputs: &LoadedInputs, config: &RunConfig) -> Result<(MetricReport, Vec<FrameRecord>)> {
    let options = config.render_options();
    let reference = RenderOptions::baseline();
    let mut cache = ComputationCache::new(config.cache_depth)?;
    let mut ref_cache = ComputationCache::new(config.cache_depth)?;

    let mut records = Vec::with_capacity(inputs.trajectory.frames.len());
    let mut per_frame = Vec::new();
    let mut tape = DisplayTape::new();
    // Accumulated render time only; metric and reference work between
    // frames must not dilute the throughput numbers.
    let mut render_clock = 0.0;

    for (k, tf) in inputs.trajectory.frames.iter().enumerate() {
        let (left, right, mut rec) = render_stereo(&inputs.scene, &tf.rig, &mut cache, &options)?;
        rec.frame_id = k as u64;
        rec.timestamp = tf.t;
        rec.worker_id = 0;
        rec.displayed = true;
        render_clock += rec.total_ms * 1e-3;
        rec.completed_at = render_clock;
        tape.push(render_clock);

        if config.quality {
            let (ref_l, ref_r, _) =
                render_stereo(&inputs.scene, &tf.rig, &mut ref_cache, &reference)?;
            per_frame.push(frame_quality(k as u64, (&left, &ref_l), (&right, &ref_r))?);
        }
        if let Some(dir) = &config.out_dir {
            if config.dump_every > 0 && k as u32 % config.dump_every == 0 {
                left.save_png(&dir.join(format!("frame_{k:05}_left.png")))?;
                right.save_png(&dir.join(format!("frame_{k:05}_right.png")))?;
            }
        }
        records.push(rec);
    }

    let (avg_fps, p1_fps, _) = tape.finish();
    let (mean_filter_ms, mean_decode_ms, mean_raster_ms, mean_total_ms, peak) =
        timing_aggregates(&records, inputs.scene.approx_bytes());
    let report = MetricReport {
        n_frames: records.len() as u32,
        quality: if config.quality { Some(summarize_quality(per_frame)) } else { None },
        lpips: "n/a".to_string(),
        avg_fps,
        p1_fps,
        mean_filter_ms,
        mean_decode_ms,
        mean_raster_ms,
        mean_total_ms,
        peak_memory_bytes: peak,
        session: None,
    };
    Ok((report, records))
}

fn run_elastic(inputs: &LoadedInputs, config: &RunConfig) -> Result<(MetricReport, Vec<FrameRecord>)> {
    let mut session = SessionConfig::real_time();
    session.min_fps = config.min_fps;
    session.max_fps = config.max_fps;
    session.workers_max = config.workers_max;
    session.cache_depth = config.cache_depth;
    session.render = config.render_options();
    if config.sim_time {
        session.mode = SessionMode::Simulated(SimWorkload::constant(config.sim_cost_ms));
    }
    let report = run_session(&inputs.scene, &inputs.trajectory, &session)?;

    let (mean_filter_ms, mean_decode_ms, mean_raster_ms, mean_total_ms, peak) =
        timing_aggregates(&report.records, inputs.scene.approx_bytes());
    let metric = MetricReport {
        n_frames: report.records.len() as u32,
        quality: None,
        lpips: "n/a".to_string(),
        avg_fps: report.avg_fps,
        p1_fps: report.p1_fps,
        mean_filter_ms,
        mean_decode_ms,
        mean_raster_ms,
        mean_total_ms,
        peak_memory_bytes: peak,
        session: Some(SessionStats {
            n_displayed: report.n_displayed,
            n_discarded: report.n_discarded,
            n_rejected_pose: report.n_rejected_pose,
            n_dropped_capacity: report.n_dropped_capacity,
            n_dropped_stale: report.n_dropped_stale,
            worker_timeline: report.worker_timeline,
        }),
    };
    Ok((metric, report.records))
}

fn run_loaded(inputs: &LoadedInputs, config: &RunConfig) -> Result<RunSummary> {
    let (report, records) = if config.elastic {
        run_elastic(inputs, config)
    } else {
        run_direct(inputs, config)
    }?;
    let summary = RunSummary {
        label: config.flags().label(),
        flags: config.flags(),
        scene_sha256: inputs.scene_sha256.clone(),
        trajectory_sha256: inputs.trajectory_sha256.clone(),
        cache_depth: config.cache_depth,
        report,
    };
    if let Some(dir) = &config.out_dir {
        write_artifacts(dir, &summary, &records)?;
    }
    Ok(summary)
}

/// Renders the trajectory under the configured flags, optionally compares
/// against the reference pipeline, and writes frames.csv and summary.json to
/// the output directory when one is set.
pub fn run_benchmark(config: &RunConfig) -> Result<RunSummary> {
    config.validate()?;
    let inputs = load_inputs(config)?;
    run_loaded(&inputs, config)
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

/// Writes per-frame records in the stable benchmark schema. Column order is
/// part of the format contract; external plotters key on it.
pub fn write_frames_csv<W: std::io::Write>(out: &mut W, records: &[FrameRecord]) -> Result<()> {
    writeln!(
        out,
        "frame_id,timestamp_s,worker_id,n_required_anchors,n_decoded_anchors,update_rate,\
         cache_depth,n_gaussians,filter_ms,decode_ms,raster_left_ms,raster_right_ms,total_ms,\
         displayed"
    )?;
    for r in records {
        writeln!(
            out,
            "{},{:.6},{},{},{},{:.6},{},{},{:.3},{:.3},{:.3},{:.3},{:.3},{}",
            r.frame_id,
            r.timestamp,
            r.worker_id,
            r.cache.n_required,
            r.cache.n_misses,
            r.cache.update_rate,
            r.cache.depth_after,
            r.n_gaussians,
            r.filter_ms,
            r.decode_ms,
            r.raster_left_ms,
            r.raster_right_ms,
            r.total_ms,
            u8::from(r.displayed),
        )?;
    }
    Ok(())
}

fn write_artifacts(dir: &Path, summary: &RunSummary, records: &[FrameRecord]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = std::io::BufWriter::new(std::fs::File::create(dir.join("frames.csv"))?);
    write_frames_csv(&mut csv, records)?;
    csv.flush()?;
    let mut json = serde_json::to_string_pretty(summary)?;
    json.push('\n');
    std::fs::write(dir.join("summary.json"), json)?;
    Ok(())
}

/// Reads back a summary.json produced by `run_benchmark`.
pub fn load_summary(path: &Path) -> Result<RunSummary> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

// ---------------------------------------------------------------------------
// Comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareRow {
    pub metric: String,
    pub run_a: f64,
    pub run_b: f64,
    /// Ratio oriented so values above 1 mean run_b is better: b/a for
    /// rates, a/b for times and memory.
    pub speedup: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareReport {
    pub label_a: String,
    pub label_b: String,
    pub rows: Vec<CompareRow>,
}

fn gain(better_high: bool, a: f64, b: f64) -> f64 {
    let (num, den) = if better_high { (b, a) } else { (a, b) };
    if num == den {
        // Exact ties, including 0/0, compare as equal performance.
        return 1.0;
    }
    if den == 0.0 {
        return f64::INFINITY;
    }
    num / den
}

/// Ratios of throughput and stage times between two runs over the same
/// inputs. Differing scene or trajectory fingerprints make the ratios
/// meaningless, so they are rejected.
pub fn compare_reports(a: &RunSummary, b: &RunSummary) -> Result<CompareReport> {
    if a.trajectory_sha256 != b.trajectory_sha256 {
        return Err(Error::InvalidArgument(
            "trajectory fingerprints differ; runs are not comparable".into(),
        ));
    }
    if a.scene_sha256 != b.scene_sha256 {
        return Err(Error::InvalidArgument(
            "scene fingerprints differ; runs are not comparable".into(),
        ));
    }
    let ra = &a.report;
    let rb = &b.report;
    let rows = vec![
        ("avg_fps", ra.avg_fps, rb.avg_fps, true),
        ("p1_fps", ra.p1_fps, rb.p1_fps, true),
        ("mean_filter_ms", ra.mean_filter_ms, rb.mean_filter_ms, false),
        ("mean_decode_ms", ra.mean_decode_ms, rb.mean_decode_ms, false),
        ("mean_raster_ms", ra.mean_raster_ms, rb.mean_raster_ms, false),
        ("mean_total_ms", ra.mean_total_ms, rb.mean_total_ms, false),
        (
            "peak_memory_bytes",
            ra.peak_memory_bytes as f64,
            rb.peak_memory_bytes as f64,
            false,
        ),
    ]
    .into_iter()
    .map(|(metric, va, vb, better_high)| CompareRow {
        metric: metric.to_string(),
        run_a: va,
        run_b: vb,
        speedup: gain(better_high, va, vb),
    })
    .collect();
    Ok(CompareReport { label_a: a.label.clone(), label_b: b.label.clone(), rows })
}

impl CompareReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "run_a: {}", self.label_a);
        let _ = writeln!(s, "run_b: {}", self.label_b);
        let _ = writeln!(s, "{:<20} {:>14} {:>14} {:>10}", "metric", "run_a", "run_b", "speedup");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<20} {:>14.3} {:>14.3} {:>10.3}",
                r.metric, r.run_a, r.run_b, r.speedup
            );
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Runs the standard four-row grid on one scene and trajectory: everything
/// enabled, then each pipeline flag disabled alone. Rows run the plain loop
/// (elastic off) so per-frame costs stay paired across rows.
pub fn ablate(config: &RunConfig) -> Result<AblationReport> {
    config.validate()?;
    let inputs = load_inputs(config)?;
    let grid: [(&str, bool, bool, bool); 4] = [
        ("all_on", true, true, true),
        ("no_cache", false, true, true),
        ("no_dered", true, false, true),
        ("no_fast", true, true, false),
    ];
    let mut rows = Vec::with_capacity(grid.len());
    for (name, cache, dered, fast) in grid {
        let mut cfg = config.clone();
        cfg.cache = cache;
        cfg.de_redundancy = dered;
        cfg.fast_kernels = fast;
        cfg.elastic = false;
        cfg.out_dir = config.out_dir.as_ref().map(|d| d.join(name));
        let summary = run_loaded(&inputs, &cfg)?;
        rows.push(AblationRow { name: name.to_string(), summary });
    }
    Ok(AblationReport { rows })
}

impl AblationReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>10} {:>10} {:>12} {:>10} {:>14}",
            "variant", "avg_fps", "p1_fps", "mean_psnr_db", "mean_ssim", "peak_mem_bytes"
        );
        for row in &self.rows {
            let r = &row.summary.report;
            let (psnr, ssim) = r
                .quality
                .as_ref()
                .map_or(("-".to_string(), "-".to_string()), |q| {
                    (fmt_db(q.mean_psnr_db), format!("{:.4}", q.mean_ssim))
                });
            let _ = writeln!(
                s,
                "{:<10} {:>10.3} {:>10.3} {:>12} {:>10} {:>14}",
                row.name, r.avg_fps, r.p1_fps, psnr, ssim, r.peak_memory_bytes
            );
        }
        s
    }
}
