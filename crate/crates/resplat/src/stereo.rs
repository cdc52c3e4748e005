//! Binocular rendering with shared derivation.
//!
//! A stereo frame normally runs anchor filtering and decoding twice, once per
//! eye, although the two views overlap almost completely. Merging the eyes
//! into one virtual camera lets a single filter and decode pass feed both
//! eyes' rasterization. The merged camera keeps the rig's field of view and
//! sits behind the eye midpoint just far enough that its frustum spans the
//! baseline at the eye plane, so for parallel eyes it sees everything either
//! eye sees.

use std::time::Instant;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::cache::{CacheStats, ComputationCache};
use crate::decoder::{decode_anchors, decode_anchors_fast, filter_anchors, GaussianBatch};
use crate::error::{Error, Result};
use crate::raster::{rasterize_with_stats, Image, RasterOptions};
use crate::scene::{Camera, SceneModel, StereoRig};

/// Eye directions or up vectors whose sum is shorter than this cancel out and
/// cannot be averaged.
const DEGENERATE_EPS: f64 = 1e-6;

/// Virtual camera whose frustum covers both eyes of a parallel rig.
#[derive(Debug, Clone)]
pub struct UnifiedCamera {
    pub camera: Camera,
    /// Distance behind the eye midpoint, chosen so the frustum's width at
    /// the eye plane equals the baseline.
    pub pullback: f64,
}

/// Averages the two eyes into one camera. The direction is the normalized
/// mean of the eye directions; the position is the eye midpoint pulled back
/// along that direction by baseline / (2 tan(fov_x / 2)), the horizontal
/// tangent matching the eyes' side-by-side placement.
pub fn unify_cameras(rig: &StereoRig) -> Result<UnifiedCamera> {
    let dir_sum = rig.left.forward() + rig.right.forward();
    if dir_sum.norm() <= DEGENERATE_EPS {
        return Err(Error::DegenerateRig("eye directions are antiparallel".into()));
    }
    let dir = dir_sum.normalize();

    let up_sum = rig.left.up() + rig.right.up();
    if up_sum.norm() <= DEGENERATE_EPS {
        return Err(Error::DegenerateRig("eye up vectors cancel".into()));
    }
    let up_avg = up_sum.normalize();
    let up = up_avg - dir * up_avg.dot(&dir);
    if up.norm() <= DEGENERATE_EPS {
        return Err(Error::DegenerateRig("rig up is parallel to the view direction".into()));
    }
    let up = up.normalize();

    let pullback = rig.baseline() / (2.0 * rig.left.tan_half_x());
    let position = rig.center() - dir * pullback;

    let right = dir.cross(&up);
    let m = Matrix3::from_columns(&[right, up, -dir]);
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m));
    let camera = Camera::new(
        position,
        rotation,
        rig.left.fov_y,
        rig.left.width,
        rig.left.height,
        rig.left.near,
        rig.left.far,
    )?;
    Ok(UnifiedCamera { camera, pullback })
}

/// Pipeline toggles for one rendering worker.
#[derive(Debug, Clone)]
pub struct RenderOptions {
    /// Reuse decoded Gaussians across frames.
    pub use_cache: bool,
    /// Share one filter+decode pass between the eyes via the unified camera.
    pub de_redundancy: bool,
    /// Batched decoder path; bit-identical to the reference decoder.
    pub fast_decode: bool,
    pub raster: RasterOptions,
}

impl RenderOptions {
    /// Everything off: per-eye full decode, reference rasterizer.
    pub fn baseline() -> Self {
        Self {
            use_cache: false,
            de_redundancy: false,
            fast_decode: false,
            raster: RasterOptions::reference(),
        }
    }

    /// All pipeline optimizations on.
    pub fn optimized() -> Self {
        Self {
            use_cache: true,
            de_redundancy: true,
            fast_decode: true,
            raster: RasterOptions::fast(),
        }
    }
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self::optimized()
    }
}

/// Timings, cache statistics, and diagnostics for one rendered stereo frame.
/// `frame_id`, `timestamp`, `worker_id`, and `displayed` belong to the
/// session driver; a bare `render_stereo` leaves them zeroed.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct FrameRecord {
    pub frame_id: u64,
    /// Pose timestamp in seconds.
    pub timestamp: f64,
    /// Session-clock seconds when rendering finished; zero for bare renders.
    pub completed_at: f64,
    pub worker_id: u32,
    pub filter_ms: f64,
    pub decode_ms: f64,
    pub compose_ms: f64,
    pub raster_left_ms: f64,
    pub raster_right_ms: f64,
    pub total_ms: f64,
    pub cache: CacheStats,
    /// Rows prepared for rasterization: counted once with shared derivation,
    /// summed over the eyes without it.
    pub n_gaussians: u32,
    /// Splats dropped for non-finite parameters, both eyes.
    pub n_skipped_splats: u32,
    pub n_filter_passes: u32,
    pub n_decode_passes: u32,
    pub displayed: bool,
    /// Transient bytes alive during the frame: decoded batches plus the
    /// larger eye's rasterizer scratch.
    pub scratch_bytes: u64,
    /// Cache residency after the frame's commits.
    pub cache_bytes: u64,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

struct DerivationPass {
    batch: GaussianBatch,
    stats: CacheStats,
    filter_ms: f64,
    decode_ms: f64,
    compose_ms: f64,
}

/// One filter + decode (+ cache) pass for a single camera. Every pass
/// advances the cache clock: at reuse depth 1 each pass decodes fresh, while
/// deeper settings let a frame's second eye hit the first eye's commits.
fn derive_for_camera(
    scene: &SceneModel,
    filter_camera: &Camera,
    cache: &mut ComputationCache,
    options: &RenderOptions,
) -> Result<DerivationPass> {
    let decode: fn(&SceneModel, &[u32], &Vector3<f64>) -> Result<GaussianBatch> =
        if options.fast_decode { decode_anchors_fast } else { decode_anchors };
    let viewpoint = filter_camera.position;

    let t = Instant::now();
    let required = filter_anchors(scene, filter_camera);
    let filter_ms = ms_since(t);

    if !options.use_cache {
        let t = Instant::now();
        let batch = decode(scene, &required.ids, &viewpoint)?;
        let decode_ms = ms_since(t);
        let n = required.ids.len() as u32;
        // depth_after stays 0: nothing is retained.
        let stats = CacheStats::new(n, 0, n, 0);
        return Ok(DerivationPass { batch, stats, filter_ms, decode_ms, compose_ms: 0.0 });
    }

    let evicted = cache.age_and_evict();
    let (hits, misses) = cache.partition(&required, &scene.anchors);

    let t = Instant::now();
    let fresh = decode(scene, &misses, &viewpoint)?;
    let decode_ms = ms_since(t);

    let t = Instant::now();
    let batch = cache.compose(&hits, &fresh)?;
    let compose_ms = ms_since(t);

    let mut stats = CacheStats::new(
        required.ids.len() as u32,
        hits.len() as u32,
        misses.len() as u32,
        evicted,
    );
    cache.commit(&misses, &scene.anchors, &fresh, &mut stats)?;
    Ok(DerivationPass { batch, stats, filter_ms, decode_ms, compose_ms })
}

fn combined_stats(first: CacheStats, second: CacheStats) -> CacheStats {
    let mut s = CacheStats::new(
        first.n_required + second.n_required,
        first.n_hits + second.n_hits,
        first.n_misses + second.n_misses,
        first.n_evicted + second.n_evicted,
    );
    s.depth_after = second.depth_after;
    s
}

/// Renders one stereo frame. With de-redundancy on, a single derivation pass
/// through the unified camera feeds both eyes; with it off, the eyes run the
/// full pipeline sequentially, each pass ticking the cache once.
pub fn render_stereo(
    scene: &SceneModel,
    rig: &StereoRig,
    cache: &mut ComputationCache,
    options: &RenderOptions,
) -> Result<(Image, Image, FrameRecord)> {
    let t_total = Instant::now();
    let mut rec = FrameRecord::default();

    let (left, right) = if options.de_redundancy {
        let unified = unify_cameras(rig)?;
        let pass = derive_for_camera(scene, &unified.camera, cache, options)?;

        let t = Instant::now();
        let (left, stats_l) = rasterize_with_stats(&pass.batch, &rig.left, &options.raster)?;
        rec.raster_left_ms = ms_since(t);
        let t = Instant::now();
        let (right, stats_r) = rasterize_with_stats(&pass.batch, &rig.right, &options.raster)?;
        rec.raster_right_ms = ms_since(t);

        rec.filter_ms = pass.filter_ms;
        rec.decode_ms = pass.decode_ms;
        rec.compose_ms = pass.compose_ms;
        rec.cache = pass.stats;
        rec.n_gaussians = pass.batch.len() as u32;
        rec.n_skipped_splats = stats_l.n_non_finite + stats_r.n_non_finite;
        rec.n_filter_passes = 1;
        rec.n_decode_passes = 1;
        rec.scratch_bytes =
            pass.batch.approx_bytes() + stats_l.scratch_bytes.max(stats_r.scratch_bytes);
        (left, right)
    } else {
        let pass_l = derive_for_camera(scene, &rig.left, cache, options)?;
        let t = Instant::now();
        let (left, stats_l) = rasterize_with_stats(&pass_l.batch, &rig.left, &options.raster)?;
        rec.raster_left_ms = ms_since(t);

        let pass_r = derive_for_camera(scene, &rig.right, cache, options)?;
        let t = Instant::now();
        let (right, stats_r) = rasterize_with_stats(&pass_r.batch, &rig.right, &options.raster)?;
        rec.raster_right_ms = ms_since(t);

        rec.filter_ms = pass_l.filter_ms + pass_r.filter_ms;
        rec.decode_ms = pass_l.decode_ms + pass_r.decode_ms;
        rec.compose_ms = pass_l.compose_ms + pass_r.compose_ms;
        rec.cache = combined_stats(pass_l.stats, pass_r.stats);
        rec.n_gaussians = (pass_l.batch.len() + pass_r.batch.len()) as u32;
        rec.n_skipped_splats = stats_l.n_non_finite + stats_r.n_non_finite;
        rec.n_filter_passes = 2;
        rec.n_decode_passes = 2;
        // Both batches are alive until the right eye finishes.
        rec.scratch_bytes = pass_l.batch.approx_bytes()
            + pass_r.batch.approx_bytes()
            + stats_l.scratch_bytes.max(stats_r.scratch_bytes);
        (left, right)
    };

    rec.cache_bytes = cache.approx_bytes();
    rec.total_ms = ms_since(t_total);
    Ok((left, right, rec))
}
