//! Scene model, cameras, trajectories, and their on-disk formats.
//!
//! A scene is a set of anchors, each carrying a latent feature and K offset
//! slots, plus the weights of the shared decoder MLP that turns an anchor
//! into K Gaussians at view time. Scenes are generated procedurally from a
//! seed; the binary format round-trips bit-exactly.
//!
//! Cameras and trajectories use f64 scalars. Scene content is f32, matching
//! the file format; camera math is only narrowed to f32 at the decoder input
//! boundary.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::io::BufRead;
use std::path::Path;

use crate::decoder::{DecoderWeights, HIDDEN_DIM, OUTPUTS_PER_GAUSSIAN};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Default near plane applied when a trajectory file is loaded (the format
/// does not carry clip planes).
pub const DEFAULT_NEAR: f64 = 0.1;
/// Default far plane applied when a trajectory file is loaded.
pub const DEFAULT_FAR: f64 = 1.0e4;

/// Axis-aligned bounding box, min/max corners.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f32>,
    pub max: Vector3<f32>,
}

impl Aabb {
    pub fn new(min: Vector3<f32>, max: Vector3<f32>) -> Self {
        Self { min, max }
    }

    pub fn extents(&self) -> Vector3<f32> {
        self.max - self.min
    }

    pub fn volume(&self) -> f64 {
        let e = self.extents();
        f64::from(e.x) * f64::from(e.y) * f64::from(e.z)
    }

    pub fn diagonal(&self) -> f64 {
        let e = self.extents();
        (f64::from(e.x).powi(2) + f64::from(e.y).powi(2) + f64::from(e.z).powi(2)).sqrt()
    }

    fn is_degenerate(&self) -> bool {
        let e = self.extents();
        !(e.x > 0.0 && e.y > 0.0 && e.z > 0.0)
            || !e.x.is_finite()
            || !e.y.is_finite()
            || !e.z.is_finite()
    }
}

/// One anchor: a position, a latent feature vector, K local offset slots, a
/// per-axis scale, and the coarseness level it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub id: u32,
    pub position: Vector3<f32>,
    pub feature: Vec<f32>,
    pub offsets: Vec<Vector3<f32>>,
    pub scale: Vector3<f32>,
    pub lod_level: u8,
}

/// Scene-wide dimensions and the level-of-detail base distance.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneMeta {
    pub feature_dim: u32,
    pub gaussians_per_anchor: u32,
    pub lod_levels: u32,
    pub bbox: Aabb,
    /// Distance at which only the coarsest level remains selected.
    pub lod_base_distance: f32,
}

/// Full scene: anchors plus the shared decoder weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneModel {
    pub anchors: Vec<Anchor>,
    pub weights: DecoderWeights,
    pub meta: SceneMeta,
    // Per-anchor conservative cull radius: max_k ||offset_k .* scale||.
    // Derived, not serialized.
    cull_margins: Vec<f32>,
}

impl SceneModel {
    /// Builds a scene from parts, validating every invariant the rest of the
    /// pipeline relies on.
    pub fn new(anchors: Vec<Anchor>, weights: DecoderWeights, meta: SceneMeta) -> Result<Self> {
        if meta.feature_dim == 0 || meta.gaussians_per_anchor == 0 || meta.lod_levels == 0 {
            return Err(Error::InvalidArgument(
                "feature_dim, gaussians_per_anchor, lod_levels must all be >= 1".into(),
            ));
        }
        if meta.bbox.is_degenerate() {
            return Err(Error::InvalidArgument("bbox must have positive volume".into()));
        }
        if !(meta.lod_base_distance > 0.0) || !meta.lod_base_distance.is_finite() {
            return Err(Error::InvalidArgument("lod_base_distance must be positive".into()));
        }
        weights.check_dims(meta.feature_dim, meta.gaussians_per_anchor)?;
        for (i, a) in anchors.iter().enumerate() {
            if a.id as usize != i {
                return Err(Error::InvalidArgument(format!(
                    "anchor {} has id {}, ids must be dense and ordered",
                    i, a.id
                )));
            }
            if a.feature.len() != meta.feature_dim as usize {
                return Err(Error::InvalidArgument(format!(
                    "anchor {} feature length {} != {}",
                    i,
                    a.feature.len(),
                    meta.feature_dim
                )));
            }
            if a.offsets.len() != meta.gaussians_per_anchor as usize {
                return Err(Error::InvalidArgument(format!(
                    "anchor {} offset count {} != {}",
                    i,
                    a.offsets.len(),
                    meta.gaussians_per_anchor
                )));
            }
            if u32::from(a.lod_level) >= meta.lod_levels {
                return Err(Error::InvalidArgument(format!(
                    "anchor {} lod_level {} out of range (levels = {})",
                    i, a.lod_level, meta.lod_levels
                )));
            }
            let finite = a.position.iter().all(|v| v.is_finite())
                && a.feature.iter().all(|v| v.is_finite())
                && a.offsets.iter().all(|o| o.iter().all(|v| v.is_finite()))
                && a.scale.iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::InvalidArgument(format!("anchor {} has non-finite data", i)));
            }
            if !(a.scale.x > 0.0 && a.scale.y > 0.0 && a.scale.z > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "anchor {} scale must be strictly positive",
                    i
                )));
            }
        }
        let cull_margins = anchors
            .iter()
            .map(|a| {
                a.offsets
                    .iter()
                    .map(|o| o.component_mul(&a.scale).norm())
                    .fold(0.0f32, f32::max)
            })
            .collect();
        Ok(Self { anchors, weights, meta, cull_margins })
    }

    pub fn n_anchors(&self) -> u32 {
        self.anchors.len() as u32
    }

    /// Conservative radius by which anchor `i`'s Gaussians can stick out of
    /// its position; used to pad frustum culling.
    pub fn cull_margin(&self, i: u32) -> f32 {
        self.cull_margins[i as usize]
    }

    /// Approximate resident size, for memory accounting.
    pub fn approx_bytes(&self) -> u64 {
        let f = self.meta.feature_dim as u64;
        let k = self.meta.gaussians_per_anchor as u64;
        let per_anchor = 4 * (3 + f + 3 * k + 3) + 1 + 4;
        self.anchors.len() as u64 * per_anchor + self.weights.approx_bytes()
    }
}

// ---------------------------------------------------------------------------
// Synthetic scene generation
// ---------------------------------------------------------------------------

/// Parameters for procedural scene generation. Draw order from the seed is
/// fixed (position, feature, offsets, scale per anchor, then decoder
/// weights), so a given parameter set is reproducible bit-for-bit.
#[derive(Debug, Clone)]
pub struct SceneGenParams {
    pub seed: u64,
    pub n_anchors: u32,
    pub bbox: Aabb,
    pub lod_levels: u32,
    pub feature_dim: u32,
    pub gaussians_per_anchor: u32,
    /// Defaults to bbox diagonal / 4 when `None`.
    pub lod_base_distance: Option<f32>,
}

impl Default for SceneGenParams {
    fn default() -> Self {
        Self {
            seed: 0,
            n_anchors: 20_000,
            bbox: Aabb::new(Vector3::new(-50.0, 0.0, -50.0), Vector3::new(50.0, 20.0, 50.0)),
            lod_levels: 3,
            feature_dim: 32,
            gaussians_per_anchor: 10,
            lod_base_distance: None,
        }
    }
}

/// Generates a synthetic scene: anchors uniform in the bbox, features and
/// offsets uniform in [-1, 1), scales proportional to mean anchor spacing,
/// LoD levels assigned round-robin, and decoder weights drawn with
/// fan-in-scaled gains so decoded opacities and colors cover their ranges.
pub fn generate_synthetic_scene(params: &SceneGenParams) -> Result<SceneModel> {
    if params.n_anchors == 0 {
        return Err(Error::InvalidArgument("n_anchors must be >= 1".into()));
    }
    if params.lod_levels == 0 || params.lod_levels > 256 {
        return Err(Error::InvalidArgument("lod_levels must be in 1..=256".into()));
    }
    if params.feature_dim == 0 || params.gaussians_per_anchor == 0 {
        return Err(Error::InvalidArgument(
            "feature_dim and gaussians_per_anchor must be >= 1".into(),
        ));
    }
    if params.bbox.is_degenerate() {
        return Err(Error::InvalidArgument("bbox must have positive volume".into()));
    }
    let d0 = match params.lod_base_distance {
        Some(d) => d,
        None => (params.bbox.diagonal() / 4.0) as f32,
    };
    if !(d0 > 0.0) {
        return Err(Error::InvalidArgument("lod_base_distance must be positive".into()));
    }

    let mut rng = SplitMix64::new(params.seed);
    let ext = params.bbox.extents();
    // Mean inter-anchor spacing for a uniform distribution; anchor scales are
    // a fraction of it so splats overlap a little without washing out.
    let spacing = (params.bbox.volume() / f64::from(params.n_anchors)).cbrt() as f32;

    let n = params.n_anchors as usize;
    let f_dim = params.feature_dim as usize;
    let k = params.gaussians_per_anchor as usize;
    let mut anchors = Vec::with_capacity(n);
    for i in 0..n {
        let position = Vector3::new(
            params.bbox.min.x + rng.next_f32() * ext.x,
            params.bbox.min.y + rng.next_f32() * ext.y,
            params.bbox.min.z + rng.next_f32() * ext.z,
        );
        let feature: Vec<f32> = (0..f_dim).map(|_| rng.symmetric_f32()).collect();
        let offsets: Vec<Vector3<f32>> = (0..k)
            .map(|_| {
                Vector3::new(rng.symmetric_f32(), rng.symmetric_f32(), rng.symmetric_f32())
            })
            .collect();
        let scale = Vector3::new(
            rng.range_f32(0.25, 0.75) * spacing,
            rng.range_f32(0.25, 0.75) * spacing,
            rng.range_f32(0.25, 0.75) * spacing,
        );
        anchors.push(Anchor {
            id: i as u32,
            position,
            feature,
            offsets,
            scale,
            lod_level: (i % params.lod_levels as usize) as u8,
        });
    }

    let weights = generate_decoder_weights(&mut rng, params.feature_dim, params.gaussians_per_anchor);

    let meta = SceneMeta {
        feature_dim: params.feature_dim,
        gaussians_per_anchor: params.gaussians_per_anchor,
        lod_levels: params.lod_levels,
        bbox: params.bbox,
        lod_base_distance: d0,
    };
    SceneModel::new(anchors, weights, meta)
}

fn generate_decoder_weights(rng: &mut SplitMix64, feature_dim: u32, k: u32) -> DecoderWeights {
    let input = feature_dim as usize + 3;
    let hidden = HIDDEN_DIM;
    let output = k as usize * OUTPUTS_PER_GAUSSIAN;
    // Fan-in scaled gains keep pre-activations near unit variance, so heads
    // neither saturate nor collapse to their midpoints.
    let g1 = 3.0 / (input as f32).sqrt();
    // Trained decoders vary gently with viewpoint (view direction mostly
    // shades color); the three direction columns get a small gain so decoded
    // parameters drift smoothly as the camera moves.
    let g1_view = 0.15 * g1;
    let g2 = (6.0 / hidden as f32).sqrt();
    let w1: Vec<f32> = (0..hidden * input)
        .map(|i| {
            let gain = if i % input >= input - 3 { g1_view } else { g1 };
            rng.symmetric_f32() * gain
        })
        .collect();
    let b1: Vec<f32> = (0..hidden).map(|_| rng.symmetric_f32() * 0.1).collect();
    let w2: Vec<f32> = (0..output * hidden).map(|_| rng.symmetric_f32() * g2).collect();
    let b2: Vec<f32> = (0..output).map(|_| rng.symmetric_f32() * 0.1).collect();
    DecoderWeights {
        input_dim: input as u32,
        hidden_dim: hidden as u32,
        output_dim: output as u32,
        w1,
        b1,
        w2,
        b2,
    }
}

// ---------------------------------------------------------------------------
// Cameras and stereo rigs
// ---------------------------------------------------------------------------

/// Pinhole camera. Right-handed: camera looks along -Z of its local frame,
/// +Y is up, +X is right. `rotation` maps camera space into world space.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub position: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    /// Vertical field of view, radians.
    pub fov_y: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn new(
        position: Vector3<f64>,
        rotation: UnitQuaternion<f64>,
        fov_y: f64,
        width: u32,
        height: u32,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let cam = Self { position, rotation, fov_y, width, height, near, far };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI) {
            return Err(Error::InvalidArgument("fov_y must be in (0, pi)".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("image dimensions must be >= 1".into()));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::InvalidArgument("need 0 < near < far".into()));
        }
        if !self.position.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("camera position must be finite".into()));
        }
        Ok(())
    }

    /// Camera placed at `eye` looking at `target`, with `up` fixing the roll.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fov_y: f64,
        width: u32,
        height: u32,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let f = target - eye;
        if f.norm() < 1e-12 {
            return Err(Error::InvalidArgument("look_at eye and target coincide".into()));
        }
        let f = f.normalize();
        let s = f.cross(&up);
        if s.norm() < 1e-9 {
            return Err(Error::InvalidArgument("look_at forward is parallel to up".into()));
        }
        let s = s.normalize();
        let u = s.cross(&f);
        let m = Matrix3::from_columns(&[s, u, -f]);
        let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m));
        Self::new(eye, rotation, fov_y, width, height, near, far)
    }

    /// Viewing direction (-Z of the camera frame, in world space).
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation * Vector3::new(0.0, 0.0, -1.0)
    }

    pub fn up(&self) -> Vector3<f64> {
        self.rotation * Vector3::new(0.0, 1.0, 0.0)
    }

    pub fn right(&self) -> Vector3<f64> {
        self.rotation * Vector3::new(1.0, 0.0, 0.0)
    }

    /// World point into camera coordinates.
    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse_transform_vector(&(p - self.position))
    }

    /// Focal length in pixels (square pixels, from the vertical FoV).
    pub fn focal_px(&self) -> f64 {
        f64::from(self.height) * 0.5 / (self.fov_y * 0.5).tan()
    }

    pub fn tan_half_y(&self) -> f64 {
        (self.fov_y * 0.5).tan()
    }

    pub fn tan_half_x(&self) -> f64 {
        self.tan_half_y() * f64::from(self.width) / f64::from(self.height)
    }
}

/// Binocular rig: two cameras with identical intrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoRig {
    pub left: Camera,
    pub right: Camera,
}

impl StereoRig {
    pub fn new(left: Camera, right: Camera) -> Result<Self> {
        left.validate()?;
        right.validate()?;
        if left.fov_y != right.fov_y
            || left.width != right.width
            || left.height != right.height
            || left.near != right.near
            || left.far != right.far
        {
            return Err(Error::InvalidArgument("stereo rig eyes must share intrinsics".into()));
        }
        Ok(Self { left, right })
    }

    /// Midpoint of the two eye positions.
    pub fn center(&self) -> Vector3<f64> {
        (self.left.position + self.right.position) * 0.5
    }

    pub fn baseline(&self) -> f64 {
        (self.left.position - self.right.position).norm()
    }
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

/// One timestamped stereo pose.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryFrame {
    /// Seconds from session start; strictly increasing along a trajectory.
    pub t: f64,
    pub rig: StereoRig,
}

/// Timestamped sequence of stereo poses.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub frames: Vec<TrajectoryFrame>,
}

impl Trajectory {
    pub fn new(frames: Vec<TrajectoryFrame>) -> Result<Self> {
        for w in frames.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(Error::InvalidArgument(format!(
                    "trajectory timestamps must be strictly increasing ({} then {})",
                    w[0].t, w[1].t
                )));
            }
        }
        Ok(Self { frames })
    }

    pub fn duration(&self) -> f64 {
        match (self.frames.first(), self.frames.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }
}

/// Parameters for the canonical benchmark trajectory: a circular orbit around
/// `center` with a linear height ramp, both eyes looking at the center.
#[derive(Debug, Clone)]
pub struct OrbitParams {
    pub center: Vector3<f64>,
    pub radius: f64,
    /// Eye height offsets relative to `center.y` at the first/last frame.
    pub height_start: f64,
    pub height_end: f64,
    pub n_frames: u32,
    /// Inter-eye distance; 0 collapses the rig to a single viewpoint.
    pub ipd: f64,
    pub fov_y: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
    /// Pose rate; timestamps are k / fps.
    pub fps: f64,
}

impl Default for OrbitParams {
    fn default() -> Self {
        Self {
            center: Vector3::new(0.0, 10.0, 0.0),
            radius: 60.0,
            height_start: 5.0,
            height_end: 25.0,
            n_frames: 100,
            ipd: 0.064,
            fov_y: 60f64.to_radians(),
            width: 256,
            height: 256,
            near: DEFAULT_NEAR,
            far: DEFAULT_FAR,
            fps: 30.0,
        }
    }
}

/// Builds the orbit trajectory. Frame k sits at azimuth 2*pi*k/(n-1), so the
/// first and last frames coincide in azimuth and consecutive frames are
/// separated by an arc of 2*pi*r/(n-1).
pub fn generate_orbit_trajectory(p: &OrbitParams) -> Result<Trajectory> {
    if p.n_frames < 2 {
        return Err(Error::InvalidArgument("orbit needs at least 2 frames".into()));
    }
    if !(p.radius > 0.0) {
        return Err(Error::InvalidArgument("orbit radius must be positive".into()));
    }
    if p.ipd < 0.0 {
        return Err(Error::InvalidArgument("ipd must be non-negative".into()));
    }
    if !(p.fps > 0.0) {
        return Err(Error::InvalidArgument("fps must be positive".into()));
    }
    let n = p.n_frames as usize;
    let mut frames = Vec::with_capacity(n);
    for k in 0..n {
        let s = k as f64 / (n - 1) as f64;
        let phi = std::f64::consts::TAU * s;
        let h = p.height_start + (p.height_end - p.height_start) * s;
        let eye = p.center + Vector3::new(p.radius * phi.cos(), h, p.radius * phi.sin());
        let mid = Camera::look_at(
            eye,
            p.center,
            Vector3::new(0.0, 1.0, 0.0),
            p.fov_y,
            p.width,
            p.height,
            p.near,
            p.far,
        )?;
        let half = mid.right() * (p.ipd * 0.5);
        let mut left = mid.clone();
        left.position -= half;
        let mut right = mid;
        right.position += half;
        frames.push(TrajectoryFrame { t: k as f64 / p.fps, rig: StereoRig::new(left, right)? });
    }
    Trajectory::new(frames)
}

// ---------------------------------------------------------------------------
// Trajectory JSON-lines format
// ---------------------------------------------------------------------------

// One trajectory line. Quaternions are [x, y, z, w]; `fov` is the vertical
// field of view in radians.
#[derive(Serialize, Deserialize)]
struct TrajLine {
    t: f64,
    lp: [f64; 3],
    lq: [f64; 4],
    rp: [f64; 3],
    rq: [f64; 4],
    fov: f64,
    w: u32,
    h: u32,
}

fn quat_to_arr(q: &UnitQuaternion<f64>) -> [f64; 4] {
    [q.i, q.j, q.k, q.w]
}

fn quat_from_arr(a: &[f64; 4], line: u64) -> Result<UnitQuaternion<f64>> {
    let q = nalgebra::Quaternion::new(a[3], a[0], a[1], a[2]);
    let n = q.norm();
    if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
        return Err(Error::Format {
            offset: line,
            reason: format!("quaternion norm {} deviates from 1 by more than 1e-6", n),
        });
    }
    // Keep the stored coefficients so save -> load round-trips exactly.
    Ok(UnitQuaternion::new_unchecked(q))
}

/// Serializes a trajectory as JSON lines, one stereo pose per line.
pub fn trajectory_to_bytes(traj: &Trajectory) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for f in &traj.frames {
        let line = TrajLine {
            t: f.t,
            lp: [f.rig.left.position.x, f.rig.left.position.y, f.rig.left.position.z],
            lq: quat_to_arr(&f.rig.left.rotation),
            rp: [f.rig.right.position.x, f.rig.right.position.y, f.rig.right.position.z],
            rq: quat_to_arr(&f.rig.right.rotation),
            fov: f.rig.left.fov_y,
            w: f.rig.left.width,
            h: f.rig.left.height,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Writes a trajectory as JSON lines, one stereo pose per line.
pub fn save_trajectory(traj: &Trajectory, path: &Path) -> Result<()> {
    std::fs::write(path, trajectory_to_bytes(traj)?)?;
    Ok(())
}

/// Loads a trajectory with explicit clip planes. `offset` in format errors is
/// the 1-based line number.
pub fn load_trajectory_with_clip(path: &Path, near: f64, far: f64) -> Result<Trajectory> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut frames = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let l: TrajLine = serde_json::from_str(&line).map_err(|e| Error::Format {
            offset: lineno,
            reason: format!("bad trajectory line: {}", e),
        })?;
        let left = Camera::new(
            Vector3::new(l.lp[0], l.lp[1], l.lp[2]),
            quat_from_arr(&l.lq, lineno)?,
            l.fov,
            l.w,
            l.h,
            near,
            far,
        )
        .map_err(|e| Error::Format { offset: lineno, reason: e.to_string() })?;
        let right = Camera::new(
            Vector3::new(l.rp[0], l.rp[1], l.rp[2]),
            quat_from_arr(&l.rq, lineno)?,
            l.fov,
            l.w,
            l.h,
            near,
            far,
        )
        .map_err(|e| Error::Format { offset: lineno, reason: e.to_string() })?;
        frames.push(TrajectoryFrame {
            t: l.t,
            rig: StereoRig::new(left, right)
                .map_err(|e| Error::Format { offset: lineno, reason: e.to_string() })?,
        });
    }
    Trajectory::new(frames).map_err(|e| Error::Format { offset: 0, reason: e.to_string() })
}

/// Loads a trajectory with the default clip planes.
pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    load_trajectory_with_clip(path, DEFAULT_NEAR, DEFAULT_FAR)
}

// ---------------------------------------------------------------------------
// Binary scene format
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"GSC1";
const VERSION: u32 = 1;

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Format { offset: self.pos as u64, reason: reason.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.err(format!("unexpected end of data, need {} more bytes", n)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn vector3(&mut self) -> Result<Vector3<f32>> {
        Ok(Vector3::new(self.f32()?, self.f32()?, self.f32()?))
    }
}

fn push_f32(buf: &mut Vec<u8>, v: f32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serializes a scene to the binary format (little-endian throughout).
///
/// Layout: magic "GSC1", u32 version, u32 n_anchors, u32 feature_dim,
/// u32 gaussians_per_anchor, u32 lod_levels, f32 lod_base_distance,
/// f32[6] bbox (min, max); then per anchor f32[3] position, f32[F] feature,
/// f32[3K] offsets, f32[3] scale, u8 lod_level; then the decoder blob:
/// u32 input_dim, u32 hidden_dim, u32 output_dim, f32[hidden*input] w1,
/// f32[hidden] b1, f32[output*hidden] w2, f32[output] b2.
pub fn scene_to_bytes(scene: &SceneModel) -> Vec<u8> {
    let m = &scene.meta;
    let mut buf = Vec::with_capacity(scene.approx_bytes() as usize + 64);
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, VERSION);
    push_u32(&mut buf, scene.n_anchors());
    push_u32(&mut buf, m.feature_dim);
    push_u32(&mut buf, m.gaussians_per_anchor);
    push_u32(&mut buf, m.lod_levels);
    push_f32(&mut buf, m.lod_base_distance);
    for v in [m.bbox.min, m.bbox.max] {
        push_f32(&mut buf, v.x);
        push_f32(&mut buf, v.y);
        push_f32(&mut buf, v.z);
    }
    for a in &scene.anchors {
        push_f32(&mut buf, a.position.x);
        push_f32(&mut buf, a.position.y);
        push_f32(&mut buf, a.position.z);
        for &f in &a.feature {
            push_f32(&mut buf, f);
        }
        for o in &a.offsets {
            push_f32(&mut buf, o.x);
            push_f32(&mut buf, o.y);
            push_f32(&mut buf, o.z);
        }
        push_f32(&mut buf, a.scale.x);
        push_f32(&mut buf, a.scale.y);
        push_f32(&mut buf, a.scale.z);
        buf.push(a.lod_level);
    }
    let w = &scene.weights;
    push_u32(&mut buf, w.input_dim);
    push_u32(&mut buf, w.hidden_dim);
    push_u32(&mut buf, w.output_dim);
    for arr in [&w.w1, &w.b1, &w.w2, &w.b2] {
        for &v in arr.iter() {
            push_f32(&mut buf, v);
        }
    }
    buf
}

/// Parses a scene from bytes, validating structure and invariants.
pub fn scene_from_bytes(buf: &[u8]) -> Result<SceneModel> {
    let mut r = ByteReader::new(buf);
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format { offset: 0, reason: "bad magic, not a scene file".into() });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported version {} (expected {})", version, VERSION),
        });
    }
    let n_anchors = r.u32()?;
    let feature_dim = r.u32()?;
    let k = r.u32()?;
    let lod_levels = r.u32()?;
    if feature_dim == 0 || k == 0 || lod_levels == 0 || lod_levels > 256 {
        return Err(r.err("header dimensions out of range"));
    }
    // Reject headers whose implied payload cannot fit in the buffer before
    // allocating anything proportional to them.
    let per_anchor = 4u64 * (3 + feature_dim as u64 + 3 * k as u64 + 3) + 1;
    if (n_anchors as u64).saturating_mul(per_anchor) > buf.len() as u64 {
        return Err(r.err("anchor count inconsistent with file size"));
    }
    let lod_base_distance = r.f32()?;
    let bbox = Aabb::new(r.vector3()?, r.vector3()?);

    let mut anchors = Vec::with_capacity(n_anchors as usize);
    for i in 0..n_anchors {
        let position = r.vector3()?;
        let feature = r.f32_vec(feature_dim as usize)?;
        let mut offsets = Vec::with_capacity(k as usize);
        for _ in 0..k {
            offsets.push(r.vector3()?);
        }
        let scale = r.vector3()?;
        let lod_level = r.u8()?;
        if u32::from(lod_level) >= lod_levels {
            return Err(r.err(format!(
                "anchor {} lod_level {} out of range (levels = {})",
                i, lod_level, lod_levels
            )));
        }
        anchors.push(Anchor { id: i, position, feature, offsets, scale, lod_level });
    }

    let input_dim = r.u32()?;
    let hidden_dim = r.u32()?;
    let output_dim = r.u32()?;
    if input_dim != feature_dim + 3 {
        return Err(r.err(format!(
            "decoder input_dim {} does not match feature_dim + 3 = {}",
            input_dim,
            feature_dim + 3
        )));
    }
    if output_dim != k * OUTPUTS_PER_GAUSSIAN as u32 {
        return Err(r.err(format!(
            "decoder output_dim {} does not match K * {} = {}",
            output_dim,
            OUTPUTS_PER_GAUSSIAN,
            k * OUTPUTS_PER_GAUSSIAN as u32
        )));
    }
    if hidden_dim == 0 || hidden_dim > 1 << 16 {
        return Err(r.err("decoder hidden_dim out of range"));
    }
    let w1 = r.f32_vec(hidden_dim as usize * input_dim as usize)?;
    let b1 = r.f32_vec(hidden_dim as usize)?;
    let w2 = r.f32_vec(output_dim as usize * hidden_dim as usize)?;
    let b2 = r.f32_vec(output_dim as usize)?;
    if r.pos != buf.len() {
        return Err(r.err(format!("{} trailing bytes after scene payload", buf.len() - r.pos)));
    }

    let weights =
        DecoderWeights { input_dim, hidden_dim, output_dim, w1, b1, w2, b2 };
    let meta = SceneMeta { feature_dim, gaussians_per_anchor: k, lod_levels, bbox, lod_base_distance };
    SceneModel::new(anchors, weights, meta)
        .map_err(|e| Error::Format { offset: buf.len() as u64, reason: e.to_string() })
}

/// Writes a scene file.
pub fn save_scene(scene: &SceneModel, path: &Path) -> Result<()> {
    std::fs::write(path, scene_to_bytes(scene))?;
    Ok(())
}

/// Reads a scene file.
pub fn load_scene(path: &Path) -> Result<SceneModel> {
    let buf = std::fs::read(path)?;
    scene_from_bytes(&buf)
}
