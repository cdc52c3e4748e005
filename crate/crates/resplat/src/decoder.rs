//! View-dependent decoding of anchors into Gaussians.
//!
//! Each selected anchor feeds a small shared MLP: input = anchor feature
//! concatenated with the unit view direction, trunk = one hidden ReLU layer,
//! heads = per-Gaussian opacity / color / rotation / scale. Gaussians whose
//! opacity activation is non-positive are masked out at decode time.
//!
//! Two decode paths exist. The reference path is a plain per-anchor loop.
//! The fast path reuses scratch buffers and evaluates opacity rows first so
//! masked Gaussians never touch the remaining head rows; it performs the
//! same float operations in the same order for everything it does compute,
//! so its output is bit-identical to the reference path.

use nalgebra::{Matrix3, Quaternion, Vector3};

use crate::error::{Error, Result};
use crate::scene::{Camera, SceneModel};

/// Hidden width of the decoder trunk.
pub const HIDDEN_DIM: usize = 32;
/// Output rows per Gaussian: 1 opacity + 3 color + 4 rotation + 3 scale.
pub const OUTPUTS_PER_GAUSSIAN: usize = 11;

/// Weights of the shared decoder MLP, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    /// feature_dim + 3 (view direction).
    pub input_dim: u32,
    pub hidden_dim: u32,
    /// gaussians_per_anchor * OUTPUTS_PER_GAUSSIAN.
    pub output_dim: u32,
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
}

impl DecoderWeights {
    /// Validates array lengths against the declared dimensions and a scene's
    /// feature/K configuration.
    pub fn check_dims(&self, feature_dim: u32, k: u32) -> Result<()> {
        if self.input_dim != feature_dim + 3 {
            return Err(Error::InvalidArgument(format!(
                "decoder input_dim {} != feature_dim + 3 = {}",
                self.input_dim,
                feature_dim + 3
            )));
        }
        if self.output_dim != k * OUTPUTS_PER_GAUSSIAN as u32 {
            return Err(Error::InvalidArgument(format!(
                "decoder output_dim {} != K * {}",
                self.output_dim, OUTPUTS_PER_GAUSSIAN
            )));
        }
        let (i, h, o) = (self.input_dim as usize, self.hidden_dim as usize, self.output_dim as usize);
        if h == 0
            || self.w1.len() != h * i
            || self.b1.len() != h
            || self.w2.len() != o * h
            || self.b2.len() != o
        {
            return Err(Error::InvalidArgument("decoder weight array lengths inconsistent".into()));
        }
        if ![&self.w1, &self.b1, &self.w2, &self.b2]
            .iter()
            .all(|a| a.iter().all(|v| v.is_finite()))
        {
            return Err(Error::InvalidArgument("decoder weights must be finite".into()));
        }
        Ok(())
    }

    pub fn approx_bytes(&self) -> u64 {
        4 * (self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()) as u64
    }
}

/// Result of anchor selection for one camera: sorted unique anchor ids plus
/// the coarsest LoD cutoff that was applied to any included anchor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorIndexSet {
    pub ids: Vec<u32>,
    pub lod_cutoff: u8,
}

impl AnchorIndexSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Decoded Gaussians in struct-of-arrays form. Rows are ordered by
/// (source anchor id, emission slot), globally non-decreasing in anchor id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianBatch {
    pub means: Vec<Vector3<f32>>,
    /// Unit quaternions (validated to within 1e-5).
    pub rotations: Vec<Quaternion<f32>>,
    pub scales: Vec<Vector3<f32>>,
    pub colors: Vec<[f32; 3]>,
    pub opacities: Vec<f32>,
    pub source_anchor: Vec<u32>,
}

impl GaussianBatch {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            means: Vec::with_capacity(n),
            rotations: Vec::with_capacity(n),
            scales: Vec::with_capacity(n),
            colors: Vec::with_capacity(n),
            opacities: Vec::with_capacity(n),
            source_anchor: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        mean: Vector3<f32>,
        rotation: Quaternion<f32>,
        scale: Vector3<f32>,
        color: [f32; 3],
        opacity: f32,
        source_anchor: u32,
    ) {
        self.means.push(mean);
        self.rotations.push(rotation);
        self.scales.push(scale);
        self.colors.push(color);
        self.opacities.push(opacity);
        self.source_anchor.push(source_anchor);
    }

    /// Appends every row of `other`.
    pub fn extend_from(&mut self, other: &GaussianBatch) {
        self.means.extend_from_slice(&other.means);
        self.rotations.extend_from_slice(&other.rotations);
        self.scales.extend_from_slice(&other.scales);
        self.colors.extend_from_slice(&other.colors);
        self.opacities.extend_from_slice(&other.opacities);
        self.source_anchor.extend_from_slice(&other.source_anchor);
    }

    pub fn approx_bytes(&self) -> u64 {
        // 3+4+3 f32 vectors, color, opacity, anchor id.
        self.len() as u64 * (4 * (3 + 4 + 3 + 3 + 1) + 4)
    }

    /// Bitwise equality, stricter than `==` (distinguishes -0.0 from 0.0).
    pub fn bit_eq(&self, other: &GaussianBatch) -> bool {
        fn v3(a: &[Vector3<f32>], b: &[Vector3<f32>]) -> bool {
            a.len() == b.len()
                && a.iter().zip(b).all(|(x, y)| {
                    x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits())
                })
        }
        v3(&self.means, &other.means)
            && v3(&self.scales, &other.scales)
            && self.rotations.len() == other.rotations.len()
            && self
                .rotations
                .iter()
                .zip(&other.rotations)
                .all(|(a, b)| a.coords.iter().zip(b.coords.iter()).all(|(p, q)| p.to_bits() == q.to_bits()))
            && self.colors.len() == other.colors.len()
            && self
                .colors
                .iter()
                .zip(&other.colors)
                .all(|(a, b)| a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()))
            && self.opacities.len() == other.opacities.len()
            && self
                .opacities
                .iter()
                .zip(&other.opacities)
                .all(|(a, b)| a.to_bits() == b.to_bits())
            && self.source_anchor == other.source_anchor
    }
}

/// Checks every batch invariant: parallel array lengths, finite values,
/// opacities in (0, 1], unit rotations (1e-5), positive scales, colors in
/// [0, 1], non-decreasing source anchors, and SPD covariance per row.
pub fn validate_batch(batch: &GaussianBatch) -> Result<()> {
    let n = batch.len();
    if batch.rotations.len() != n
        || batch.scales.len() != n
        || batch.colors.len() != n
        || batch.opacities.len() != n
        || batch.source_anchor.len() != n
    {
        return Err(Error::InvalidArgument("batch arrays have mismatched lengths".into()));
    }
    for i in 0..n {
        let a = batch.opacities[i];
        if !(a > 0.0 && a <= 1.0) {
            return Err(Error::InvalidArgument(format!("row {}: opacity {} not in (0, 1]", i, a)));
        }
        let qn = batch.rotations[i].norm();
        if (qn - 1.0).abs() > 1e-5 {
            return Err(Error::InvalidArgument(format!("row {}: quaternion norm {}", i, qn)));
        }
        let s = batch.scales[i];
        if !(s.x > 0.0 && s.y > 0.0 && s.z > 0.0) {
            return Err(Error::InvalidArgument(format!("row {}: non-positive scale", i)));
        }
        if !batch.means[i].iter().all(|v| v.is_finite()) || !s.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!("row {}: non-finite geometry", i)));
        }
        if !batch.colors[i].iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(Error::InvalidArgument(format!("row {}: color out of [0, 1]", i)));
        }
        if i > 0 && batch.source_anchor[i] < batch.source_anchor[i - 1] {
            return Err(Error::InvalidArgument(format!("row {}: source anchors not sorted", i)));
        }
        let sigma = build_covariance(&batch.rotations[i], &s);
        if sigma.cholesky().is_none() {
            return Err(Error::InvalidArgument(format!("row {}: covariance not SPD", i)));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Anchor selection
// ---------------------------------------------------------------------------

/// Selects the anchors a camera needs: frustum test padded by each anchor's
/// cull margin, then a distance-based LoD cutoff. Doubling the distance to
/// the viewer drops one level of detail; the coarsest level is never culled
/// by distance, only by the frustum.
pub fn filter_anchors(scene: &SceneModel, camera: &Camera) -> AnchorIndexSet {
    let q_inv = camera.rotation.inverse();
    let tan_x = camera.tan_half_x();
    let tan_y = camera.tan_half_y();
    let lx = (1.0 + tan_x * tan_x).sqrt();
    let ly = (1.0 + tan_y * tan_y).sqrt();
    let d0 = f64::from(scene.meta.lod_base_distance);
    let levels = scene.meta.lod_levels;
    let max_level = (levels - 1) as f64;

    let mut ids = Vec::new();
    let mut lod_cutoff = 0u8;
    for a in &scene.anchors {
        let pos = a.position.cast::<f64>();
        let m = f64::from(scene.cull_margin(a.id));
        let p = q_inv * (pos - camera.position);
        let t = -p.z;
        if t < camera.near - m || t > camera.far + m {
            continue;
        }
        if p.x.abs() > tan_x * t + m * lx || p.y.abs() > tan_y * t + m * ly {
            continue;
        }
        let dist = (pos - camera.position).norm();
        // d0/dist -> +inf as dist -> 0; clamp before narrowing.
        let cut = ((d0 / dist).log2().floor() + max_level).clamp(0.0, max_level) as u8;
        if a.lod_level <= cut {
            ids.push(a.id);
            lod_cutoff = lod_cutoff.max(cut);
        }
    }
    AnchorIndexSet { ids, lod_cutoff }
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Unit view direction from `viewpoint` toward `pos`, narrowed to f32 at the
/// end. Falls back to +Z when the two points coincide.
fn view_direction(pos: &Vector3<f32>, viewpoint: &Vector3<f64>) -> Vector3<f32> {
    let d = pos.cast::<f64>() - viewpoint;
    let n = d.norm();
    if n < 1e-12 {
        return Vector3::new(0.0, 0.0, 1.0);
    }
    (d / n).cast::<f32>()
}

fn check_ids(ids: &[u32], n_anchors: u32) -> Result<()> {
    let mut prev: Option<u32> = None;
    for &id in ids {
        if id >= n_anchors {
            return Err(Error::InvalidArgument(format!(
                "anchor id {} out of range ({} anchors)",
                id, n_anchors
            )));
        }
        if let Some(p) = prev {
            if id <= p {
                return Err(Error::InvalidArgument("anchor ids must be sorted unique".into()));
            }
        }
        prev = Some(id);
    }
    Ok(())
}

// One dense layer row: b + w[row] . x, accumulated left to right in f32.
// Both decode paths and the test oracles must keep this exact order.
#[inline]
fn dense_row(w: &[f32], b: f32, x: &[f32], row: usize, input: usize) -> f32 {
    let mut acc = b;
    let wr = &w[row * input..(row + 1) * input];
    for c in 0..input {
        acc += wr[c] * x[c];
    }
    acc
}

struct HeadOutputs {
    opacity: f32,
    color: [f32; 3],
    rotation: Quaternion<f32>,
    scale: Vector3<f32>,
}

// Applies the per-Gaussian heads to 10 raw rows (color 3, rotation 4,
// scale 3). Opacity is handled by the caller since it gates the rest.
fn apply_heads(raw: &[f32; 10], opacity: f32, anchor_scale: &Vector3<f32>) -> HeadOutputs {
    let color = [sigmoid(raw[0]), sigmoid(raw[1]), sigmoid(raw[2])];
    // Raw coefficients are (x, y, z, w); degenerate vectors fall back to the
    // identity rotation.
    let q = Quaternion::new(raw[6], raw[3], raw[4], raw[5]);
    let qn = q.norm();
    let rotation = if qn < 1e-12 { Quaternion::new(1.0, 0.0, 0.0, 0.0) } else { q / qn };
    let scale = Vector3::new(
        sigmoid(raw[7]) * anchor_scale.x,
        sigmoid(raw[8]) * anchor_scale.y,
        sigmoid(raw[9]) * anchor_scale.z,
    );
    HeadOutputs { opacity, color, rotation, scale }
}

/// Reference decode: for each anchor id (sorted, unique) runs the MLP and
/// emits the unmasked Gaussians. Pure: output depends only on the arguments.
pub fn decode_anchors(
    scene: &SceneModel,
    ids: &[u32],
    viewpoint: &Vector3<f64>,
) -> Result<GaussianBatch> {
    check_ids(ids, scene.n_anchors())?;
    let w = &scene.weights;
    let input = w.input_dim as usize;
    let hidden = w.hidden_dim as usize;
    let k = scene.meta.gaussians_per_anchor as usize;
    let mut batch = GaussianBatch::with_capacity(ids.len() * k);

    for &id in ids {
        let anchor = &scene.anchors[id as usize];
        let dir = view_direction(&anchor.position, viewpoint);
        let mut x = Vec::with_capacity(input);
        x.extend_from_slice(&anchor.feature);
        x.extend_from_slice(&[dir.x, dir.y, dir.z]);

        let mut h = vec![0.0f32; hidden];
        for r in 0..hidden {
            h[r] = dense_row(&w.w1, w.b1[r], &x, r, input).max(0.0);
        }
        let mut out = vec![0.0f32; w.output_dim as usize];
        for r in 0..w.output_dim as usize {
            out[r] = dense_row(&w.w2, w.b2[r], &h, r, hidden);
        }
        for j in 0..k {
            let base = j * OUTPUTS_PER_GAUSSIAN;
            let opacity = out[base].tanh();
            if opacity <= 0.0 {
                continue;
            }
            let mut raw = [0.0f32; 10];
            raw.copy_from_slice(&out[base + 1..base + 11]);
            let heads = apply_heads(&raw, opacity, &anchor.scale);
            let mean = anchor.position + anchor.offsets[j].component_mul(&anchor.scale);
            batch.push(mean, heads.rotation, heads.scale, heads.color, heads.opacity, id);
        }
    }
    Ok(batch)
}

/// Fast decode: bit-identical to [`decode_anchors`] but reuses scratch
/// buffers across anchors and evaluates each Gaussian's opacity row before
/// deciding whether to touch its remaining head rows, so masked Gaussians
/// cost one dense row instead of eleven.
pub fn decode_anchors_fast(
    scene: &SceneModel,
    ids: &[u32],
    viewpoint: &Vector3<f64>,
) -> Result<GaussianBatch> {
    check_ids(ids, scene.n_anchors())?;
    let w = &scene.weights;
    let input = w.input_dim as usize;
    let hidden = w.hidden_dim as usize;
    let k = scene.meta.gaussians_per_anchor as usize;
    let mut batch = GaussianBatch::with_capacity(ids.len() * k);

    let mut x = vec![0.0f32; input];
    let mut h = vec![0.0f32; hidden];
    let feat = input - 3;
    for &id in ids {
        let anchor = &scene.anchors[id as usize];
        let dir = view_direction(&anchor.position, viewpoint);
        x[..feat].copy_from_slice(&anchor.feature);
        x[feat] = dir.x;
        x[feat + 1] = dir.y;
        x[feat + 2] = dir.z;

        for r in 0..hidden {
            h[r] = dense_row(&w.w1, w.b1[r], &x, r, input).max(0.0);
        }
        for j in 0..k {
            let base = j * OUTPUTS_PER_GAUSSIAN;
            let opacity = dense_row(&w.w2, w.b2[base], &h, base, hidden).tanh();
            if opacity <= 0.0 {
                continue;
            }
            let mut raw = [0.0f32; 10];
            for (off, slot) in raw.iter_mut().enumerate() {
                let r = base + 1 + off;
                *slot = dense_row(&w.w2, w.b2[r], &h, r, hidden);
            }
            let heads = apply_heads(&raw, opacity, &anchor.scale);
            let mean = anchor.position + anchor.offsets[j].component_mul(&anchor.scale);
            batch.push(mean, heads.rotation, heads.scale, heads.color, heads.opacity, id);
        }
    }
    Ok(batch)
}

// ---------------------------------------------------------------------------
// Covariance and point weights
// ---------------------------------------------------------------------------

/// World covariance of a Gaussian: R * diag(s)^2 * R^T, computed in f64 as
/// M M^T with M = R diag(s) so the result is exactly symmetric and SPD for
/// positive scales. A degenerate rotation falls back to the identity.
pub fn build_covariance(rotation: &Quaternion<f32>, scale: &Vector3<f32>) -> Matrix3<f64> {
    let q = rotation.cast::<f64>();
    let n = q.norm();
    let q = if n < 1e-12 { Quaternion::new(1.0, 0.0, 0.0, 0.0) } else { q / n };
    let r = nalgebra::UnitQuaternion::new_unchecked(q).to_rotation_matrix();
    let s = scale.cast::<f64>();
    let m = r.into_inner() * Matrix3::from_diagonal(&s);
    m * m.transpose()
}

/// Unnormalized Gaussian density exp(-0.5 (x-mu)^T Sigma^-1 (x-mu)),
/// evaluated via Cholesky. Singular covariance is a domain error.
pub fn gaussian_weight(
    x: &Vector3<f64>,
    mu: &Vector3<f64>,
    sigma: &Matrix3<f64>,
) -> Result<f64> {
    let chol = sigma
        .cholesky()
        .ok_or_else(|| Error::NumericDomain("covariance is not positive definite".into()))?;
    let delta = x - mu;
    let y = chol
        .l()
        .solve_lower_triangular(&delta)
        .ok_or_else(|| Error::NumericDomain("singular Cholesky factor".into()))?;
    Ok((-0.5 * y.norm_squared()).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_synthetic_scene, Aabb, SceneGenParams, SceneMeta};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn test_scene(seed: u64, n: u32) -> SceneModel {
        generate_synthetic_scene(&SceneGenParams {
            seed,
            n_anchors: n,
            lod_levels: 3,
            feature_dim: 8,
            gaussians_per_anchor: 4,
            ..SceneGenParams::default()
        })
        .unwrap()
    }

    fn test_camera(pos: Vector3<f64>, target: Vector3<f64>) -> Camera {
        Camera::look_at(pos, target, Vector3::new(0.0, 1.0, 0.0), 1.0, 64, 64, 0.1, 500.0)
            .unwrap()
    }

    #[test]
    fn anchor_behind_camera_is_excluded() {
        let mut scene = test_scene(1, 1);
        scene.anchors[0].position = Vector3::new(0.0, 0.0, 200.0);
        let scene = SceneModel::new(scene.anchors, scene.weights, scene.meta).unwrap();
        // Camera at origin looking down -Z; the anchor sits far behind it.
        let cam = test_camera(Vector3::zeros(), Vector3::new(0.0, 0.0, -1.0));
        assert!(filter_anchors(&scene, &cam).is_empty());
    }

    #[test]
    fn single_level_scene_reduces_to_frustum_test() {
        let mut params = SceneGenParams {
            seed: 3,
            n_anchors: 500,
            lod_levels: 1,
            feature_dim: 8,
            gaussians_per_anchor: 4,
            ..SceneGenParams::default()
        };
        params.lod_base_distance = Some(0.001); // tiny d0: distance cut always coarsest
        let scene = generate_synthetic_scene(&params).unwrap();
        let cam = test_camera(Vector3::new(0.0, 10.0, 120.0), Vector3::new(0.0, 10.0, 0.0));
        let got = filter_anchors(&scene, &cam);
        // Oracle: frustum-only membership, built from world-space planes.
        let oracle = brute_force_filter(&scene, &cam);
        assert_eq!(got.ids, oracle);
        assert!(!got.is_empty());
    }

    #[test]
    fn lod_cutoff_follows_distance_ladder() {
        // One anchor per level at the same spot; d0 = 40.
        let base = test_scene(5, 3);
        let mut anchors = base.anchors.clone();
        for (i, a) in anchors.iter_mut().enumerate() {
            a.position = Vector3::new(0.0, 0.0, 0.0);
            a.lod_level = i as u8;
            // Zero out offsets so margins do not affect the frustum test.
            for o in a.offsets.iter_mut() {
                *o = Vector3::zeros();
            }
        }
        let mut meta = base.meta.clone();
        meta.lod_base_distance = 40.0;
        meta.bbox = Aabb::new(Vector3::new(-1.0, -1.0, -1.0), Vector3::new(1.0, 1.0, 1.0));
        let scene = SceneModel::new(anchors, base.weights.clone(), meta).unwrap();

        // (camera distance, expected number of levels selected)
        for (dist, expect) in [(10.0, 3), (40.0, 3), (80.0, 2), (160.0, 1), (500.0, 1)] {
            let cam = test_camera(Vector3::new(0.0, 0.0, dist), Vector3::zeros());
            let got = filter_anchors(&scene, &cam);
            assert_eq!(got.len(), expect, "at distance {}", dist);
        }
    }

    // Independent frustum construction: world-space planes from the camera
    // basis vectors, then inclusion by signed distance with margin.
    fn brute_force_filter(scene: &SceneModel, cam: &Camera) -> Vec<u32> {
        let f = cam.forward();
        let r = cam.right();
        let u = cam.up();
        let tx = cam.tan_half_x();
        let ty = cam.tan_half_y();
        let mut planes = Vec::new();
        for (edge, lateral) in [
            (f - r * tx, r),
            (f + r * tx, -r),
            (f - u * ty, u),
            (f + u * ty, -u),
        ] {
            let other = if lateral.dot(&r).abs() > 0.5 { u } else { r };
            let mut n = edge.cross(&other).normalize();
            if n.dot(&lateral) < 0.0 {
                n = -n;
            }
            planes.push(n);
        }
        let d0 = f64::from(scene.meta.lod_base_distance);
        let max_level = (scene.meta.lod_levels - 1) as f64;
        let mut out = Vec::new();
        'anchor: for a in &scene.anchors {
            let p = a.position.cast::<f64>() - cam.position;
            let m = f64::from(scene.cull_margin(a.id));
            let depth = p.dot(&f);
            if depth < cam.near - m || depth > cam.far + m {
                continue;
            }
            for n in &planes {
                if p.dot(n) < -m {
                    continue 'anchor;
                }
            }
            let cut = ((d0 / p.norm()).log2().floor() + max_level).clamp(0.0, max_level) as u8;
            if a.lod_level <= cut {
                out.push(a.id);
            }
        }
        out
    }

    #[test]
    fn filter_matches_independent_plane_construction() {
        let scene = test_scene(11, 1000);
        let targets = [
            Vector3::new(0.0, 10.0, 0.0),
            Vector3::new(20.0, 5.0, -10.0),
            Vector3::new(-30.0, 15.0, 30.0),
        ];
        let mut rng = crate::rng::SplitMix64::new(99);
        for i in 0..50 {
            let pos = Vector3::new(
                rng.next_f64() * 200.0 - 100.0,
                rng.next_f64() * 60.0 - 10.0,
                rng.next_f64() * 200.0 - 100.0,
            );
            let target = targets[i % targets.len()];
            if (target - pos).norm() < 1.0 {
                continue;
            }
            let cam = test_camera(pos, target);
            let got = filter_anchors(&scene, &cam);
            assert_eq!(got.ids, brute_force_filter(&scene, &cam), "camera {}", i);
        }
    }

    #[test]
    fn decode_empty_ids_gives_empty_batch() {
        let scene = test_scene(2, 10);
        let batch = decode_anchors(&scene, &[], &Vector3::zeros()).unwrap();
        assert!(batch.is_empty());
    }

    #[test]
    fn decode_rejects_bad_ids() {
        let scene = test_scene(2, 10);
        assert!(decode_anchors(&scene, &[10], &Vector3::zeros()).is_err());
        assert!(decode_anchors(&scene, &[3, 3], &Vector3::zeros()).is_err());
        assert!(decode_anchors(&scene, &[5, 2], &Vector3::zeros()).is_err());
    }

    // Handcrafted weights with zero W1/W2: outputs equal the biases, so every
    // head value is known in closed form.
    #[test]
    fn decode_matches_closed_form_for_bias_only_weights() {
        let base = test_scene(4, 1);
        let k = 4usize;
        let hidden = HIDDEN_DIM;
        let input = 8 + 3;
        let mut b2 = vec![0.0f32; k * OUTPUTS_PER_GAUSSIAN];
        for j in 0..k {
            // Alternate opacity sign; even slots survive.
            b2[j * OUTPUTS_PER_GAUSSIAN] = if j % 2 == 0 { 0.5 } else { -0.5 };
            b2[j * OUTPUTS_PER_GAUSSIAN + 1] = 1.0; // red channel raw
        }
        let weights = DecoderWeights {
            input_dim: input as u32,
            hidden_dim: hidden as u32,
            output_dim: (k * OUTPUTS_PER_GAUSSIAN) as u32,
            w1: vec![0.0; hidden * input],
            b1: vec![0.0; hidden],
            w2: vec![0.0; k * OUTPUTS_PER_GAUSSIAN * hidden],
            b2,
        };
        let scene = SceneModel::new(base.anchors.clone(), weights, base.meta.clone()).unwrap();
        let batch = decode_anchors(&scene, &[0], &Vector3::new(100.0, 0.0, 0.0)).unwrap();
        assert_eq!(batch.len(), 2);
        let a = &scene.anchors[0];
        for (row, j) in [(0usize, 0usize), (1, 2)] {
            assert_eq!(batch.opacities[row], 0.5f32.tanh());
            assert_eq!(batch.colors[row][0], sigmoid(1.0));
            assert_eq!(batch.colors[row][1], 0.5);
            assert_eq!(batch.colors[row][2], 0.5);
            // Zero rotation raw falls back to identity.
            assert_eq!(batch.rotations[row], Quaternion::new(1.0, 0.0, 0.0, 0.0));
            let expect_scale = a.scale * 0.5;
            assert_eq!(batch.scales[row], expect_scale);
            let expect_mean = a.position + a.offsets[j].component_mul(&a.scale);
            assert_eq!(batch.means[row], expect_mean);
            assert_eq!(batch.source_anchor[row], 0);
        }
        validate_batch(&batch).unwrap();
    }

    // Straight-line single-anchor reimplementation with independent loop
    // structure (iterator fold instead of indexed accumulation).
    fn oracle_decode_one(scene: &SceneModel, id: u32, viewpoint: &Vector3<f64>) -> GaussianBatch {
        let w = &scene.weights;
        let a = &scene.anchors[id as usize];
        let d = a.position.cast::<f64>() - viewpoint;
        let dir = (d / d.norm()).cast::<f32>();
        let x: Vec<f32> =
            a.feature.iter().copied().chain([dir.x, dir.y, dir.z]).collect();
        let input = x.len();
        let h: Vec<f32> = (0..w.hidden_dim as usize)
            .map(|r| {
                let acc = w.w1[r * input..(r + 1) * input]
                    .iter()
                    .zip(&x)
                    .fold(w.b1[r], |s, (wi, xi)| s + wi * xi);
                acc.max(0.0)
            })
            .collect();
        let out: Vec<f32> = (0..w.output_dim as usize)
            .map(|r| {
                w.w2[r * h.len()..(r + 1) * h.len()]
                    .iter()
                    .zip(&h)
                    .fold(w.b2[r], |s, (wi, hi)| s + wi * hi)
            })
            .collect();
        let mut batch = GaussianBatch::default();
        for j in 0..scene.meta.gaussians_per_anchor as usize {
            let base = j * OUTPUTS_PER_GAUSSIAN;
            let alpha = out[base].tanh();
            if alpha <= 0.0 {
                continue;
            }
            let color = [sigmoid(out[base + 1]), sigmoid(out[base + 2]), sigmoid(out[base + 3])];
            let q = Quaternion::new(out[base + 7], out[base + 4], out[base + 5], out[base + 6]);
            let q = if q.norm() < 1e-12 { Quaternion::new(1.0, 0.0, 0.0, 0.0) } else { q / q.norm() };
            let scale = Vector3::new(
                sigmoid(out[base + 8]) * a.scale.x,
                sigmoid(out[base + 9]) * a.scale.y,
                sigmoid(out[base + 10]) * a.scale.z,
            );
            let mean = a.position + a.offsets[j].component_mul(&a.scale);
            batch.push(mean, q, scale, color, alpha, id);
        }
        batch
    }

    #[test]
    fn decode_matches_independent_reimplementation() {
        let scene = test_scene(21, 40);
        let viewpoint = Vector3::new(30.0, 25.0, -40.0);
        for id in [0u32, 7, 20, 39] {
            let got = decode_anchors(&scene, &[id], &viewpoint).unwrap();
            let want = oracle_decode_one(&scene, id, &viewpoint);
            assert!(got.bit_eq(&want), "anchor {}", id);
        }
    }

    #[test]
    fn decode_is_pure() {
        let scene = test_scene(13, 30);
        let ids: Vec<u32> = (0..30).collect();
        let v = Vector3::new(5.0, 5.0, 5.0);
        let a = decode_anchors(&scene, &ids, &v).unwrap();
        let b = decode_anchors(&scene, &ids, &v).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn fast_decode_is_bit_identical_across_seeds() {
        for seed in 0..50u64 {
            let scene = test_scene(seed, 25);
            let ids: Vec<u32> = (0..25).collect();
            let v = Vector3::new(
                (seed as f64) * 3.0 - 60.0,
                10.0 + (seed % 7) as f64,
                -(seed as f64) * 2.0,
            );
            let reference = decode_anchors(&scene, &ids, &v).unwrap();
            let fast = decode_anchors_fast(&scene, &ids, &v).unwrap();
            assert!(reference.bit_eq(&fast), "seed {}", seed);
            validate_batch(&reference).unwrap();
        }
    }

    #[test]
    fn decoded_batches_satisfy_invariants() {
        let scene = test_scene(17, 200);
        let ids: Vec<u32> = (0..200).collect();
        let batch = decode_anchors(&scene, &ids, &Vector3::new(0.0, 30.0, 90.0)).unwrap();
        assert!(!batch.is_empty());
        validate_batch(&batch).unwrap();
    }

    #[test]
    fn covariance_identity_rotation_squares_scales() {
        let sigma = build_covariance(
            &Quaternion::new(1.0, 0.0, 0.0, 0.0),
            &Vector3::new(1.0, 2.0, 3.0),
        );
        assert_eq!(sigma, Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0)));
    }

    #[test]
    fn covariance_rotates_with_the_gaussian() {
        // 90 degrees about Z swaps the x and y variances.
        let half = std::f32::consts::FRAC_PI_4;
        let q = Quaternion::new(half.cos(), 0.0, 0.0, half.sin());
        let sigma = build_covariance(&q, &Vector3::new(2.0, 1.0, 1.0));
        let expect = Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0));
        assert_relative_eq!(sigma, expect, epsilon = 1e-9);
    }

    proptest! {
        #[test]
        fn covariance_symmetric_spd_with_scale_determinant(
            qw in -1.0f32..1.0,
            qx in -1.0f32..1.0,
            qy in -1.0f32..1.0,
            qz in -1.0f32..1.0,
            sx in 0.05f32..5.0,
            sy in 0.05f32..5.0,
            sz in 0.05f32..5.0,
        ) {
            let q = Quaternion::new(qw, qx, qy, qz);
            prop_assume!(q.norm() > 0.1);
            let s = Vector3::new(sx, sy, sz);
            let sigma = build_covariance(&q, &s);
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert_eq!(sigma[(i, j)].to_bits(), sigma[(j, i)].to_bits());
                }
            }
            let want = (f64::from(sx) * f64::from(sy) * f64::from(sz)).powi(2);
            prop_assert!((sigma.determinant() - want).abs() <= 1e-9 * want.max(1e-30));
            prop_assert!(sigma.cholesky().is_some());
        }
    }

    #[test]
    fn gaussian_weight_examples() {
        let sigma = Matrix3::identity();
        let mu = Vector3::zeros();
        assert_eq!(gaussian_weight(&mu, &mu, &sigma).unwrap(), 1.0);
        let w = gaussian_weight(&Vector3::new(1.0, 0.0, 0.0), &mu, &sigma).unwrap();
        assert_relative_eq!(w, (-0.5f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn gaussian_weight_is_rotation_invariant() {
        let q = Quaternion::new(0.6, 0.4, -0.5, 0.2);
        let s = Vector3::new(1.5, 0.7, 2.2);
        let sigma = build_covariance(&q, &s);
        let rot = nalgebra::UnitQuaternion::from_euler_angles(0.3, -0.8, 1.2);
        let x = Vector3::new(0.9, -0.4, 0.6);
        let mu = Vector3::new(0.1, 0.2, -0.3);
        let w1 = gaussian_weight(&x, &mu, &sigma).unwrap();
        let r = rot.to_rotation_matrix().into_inner();
        let w2 = gaussian_weight(&(r * x), &(r * mu), &(r * sigma * r.transpose())).unwrap();
        assert_relative_eq!(w1, w2, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_weight_rejects_singular_covariance() {
        let sigma = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0));
        let r = gaussian_weight(&Vector3::zeros(), &Vector3::zeros(), &sigma);
        assert!(matches!(r, Err(crate::error::Error::NumericDomain(_))));
    }

    #[test]
    fn validate_batch_catches_violations() {
        let scene = test_scene(2, 5);
        let mut batch = decode_anchors(&scene, &[0, 1, 2], &Vector3::zeros()).unwrap();
        assert!(validate_batch(&batch).is_ok());
        if !batch.is_empty() {
            batch.opacities[0] = 1.5;
            assert!(validate_batch(&batch).is_err());
        }
    }

    // Placeholder meta for tests that need a tiny custom scene.
    #[allow(dead_code)]
    fn tiny_meta() -> SceneMeta {
        SceneMeta {
            feature_dim: 8,
            gaussians_per_anchor: 4,
            lod_levels: 3,
            bbox: Aabb::new(Vector3::new(-1.0, -1.0, -1.0), Vector3::new(1.0, 1.0, 1.0)),
            lod_base_distance: 10.0,
        }
    }
}
