//! Tile-based software rasterizer for 3D Gaussians.
//!
//! Projection follows the EWA splatting recipe: transform the world
//! covariance into camera space, apply the perspective Jacobian at the mean,
//! and keep the top-left 2x2 block plus a small isotropic regularizer. Splats
//! are binned into 16x16 pixel tiles and blended front to back per pixel
//! with early termination.
//!
//! Two optional optimizations, both output-preserving by construction:
//! opacity-scaled cutoff radii (faint splats get tighter extents than the
//! fixed 3-sigma rule), and exact tile culling, which drops AABB tiles whose
//! minimum Mahalanobis distance to the splat center proves that no pixel in
//! the tile can pass the blend threshold.

use nalgebra::{Matrix2, Matrix3, Quaternion, Vector2, Vector3};
use std::path::Path;

use crate::decoder::{build_covariance, GaussianBatch};
use crate::error::{Error, Result};
use crate::scene::Camera;

/// Tile edge in pixels.
pub const TILE_SIZE: u32 = 16;
/// Blend threshold: contributions with alpha below this are skipped. Defined
/// as the f32 value of 1/255 since opacities are f32; the same constant
/// drives cutoff radii and exact tile culling so the three stay consistent.
pub const BLEND_EPS: f64 = (1.0f32 / 255.0f32) as f64;
/// Transmittance floor: blending stops once a pixel is this opaque.
pub const TRANSMITTANCE_FLOOR: f64 = 1e-4;
/// Isotropic regularizer added to projected covariances.
pub const COV2D_REGULARIZATION: f64 = 0.3;
// Relative slack on the squared cull radius. Exact tile culling must never
// drop a tile whose pixels the blend loop would accept; the slack absorbs
// the difference between the f64 edge minimization here and the per-pixel
// quadratic form in the blend loop.
const CULL_MARGIN_REL: f64 = 1e-4;
const CULL_MARGIN_ABS: f64 = 1e-8;

/// Splat extent rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CutoffMode {
    /// Classic 3-sigma extent regardless of opacity.
    Fixed3,
    /// Extent shrunk to where the splat's contribution falls below the blend
    /// threshold; faint splats cover fewer tiles, invisible ones none.
    OpacityScaled,
}

/// Rasterizer configuration.
#[derive(Debug, Clone, Copy)]
pub struct RasterOptions {
    pub cutoff: CutoffMode,
    pub exact_tile_culling: bool,
    /// Verify per-pixel weight conservation while blending; fails the render
    /// instead of producing a wrong image.
    pub check_conservation: bool,
    pub background: [f32; 3],
}

impl RasterOptions {
    /// Baseline: fixed 3-sigma extents, AABB binning only.
    pub fn reference() -> Self {
        Self {
            cutoff: CutoffMode::Fixed3,
            exact_tile_culling: false,
            check_conservation: false,
            background: [0.0, 0.0, 0.0],
        }
    }

    /// Optimized path: opacity-scaled extents plus exact tile culling.
    pub fn fast() -> Self {
        Self { cutoff: CutoffMode::OpacityScaled, exact_tile_culling: true, ..Self::reference() }
    }

    pub fn with_conservation_checks(mut self) -> Self {
        self.check_conservation = true;
        self
    }
}

/// RGB float image, row-major, values in [0, 1] for rendered output.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    /// RGB interleaved, length = width * height * 3.
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![0.0; width as usize * height as usize * 3] }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f32; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [f32; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bitwise equality; stricter than `==` for signed zeros.
    pub fn bit_eq(&self, other: &Image) -> bool {
        self.width == other.width
            && self.height == other.height
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Largest absolute channel difference between two same-sized images.
    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Writes an 8-bit PNG (values clamped to [0, 1]).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut out = image::RgbImage::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = self.pixel(x, y);
                out.put_pixel(
                    x,
                    y,
                    image::Rgb(p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8)),
                );
            }
        }
        out.save(path).map_err(|e| Error::Runtime(format!("png write failed: {}", e)))?;
        Ok(())
    }

    pub fn approx_bytes(&self) -> u64 {
        self.data.len() as u64 * 4
    }
}

/// A Gaussian after projection to the image plane.
#[derive(Debug, Clone)]
pub struct Splat2D {
    /// Pixel coordinates of the projected mean.
    pub center: Vector2<f64>,
    /// Projected 2x2 covariance (includes the regularizer).
    pub cov2d: Matrix2<f64>,
    /// Camera-space depth (distance along the view axis), > 0.
    pub depth: f64,
    pub color: [f32; 3],
    pub opacity: f32,
    /// Extent in standard deviations used for binning; 0 culls the splat.
    pub cutoff_radius: f64,
    pub source_anchor: u32,
}

/// Outcome of projecting one Gaussian.
#[derive(Debug, Clone)]
pub enum ProjectOutcome {
    Visible(Box<Splat2D>),
    /// Outside the depth range, or extent zero.
    Culled,
    /// Non-finite input or projected parameters; skipped and counted.
    NonFinite,
}

/// Extent in standard deviations for a splat of the given opacity.
/// `OpacityScaled` solves alpha * exp(-r^2/2) = blend threshold; opacities at
/// or below the threshold cannot contribute anywhere, radius 0.
pub fn cutoff_radius(opacity: f32, mode: CutoffMode) -> f64 {
    match mode {
        CutoffMode::Fixed3 => 3.0,
        CutoffMode::OpacityScaled => {
            let a = f64::from(opacity);
            if a <= BLEND_EPS {
                0.0
            } else {
                (2.0 * (a / BLEND_EPS).ln()).sqrt()
            }
        }
    }
}

/// Projects one Gaussian into screen space.
#[allow(clippy::too_many_arguments)]
pub fn project(
    mean: &Vector3<f32>,
    rotation: &Quaternion<f32>,
    scale: &Vector3<f32>,
    color: [f32; 3],
    opacity: f32,
    source_anchor: u32,
    camera: &Camera,
    mode: CutoffMode,
) -> ProjectOutcome {
    let finite_in = mean.iter().all(|v| v.is_finite())
        && rotation.coords.iter().all(|v| v.is_finite())
        && scale.iter().all(|v| v.is_finite())
        && color.iter().all(|v| v.is_finite())
        && opacity.is_finite();
    if !finite_in {
        return ProjectOutcome::NonFinite;
    }

    let p = camera.world_to_camera(&mean.cast::<f64>());
    let t = -p.z;
    if t < camera.near || t > camera.far {
        return ProjectOutcome::Culled;
    }

    let f = camera.focal_px();
    let cx = f64::from(camera.width) * 0.5;
    let cy = f64::from(camera.height) * 0.5;
    let center = Vector2::new(cx + f * p.x / t, cy - f * p.y / t);

    // J is the Jacobian of (x, y, z) -> pixel at the mean; rows are d(u)/d*
    // and d(v)/d* with z = -t.
    let j = nalgebra::Matrix2x3::new(
        f / t,
        0.0,
        f * p.x / (t * t),
        0.0,
        -f / t,
        -f * p.y / (t * t),
    );
    let w = camera
        .rotation
        .inverse()
        .to_rotation_matrix()
        .into_inner();
    let sigma: Matrix3<f64> = build_covariance(rotation, scale);
    let cov_cam = w * sigma * w.transpose();
    let cov2d = j * cov_cam * j.transpose() + Matrix2::identity() * COV2D_REGULARIZATION;

    // The scaled extent only ever shrinks the reference footprint. Beyond 3
    // sigma a contribution is invisible on the reference path too, and
    // growing past it would let the optimized pass touch tiles the reference
    // pass never sees, breaking the subset and 1/255-difference guarantees.
    let r = cutoff_radius(opacity, mode).min(3.0);
    if r <= 0.0 {
        return ProjectOutcome::Culled;
    }
    let finite_out = center.iter().all(|v| v.is_finite())
        && cov2d.iter().all(|v| v.is_finite())
        && t.is_finite();
    if !finite_out {
        return ProjectOutcome::NonFinite;
    }
    ProjectOutcome::Visible(Box::new(Splat2D {
        center,
        cov2d,
        depth: t,
        color,
        opacity,
        cutoff_radius: r,
        source_anchor,
    }))
}

/// Per-tile splat lists, each sorted front to back.
#[derive(Debug)]
pub struct TileBins {
    pub tiles_x: u32,
    pub tiles_y: u32,
    /// Indices into the splat slice, row-major by tile.
    pub lists: Vec<Vec<u32>>,
}

impl TileBins {
    pub fn list(&self, tx: u32, ty: u32) -> &[u32] {
        &self.lists[(ty * self.tiles_x + tx) as usize]
    }

    pub fn total_entries(&self) -> usize {
        self.lists.iter().map(Vec::len).sum()
    }
}

// Pixel-center rectangle of a tile: blending samples at x + 0.5, so the
// reachable sample locations in tile tx span [tx*16 + 0.5, x_end - 0.5].
fn tile_rect(tx: u32, ty: u32, width: u32, height: u32) -> (Vector2<f64>, Vector2<f64>) {
    let x0 = f64::from(tx * TILE_SIZE) + 0.5;
    let y0 = f64::from(ty * TILE_SIZE) + 0.5;
    let x1 = f64::from(((tx + 1) * TILE_SIZE).min(width)) - 0.5;
    let y1 = f64::from(((ty + 1) * TILE_SIZE).min(height)) - 0.5;
    (Vector2::new(x0, y0), Vector2::new(x1, y1))
}

/// Minimum of (p - c)^T Q (p - c) over the axis-aligned rectangle [lo, hi],
/// for SPD Q. Zero when the center lies inside; otherwise the quadratic is
/// minimized along each edge in closed form.
pub fn min_mahalanobis_sq(
    c: &Vector2<f64>,
    q: &Matrix2<f64>,
    lo: &Vector2<f64>,
    hi: &Vector2<f64>,
) -> f64 {
    if c.x >= lo.x && c.x <= hi.x && c.y >= lo.y && c.y <= hi.y {
        return 0.0;
    }
    let corners = [
        Vector2::new(lo.x, lo.y),
        Vector2::new(hi.x, lo.y),
        Vector2::new(hi.x, hi.y),
        Vector2::new(lo.x, hi.y),
    ];
    let mut best = f64::INFINITY;
    for e in 0..4 {
        let a = corners[e];
        let b = corners[(e + 1) % 4];
        let u = a - c;
        let v = b - a;
        let vqv = (q * v).dot(&v);
        let uqv = (q * u).dot(&v);
        let t = if vqv > 0.0 { (-uqv / vqv).clamp(0.0, 1.0) } else { 0.0 };
        let p = u + v * t;
        best = best.min((q * p).dot(&p));
    }
    best
}

/// Assigns splats to tiles. The base assignment covers each splat's
/// cutoff-radius AABB; with `exact` enabled, AABB tiles are additionally
/// dropped when the minimum Mahalanobis distance from the tile's pixel
/// centers proves every contribution there falls below the blend threshold.
/// Each tile list is sorted by (depth, source anchor, splat index).
pub fn bin_tiles(splats: &[Splat2D], width: u32, height: u32, exact: bool) -> TileBins {
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let mut lists = vec![Vec::new(); tiles_x as usize * tiles_y as usize];

    for (i, s) in splats.iter().enumerate() {
        let r = s.cutoff_radius;
        if r <= 0.0 {
            continue;
        }
        let hx = r * s.cov2d[(0, 0)].max(0.0).sqrt();
        let hy = r * s.cov2d[(1, 1)].max(0.0).sqrt();
        let x0 = s.center.x - hx;
        let x1 = s.center.x + hx;
        let y0 = s.center.y - hy;
        let y1 = s.center.y + hy;
        if x1 < 0.0 || y1 < 0.0 || x0 >= f64::from(width) || y0 >= f64::from(height) {
            continue;
        }
        let tx0 = ((x0 / f64::from(TILE_SIZE)).floor().max(0.0)) as u32;
        let ty0 = ((y0 / f64::from(TILE_SIZE)).floor().max(0.0)) as u32;
        let tx1 = ((x1 / f64::from(TILE_SIZE)).floor() as i64).min(i64::from(tiles_x) - 1) as u32;
        let ty1 = ((y1 / f64::from(TILE_SIZE)).floor() as i64).min(i64::from(tiles_y) - 1) as u32;

        let (inv, blend_r2) = if exact {
            let det = s.cov2d[(0, 0)] * s.cov2d[(1, 1)] - s.cov2d[(0, 1)] * s.cov2d[(1, 0)];
            let inv = Matrix2::new(
                s.cov2d[(1, 1)] / det,
                -s.cov2d[(0, 1)] / det,
                -s.cov2d[(1, 0)] / det,
                s.cov2d[(0, 0)] / det,
            );
            // Cull radius derived from the blend rule itself, independent of
            // the binning radius, so dropping a tile can never change the
            // image in either cutoff mode.
            let a = f64::from(s.opacity);
            let r2 = if a > BLEND_EPS { 2.0 * (a / BLEND_EPS).ln() } else { 0.0 };
            (inv, r2 * (1.0 + CULL_MARGIN_REL) + CULL_MARGIN_ABS)
        } else {
            (Matrix2::zeros(), 0.0)
        };

        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                if exact {
                    let (lo, hi) = tile_rect(tx, ty, width, height);
                    if min_mahalanobis_sq(&s.center, &inv, &lo, &hi) > blend_r2 {
                        continue;
                    }
                }
                lists[(ty * tiles_x + tx) as usize].push(i as u32);
            }
        }
    }

    for list in &mut lists {
        list.sort_unstable_by(|&a, &b| {
            let (sa, sb) = (&splats[a as usize], &splats[b as usize]);
            sa.depth
                .partial_cmp(&sb.depth)
                .unwrap()
                .then(sa.source_anchor.cmp(&sb.source_anchor))
                .then(a.cmp(&b))
        });
    }
    TileBins { tiles_x, tiles_y, lists }
}

/// Counters from one rasterization.
#[derive(Debug, Clone, Default)]
pub struct RasterStats {
    pub n_input: u32,
    pub n_visible: u32,
    pub n_depth_culled: u32,
    pub n_zero_extent: u32,
    pub n_non_finite: u32,
    pub n_tile_entries: u64,
    /// Approximate transient memory held during the render.
    pub scratch_bytes: u64,
}

struct PreparedSplat {
    cx: f64,
    cy: f64,
    // Inverse covariance (conic) coefficients: quad form = a dx^2 + 2 b dx dy + c dy^2.
    a: f64,
    b: f64,
    c: f64,
    opacity: f64,
    color: [f32; 3],
}

/// Renders a batch and returns the image together with diagnostics.
pub fn rasterize_with_stats(
    batch: &GaussianBatch,
    camera: &Camera,
    opts: &RasterOptions,
) -> Result<(Image, RasterStats)> {
    camera.validate()?;
    let width = camera.width;
    let height = camera.height;
    let mut stats = RasterStats { n_input: batch.len() as u32, ..Default::default() };

    let mut splats = Vec::new();
    for i in 0..batch.len() {
        match project(
            &batch.means[i],
            &batch.rotations[i],
            &batch.scales[i],
            batch.colors[i],
            batch.opacities[i],
            batch.source_anchor[i],
            camera,
            opts.cutoff,
        ) {
            ProjectOutcome::Visible(s) => splats.push(*s),
            ProjectOutcome::Culled => {
                // Zero extent only happens in opacity-scaled mode.
                if f64::from(batch.opacities[i]) <= BLEND_EPS
                    && opts.cutoff == CutoffMode::OpacityScaled
                {
                    stats.n_zero_extent += 1;
                } else {
                    stats.n_depth_culled += 1;
                }
            }
            ProjectOutcome::NonFinite => stats.n_non_finite += 1,
        }
    }
    stats.n_visible = splats.len() as u32;

    let bins = bin_tiles(&splats, width, height, opts.exact_tile_culling);
    stats.n_tile_entries = bins.total_entries() as u64;
    stats.scratch_bytes = splats.len() as u64 * std::mem::size_of::<Splat2D>() as u64
        + splats.len() as u64 * std::mem::size_of::<PreparedSplat>() as u64
        + stats.n_tile_entries * 4;

    let prepared: Vec<PreparedSplat> = splats
        .iter()
        .map(|s| {
            let det = s.cov2d[(0, 0)] * s.cov2d[(1, 1)] - s.cov2d[(0, 1)] * s.cov2d[(1, 0)];
            PreparedSplat {
                cx: s.center.x,
                cy: s.center.y,
                a: s.cov2d[(1, 1)] / det,
                b: -s.cov2d[(0, 1)] / det,
                c: s.cov2d[(0, 0)] / det,
                opacity: f64::from(s.opacity),
                color: s.color,
            }
        })
        .collect();

    let bg = opts.background;
    let mut img = Image::new(width, height);
    let mut violation: Option<String> = None;

    for ty in 0..bins.tiles_y {
        for tx in 0..bins.tiles_x {
            let list = bins.list(tx, ty);
            let x_end = ((tx + 1) * TILE_SIZE).min(width);
            let y_end = ((ty + 1) * TILE_SIZE).min(height);
            if list.is_empty() {
                for py in ty * TILE_SIZE..y_end {
                    for px in tx * TILE_SIZE..x_end {
                        img.set_pixel(px, py, bg);
                    }
                }
                continue;
            }
            for py in ty * TILE_SIZE..y_end {
                for px in tx * TILE_SIZE..x_end {
                    let sx = f64::from(px) + 0.5;
                    let sy = f64::from(py) + 0.5;
                    let mut transmittance = 1.0f64;
                    let mut acc = [0.0f64; 3];
                    let mut weight_sum = 0.0f64;
                    for &si in list {
                        let s = &prepared[si as usize];
                        let dx = sx - s.cx;
                        let dy = sy - s.cy;
                        // SPD quad form; clamp tiny negative fp noise so g <= 1.
                        let e = (s.a * dx * dx + 2.0 * s.b * dx * dy + s.c * dy * dy).max(0.0);
                        let alpha = (s.opacity * (-0.5 * e).exp()).min(1.0);
                        if alpha < BLEND_EPS {
                            continue;
                        }
                        let w = transmittance * alpha;
                        acc[0] += w * f64::from(s.color[0]);
                        acc[1] += w * f64::from(s.color[1]);
                        acc[2] += w * f64::from(s.color[2]);
                        weight_sum += w;
                        transmittance *= 1.0 - alpha;
                        if transmittance < TRANSMITTANCE_FLOOR {
                            break;
                        }
                    }
                    if opts.check_conservation
                        && violation.is_none()
                        && (weight_sum > 1.0 + 1e-9 || !(0.0..=1.0).contains(&transmittance))
                    {
                        violation = Some(format!(
                            "pixel ({}, {}): weight sum {}, transmittance {}",
                            px, py, weight_sum, transmittance
                        ));
                    }
                    img.set_pixel(
                        px,
                        py,
                        [
                            (acc[0] + transmittance * f64::from(bg[0])) as f32,
                            (acc[1] + transmittance * f64::from(bg[1])) as f32,
                            (acc[2] + transmittance * f64::from(bg[2])) as f32,
                        ],
                    );
                }
            }
        }
    }

    if let Some(v) = violation {
        return Err(Error::NumericDomain(format!("blend conservation violated at {}", v)));
    }
    Ok((img, stats))
}

/// Renders a batch to an image.
pub fn rasterize(batch: &GaussianBatch, camera: &Camera, opts: &RasterOptions) -> Result<Image> {
    rasterize_with_stats(batch, camera, opts).map(|(img, _)| img)
}
