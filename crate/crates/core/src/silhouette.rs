//! Differentiable soft silhouettes of the capsule model.
//!
//! Each bone projects to a round cone: the union of discs swept along the 2D
//! segment with radius varying linearly between the projected endpoint radii. With
//! `s_j = sigmoid(−d_j/σ)` for the signed pixel distance `d_j` to capsule
//! `j`, a pixel's occupancy is the probabilistic union `1 − Π_j (1 − s_j)`.
//! It saturates like a max inside any capsule but, unlike a max, stays
//! differentiable where capsules meet.

use std::path::Path;

use nalgebra::{Matrix2x3, RowVector3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{CameraView, Rig, MIN_DEPTH};
use crate::io;
use crate::kinematics::{self, CapsuleModel, KinematicParams};

/// Capsules farther than this many σ from a pixel contribute nothing. Each
/// capsule's `ln σ(d/σ)` has its second-order Taylor expansion at the cutoff
/// subtracted, so occupancy is C² as capsules move in and out of range.
const CUTOFF_SIGMAS: f64 = 8.0;

/// Observed (or rendered ground-truth) person mask for one view and frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteMask {
    pub view_id: String,
    pub frame: i64,
    pub width: usize,
    pub height: usize,
    /// Row-major occupancy in `[0, 1]`.
    pub grid: Vec<f64>,
}

impl SilhouetteMask {
    pub fn new(view_id: impl Into<String>, frame: i64, width: usize, height: usize, grid: Vec<f64>) -> Result<Self> {
        if grid.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} samples for a {width}×{height} mask",
                grid.len()
            )));
        }
        if grid.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::DimensionMismatch("mask values outside [0, 1]".into()));
        }
        Ok(Self {
            view_id: view_id.into(),
            frame,
            width,
            height,
            grid,
        })
    }

    pub fn load_pgm(path: &Path, view_id: &str, frame: i64) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (w, h, grid) = io::decode_pgm(path, &bytes)?;
        Self::new(view_id, frame, w, h, grid)
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        io::encode_pgm(self.width, self.height, &self.grid)
    }

    pub fn area(&self) -> f64 {
        self.grid.iter().filter(|&&v| v >= 0.5).count() as f64
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One capsule endpoint in image space together with its derivatives with
/// respect to the 3D endpoint.
#[derive(Debug, Clone, Copy)]
struct ProjectedEnd {
    pixel: Vector2<f64>,
    radius: f64,
    d_pixel: Matrix2x3<f64>,
    d_radius: RowVector3<f64>,
}

fn project_end(view: &CameraView, x: &Vector3<f64>, radius_mm: f64) -> Result<ProjectedEnd> {
    let h = view.project_homogeneous(x);
    if !(h.z > MIN_DEPTH) {
        return Err(Error::DegenerateDepth { depth: h.z });
    }
    let p = view.projection();
    let m = p.fixed_view::<3, 3>(0, 0);
    let pixel = Vector2::new(h.x / h.z, h.y / h.z);
    let mut d_pixel = Matrix2x3::zeros();
    d_pixel.set_row(0, &((m.row(0) - pixel.x * m.row(2)) / h.z));
    d_pixel.set_row(1, &((m.row(1) - pixel.y * m.row(2)) / h.z));
    let scale = view.focal() * radius_mm;
    Ok(ProjectedEnd {
        pixel,
        radius: scale / h.z,
        d_pixel,
        d_radius: m.row(2) * (-scale / (h.z * h.z)),
    })
}

#[derive(Debug, Clone, Copy)]
struct Capsule {
    a: ProjectedEnd,
    b: ProjectedEnd,
    parent: usize,
    child: usize,
}

/// Partials of the signed distance from a pixel to the round cone with
/// respect to `(a, b, r_a, r_b)`.
struct Distance {
    d_a: Vector2<f64>,
    d_b: Vector2<f64>,
    d_ra: f64,
    d_rb: f64,
}

/// Axis parameter of the sphere `(a + t·e, r_a + t·Δr)` whose surface is
/// nearest to `(px, py)`, plus the offset from that sphere's centre. The
/// round cone is the union of these spheres and `|p − q(t)| − r(t)` is convex
/// in `t`, so the clamped stationary point is the minimiser and the distance
/// is C¹ everywhere off the axis.
#[inline]
fn nearest_sphere(c: &Capsule, px: f64, py: f64) -> (f64, f64, f64) {
    let (ax, ay) = (c.a.pixel.x, c.a.pixel.y);
    let (ex, ey) = (c.b.pixel.x - ax, c.b.pixel.y - ay);
    let (apx, apy) = (px - ax, py - ay);
    let dr = c.b.radius - c.a.radius;
    let len2 = ex * ex + ey * ey;
    let t = if len2 == 0.0 {
        if dr > 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        let len = len2.sqrt();
        // slope of the cone wall; |k| ≥ 1 means one end sphere swallows the other
        let k = -dr / len;
        if k <= -1.0 {
            1.0
        } else if k >= 1.0 {
            0.0
        } else {
            let u = (apx * ex + apy * ey) / len2;
            let perp = (apx * ey - apy * ex).abs() / len;
            (u - k * perp / (len * (1.0 - k * k).sqrt())).clamp(0.0, 1.0)
        }
    };
    (t, apx - t * ex, apy - t * ey)
}

/// Signed pixel distance to a capsule; the scalar twin of `capsule_distance_grad`.
#[inline]
fn capsule_distance(c: &Capsule, px: f64, py: f64) -> f64 {
    let (t, dx, dy) = nearest_sphere(c, px, py);
    (dx * dx + dy * dy).sqrt() - (c.a.radius + t * (c.b.radius - c.a.radius))
}

/// By the envelope theorem only the explicit dependence at the minimising
/// `t` matters.
fn capsule_distance_grad(c: &Capsule, px: f64, py: f64) -> (f64, Distance) {
    let (t, dx, dy) = nearest_sphere(c, px, py);
    let diff = Vector2::new(dx, dy);
    let dist = diff.norm();
    let n = if dist > 0.0 { diff / dist } else { Vector2::zeros() };
    let d = dist - (c.a.radius + t * (c.b.radius - c.a.radius));
    (
        d,
        Distance {
            d_a: -n * (1.0 - t),
            d_b: -n * t,
            d_ra: -(1.0 - t),
            d_rb: -t,
        },
    )
}

fn project_capsules(model: &CapsuleModel, positions: &[Vector3<f64>], view: &CameraView) -> Result<Vec<Capsule>> {
    (0..model.bone_count())
        .map(|bone| {
            let (parent, child) = model.bone_endpoints(bone);
            let r = model.capsule_radii()[bone];
            Ok(Capsule {
                a: project_end(view, &positions[parent], r)?,
                b: project_end(view, &positions[child], r)?,
                parent,
                child,
            })
        })
        .collect()
}

/// Stable `ln sigmoid(z)`.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// `ln σ(z)` minus its quadratic Taylor expansion at the cutoff; still
/// non-positive and non-decreasing on `z < CUTOFF_SIGMAS`.
#[derive(Debug, Clone, Copy)]
struct Falloff {
    g0: f64,
    g1: f64,
    g2: f64,
}

impl Falloff {
    fn new() -> Self {
        let z = CUTOFF_SIGMAS;
        let (p, q) = (sigmoid(z), sigmoid(-z));
        Self {
            g0: log_sigmoid(z),
            g1: q,
            g2: -p * q,
        }
    }

    #[inline]
    fn value(&self, z: f64) -> f64 {
        let dz = z - CUTOFF_SIGMAS;
        log_sigmoid(z) - self.g0 - dz * (self.g1 + 0.5 * self.g2 * dz)
    }

    #[inline]
    fn slope(&self, z: f64) -> f64 {
        sigmoid(-z) - self.g1 - self.g2 * (z - CUTOFF_SIGMAS)
    }
}

/// Pixel rows a capsule grown by `reach` can touch, clipped to the crop.
fn row_bounds(c: &Capsule, reach: f64, h: usize) -> (f64, usize, usize) {
    let pad = c.a.radius.max(c.b.radius) + reach;
    let lo = (c.a.pixel.y.min(c.b.pixel.y) - pad).floor().max(0.0);
    let hi = (c.a.pixel.y.max(c.b.pixel.y) + pad).ceil().min(h as f64);
    (pad, lo as usize, hi.max(lo) as usize)
}

/// Column range `[x0, x1)` of pixel centres in row `py` that lie inside the
/// stadium of radius `pad` around the capsule axis.
fn row_span(c: &Capsule, pad: f64, py: usize, w: usize) -> Option<(usize, usize)> {
    let y = py as f64 + 0.5;
    let (a, b) = (c.a.pixel, c.b.pixel);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for end in [a, b] {
        let dy = y - end.y;
        if dy.abs() <= pad {
            let half = (pad * pad - dy * dy).sqrt();
            lo = lo.min(end.x - half);
            hi = hi.max(end.x + half);
        }
    }
    // the band between the end discs: 0 ≤ (p − a)·e ≤ |e|² and |(p − a)×e| ≤ pad·|e|
    let e = b - a;
    let len2 = e.norm_squared();
    if len2 > 0.0 {
        let dy = y - a.y;
        let (mut l, mut r) = (f64::NEG_INFINITY, f64::INFINITY);
        let mut clip = |coef: f64, offset: f64, min: f64, max: f64| {
            if coef == 0.0 {
                if offset < min || offset > max {
                    r = f64::NEG_INFINITY;
                }
            } else {
                let (x0, x1) = ((min - offset) / coef, (max - offset) / coef);
                l = l.max(x0.min(x1));
                r = r.min(x0.max(x1));
            }
        };
        // x enters both conditions as (x − a.x)
        clip(e.x, dy * e.y, 0.0, len2);
        let band = pad * len2.sqrt();
        clip(e.y, -dy * e.x, -band, band);
        if l <= r {
            lo = lo.min(l + a.x);
            hi = hi.max(r + a.x);
        }
    }
    if lo > hi {
        return None;
    }
    let x0 = (lo - 0.5).ceil().max(0.0);
    let x1 = ((hi - 0.5).floor() + 1.0).min(w as f64);
    (x0 < x1).then_some((x0 as usize, x1 as usize))
}

struct Raster {
    width: usize,
    height: usize,
    occupancy: Vec<f64>,
}

fn rasterize(capsules: &[Capsule], view: &CameraView, sigma: f64) -> Raster {
    let (w, h) = (view.width() as usize, view.height() as usize);
    let reach = CUTOFF_SIGMAS * sigma;
    let falloff = Falloff::new();
    // Σ_j ln(1 − s_j) per pixel
    let mut log_empty = vec![0.0; w * h];
    for c in capsules {
        let (pad, y0, y1) = row_bounds(c, reach, h);
        for py in y0..y1 {
            let Some((x0, x1)) = row_span(c, pad, py, w) else {
                continue;
            };
            let row = py * w;
            for px in x0..x1 {
                let d = capsule_distance(c, px as f64 + 0.5, py as f64 + 0.5);
                if d < reach {
                    log_empty[row + px] += falloff.value(d / sigma);
                }
            }
        }
    }
    let occupancy = log_empty.iter().map(|&l| -l.exp_m1()).collect();
    Raster {
        width: w,
        height: h,
        occupancy,
    }
}

/// Back-propagates per-pixel `∂L/∂occupancy` to per-joint `∂L/∂X`.
fn backprop(
    capsules: &[Capsule],
    raster: &Raster,
    d_occ: impl Fn(usize, f64) -> f64,
    sigma: f64,
    joint_count: usize,
) -> Vec<Vector3<f64>> {
    let reach = CUTOFF_SIGMAS * sigma;
    let falloff = Falloff::new();
    // ∂L/∂o · (1 − o), shared by every capsule touching the pixel
    let upstream: Vec<f64> = raster
        .occupancy
        .iter()
        .enumerate()
        .map(|(idx, &o)| d_occ(idx, o) * (1.0 - o))
        .collect();
    let mut grad = vec![Vector3::zeros(); joint_count];
    for c in capsules {
        let (pad, y0, y1) = row_bounds(c, reach, raster.height);
        let (mut ga, mut gb, mut gra, mut grb) = (Vector2::zeros(), Vector2::zeros(), 0.0, 0.0);
        for py in y0..y1 {
            let Some((x0, x1)) = row_span(c, pad, py, raster.width) else {
                continue;
            };
            for px in x0..x1 {
                let up = upstream[py * raster.width + px];
                if up == 0.0 {
                    continue;
                }
                let (d, dist) = capsule_distance_grad(c, px as f64 + 0.5, py as f64 + 0.5);
                if d >= reach {
                    continue;
                }
                // ∂o/∂d_j = −(1 − o)·∂term_j/∂d
                let gd = -up * falloff.slope(d / sigma) / sigma;
                ga += dist.d_a * gd;
                gb += dist.d_b * gd;
                gra += dist.d_ra * gd;
                grb += dist.d_rb * gd;
            }
        }
        grad[c.parent] += c.a.d_pixel.transpose() * ga + c.a.d_radius.transpose() * gra;
        grad[c.child] += c.b.d_pixel.transpose() * gb + c.b.d_radius.transpose() * grb;
    }
    grad
}

/// Renders the soft silhouette of posed joint positions, row-major `H×W`.
pub fn render_positions(
    model: &CapsuleModel,
    positions: &[Vector3<f64>],
    view: &CameraView,
    soft_sigma: f64,
) -> Result<Vec<f64>> {
    let capsules = project_capsules(model, positions, view)?;
    Ok(rasterize(&capsules, view, soft_sigma).occupancy)
}

pub fn render_soft_silhouette(
    model: &CapsuleModel,
    params: &KinematicParams,
    view: &CameraView,
    soft_sigma: f64,
) -> Result<Vec<f64>> {
    let positions = kinematics::forward_kinematics(model, params)?;
    render_positions(model, &positions, view, soft_sigma)
}

/// Gradient of the mean occupancy of one view with respect to the joint
/// positions. Mostly useful for checking the renderer's derivatives.
pub fn mean_occupancy_gradient(
    model: &CapsuleModel,
    positions: &[Vector3<f64>],
    view: &CameraView,
    soft_sigma: f64,
) -> Result<(f64, Vec<Vector3<f64>>)> {
    let capsules = project_capsules(model, positions, view)?;
    let raster = rasterize(&capsules, view, soft_sigma);
    let n = raster.occupancy.len() as f64;
    let mean = raster.occupancy.iter().sum::<f64>() / n;
    let grad = backprop(&capsules, &raster, |_, _| 1.0 / n, soft_sigma, positions.len());
    Ok((mean, grad))
}

/// Mean over views of the per-pixel mean squared difference.
pub fn mask_loss(rendered: &[Vec<f64>], observed: &[SilhouetteMask]) -> Result<f64> {
    if rendered.len() != observed.len() || rendered.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} rendered grids for {} masks",
            rendered.len(),
            observed.len()
        )));
    }
    let mut total = 0.0;
    for (r, m) in rendered.iter().zip(observed) {
        if r.len() != m.grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "view {}: rendered {} pixels, mask has {}",
                m.view_id,
                r.len(),
                m.grid.len()
            )));
        }
        let sq: f64 = r.iter().zip(&m.grid).map(|(a, b)| (a - b) * (a - b)).sum();
        total += sq / r.len() as f64;
    }
    Ok(total / rendered.len() as f64)
}

fn check_mask(view: &CameraView, mask: &SilhouetteMask) -> Result<()> {
    if mask.width != view.width() as usize || mask.height != view.height() as usize {
        return Err(Error::DimensionMismatch(format!(
            "mask for view {} is {}×{}, crop is {}×{}",
            view.id(),
            mask.width,
            mask.height,
            view.width(),
            view.height()
        )));
    }
    Ok(())
}

/// Pairs each mask with its rig view, in mask order.
fn views_for<'a>(rig: &'a Rig, masks: &[SilhouetteMask]) -> Result<Vec<&'a CameraView>> {
    masks
        .iter()
        .map(|m| {
            let v = rig
                .view(&m.view_id)
                .ok_or_else(|| Error::DimensionMismatch(format!("mask view {} not in rig", m.view_id)))?;
            check_mask(v, m)?;
            Ok(v)
        })
        .collect()
}

/// Mask loss of posed joints against observed masks, and its gradient with
/// respect to every joint position. Views are evaluated in parallel and
/// reduced in mask order.
pub fn mask_loss_and_gradient(
    model: &CapsuleModel,
    positions: &[Vector3<f64>],
    rig: &Rig,
    masks: &[SilhouetteMask],
    soft_sigma: f64,
) -> Result<(f64, Vec<Vector3<f64>>)> {
    if masks.is_empty() {
        return Err(Error::DimensionMismatch("no masks".into()));
    }
    let views = views_for(rig, masks)?;
    let n_views = masks.len() as f64;
    let per_view: Vec<Result<(f64, Vec<Vector3<f64>>)>> = views
        .par_iter()
        .zip(masks.par_iter())
        .map(|(view, mask)| {
            let capsules = project_capsules(model, positions, view)?;
            let raster = rasterize(&capsules, view, soft_sigma);
            let n = raster.occupancy.len() as f64;
            let sq: f64 = raster
                .occupancy
                .iter()
                .zip(&mask.grid)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let scale = 2.0 / (n * n_views);
            let grad = backprop(
                &capsules,
                &raster,
                |idx, o| scale * (o - mask.grid[idx]),
                soft_sigma,
                positions.len(),
            );
            Ok((sq / n, grad))
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![Vector3::zeros(); positions.len()];
    for r in per_view {
        let (l, g) = r?;
        loss += l;
        for (acc, gi) in grad.iter_mut().zip(g) {
            *acc += gi;
        }
    }
    Ok((loss / n_views, grad))
}

/// Mask loss only, for line searches and finite differences.
pub fn mask_loss_only(
    model: &CapsuleModel,
    positions: &[Vector3<f64>],
    rig: &Rig,
    masks: &[SilhouetteMask],
    soft_sigma: f64,
) -> Result<f64> {
    let views = views_for(rig, masks)?;
    let rendered: Vec<Result<Vec<f64>>> = views
        .par_iter()
        .map(|v| render_positions(model, positions, v, soft_sigma))
        .collect();
    let rendered = rendered.into_iter().collect::<Result<Vec<_>>>()?;
    mask_loss(&rendered, masks)
}

/// Intersection over union of two grids, each thresholded at 0.5. Two empty
/// grids score 1.
pub fn iou(a: &[f64], b: &[f64]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x >= 0.5, *y >= 0.5);
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
