//! Shared fixtures and independent oracles for the integration tests.
//!
//! The reference renderer here evaluates the compositing sums literally,
//! per pixel over every splat, with no tiling, bounding rectangles or any
//! other shortcut the production rasterizer uses. It must stay independent
//! of that implementation.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use semsplat::config::OptimMode;
use semsplat::geom;
use semsplat::render::{project_gaussian, Splat2D, ALPHA_CLAMP, ALPHA_SKIP};
use semsplat::scene::{CameraModel, GaussianField, GaussianInit, Mode, PoseSE3};

pub fn camera(width: usize, height: usize, focal: f64) -> CameraModel {
    CameraModel {
        fx: focal,
        fy: focal,
        cx: (width as f64 - 1.0) / 2.0,
        cy: (height as f64 - 1.0) / 2.0,
        width,
        height,
        depth_scale: 5000.0,
    }
}

/// Random field of ordinary (few-pixel) splats in front of the camera.
pub fn random_field(n: usize, k: usize, rng: &mut ChaCha8Rng) -> GaussianField {
    let mut f = GaussianField::new(k, n);
    for _ in 0..n {
        f.push(&GaussianInit {
            mean: Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(2.0..4.5),
            ),
            rotation: geom::quat_normalize(&[
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]),
            log_scale: Vector3::new(
                rng.gen_range(-3.0..-1.6),
                rng.gen_range(-3.0..-1.6),
                rng.gen_range(-3.0..-1.6),
            ),
            opacity_logit: rng.gen_range(-1.5..2.5),
            color: [rng.gen(), rng.gen(), rng.gen()],
            feature: (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        });
    }
    // decouple the language mode
    for i in 0..n {
        f.rot_f[4 * i + 1] += rng.gen_range(-0.3..0.3);
        for kk in 0..3 {
            let s: f64 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            f.log_scale_f[3 * i + kk] += s * rng.gen_range(0.05..0.3);
        }
        f.opacity_f[i] += rng.gen_range(-0.5..0.5);
    }
    f.renormalize_rotations();
    f
}

/// Field whose every Gaussian covers the whole image: the rasterizer's
/// 1/255 skip boundary lies outside the frame, so the loss is smooth
/// within any finite-difference stencil.
pub fn image_covering_field(n: usize, k: usize, rng: &mut ChaCha8Rng) -> GaussianField {
    let mut f = GaussianField::new(k, n);
    for _ in 0..n {
        f.push(&GaussianInit {
            mean: Vector3::new(
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(1.5..3.0),
            ),
            rotation: geom::quat_normalize(&[
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]),
            log_scale: Vector3::new(
                rng.gen_range(0.1..0.8),
                rng.gen_range(0.1..0.8),
                rng.gen_range(0.1..0.8),
            ),
            opacity_logit: rng.gen_range(-1.0..1.5),
            color: [rng.gen(), rng.gen(), rng.gen()],
            feature: (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        });
    }
    for i in 0..n {
        f.rot_f[4 * i + 1] += rng.gen_range(-0.2..0.2);
        for kk in 0..3 {
            let s: f64 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            f.log_scale_f[3 * i + kk] += s * rng.gen_range(0.05..0.25);
        }
        f.opacity_f[i] += rng.gen_range(-0.3..0.3);
    }
    f.renormalize_rotations();
    f
}

/// Rendered images from a literal evaluation of the blending sums.
pub struct ReferenceRender {
    pub color: Vec<f64>,
    pub depth: Vec<f64>,
    pub feature: Vec<f64>,
    pub alpha_c: Vec<f64>,
    pub alpha_f: Vec<f64>,
}

fn sorted_splats(
    field: &GaussianField,
    camera: &CameraModel,
    pose: &PoseSE3,
    mode: Mode,
) -> Vec<Splat2D> {
    let mut splats: Vec<Splat2D> = (0..field.count())
        .filter_map(|i| {
            let q = geom::quat_normalize(&field.rot_at(i, mode));
            let cov = geom::covariance_from_unit(&q, &field.scale_at(i, mode));
            project_gaussian(&field.mean_at(i), &cov, camera, pose, mode, i as u32)
        })
        .collect();
    splats.sort_by(|a, b| {
        a.depth_z
            .total_cmp(&b.depth_z)
            .then(a.source_index.cmp(&b.source_index))
    });
    splats
}

/// Per-pixel, all-splat front-to-back evaluation of the color, depth and
/// feature sums under the disentangled scheme (color-mode geometry carries
/// rgb and camera-z, language-mode geometry carries the feature code).
pub fn reference_render(
    field: &GaussianField,
    camera: &CameraModel,
    pose: &PoseSE3,
) -> ReferenceRender {
    let (w, h) = (camera.width, camera.height);
    let k = field.feat_dim();
    let mut out = ReferenceRender {
        color: vec![0.0; w * h * 3],
        depth: vec![0.0; w * h],
        feature: vec![0.0; w * h * k],
        alpha_c: vec![0.0; w * h],
        alpha_f: vec![0.0; w * h],
    };
    let color_splats = sorted_splats(field, camera, pose, Mode::Color);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut t = 1.0f64;
            for sp in &color_splats {
                let alpha = decayed_alpha(field, sp, Mode::Color, x as f64, y as f64);
                if alpha < ALPHA_SKIP {
                    continue;
                }
                let i = sp.source_index as usize;
                let c = field.color_at(i);
                let wgt = alpha * t;
                for ch in 0..3 {
                    out.color[p * 3 + ch] += c[ch] * wgt;
                }
                out.depth[p] += sp.depth_z * wgt;
                t *= 1.0 - alpha;
            }
            out.alpha_c[p] = 1.0 - t;
        }
    }
    let lang_splats = sorted_splats(field, camera, pose, Mode::Language);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut t = 1.0f64;
            for sp in &lang_splats {
                let alpha = decayed_alpha(field, sp, Mode::Language, x as f64, y as f64);
                if alpha < ALPHA_SKIP {
                    continue;
                }
                let i = sp.source_index as usize;
                let fv = field.feature_at(i);
                let wgt = alpha * t;
                for ch in 0..k {
                    out.feature[p * k + ch] += fv[ch] * wgt;
                }
                t *= 1.0 - alpha;
            }
            out.alpha_f[p] = 1.0 - t;
        }
    }
    out
}

fn decayed_alpha(field: &GaussianField, sp: &Splat2D, mode: Mode, px: f64, py: f64) -> f64 {
    let dx = px - sp.mean2d[0];
    let dy = py - sp.mean2d[1];
    let [ia, ib, ic] = sp.inv_cov2d;
    let maha = ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy;
    let g = (-0.5 * maha).exp();
    (field.opacity_at(sp.source_index as usize, mode) * g).min(ALPHA_CLAMP)
}

/// Offset targets bounded away from the render so no L1 kink lies inside
/// an FD stencil.
pub fn offset_targets(
    field: &GaussianField,
    cam: &CameraModel,
    pose: &PoseSE3,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let out = semsplat::render::render_frame(field, cam, pose, OptimMode::Disentangled);
    let mut offs = |v: &f64| -> f64 {
        let s: f64 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        v + s * rng.gen_range(0.1..0.3)
    };
    let color: Vec<f64> = out.color.iter().map(&mut offs).collect();
    let feature: Vec<f64> = out.feature.iter().map(&mut offs).collect();
    let depth: Vec<f64> = out
        .depth
        .iter()
        .map(|v| {
            if rng.gen_bool(0.92) {
                (v + rng.gen_range(0.1..0.3)).max(0.05)
            } else {
                0.0
            }
        })
        .collect();
    (color, depth, feature)
}
