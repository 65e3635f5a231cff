//! Analytic gradients of the rendering losses with respect to every
//! Gaussian parameter and the camera pose.
//!
//! Disentangled mode keeps the two modalities apart: color and depth
//! residuals drive the color-mode opacity/rotation/scale chain, feature
//! residuals drive the language-mode chain, the shared mean and the camera
//! pose follow the color mode only, and the scale-tie term stops its
//! gradient at the color scales. Joint mode runs one shared parameter set
//! whose opacity gradient sums all three residual chains; its gradients
//! land in the color-mode arrays.
//!
//! The backward sweep walks each tile's contribution log back to front,
//! reconstructing per-pixel transmittance, then chains per-splat gradients
//! through the projection. Tile partials reduce in fixed tile order so
//! gradients are bit-reproducible across thread counts.

use crate::config::{LossSection, OptimMode};
use crate::error::{Result, SplatError};
use crate::geom;
use crate::render::{
    projection_jacobian, PassKind, RenderOutput, RenderPass, ALPHA_CLAMP, TILE,
};
use crate::scene::{CameraModel, GaussianField, Mode, PoseSE3};
use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

/// Loss term weights; see [`LossSection`] for the config-file mirror.
pub type LossWeights = LossSection;

/// Ground-truth targets at render resolution. The feature map must already
/// be compressed to the field's K channels.
pub struct RenderTargets<'a> {
    pub color: &'a [f64],
    pub depth: &'a [f64],
    pub feature: &'a [f64],
}

/// Loss value split by term; `total()` applies the weights.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub photo: f64,
    pub depth: f64,
    pub feat: f64,
    pub iso_c: f64,
    pub iso_f: f64,
    pub scale_tie: f64,
    pub lambda_photo: f64,
    pub lambda_feat: f64,
    pub lambda_iso: f64,
    pub lambda_scale_tie: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.data_total() + self.reg_total()
    }

    /// Weighted photometric + depth + feature terms.
    pub fn data_total(&self) -> f64 {
        self.lambda_photo * self.photo
            + (1.0 - self.lambda_photo) * self.depth
            + self.lambda_feat * self.feat
    }

    pub fn reg_total(&self) -> f64 {
        self.lambda_iso * (self.iso_c + self.iso_f) + self.lambda_scale_tie * self.scale_tie
    }

    /// Weighted color + depth terms only (the objective tracking follows).
    pub fn photo_depth(&self) -> f64 {
        self.lambda_photo * self.photo + (1.0 - self.lambda_photo) * self.depth
    }
}

/// Gradients mirroring every field parameter, plus a 6-dim pose twist
/// (rotation xyz, then translation xyz).
#[derive(Debug, Clone)]
pub struct FieldGradients {
    pub mean: Vec<f64>,
    pub rot_c: Vec<f64>,
    pub rot_f: Vec<f64>,
    pub log_scale_c: Vec<f64>,
    pub log_scale_f: Vec<f64>,
    pub opacity_c: Vec<f64>,
    pub opacity_f: Vec<f64>,
    pub color: Vec<f64>,
    pub feature: Vec<f64>,
    pub pose: [f64; 6],
}

impl FieldGradients {
    pub fn zeros(n: usize, feat_dim: usize) -> Self {
        FieldGradients {
            mean: vec![0.0; 3 * n],
            rot_c: vec![0.0; 4 * n],
            rot_f: vec![0.0; 4 * n],
            log_scale_c: vec![0.0; 3 * n],
            log_scale_f: vec![0.0; 3 * n],
            opacity_c: vec![0.0; n],
            opacity_f: vec![0.0; n],
            color: vec![0.0; 3 * n],
            feature: vec![0.0; feat_dim * n],
            pose: [0.0; 6],
        }
    }
}

fn check_shapes(out: &RenderOutput, targets: &RenderTargets) -> Result<()> {
    let npix = out.width * out.height;
    if targets.color.len() != npix * 3
        || targets.depth.len() != npix
        || targets.feature.len() != npix * out.feat_dim
    {
        return Err(SplatError::Contract("target shape mismatch".into()));
    }
    Ok(())
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

fn masked_depth_l1(pred: &[f64], gt: &[f64]) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        if *g > 0.0 {
            sum += (p - g).abs();
            n += 1;
        }
    }
    if n == 0 {
        (0.0, 0)
    } else {
        (sum / n as f64, n)
    }
}

/// Mean over Gaussians of the mean absolute deviation of the scale vector
/// from its own mean; penalizes needle-like anisotropy.
fn iso_loss(field: &GaussianField, mode: Mode) -> f64 {
    let n = field.count();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let s = field.scale_at(i, mode);
        let m = (s.x + s.y + s.z) / 3.0;
        total += ((s.x - m).abs() + (s.y - m).abs() + (s.z - m).abs()) / 3.0;
    }
    total / n as f64
}

fn scale_tie_loss(field: &GaussianField) -> f64 {
    let n = field.count();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let sc = field.scale_at(i, Mode::Color);
        let sf = field.scale_at(i, Mode::Language);
        total += ((sf.x - sc.x).abs() + (sf.y - sc.y).abs() + (sf.z - sc.z).abs()) / 3.0;
    }
    total / n as f64
}

/// Full loss of a render against its targets.
pub fn loss_total(
    out: &RenderOutput,
    field: &GaussianField,
    targets: &RenderTargets,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    check_shapes(out, targets)?;
    let (depth, _) = masked_depth_l1(&out.depth, targets.depth);
    let joint = out.mode == OptimMode::Joint;
    Ok(LossBreakdown {
        photo: mean_abs_diff(&out.color, targets.color),
        depth,
        feat: mean_abs_diff(&out.feature, targets.feature),
        iso_c: iso_loss(field, Mode::Color),
        iso_f: if joint { 0.0 } else { iso_loss(field, Mode::Language) },
        scale_tie: if joint { 0.0 } else { scale_tie_loss(field) },
        lambda_photo: weights.lambda_photo,
        lambda_feat: weights.lambda_feat,
        lambda_iso: weights.lambda_iso,
        lambda_scale_tie: weights.lambda_scale_tie,
    })
}

/// Per-splat partial gradients accumulated by the compositing sweep.
/// Layout per splat: [d_mean2d0, d_mean2d1, d_cov00, d_cov01, d_cov11,
/// d_opacity_logit, d_payload...].
struct TilePartials {
    data: Vec<f64>,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Residual image for one pass (pd channels per pixel).
fn pass_residual(
    pass_kind: PassKind,
    out: &RenderOutput,
    targets: &RenderTargets,
    weights: &LossWeights,
) -> Vec<f64> {
    let npix = out.width * out.height;
    let k = out.feat_dim;
    let w_photo = weights.lambda_photo / (npix as f64 * 3.0);
    let n_valid = targets.depth.iter().filter(|d| **d > 0.0).count();
    let w_depth = if n_valid == 0 {
        0.0
    } else {
        (1.0 - weights.lambda_photo) / n_valid as f64
    };
    let w_feat = if k == 0 {
        0.0
    } else {
        weights.lambda_feat / (npix * k) as f64
    };
    let pd = match pass_kind {
        PassKind::ColorDepth => 4,
        PassKind::Feature => k,
        PassKind::Joint => 4 + k,
    };
    let mut res = vec![0.0; npix * pd];
    for p in 0..npix {
        let row = &mut res[p * pd..(p + 1) * pd];
        match pass_kind {
            PassKind::ColorDepth | PassKind::Joint => {
                for ch in 0..3 {
                    row[ch] = w_photo * sign(out.color[p * 3 + ch] - targets.color[p * 3 + ch]);
                }
                if targets.depth[p] > 0.0 {
                    row[3] = w_depth * sign(out.depth[p] - targets.depth[p]);
                }
                if pass_kind == PassKind::Joint {
                    for ch in 0..k {
                        row[4 + ch] =
                            w_feat * sign(out.feature[p * k + ch] - targets.feature[p * k + ch]);
                    }
                }
            }
            PassKind::Feature => {
                for ch in 0..k {
                    row[ch] = w_feat * sign(out.feature[p * k + ch] - targets.feature[p * k + ch]);
                }
            }
        }
    }
    res
}

/// Back-to-front sweep over one pass's contribution logs. Returns per-splat
/// partials in the pass's sorted-splat order.
fn sweep_pass(pass: &RenderPass, out: &RenderOutput, residual: &[f64]) -> Vec<f64> {
    let pd = pass.pd;
    let stride = 6 + pd;
    let w = out.width;
    let tiles_x = w.div_ceil(TILE);

    let partials: Vec<TilePartials> = pass
        .tiles
        .par_iter()
        .enumerate()
        .map(|(ti, tile)| {
            let x0 = (ti % tiles_x) * TILE;
            let y0 = (ti / tiles_x) * TILE;
            let tw = TILE.min(w - x0);
            let th = TILE.min(out.height - y0);
            let npix = tw * th;
            let mut data = vec![0.0f64; tile.splats.len() * stride];
            if tile.entries.is_empty() {
                return TilePartials { data };
            }
            // per-pixel transmittance walked backward from the final value
            let mut t_cur = vec![0.0f64; npix];
            let mut suffix = vec![0.0f64; npix * pd];
            for ly in 0..th {
                for lx in 0..tw {
                    t_cur[ly * tw + lx] = pass.t_final[(y0 + ly) * w + (x0 + lx)];
                }
            }
            for e in tile.entries.iter().rev() {
                let lp = e.pix as usize;
                let gx = x0 + lp % tw;
                let gy = y0 + lp / tw;
                let gi = gy * w + gx;
                let si = tile.splats[e.splat as usize] as usize;
                let sp = &pass.splats[si];
                let op = pass.opacity[si];
                let alpha_raw = op * e.g;
                let clamped = alpha_raw > ALPHA_CLAMP;
                let alpha = alpha_raw.min(ALPHA_CLAMP);
                let one_m = 1.0 - alpha;
                let t_i = t_cur[lp] / one_m;
                let r = &residual[gi * pd..(gi + 1) * pd];
                let pl = &pass.payload[si * pd..(si + 1) * pd];
                let srow = &mut suffix[lp * pd..(lp + 1) * pd];

                let mut d_alpha = 0.0;
                let prow = &mut data[e.splat as usize * stride..(e.splat as usize + 1) * stride];
                let wgt = alpha * t_i;
                for d in 0..pd {
                    d_alpha += r[d] * (pl[d] * t_i - srow[d] / one_m);
                    prow[6 + d] += r[d] * wgt;
                    srow[d] += pl[d] * wgt;
                }
                t_cur[lp] = t_i;
                if clamped || d_alpha == 0.0 {
                    continue;
                }
                // α = σ(logit) · g
                prow[5] += d_alpha * e.g * op * (1.0 - op);
                let d_g = d_alpha * op;
                // g = exp(-½ dᵀ Σ⁻¹ d): ∂g/∂μ2D = g·A·d, ∂g/∂Σ = ½ g (Ad)(Ad)ᵀ
                let dx = gx as f64 - sp.mean2d[0];
                let dy = gy as f64 - sp.mean2d[1];
                let [ia, ib, ic] = sp.inv_cov2d;
                let adx = ia * dx + ib * dy;
                let ady = ib * dx + ic * dy;
                let gg = d_g * e.g;
                prow[0] += gg * adx;
                prow[1] += gg * ady;
                prow[2] += 0.5 * gg * adx * adx;
                prow[3] += 0.5 * gg * adx * ady;
                prow[4] += 0.5 * gg * ady * ady;
            }
            TilePartials { data }
        })
        .collect();

    // reduce tile partials in tile order
    let mut acc = vec![0.0f64; pass.splats.len() * stride];
    for (ti, tp) in partials.iter().enumerate() {
        let tile = &pass.tiles[ti];
        for (local, &si) in tile.splats.iter().enumerate() {
            let src = &tp.data[local * stride..(local + 1) * stride];
            let dst = &mut acc[si as usize * stride..(si as usize + 1) * stride];
            for d in 0..stride {
                dst[d] += src[d];
            }
        }
    }
    acc
}

/// Chain each splat's screen-space partials through the projection into
/// field parameter and pose gradients.
#[allow(clippy::too_many_arguments)]
fn finish_pass(
    pass: &RenderPass,
    partials: &[f64],
    field: &GaussianField,
    camera: &CameraModel,
    pose: &PoseSE3,
    grads: &mut FieldGradients,
    with_mean_and_pose: bool,
) {
    let pd = pass.pd;
    let stride = 6 + pd;
    let geo = pass.kind.geometry_mode();
    let k = field.feat_dim();
    let rot_w = pose.rotation;

    struct SplatOut {
        i: usize,
        d_q: [f64; 4],
        d_ls: [f64; 3],
        d_op: f64,
        d_color: [f64; 3],
        d_feat: Vec<f64>,
        d_mean: [f64; 3],
        pose: [f64; 6],
    }

    let outs: Vec<SplatOut> = pass
        .splats
        .par_iter()
        .enumerate()
        .map(|(si, sp)| {
            let p = &partials[si * stride..(si + 1) * stride];
            let i = sp.source_index as usize;
            let g2 = Matrix2::new(p[2], p[3], p[3], p[4]);
            let j = projection_jacobian(camera, &sp.mean_cam);
            let g_cam = j.transpose() * g2 * j;
            let g_world = rot_w.transpose() * g_cam * rot_w;

            // rotation chain: Σ = R D Rᵀ  →  ∂L/∂R = 2 G R D
            let q_raw = field.rot_at(i, geo);
            let q = geom::quat_normalize(&q_raw);
            let r = geom::quat_to_rot(&q);
            let s = field.scale_at(i, geo);
            let d_mat = Matrix3::from_diagonal(&Vector3::new(s.x * s.x, s.y * s.y, s.z * s.z));
            let dr = 2.0 * g_world * r * d_mat;
            let jq = geom::quat_rot_jacobian(&q);
            let mut d_unit = [0.0f64; 4];
            for kq in 0..4 {
                d_unit[kq] = dr.component_mul(&jq[kq]).sum();
            }
            let d_q = geom::quat_grad_raw(&q_raw, &d_unit);

            // scale chain: diag of Rᵀ G R times ds²/d(log s) = 2 s²
            let m = r.transpose() * g_world * r;
            let d_ls = [
                m[(0, 0)] * 2.0 * s.x * s.x,
                m[(1, 1)] * 2.0 * s.y * s.y,
                m[(2, 2)] * 2.0 * s.z * s.z,
            ];

            // camera-frame mean gradient: projection + depth payload + the
            // Jacobian's own dependence on the mean
            let d_uv = Vector2::new(p[0], p[1]);
            let mut d_mean_cam = j.transpose() * d_uv;
            if pass.kind != PassKind::Feature {
                d_mean_cam.z += p[6 + 3]; // payload channel 3 carries z
            }
            let b = g2 * j * sp.cov_cam;
            let (x, y, z) = (sp.mean_cam.x, sp.mean_cam.y, sp.mean_cam.z);
            let zi2 = 1.0 / (z * z);
            let zi3 = zi2 / z;
            d_mean_cam.x += 2.0 * b[(0, 2)] * (-camera.fx * zi2);
            d_mean_cam.y += 2.0 * b[(1, 2)] * (-camera.fy * zi2);
            d_mean_cam.z += 2.0
                * (b[(0, 0)] * (-camera.fx * zi2)
                    + b[(1, 1)] * (-camera.fy * zi2)
                    + b[(0, 2)] * (2.0 * camera.fx * x * zi3)
                    + b[(1, 2)] * (2.0 * camera.fy * y * zi3));

            let mut d_mean = [0.0; 3];
            let mut d_pose = [0.0; 6];
            if with_mean_and_pose {
                let dm = rot_w.transpose() * d_mean_cam;
                d_mean = [dm.x, dm.y, dm.z];
                let theta = sp.mean_cam.cross(&d_mean_cam);
                for kk in 0..3 {
                    let mut e = Vector3::zeros();
                    e[kk] = 1.0;
                    let sk = geom::skew(&e);
                    let dc = sk * sp.cov_cam - sp.cov_cam * sk;
                    d_pose[kk] = theta[kk] + g_cam.component_mul(&dc).sum();
                }
                d_pose[3] = d_mean_cam.x;
                d_pose[4] = d_mean_cam.y;
                d_pose[5] = d_mean_cam.z;
            }

            let mut d_color = [0.0; 3];
            let mut d_feat = Vec::new();
            match pass.kind {
                PassKind::ColorDepth => {
                    d_color = [p[6], p[7], p[8]];
                }
                PassKind::Feature => {
                    d_feat = p[6..6 + k].to_vec();
                }
                PassKind::Joint => {
                    d_color = [p[6], p[7], p[8]];
                    d_feat = p[6 + 4..6 + 4 + k].to_vec();
                }
            }

            SplatOut {
                i,
                d_q,
                d_ls,
                d_op: p[5],
                d_color,
                d_feat,
                d_mean,
                pose: d_pose,
            }
        })
        .collect();

    let (rot_g, ls_g, op_g) = match geo {
        Mode::Color => (&mut grads.rot_c, &mut grads.log_scale_c, &mut grads.opacity_c),
        Mode::Language => (&mut grads.rot_f, &mut grads.log_scale_f, &mut grads.opacity_f),
    };
    for o in &outs {
        for kq in 0..4 {
            rot_g[o.i * 4 + kq] += o.d_q[kq];
        }
        for kk in 0..3 {
            ls_g[o.i * 3 + kk] += o.d_ls[kk];
            grads.mean[o.i * 3 + kk] += o.d_mean[kk];
        }
        op_g[o.i] += o.d_op;
        match pass.kind {
            PassKind::Feature => {
                for (kk, v) in o.d_feat.iter().enumerate() {
                    grads.feature[o.i * k + kk] += v;
                }
            }
            PassKind::ColorDepth => {
                for kk in 0..3 {
                    grads.color[o.i * 3 + kk] += o.d_color[kk];
                }
            }
            PassKind::Joint => {
                for kk in 0..3 {
                    grads.color[o.i * 3 + kk] += o.d_color[kk];
                }
                for (kk, v) in o.d_feat.iter().enumerate() {
                    grads.feature[o.i * k + kk] += v;
                }
            }
        }
        for kk in 0..6 {
            grads.pose[kk] += o.pose[kk];
        }
    }
}

fn add_regularizer_grads(
    field: &GaussianField,
    weights: &LossWeights,
    joint: bool,
    grads: &mut FieldGradients,
) {
    let n = field.count();
    if n == 0 {
        return;
    }
    let norm = 1.0 / (3.0 * n as f64);
    if weights.lambda_iso > 0.0 {
        let modes: &[Mode] = if joint {
            &[Mode::Color]
        } else {
            &[Mode::Color, Mode::Language]
        };
        for &mode in modes {
            for i in 0..n {
                let s = field.scale_at(i, mode);
                let m = (s.x + s.y + s.z) / 3.0;
                let signs = [sign(s.x - m), sign(s.y - m), sign(s.z - m)];
                let sum_signs: f64 = signs.iter().sum();
                let g = match mode {
                    Mode::Color => &mut grads.log_scale_c,
                    Mode::Language => &mut grads.log_scale_f,
                };
                for kk in 0..3 {
                    let ds = weights.lambda_iso * norm * (signs[kk] - sum_signs / 3.0);
                    g[i * 3 + kk] += ds * s[kk];
                }
            }
        }
    }
    if weights.lambda_scale_tie > 0.0 && !joint {
        for i in 0..n {
            let sc = field.scale_at(i, Mode::Color);
            let sf = field.scale_at(i, Mode::Language);
            for kk in 0..3 {
                // stop-gradient on the color-mode scale
                grads.log_scale_f[i * 3 + kk] +=
                    weights.lambda_scale_tie * norm * sign(sf[kk] - sc[kk]) * sf[kk];
            }
        }
    }
}

fn backward_impl(
    out: &RenderOutput,
    field: &GaussianField,
    camera: &CameraModel,
    pose: &PoseSE3,
    targets: &RenderTargets,
    weights: &LossWeights,
) -> Result<FieldGradients> {
    check_shapes(out, targets)?;
    if out.passes.is_empty() && !field.is_empty() {
        return Err(SplatError::Contract(
            "render output is missing its contributor lists".into(),
        ));
    }
    let mut grads = FieldGradients::zeros(field.count(), field.feat_dim());
    for pass in &out.passes {
        let residual = pass_residual(pass.kind, out, targets, weights);
        let partials = sweep_pass(pass, out, &residual);
        let with_mean_and_pose = pass.kind != PassKind::Feature;
        finish_pass(pass, &partials, field, camera, pose, &mut grads, with_mean_and_pose);
    }
    add_regularizer_grads(field, weights, out.mode == OptimMode::Joint, &mut grads);
    Ok(grads)
}

/// Gradients under the disentangled scheme (separate per-mode chains).
pub fn backward_disentangled(
    out: &RenderOutput,
    field: &GaussianField,
    camera: &CameraModel,
    pose: &PoseSE3,
    targets: &RenderTargets,
    weights: &LossWeights,
) -> Result<FieldGradients> {
    if out.mode != OptimMode::Disentangled {
        return Err(SplatError::Contract(
            "render output was not produced in disentangled mode".into(),
        ));
    }
    backward_impl(out, field, camera, pose, targets, weights)
}

/// Gradients under the joint scheme (one shared parameter set; gradients
/// land in the color-mode arrays).
pub fn backward_joint(
    out: &RenderOutput,
    field: &GaussianField,
    camera: &CameraModel,
    pose: &PoseSE3,
    targets: &RenderTargets,
    weights: &LossWeights,
) -> Result<FieldGradients> {
    if out.mode != OptimMode::Joint {
        return Err(SplatError::Contract(
            "render output was not produced in joint mode".into(),
        ));
    }
    backward_impl(out, field, camera, pose, targets, weights)
}

// --- Adam ------------------------------------------------------------------

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-parameter-group learning rates for the field optimizer.
#[derive(Debug, Clone, Copy)]
pub struct FieldLearningRates {
    pub mean: f64,
    pub rot: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
    pub feature: f64,
}

/// Adam moments for every field parameter group.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub skipped_non_finite: u64,
}

const GROUP_WIDTHS: [usize; 9] = [3, 4, 4, 3, 3, 1, 1, 3, 0]; // 0 = feat_dim

impl AdamState {
    pub fn new(field: &GaussianField) -> Self {
        let n = field.count();
        let k = field.feat_dim();
        let mut m = Vec::new();
        for w in GROUP_WIDTHS {
            let w = if w == 0 { k } else { w };
            m.push(vec![0.0; n * w]);
        }
        AdamState {
            v: m.clone(),
            m,
            t: 0,
            skipped_non_finite: 0,
        }
    }

    /// Extend moments with zeros for newly inserted Gaussians.
    pub fn grow_to(&mut self, field: &GaussianField) {
        let n = field.count();
        let k = field.feat_dim();
        for (gi, w) in GROUP_WIDTHS.iter().enumerate() {
            let w = if *w == 0 { k } else { *w };
            self.m[gi].resize(n * w, 0.0);
            self.v[gi].resize(n * w, 0.0);
        }
    }

    /// Drop moments for pruned Gaussians (same mask as the field).
    pub fn retain_by_mask(&mut self, keep: &[bool], feat_dim: usize) {
        for (gi, w) in GROUP_WIDTHS.iter().enumerate() {
            let w = if *w == 0 { feat_dim } else { *w };
            for arr in [&mut self.m[gi], &mut self.v[gi]] {
                let mut wr = 0usize;
                for (r, kp) in keep.iter().enumerate() {
                    if *kp {
                        for kk in 0..w {
                            arr[wr * w + kk] = arr[r * w + kk];
                        }
                        wr += 1;
                    }
                }
                arr.truncate(wr * w);
            }
        }
    }
}

/// One Adam step over every field parameter group. Non-finite gradient
/// entries skip their parameter and bump the skip counter. Quaternions are
/// renormalized and colors clamped afterwards.
pub fn adam_step(
    field: &mut GaussianField,
    grads: &FieldGradients,
    state: &mut AdamState,
    lr: &FieldLearningRates,
) {
    state.t += 1;
    let t = state.t;
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    let grad_arrays: [&[f64]; 9] = [
        &grads.mean,
        &grads.rot_c,
        &grads.rot_f,
        &grads.log_scale_c,
        &grads.log_scale_f,
        &grads.opacity_c,
        &grads.opacity_f,
        &grads.color,
        &grads.feature,
    ];
    let lrs = [
        lr.mean, lr.rot, lr.rot, lr.scale, lr.scale, lr.opacity, lr.opacity, lr.color, lr.feature,
    ];
    let params = field.params_mut();
    let mut skipped = 0u64;
    for (gi, param) in params.into_iter().enumerate() {
        let g = grad_arrays[gi];
        debug_assert_eq!(g.len(), param.len());
        let m = &mut state.m[gi];
        let v = &mut state.v[gi];
        let rate = lrs[gi];
        for idx in 0..param.len() {
            let gv = g[idx];
            if !gv.is_finite() {
                skipped += 1;
                continue;
            }
            m[idx] = ADAM_BETA1 * m[idx] + (1.0 - ADAM_BETA1) * gv;
            v[idx] = ADAM_BETA2 * v[idx] + (1.0 - ADAM_BETA2) * gv * gv;
            let mh = m[idx] / bc1;
            let vh = v[idx] / bc2;
            param[idx] -= rate * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    state.skipped_non_finite += skipped;
    field.renormalize_rotations();
    field.clamp_colors();
}

/// Adam state for the 6-dim pose twist used by tracking.
#[derive(Debug, Clone, Default)]
pub struct PoseAdam {
    m: [f64; 6],
    v: [f64; 6],
    t: u64,
}

impl PoseAdam {
    /// Returns the twist to apply (already scaled and negated for descent).
    pub fn step(&mut self, grad: &[f64; 6], lr_rot: f64, lr_trans: f64) -> [f64; 6] {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let mut twist = [0.0; 6];
        for k in 0..6 {
            if !grad[k].is_finite() {
                continue;
            }
            self.m[k] = ADAM_BETA1 * self.m[k] + (1.0 - ADAM_BETA1) * grad[k];
            self.v[k] = ADAM_BETA2 * self.v[k] + (1.0 - ADAM_BETA2) * grad[k] * grad[k];
            let mh = self.m[k] / bc1;
            let vh = self.v[k] / bc2;
            let rate = if k < 3 { lr_rot } else { lr_trans };
            twist[k] = -rate * mh / (vh.sqrt() + ADAM_EPS);
        }
        twist
    }
}

// --- gradient dump ----------------------------------------------------------

/// Write gradients as little-endian f32 with a shape header, for
/// cross-implementation diffing. Layout: magic "GRAD", version, count,
/// feat_dim, then each array (mean, rot_c, rot_f, log_scale_c, log_scale_f,
/// opacity_c, opacity_f, color, feature, pose).
pub fn dump_gradients(grads: &FieldGradients, count: usize, feat_dim: usize, path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| SplatError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let err = |e| SplatError::io(path, e);
    w.write_all(b"GRAD").map_err(err)?;
    w.write_all(&1u32.to_le_bytes()).map_err(err)?;
    w.write_all(&(count as u32).to_le_bytes()).map_err(err)?;
    w.write_all(&(feat_dim as u32).to_le_bytes()).map_err(err)?;
    for arr in [
        &grads.mean,
        &grads.rot_c,
        &grads.rot_f,
        &grads.log_scale_c,
        &grads.log_scale_f,
        &grads.opacity_c,
        &grads.opacity_f,
        &grads.color,
        &grads.feature,
        &grads.pose.to_vec(),
    ] {
        for v in arr.iter() {
            w.write_all(&(*v as f32).to_le_bytes()).map_err(err)?;
        }
    }
    Ok(())
}
