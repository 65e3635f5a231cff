//! Core data model: the Gaussian map, cameras, poses and input frames.
//!
//! Each Gaussian carries one shared 3D mean plus two parameter sets — a
//! color mode (rotation, scale, opacity, rgb) and a language mode (rotation,
//! scale, opacity, K-dim feature code). Opacities are stored as logits and
//! scales as logs so optimizer steps stay unconstrained; accessors expose
//! the activated values.

use crate::error::{Result, SplatError};
use crate::geom::{self, Quat};
use nalgebra::{Matrix3, Vector3};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Pinhole camera intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Stored depth units per meter (TUM convention: 5000).
    pub depth_scale: f64,
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(SplatError::InvalidParameter("focal length must be > 0".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(SplatError::InvalidParameter("image size must be > 0".into()));
        }
        Ok(())
    }

    /// Camera-frame ray direction through pixel (u, v), z = 1.
    pub fn ray_dir(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Scale intrinsics to a different resolution.
    pub fn resized(&self, width: usize, height: usize) -> CameraModel {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        CameraModel {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            depth_scale: self.depth_scale,
        }
    }
}

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl PoseSE3 {
    pub fn identity() -> Self {
        PoseSE3 {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let p = PoseSE3 {
            rotation,
            translation,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let rtr = self.rotation.transpose() * self.rotation;
        if (rtr - Matrix3::identity()).abs().max() > 1e-6 {
            return Err(SplatError::InvalidParameter("rotation is not orthonormal".into()));
        }
        if (self.rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(SplatError::InvalidParameter("rotation determinant is not 1".into()));
        }
        Ok(())
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// self ∘ other (apply `other` first).
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Left-multiplicative manifold update: Exp(twist) ∘ self.
    pub fn retract(&self, twist: &[f64; 6]) -> PoseSE3 {
        let (dr, dt) = geom::se3_exp(twist);
        PoseSE3 {
            rotation: dr * self.rotation,
            translation: dr * self.translation + dt,
        }
    }

    /// Rotation angle (radians) and translation distance to another pose.
    pub fn error_to(&self, other: &PoseSE3) -> (f64, f64) {
        let dr = self.rotation.transpose() * other.rotation;
        let c = ((dr.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let dt = (self.translation - other.translation).norm();
        (c.acos(), dt)
    }
}

/// One input frame: color, depth, a high-dimensional feature map and an
/// optional ground-truth pose used only for evaluation.
#[derive(Debug, Clone)]
pub struct FrameBundle {
    pub index: usize,
    pub width: usize,
    pub height: usize,
    /// H×W×3 row-major, values in [0, 1].
    pub color_gt: Vec<f64>,
    /// H×W meters, 0 = invalid.
    pub depth_gt: Vec<f64>,
    pub feat_width: usize,
    pub feat_height: usize,
    pub feat_dim: usize,
    /// Hf×Wf×D row-major.
    pub feature_gt_hi: Vec<f32>,
    pub pose_gt: Option<PoseSE3>,
}

impl FrameBundle {
    pub fn validate(&self) -> Result<()> {
        if self.color_gt.len() != self.width * self.height * 3 {
            return Err(SplatError::Contract("color buffer size mismatch".into()));
        }
        if self.depth_gt.len() != self.width * self.height {
            return Err(SplatError::Contract("depth buffer size mismatch".into()));
        }
        if self.feature_gt_hi.len() != self.feat_width * self.feat_height * self.feat_dim {
            return Err(SplatError::Contract("feature buffer size mismatch".into()));
        }
        if self.depth_gt.iter().any(|d| *d < 0.0 || !d.is_finite()) {
            return Err(SplatError::InvalidParameter("negative or non-finite depth".into()));
        }
        if self.feature_gt_hi.iter().any(|f| !f.is_finite()) {
            return Err(SplatError::InvalidParameter("non-finite feature value".into()));
        }
        Ok(())
    }
}

/// Which parameter set drives geometry during rendering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Color,
    Language,
}

/// The map: N Gaussians with a shared mean and per-mode parameter sets.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianField {
    count: usize,
    feat_dim: usize,
    pub mean: Vec<f64>,
    pub rot_c: Vec<f64>,
    pub rot_f: Vec<f64>,
    pub log_scale_c: Vec<f64>,
    pub log_scale_f: Vec<f64>,
    pub opacity_c: Vec<f64>,
    pub opacity_f: Vec<f64>,
    pub color: Vec<f64>,
    pub feature: Vec<f64>,
}

/// Parameters for one new Gaussian; both modes start identical.
#[derive(Debug, Clone)]
pub struct GaussianInit {
    pub mean: Vector3<f64>,
    pub rotation: Quat,
    /// Log-scales (both modes).
    pub log_scale: Vector3<f64>,
    /// Opacity logit (both modes).
    pub opacity_logit: f64,
    pub color: [f64; 3],
    pub feature: Vec<f64>,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl GaussianField {
    pub fn new(feat_dim: usize, capacity: usize) -> Self {
        GaussianField {
            count: 0,
            feat_dim,
            mean: Vec::with_capacity(capacity * 3),
            rot_c: Vec::with_capacity(capacity * 4),
            rot_f: Vec::with_capacity(capacity * 4),
            log_scale_c: Vec::with_capacity(capacity * 3),
            log_scale_f: Vec::with_capacity(capacity * 3),
            opacity_c: Vec::with_capacity(capacity),
            opacity_f: Vec::with_capacity(capacity),
            color: Vec::with_capacity(capacity * 3),
            feature: Vec::with_capacity(capacity * feat_dim),
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn push(&mut self, g: &GaussianInit) {
        assert_eq!(g.feature.len(), self.feat_dim, "feature dim mismatch");
        self.mean.extend_from_slice(g.mean.as_slice());
        self.rot_c.extend_from_slice(&g.rotation);
        self.rot_f.extend_from_slice(&g.rotation);
        self.log_scale_c.extend_from_slice(g.log_scale.as_slice());
        self.log_scale_f.extend_from_slice(g.log_scale.as_slice());
        self.opacity_c.push(g.opacity_logit);
        self.opacity_f.push(g.opacity_logit);
        self.color.extend_from_slice(&g.color);
        self.feature.extend_from_slice(&g.feature);
        self.count += 1;
    }

    pub fn mean_at(&self, i: usize) -> Vector3<f64> {
        Vector3::new(self.mean[3 * i], self.mean[3 * i + 1], self.mean[3 * i + 2])
    }

    pub fn rot_at(&self, i: usize, mode: Mode) -> Quat {
        let r = match mode {
            Mode::Color => &self.rot_c,
            Mode::Language => &self.rot_f,
        };
        [r[4 * i], r[4 * i + 1], r[4 * i + 2], r[4 * i + 3]]
    }

    pub fn log_scale_at(&self, i: usize, mode: Mode) -> Vector3<f64> {
        let s = match mode {
            Mode::Color => &self.log_scale_c,
            Mode::Language => &self.log_scale_f,
        };
        Vector3::new(s[3 * i], s[3 * i + 1], s[3 * i + 2])
    }

    /// Activated scale in meters.
    pub fn scale_at(&self, i: usize, mode: Mode) -> Vector3<f64> {
        self.log_scale_at(i, mode).map(f64::exp)
    }

    pub fn opacity_logit_at(&self, i: usize, mode: Mode) -> f64 {
        match mode {
            Mode::Color => self.opacity_c[i],
            Mode::Language => self.opacity_f[i],
        }
    }

    /// Activated opacity in (0, 1).
    pub fn opacity_at(&self, i: usize, mode: Mode) -> f64 {
        sigmoid(self.opacity_logit_at(i, mode))
    }

    pub fn color_at(&self, i: usize) -> [f64; 3] {
        [self.color[3 * i], self.color[3 * i + 1], self.color[3 * i + 2]]
    }

    pub fn feature_at(&self, i: usize) -> &[f64] {
        &self.feature[i * self.feat_dim..(i + 1) * self.feat_dim]
    }

    /// Remove Gaussians for which `keep` is false, preserving order.
    pub fn retain_by_mask(&mut self, keep: &[bool]) -> usize {
        assert_eq!(keep.len(), self.count);
        let mut w = 0usize;
        for r in 0..self.count {
            if keep[r] {
                if w != r {
                    for k in 0..3 {
                        self.mean[3 * w + k] = self.mean[3 * r + k];
                        self.log_scale_c[3 * w + k] = self.log_scale_c[3 * r + k];
                        self.log_scale_f[3 * w + k] = self.log_scale_f[3 * r + k];
                        self.color[3 * w + k] = self.color[3 * r + k];
                    }
                    for k in 0..4 {
                        self.rot_c[4 * w + k] = self.rot_c[4 * r + k];
                        self.rot_f[4 * w + k] = self.rot_f[4 * r + k];
                    }
                    self.opacity_c[w] = self.opacity_c[r];
                    self.opacity_f[w] = self.opacity_f[r];
                    for k in 0..self.feat_dim {
                        self.feature[self.feat_dim * w + k] = self.feature[self.feat_dim * r + k];
                    }
                }
                w += 1;
            }
        }
        let removed = self.count - w;
        self.count = w;
        self.mean.truncate(3 * w);
        self.rot_c.truncate(4 * w);
        self.rot_f.truncate(4 * w);
        self.log_scale_c.truncate(3 * w);
        self.log_scale_f.truncate(3 * w);
        self.opacity_c.truncate(w);
        self.opacity_f.truncate(w);
        self.color.truncate(3 * w);
        self.feature.truncate(self.feat_dim * w);
        removed
    }

    /// Renormalize both quaternion sets in place.
    pub fn renormalize_rotations(&mut self) {
        for i in 0..self.count {
            for rots in [&mut self.rot_c, &mut self.rot_f] {
                let q = geom::quat_normalize(&[
                    rots[4 * i],
                    rots[4 * i + 1],
                    rots[4 * i + 2],
                    rots[4 * i + 3],
                ]);
                rots[4 * i..4 * i + 4].copy_from_slice(&q);
            }
        }
    }

    /// Clamp colors into [0, 1] (projection step after optimization).
    pub fn clamp_colors(&mut self) {
        for c in &mut self.color {
            *c = c.clamp(0.0, 1.0);
        }
    }

    /// Raw parameter arrays, exposed for the optimizer.
    pub(crate) fn params_mut(&mut self) -> [&mut Vec<f64>; 9] {
        [
            &mut self.mean,
            &mut self.rot_c,
            &mut self.rot_f,
            &mut self.log_scale_c,
            &mut self.log_scale_f,
            &mut self.opacity_c,
            &mut self.opacity_f,
            &mut self.color,
            &mut self.feature,
        ]
    }
}

/// World covariance R diag(s²) Rᵀ from a unit quaternion and positive
/// scales. Errors on non-finite input.
pub fn covariance_world(rot: &Quat, scale: &Vector3<f64>) -> Result<Matrix3<f64>> {
    if rot.iter().any(|v| !v.is_finite()) || !scale.iter().all(|v| v.is_finite()) {
        return Err(SplatError::InvalidParameter("non-finite rotation or scale".into()));
    }
    Ok(geom::covariance_from_unit(&geom::quat_normalize(rot), scale))
}

/// Check every type invariant, returning one message per violation.
pub fn validate_field(field: &GaussianField) -> Vec<String> {
    let mut out = Vec::new();
    for i in 0..field.count() {
        for (mode, name) in [(Mode::Color, "color"), (Mode::Language, "language")] {
            let q = field.rot_at(i, mode);
            let n = geom::quat_norm(&q);
            if (n - 1.0).abs() > 1e-6 {
                out.push(format!("gaussian {i}: {name} quaternion norm {n} not unit"));
            }
            let s = field.scale_at(i, mode);
            if !(s.x > 0.0 && s.y > 0.0 && s.z > 0.0) || !s.iter().all(|v| v.is_finite()) {
                out.push(format!("gaussian {i}: {name} scale not strictly positive"));
            }
            let a = field.opacity_at(i, mode);
            if !(a > 0.0 && a < 1.0) {
                out.push(format!("gaussian {i}: {name} opacity {a} outside (0,1)"));
            }
        }
        let c = field.color_at(i);
        if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
            out.push(format!("gaussian {i}: color outside [0,1]"));
        }
        if field.feature_at(i).iter().any(|v| !v.is_finite()) {
            out.push(format!("gaussian {i}: non-finite feature"));
        }
        if field.mean_at(i).iter().any(|v| !v.is_finite()) {
            out.push(format!("gaussian {i}: non-finite mean"));
        }
    }
    out
}

// --- PLY persistence -------------------------------------------------------
//
// Binary little-endian PLY, one vertex per Gaussian. Scales and opacities
// are stored raw (log / logit) so a load reproduces the optimizer state up
// to f32 rounding.

fn ply_header(count: usize, feat_dim: usize) -> String {
    let mut h = String::new();
    h.push_str("ply\nformat binary_little_endian 1.0\n");
    h.push_str(&format!("comment feat_dim {feat_dim}\n"));
    h.push_str(&format!("element vertex {count}\n"));
    for p in ["x", "y", "z"] {
        h.push_str(&format!("property float {p}\n"));
    }
    for p in ["rot_c_w", "rot_c_x", "rot_c_y", "rot_c_z"] {
        h.push_str(&format!("property float {p}\n"));
    }
    for p in ["rot_f_w", "rot_f_x", "rot_f_y", "rot_f_z"] {
        h.push_str(&format!("property float {p}\n"));
    }
    for k in 0..3 {
        h.push_str(&format!("property float log_scale_c_{k}\n"));
    }
    for k in 0..3 {
        h.push_str(&format!("property float log_scale_f_{k}\n"));
    }
    h.push_str("property float opacity_logit_c\n");
    h.push_str("property float opacity_logit_f\n");
    for p in ["red_f", "green_f", "blue_f"] {
        h.push_str(&format!("property float {p}\n"));
    }
    for k in 0..feat_dim {
        h.push_str(&format!("property float feature_{k}\n"));
    }
    h.push_str("end_header\n");
    h
}

pub fn save_field_ply(field: &GaussianField, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| SplatError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| SplatError::io(path, e);
    w.write_all(ply_header(field.count(), field.feat_dim()).as_bytes())
        .map_err(io_err)?;
    let put = |v: f64, w: &mut BufWriter<std::fs::File>| -> Result<()> {
        w.write_all(&(v as f32).to_le_bytes())
            .map_err(|e| SplatError::io(path, e))
    };
    for i in 0..field.count() {
        for v in field.mean_at(i).iter() {
            put(*v, &mut w)?;
        }
        for mode in [Mode::Color, Mode::Language] {
            for v in field.rot_at(i, mode) {
                put(v, &mut w)?;
            }
        }
        for mode in [Mode::Color, Mode::Language] {
            for v in field.log_scale_at(i, mode).iter() {
                put(*v, &mut w)?;
            }
        }
        put(field.opacity_logit_at(i, Mode::Color), &mut w)?;
        put(field.opacity_logit_at(i, Mode::Language), &mut w)?;
        for v in field.color_at(i) {
            put(v, &mut w)?;
        }
        for v in field.feature_at(i) {
            put(*v, &mut w)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn load_field_ply(path: &Path) -> Result<GaussianField> {
    let file = std::fs::File::open(path).map_err(|e| SplatError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut count = None;
    let mut feat_dim = None;
    let mut props = 0usize;
    loop {
        let mut line = String::new();
        let n = r
            .read_line(&mut line)
            .map_err(|e| SplatError::io(path, e))?;
        if n == 0 {
            return Err(SplatError::format(path, "unexpected EOF in header"));
        }
        let line = line.trim_end();
        if line == "end_header" {
            break;
        }
        if let Some(rest) = line.strip_prefix("element vertex ") {
            count = rest.parse::<usize>().ok();
        } else if let Some(rest) = line.strip_prefix("comment feat_dim ") {
            feat_dim = rest.parse::<usize>().ok();
        } else if line.starts_with("property float ") {
            props += 1;
        }
    }
    let count = count.ok_or_else(|| SplatError::format(path, "missing element vertex"))?;
    let feat_dim = feat_dim.ok_or_else(|| SplatError::format(path, "missing feat_dim comment"))?;
    let expect_props = 3 + 8 + 6 + 2 + 3 + feat_dim;
    if props != expect_props {
        return Err(SplatError::format(
            path,
            format!("expected {expect_props} float properties, found {props}"),
        ));
    }
    let mut buf = vec![0u8; expect_props * 4];
    let mut field = GaussianField::new(feat_dim, count);
    for _ in 0..count {
        r.read_exact(&mut buf).map_err(|e| SplatError::io(path, e))?;
        let f = |k: usize| f32::from_le_bytes(buf[4 * k..4 * k + 4].try_into().unwrap()) as f64;
        let g = GaussianInit {
            mean: Vector3::new(f(0), f(1), f(2)),
            rotation: [f(3), f(4), f(5), f(6)],
            log_scale: Vector3::new(f(11), f(12), f(13)),
            opacity_logit: f(17),
            color: [f(19), f(20), f(21)],
            feature: (0..feat_dim).map(|k| f(22 + k)).collect(),
        };
        field.push(&g);
        // push mirrored color-mode values into both sets; overwrite language
        let i = field.count - 1;
        for k in 0..4 {
            field.rot_f[4 * i + k] = f(7 + k);
        }
        for k in 0..3 {
            field.log_scale_f[3 * i + k] = f(14 + k);
        }
        field.opacity_f[i] = f(18);
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn sample_init(feat_dim: usize) -> GaussianInit {
        GaussianInit {
            mean: Vector3::new(0.1, -0.2, 1.5),
            rotation: geom::QUAT_IDENTITY,
            log_scale: Vector3::new(-2.0, -2.0, -2.0),
            opacity_logit: 0.0,
            color: [0.2, 0.4, 0.8],
            feature: (0..feat_dim).map(|k| k as f64 * 0.1).collect(),
        }
    }

    #[test]
    fn new_field_is_empty() {
        let f = GaussianField::new(8, 0);
        assert_eq!(f.count(), 0);
        let f = GaussianField::new(8, 100);
        assert_eq!(f.count(), 0);
        assert!(f.mean.capacity() >= 300);
    }

    #[test]
    fn push_counts() {
        let mut f = GaussianField::new(4, 0);
        for _ in 0..3 {
            f.push(&sample_init(4));
        }
        assert_eq!(f.count(), 3);
        assert!(validate_field(&f).is_empty());
    }

    #[test]
    fn covariance_identity_cases() {
        let c = covariance_world(&geom::QUAT_IDENTITY, &Vector3::new(1.0, 1.0, 1.0)).unwrap();
        assert_relative_eq!(c, Matrix3::identity(), epsilon = 1e-15);

        let c = covariance_world(&geom::QUAT_IDENTITY, &Vector3::new(2.0, 1.0, 1.0)).unwrap();
        assert_relative_eq!(
            c,
            Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)),
            epsilon = 1e-15
        );
    }

    #[test]
    fn covariance_rotated_90deg_about_z() {
        // 90° about z maps the long x-axis onto y.
        let q = [FRAC_1_SQRT_2, 0.0, 0.0, FRAC_1_SQRT_2];
        let c = covariance_world(&q, &Vector3::new(2.0, 1.0, 1.0)).unwrap();
        let r = geom::quat_to_rot(&geom::quat_normalize(&q));
        let expect = r * Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)) * r.transpose();
        assert_relative_eq!(c, expect, epsilon = 1e-12);
        assert_relative_eq!(
            c,
            Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn covariance_rejects_nan() {
        assert!(covariance_world(&[f64::NAN, 0.0, 0.0, 0.0], &Vector3::new(1.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn covariance_spd_and_equivariant_under_random_rotations() {
        use rand::Rng;
        let mut rng = crate::rng::stream(11, "scene-spd");
        for _ in 0..200 {
            let q = geom::quat_normalize(&[
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]);
            let s = Vector3::new(
                rng.gen_range(0.05..3.0),
                rng.gen_range(0.05..3.0),
                rng.gen_range(0.05..3.0),
            );
            let c = covariance_world(&q, &s).unwrap();
            let eig = c.symmetric_eigenvalues();
            assert!(eig.iter().all(|e| *e > 0.0), "not SPD: {eig:?}");

            // rotation equivariance: Σ(R·q, s) = M(R) Σ(q, s) M(R)ᵀ
            let extra = geom::quat_normalize(&[
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]);
            let composed = quat_mul(&extra, &q);
            let lhs = covariance_world(&composed, &s).unwrap();
            let m = geom::quat_to_rot(&extra);
            let rhs = m * c * m.transpose();
            assert_relative_eq!(lhs, rhs, epsilon = 1e-9);
        }
    }

    fn quat_mul(a: &Quat, b: &Quat) -> Quat {
        [
            a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
            a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
            a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
            a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
        ]
    }

    #[test]
    fn validate_reports_bad_quaternion_and_opacity() {
        let mut f = GaussianField::new(2, 0);
        f.push(&sample_init(2));
        f.rot_c[0] = 0.9; // norm 0.9
        let v = validate_field(&f);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("gaussian 0"), "{v:?}");

        // a NaN logit activates outside (0,1)
        let mut f2 = GaussianField::new(2, 0);
        f2.push(&sample_init(2));
        f2.opacity_f[0] = f64::NAN;
        let v2 = validate_field(&f2);
        assert_eq!(v2.len(), 1);
        assert!(v2[0].contains("opacity"));

        let mut f3 = GaussianField::new(2, 0);
        f3.push(&sample_init(2));
        f3.color[0] = 1.5;
        assert_eq!(validate_field(&f3).len(), 1);
    }

    #[test]
    fn retain_by_mask_compacts_in_order() {
        let mut f = GaussianField::new(1, 0);
        for k in 0..5 {
            let mut g = sample_init(1);
            g.feature[0] = k as f64;
            f.push(&g);
        }
        let removed = f.retain_by_mask(&[true, false, true, false, true]);
        assert_eq!(removed, 2);
        assert_eq!(f.count(), 3);
        assert_eq!(f.feature, vec![0.0, 2.0, 4.0]);
    }

    #[test]
    fn ply_roundtrip_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.ply");
        let mut f = GaussianField::new(3, 0);
        for k in 0..4 {
            let mut g = sample_init(3);
            g.mean.x += k as f64 * 0.25;
            g.opacity_logit = -0.3 + k as f64 * 0.2;
            f.push(&g);
        }
        f.rot_f[5] = 0.1; // make modes differ
        f.renormalize_rotations();
        save_field_ply(&f, &path).unwrap();
        let f2 = load_field_ply(&path).unwrap();
        assert_eq!(f2.count(), 4);
        assert_eq!(f2.feat_dim(), 3);
        // write → read → write is byte-identical
        let path2 = dir.path().join("field2.ply");
        save_field_ply(&f2, &path2).unwrap();
        let b1 = std::fs::read(&path).unwrap();
        let b2 = std::fs::read(&path2).unwrap();
        assert_eq!(b1, b2);
        // and values match to f32 precision
        assert_relative_eq!(f2.rot_at(1, Mode::Language)[1], f.rot_at(1, Mode::Language)[1], epsilon = 1e-6);
    }
}
