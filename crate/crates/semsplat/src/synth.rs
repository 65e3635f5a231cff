//! Frame sources: synthetic RGB-D + feature sequences rendered from
//! class-labeled primitives, and on-disk frame dumps.
//!
//! The codebook stands in for text/image embeddings: one seeded random
//! unit vector per class, pairwise decorrelated. Synthetic frames carry
//! exact depth, textured colors, per-pixel class features (optionally
//! noised), and a ground-truth class mask.

use crate::error::{Result, SplatError};
use crate::geom;
use crate::scene::{CameraModel, FrameBundle, PoseSE3};
use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

pub const MASK_BACKGROUND: u16 = u16::MAX;

// --- codebook -----------------------------------------------------------------

/// Class-name → unit-vector table.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    names: Vec<String>,
    vectors: Vec<f64>,
    dim: usize,
}

impl Codebook {
    /// Seeded random unit vectors with pairwise |cos| < 0.3
    /// (rejection-sampled).
    pub fn generate(names: &[String], dim: usize, seed: u64) -> Codebook {
        let mut rng = crate::rng::stream(seed, "codebook");
        let mut vectors: Vec<f64> = Vec::with_capacity(names.len() * dim);
        for ci in 0..names.len() {
            loop {
                let v = random_unit(dim, &mut rng);
                let ok = (0..ci).all(|pj| {
                    let prev = &vectors[pj * dim..(pj + 1) * dim];
                    let dot: f64 = prev.iter().zip(&v).map(|(a, b)| a * b).sum();
                    dot.abs() < 0.3
                });
                if ok {
                    vectors.extend_from_slice(&v);
                    break;
                }
            }
        }
        Codebook {
            names: names.to_vec(),
            vectors,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn vector(&self, index: usize) -> &[f64] {
        &self.vectors[index * self.dim..(index + 1) * self.dim]
    }

    /// Unit-norm query vector for a class name.
    pub fn query_embedding(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self
            .index_of(name)
            .ok_or_else(|| SplatError::UnknownName(name.to_string()))?;
        Ok(self.vector(idx).to_vec())
    }

    /// Normalize a free query vector of the right width.
    pub fn embed_raw(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim {
            return Err(SplatError::Contract(format!(
                "query vector has {} dims, codebook has {}",
                v.len(),
                self.dim
            )));
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(SplatError::InvalidParameter("zero query vector".into()));
        }
        Ok(v.iter().map(|x| x / n).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (i, name) in self.names.iter().enumerate() {
            out.push_str(name);
            for v in self.vector(i) {
                out.push(' ');
                out.push_str(&format!("{v:?}"));
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| SplatError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Codebook> {
        let text = std::fs::read_to_string(path).map_err(|e| SplatError::io(path, e))?;
        let mut names = Vec::new();
        let mut vectors = Vec::new();
        let mut dim = None;
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let name = parts
                .next()
                .ok_or_else(|| SplatError::format(path, format!("line {}", ln + 1)))?;
            let vals: Vec<f64> = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| SplatError::format(path, format!("line {}: {e}", ln + 1)))?;
            match dim {
                None => dim = Some(vals.len()),
                Some(d) if d != vals.len() => {
                    return Err(SplatError::format(path, format!("line {}: ragged row", ln + 1)))
                }
                _ => {}
            }
            names.push(name.to_string());
            vectors.extend(vals);
        }
        Ok(Codebook {
            names,
            vectors,
            dim: dim.unwrap_or(0),
        })
    }
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= n;
    }
    v
}

/// Box-Muller standard normal.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

// --- synthetic scenes -----------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    /// Axis-aligned box; thin boxes double as walls and floors.
    Box { min: [f64; 3], max: [f64; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Flat,
    /// World-space checkerboard between the two colors.
    Checker,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenePrim {
    pub class: String,
    #[serde(flatten)]
    pub shape: Shape,
    pub color: [f64; 3],
    #[serde(default = "default_color2")]
    pub color2: [f64; 3],
    #[serde(default = "default_texture")]
    pub texture: Texture,
    /// Checker cell edge in meters.
    #[serde(default = "default_checker")]
    pub checker_size: f64,
}

fn default_texture() -> Texture {
    Texture::Checker
}

fn default_color2() -> [f64; 3] {
    [0.1, 0.1, 0.1]
}

fn default_checker() -> f64 {
    0.25
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub prims: Vec<ScenePrim>,
}

impl SyntheticScene {
    pub fn class_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for p in &self.prims {
            if !names.contains(&p.class) {
                names.push(p.class.clone());
            }
        }
        names
    }

    /// Nearest hit along `origin + s·dir` with s > 0; returns (s, prim index).
    fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (pi, prim) in self.prims.iter().enumerate() {
            let s = match &prim.shape {
                Shape::Sphere { center, radius } => {
                    let c = Vector3::new(center[0], center[1], center[2]);
                    let oc = origin - c;
                    let a = dir.dot(dir);
                    let b = 2.0 * oc.dot(dir);
                    let cc = oc.dot(&oc) - radius * radius;
                    let disc = b * b - 4.0 * a * cc;
                    if disc < 0.0 {
                        continue;
                    }
                    let sq = disc.sqrt();
                    let s0 = (-b - sq) / (2.0 * a);
                    let s1 = (-b + sq) / (2.0 * a);
                    if s0 > 1e-6 {
                        s0
                    } else if s1 > 1e-6 {
                        s1
                    } else {
                        continue;
                    }
                }
                Shape::Box { min, max } => {
                    let mut t0 = 1e-6f64;
                    let mut t1 = f64::INFINITY;
                    let mut ok = true;
                    for k in 0..3 {
                        let d = dir[k];
                        if d.abs() < 1e-12 {
                            if origin[k] < min[k] || origin[k] > max[k] {
                                ok = false;
                                break;
                            }
                            continue;
                        }
                        let (mut a, mut b) = ((min[k] - origin[k]) / d, (max[k] - origin[k]) / d);
                        if a > b {
                            std::mem::swap(&mut a, &mut b);
                        }
                        t0 = t0.max(a);
                        t1 = t1.min(b);
                        if t0 > t1 {
                            ok = false;
                            break;
                        }
                    }
                    if !ok {
                        continue;
                    }
                    t0
                }
            };
            if best.map_or(true, |(bs, _)| s < bs) {
                best = Some((s, pi));
            }
        }
        best
    }

    fn shade(&self, pi: usize, p: &Vector3<f64>) -> [f64; 3] {
        let prim = &self.prims[pi];
        match prim.texture {
            Texture::Flat => prim.color,
            Texture::Checker => {
                let s = prim.checker_size;
                let parity = ((p.x / s).floor() + (p.y / s).floor() + (p.z / s).floor()) as i64;
                if parity.rem_euclid(2) == 0 {
                    prim.color
                } else {
                    prim.color2
                }
            }
        }
    }
}

/// Feature-map perturbation for robustness studies. `sigma` scales the
/// norm of the Gaussian perturbation relative to the unit class vectors
/// (each element draws σ/√D), so its meaning does not depend on D.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { sigma: 0.0, seed: 0 }
    }
}

/// Rasterize one synthetic frame: textured color, exact depth, per-pixel
/// class features at their own resolution, and a class mask at image
/// resolution.
pub fn render_synthetic_frame(
    scene: &SyntheticScene,
    pose: &PoseSE3,
    camera: &CameraModel,
    feat_size: (usize, usize),
    codebook: &Codebook,
    noise: &NoiseConfig,
    frame_index: usize,
) -> (FrameBundle, Vec<u16>) {
    let (w, h) = (camera.width, camera.height);
    let inv = pose.inverse();
    let origin = inv.translation;
    let class_of: Vec<Option<usize>> = scene
        .prims
        .iter()
        .map(|p| codebook.index_of(&p.class))
        .collect();

    let mut color = vec![0.0f64; w * h * 3];
    let mut depth = vec![0.0f64; w * h];
    let mut mask = vec![MASK_BACKGROUND; w * h];
    color
        .par_chunks_mut(w * 3)
        .zip(depth.par_chunks_mut(w))
        .zip(mask.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, ((crow, drow), mrow))| {
            for x in 0..w {
                let dir_cam = camera.ray_dir(x as f64, y as f64);
                let dir = inv.rotation * dir_cam;
                if let Some((s, pi)) = scene.cast(&origin, &dir) {
                    let p = origin + dir * s;
                    let c = scene.shade(pi, &p);
                    crow[x * 3..x * 3 + 3].copy_from_slice(&c);
                    drow[x] = s; // dir_cam.z == 1, so s is camera-z
                    if let Some(ci) = class_of[pi] {
                        mrow[x] = ci as u16;
                    }
                }
            }
        });

    let (fw, fh) = feat_size;
    let fcam = camera.resized(fw, fh);
    let dim = codebook.dim();
    let mut feature = vec![0.0f32; fw * fh * dim];
    feature
        .par_chunks_mut(fw * dim)
        .enumerate()
        .for_each(|(y, frow)| {
            for x in 0..fw {
                let dir = inv.rotation * fcam.ray_dir(x as f64, y as f64);
                if let Some((_, pi)) = scene.cast(&origin, &dir) {
                    if let Some(ci) = class_of[pi] {
                        let v = codebook.vector(ci);
                        for k in 0..dim {
                            frow[x * dim + k] = v[k] as f32;
                        }
                    }
                }
            }
        });
    if noise.sigma > 0.0 {
        let mut rng = crate::rng::stream(noise.seed, &format!("feat-noise-{frame_index}"));
        let per_elem = noise.sigma / (dim as f64).sqrt();
        for v in &mut feature {
            *v += (per_elem * gaussian(&mut rng)) as f32;
        }
    }

    let bundle = FrameBundle {
        index: frame_index,
        width: w,
        height: h,
        color_gt: color,
        depth_gt: depth,
        feat_width: fw,
        feat_height: fh,
        feat_dim: dim,
        feature_gt_hi: feature,
        pose_gt: Some(*pose),
    };
    (bundle, mask)
}

// --- trajectories ----------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Trajectory {
    /// Circle around `center` at `radius` and `height`, always looking at
    /// the center.
    Orbit {
        center: [f64; 3],
        radius: f64,
        height: f64,
        /// Swept arc in degrees (360 = full circle).
        #[serde(default = "default_arc")]
        arc_deg: f64,
    },
    /// Serpentine sweep over a rectangle at fixed height, looking at the
    /// center.
    Lawnmower {
        center: [f64; 3],
        extent: [f64; 2],
        height: f64,
        rows: usize,
    },
}

fn default_arc() -> f64 {
    360.0
}

/// World-to-camera pose looking from `eye` toward `target` (z-up world,
/// y-down camera).
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> PoseSE3 {
    let forward = (target - eye).normalize();
    let up = if forward.z.abs() > 0.999 {
        Vector3::new(0.0, 1.0, 0.0)
    } else {
        Vector3::new(0.0, 0.0, 1.0)
    };
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right).normalize();
    let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    PoseSE3 {
        rotation,
        translation: -(rotation * eye),
    }
}

impl Trajectory {
    pub fn pose(&self, frame: usize, total: usize) -> PoseSE3 {
        match self {
            Trajectory::Orbit {
                center,
                radius,
                height,
                arc_deg,
            } => {
                let c = Vector3::new(center[0], center[1], center[2]);
                let t = frame as f64 / total.max(1) as f64;
                let ang = arc_deg.to_radians() * t;
                let eye = c + Vector3::new(radius * ang.cos(), radius * ang.sin(), *height);
                look_at(&eye, &c)
            }
            Trajectory::Lawnmower {
                center,
                extent,
                height,
                rows,
            } => {
                let c = Vector3::new(center[0], center[1], center[2]);
                let rows = (*rows).max(1);
                let per_row = total.div_ceil(rows).max(1);
                let row = (frame / per_row).min(rows - 1);
                let col = frame % per_row;
                let ty = row as f64 / rows.max(2).saturating_sub(1).max(1) as f64;
                let tx = col as f64 / per_row.saturating_sub(1).max(1) as f64;
                let tx = if row % 2 == 0 { tx } else { 1.0 - tx };
                let eye = c
                    + Vector3::new(
                        (tx - 0.5) * extent[0],
                        (ty - 0.5) * extent[1],
                        *height,
                    );
                look_at(&eye, &c)
            }
        }
    }
}

// --- FTEN tensor files -------------------------------------------------------------

const FTEN_MAGIC: &[u8; 4] = b"FTEN";
const FTEN_VERSION: u32 = 1;

/// Write H×W×C little-endian f32, row-major.
pub fn save_ften(path: &Path, h: usize, w: usize, c: usize, data: &[f32]) -> Result<()> {
    if data.len() != h * w * c {
        return Err(SplatError::Contract("ften shape mismatch".into()));
    }
    let file = std::fs::File::create(path).map_err(|e| SplatError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let err = |e| SplatError::io(path, e);
    out.write_all(FTEN_MAGIC).map_err(err)?;
    out.write_all(&FTEN_VERSION.to_le_bytes()).map_err(err)?;
    for v in [h as u32, w as u32, c as u32] {
        out.write_all(&v.to_le_bytes()).map_err(err)?;
    }
    for v in data {
        out.write_all(&v.to_le_bytes()).map_err(err)?;
    }
    out.flush().map_err(err)
}

pub fn load_ften(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| SplatError::io(path, e))?;
    if bytes.len() < 20 {
        return Err(SplatError::format(path, format!("truncated header at byte {}", bytes.len())));
    }
    if &bytes[0..4] != FTEN_MAGIC {
        return Err(SplatError::format(path, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FTEN_VERSION {
        return Err(SplatError::format(path, format!("unsupported version {version}")));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let need = 20 + h * w * c * 4;
    if bytes.len() != need {
        return Err(SplatError::format(
            path,
            format!("expected {need} bytes, found {} (truncated at byte {})", bytes.len(), bytes.len()),
        ));
    }
    let mut data = Vec::with_capacity(h * w * c);
    for i in 0..h * w * c {
        let off = 20 + i * 4;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
    }
    Ok((h, w, c, data))
}

// --- frame dumps ----------------------------------------------------------------

/// Save an H×W×3 image in [0, 1] as an 8-bit PNG.
pub fn color_to_png(path: &Path, w: usize, h: usize, data: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| SplatError::Contract("color buffer shape mismatch".into()))?;
    img.save(path)
        .map_err(|e| SplatError::format(path, e.to_string()))
}

fn png_to_color(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path)
        .map_err(|e| SplatError::format(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().iter().map(|b| *b as f64 / 255.0).collect();
    Ok((w, h, data))
}

/// Save a depth image as 16-bit PNG (stored units = meters × depth_scale).
pub fn depth_to_png(path: &Path, w: usize, h: usize, data: &[f64], depth_scale: f64) -> Result<()> {
    let vals: Vec<u16> = data
        .iter()
        .map(|v| (v * depth_scale).round().clamp(0.0, 65535.0) as u16)
        .collect();
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, vals)
        .ok_or_else(|| SplatError::Contract("depth buffer shape mismatch".into()))?;
    img.save(path)
        .map_err(|e| SplatError::format(path, e.to_string()))
}

/// Save depth as a colorized PNG (near = red, far = blue; 0 = black).
pub fn depth_to_png_colorized(path: &Path, w: usize, h: usize, data: &[f64]) -> Result<()> {
    let max_d = data.iter().cloned().fold(0.0, f64::max).max(1e-9);
    let mut bytes = Vec::with_capacity(w * h * 3);
    for d in data {
        if *d <= 0.0 {
            bytes.extend_from_slice(&[0, 0, 0]);
            continue;
        }
        let t = (d / max_d).clamp(0.0, 1.0);
        let (r, g, b) = if t < 0.5 {
            let s = t * 2.0;
            (1.0 - s, s, 0.0)
        } else {
            let s = (t - 0.5) * 2.0;
            (0.0, 1.0 - s, s)
        };
        bytes.push((r * 255.0) as u8);
        bytes.push((g * 255.0) as u8);
        bytes.push((b * 255.0) as u8);
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| SplatError::Contract("depth buffer shape mismatch".into()))?;
    img.save(path)
        .map_err(|e| SplatError::format(path, e.to_string()))
}

fn png_to_depth(path: &Path, depth_scale: f64) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path)
        .map_err(|e| SplatError::format(path, e.to_string()))?
        .to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().iter().map(|v| *v as f64 / depth_scale).collect();
    Ok((w, h, data))
}

pub fn mask_to_png(path: &Path, w: usize, h: usize, mask: &[u16]) -> Result<()> {
    let img =
        image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, mask.to_vec())
            .ok_or_else(|| SplatError::Contract("mask buffer shape mismatch".into()))?;
    img.save(path)
        .map_err(|e| SplatError::format(path, e.to_string()))
}

pub fn png_to_mask(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let img = image::open(path)
        .map_err(|e| SplatError::format(path, e.to_string()))?
        .to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((w, h, img.into_raw()))
}

/// One manifest line per frame:
/// `index color_path depth_path feature_path [tx ty tz qx qy qz qw]`
/// (pose is camera-to-world, TUM order).
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub index: usize,
    pub color: PathBuf,
    pub depth: PathBuf,
    pub feature: PathBuf,
    pub pose: Option<PoseSE3>,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!(
            "{} {} {} {}",
            e.index,
            e.color.display(),
            e.depth.display(),
            e.feature.display()
        ));
        if let Some(p) = &e.pose {
            let c2w = p.inverse();
            let q = geom::rot_to_quat(&c2w.rotation);
            let t = c2w.translation;
            out.push_str(&format!(
                " {:?} {:?} {:?} {:?} {:?} {:?} {:?}",
                t.x, t.y, t.z, q[1], q[2], q[3], q[0]
            ));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| SplatError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = std::fs::File::open(path).map_err(|e| SplatError::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (ln, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| SplatError::io(path, e))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 && parts.len() != 11 {
            return Err(SplatError::format(
                path,
                format!("line {}: expected 4 or 11 fields, found {}", ln + 1, parts.len()),
            ));
        }
        let index: usize = parts[0]
            .parse()
            .map_err(|e| SplatError::format(path, format!("line {}: {e}", ln + 1)))?;
        let pose = if parts.len() == 11 {
            let vals: Vec<f64> = parts[4..]
                .iter()
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| SplatError::format(path, format!("line {}: {e}", ln + 1)))?;
            let q = geom::quat_normalize(&[vals[6], vals[3], vals[4], vals[5]]);
            let c2w = PoseSE3 {
                rotation: geom::quat_to_rot(&q),
                translation: Vector3::new(vals[0], vals[1], vals[2]),
            };
            Some(c2w.inverse())
        } else {
            None
        };
        entries.push(ManifestEntry {
            index,
            color: base.join(parts[1]),
            depth: base.join(parts[2]),
            feature: base.join(parts[3]),
            pose,
        });
    }
    Ok(entries)
}

// --- frame sources -----------------------------------------------------------------

/// Anything the mapping pipeline can pull frames from.
pub trait FrameSource: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn camera(&self) -> CameraModel;
    fn frame(&self, index: usize) -> Result<FrameBundle>;
    /// Ground-truth class mask at image resolution, when available.
    fn mask(&self, _index: usize) -> Result<Option<Vec<u16>>> {
        Ok(None)
    }
}

/// Renders frames on demand from a synthetic scene.
pub struct SyntheticSource {
    pub scene: SyntheticScene,
    pub trajectory: Trajectory,
    pub camera: CameraModel,
    pub codebook: Codebook,
    pub frames: usize,
    pub feat_size: (usize, usize),
    pub noise: NoiseConfig,
}

impl FrameSource for SyntheticSource {
    fn len(&self) -> usize {
        self.frames
    }

    fn camera(&self) -> CameraModel {
        self.camera
    }

    fn frame(&self, index: usize) -> Result<FrameBundle> {
        let pose = self.trajectory.pose(index, self.frames);
        let (bundle, _) = render_synthetic_frame(
            &self.scene,
            &pose,
            &self.camera,
            self.feat_size,
            &self.codebook,
            &self.noise,
            index,
        );
        Ok(bundle)
    }

    fn mask(&self, index: usize) -> Result<Option<Vec<u16>>> {
        let pose = self.trajectory.pose(index, self.frames);
        let (_, mask) = render_synthetic_frame(
            &self.scene,
            &pose,
            &self.camera,
            self.feat_size,
            &self.codebook,
            &self.noise,
            index,
        );
        Ok(Some(mask))
    }
}

/// Reads frames dumped by `write_sequence` (or any manifest-described
/// directory).
pub struct DumpSource {
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub camera: CameraModel,
}

impl DumpSource {
    pub fn open(dir: &Path) -> Result<DumpSource> {
        let entries = read_manifest(&dir.join("manifest.txt"))?;
        let cam_text = std::fs::read_to_string(dir.join("camera.json"))
            .map_err(|e| SplatError::io(dir.join("camera.json"), e))?;
        let camera: CameraModel = serde_json::from_str(&cam_text)
            .map_err(|e| SplatError::format(dir.join("camera.json"), e.to_string()))?;
        Ok(DumpSource {
            dir: dir.to_path_buf(),
            entries,
            camera,
        })
    }

    pub fn codebook(&self) -> Result<Codebook> {
        Codebook::load(&self.dir.join("codebook.txt"))
    }
}

impl FrameSource for DumpSource {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn camera(&self) -> CameraModel {
        self.camera
    }

    fn frame(&self, index: usize) -> Result<FrameBundle> {
        let e = self
            .entries
            .get(index)
            .ok_or_else(|| SplatError::Contract(format!("frame {index} out of range")))?;
        let (w, h, color) = png_to_color(&e.color)?;
        let (dw, dh, depth) = png_to_depth(&e.depth, self.camera.depth_scale)?;
        if (dw, dh) != (w, h) {
            return Err(SplatError::format(&e.depth, "depth size differs from color"));
        }
        let (fh, fw, c, feat) = load_ften(&e.feature)?;
        let bundle = FrameBundle {
            index: e.index,
            width: w,
            height: h,
            color_gt: color,
            depth_gt: depth,
            feat_width: fw,
            feat_height: fh,
            feat_dim: c,
            feature_gt_hi: feat,
            pose_gt: e.pose,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    fn mask(&self, index: usize) -> Result<Option<Vec<u16>>> {
        let path = self.dir.join(format!("frames/mask_{index:06}.png"));
        if !path.exists() {
            return Ok(None);
        }
        let (_, _, mask) = png_to_mask(&path)?;
        Ok(Some(mask))
    }
}

/// Dump every frame of a source (plus masks, poses, camera, codebook) into
/// `dir` in the manifest layout.
pub fn write_sequence(dir: &Path, source: &dyn FrameSource, codebook: &Codebook) -> Result<()> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| SplatError::io(&frames_dir, e))?;
    let camera = source.camera();
    let cam_json = serde_json::to_string_pretty(&camera).expect("camera serializes");
    std::fs::write(dir.join("camera.json"), cam_json)
        .map_err(|e| SplatError::io(dir.join("camera.json"), e))?;
    codebook.save(&dir.join("codebook.txt"))?;

    let mut entries = Vec::new();
    let mut traj_lines = String::new();
    for i in 0..source.len() {
        let bundle = source.frame(i)?;
        let color_rel = format!("frames/color_{i:06}.png");
        let depth_rel = format!("frames/depth_{i:06}.png");
        let feat_rel = format!("frames/feat_{i:06}.ften");
        color_to_png(&dir.join(&color_rel), bundle.width, bundle.height, &bundle.color_gt)?;
        depth_to_png(
            &dir.join(&depth_rel),
            bundle.width,
            bundle.height,
            &bundle.depth_gt,
            camera.depth_scale,
        )?;
        save_ften(
            &dir.join(&feat_rel),
            bundle.feat_height,
            bundle.feat_width,
            bundle.feat_dim,
            &bundle.feature_gt_hi,
        )?;
        if let Some(mask) = source.mask(i)? {
            mask_to_png(&frames_dir.join(format!("mask_{i:06}.png")), bundle.width, bundle.height, &mask)?;
        }
        if let Some(pose) = bundle.pose_gt {
            let c2w = pose.inverse();
            let q = geom::rot_to_quat(&c2w.rotation);
            let t = c2w.translation;
            traj_lines.push_str(&format!(
                "{i} {:?} {:?} {:?} {:?} {:?} {:?} {:?}\n",
                t.x, t.y, t.z, q[1], q[2], q[3], q[0]
            ));
        }
        entries.push(ManifestEntry {
            index: i,
            color: PathBuf::from(color_rel),
            depth: PathBuf::from(depth_rel),
            feature: PathBuf::from(feat_rel),
            pose: bundle.pose_gt,
        });
    }
    write_manifest(&dir.join("manifest.txt"), &entries)?;
    std::fs::write(dir.join("gt_traj.txt"), traj_lines)
        .map_err(|e| SplatError::io(dir.join("gt_traj.txt"), e))?;
    Ok(())
}

// --- canned content ------------------------------------------------------------------

/// A small walled room with three labeled objects. The staple test scene.
pub fn demo_room() -> SyntheticScene {
    let wall = |min: [f64; 3], max: [f64; 3]| ScenePrim {
        class: "wall".into(),
        shape: Shape::Box { min, max },
        color: [0.75, 0.72, 0.65],
        color2: [0.6, 0.57, 0.52],
        texture: Texture::Checker,
        checker_size: 0.4,
    };
    SyntheticScene {
        prims: vec![
            wall([-3.2, -3.2, -0.1], [3.2, -3.0, 2.6]),
            wall([-3.2, 3.0, -0.1], [3.2, 3.2, 2.6]),
            wall([-3.2, -3.2, -0.1], [-3.0, 3.2, 2.6]),
            wall([3.0, -3.2, -0.1], [3.2, 3.2, 2.6]),
            ScenePrim {
                class: "floor".into(),
                shape: Shape::Box {
                    min: [-3.2, -3.2, -0.1],
                    max: [3.2, 3.2, 0.0],
                },
                color: [0.55, 0.5, 0.45],
                color2: [0.35, 0.32, 0.3],
                texture: Texture::Checker,
                checker_size: 0.5,
            },
            ScenePrim {
                class: "ball".into(),
                shape: Shape::Sphere {
                    center: [0.0, 0.0, 0.45],
                    radius: 0.45,
                },
                color: [0.85, 0.25, 0.2],
                color2: [0.55, 0.1, 0.1],
                texture: Texture::Checker,
                checker_size: 0.2,
            },
            ScenePrim {
                class: "crate".into(),
                shape: Shape::Box {
                    min: [-1.3, 0.5, 0.0],
                    max: [-0.5, 1.3, 0.7],
                },
                color: [0.2, 0.45, 0.8],
                color2: [0.1, 0.25, 0.5],
                texture: Texture::Checker,
                checker_size: 0.25,
            },
            ScenePrim {
                class: "pillar".into(),
                shape: Shape::Box {
                    min: [0.7, -1.2, 0.0],
                    max: [1.1, -0.8, 1.2],
                },
                color: [0.3, 0.75, 0.35],
                color2: [0.15, 0.45, 0.2],
                texture: Texture::Checker,
                checker_size: 0.3,
            },
        ],
    }
}

/// Feature-vector corpus with a controlled variance spectrum: samples are
/// random mixtures over a large codebook whose per-direction variances
/// step down in plateaus, so wider codes measurably reconstruct better.
pub fn spectrum_corpus(dim: usize, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = crate::rng::stream(seed, "spectrum-corpus");
    let directions = 160.min(dim);
    let basis: Vec<Vec<f64>> = (0..directions).map(|_| random_unit(dim, &mut rng)).collect();
    let sigma = |k: usize| -> f64 {
        if k < 24 {
            1.0
        } else if k < 44 {
            0.055f64.sqrt()
        } else if k < 84 {
            0.018f64.sqrt()
        } else {
            0.006f64.sqrt()
        }
    };
    let mut out = vec![0.0; n * dim];
    for i in 0..n {
        let row = &mut out[i * dim..(i + 1) * dim];
        for (k, b) in basis.iter().enumerate() {
            let a = sigma(k) * gaussian(&mut rng);
            for (r, bv) in row.iter_mut().zip(b) {
                *r += a * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_camera() -> CameraModel {
        CameraModel {
            fx: 40.0,
            fy: 40.0,
            cx: 19.5,
            cy: 19.5,
            width: 40,
            height: 40,
            depth_scale: 5000.0,
        }
    }

    #[test]
    fn codebook_is_decorrelated_and_unit() {
        let names: Vec<String> = (0..12).map(|i| format!("class{i}")).collect();
        let book = Codebook::generate(&names, 64, 3);
        for i in 0..12 {
            let v = book.vector(i);
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert_relative_eq!(n, 1.0, epsilon = 1e-6);
            for j in 0..i {
                let dot: f64 = book.vector(j).iter().zip(v).map(|(a, b)| a * b).sum();
                assert!(dot.abs() < 0.3);
            }
        }
    }

    #[test]
    fn query_embedding_lookup_and_errors() {
        let names = vec!["chair".to_string(), "table".to_string()];
        let book = Codebook::generate(&names, 16, 1);
        let q = book.query_embedding("chair").unwrap();
        assert_eq!(q, book.vector(0).to_vec());
        assert!(book.query_embedding("sofa").is_err());
        let raw = book.embed_raw(&vec![2.0; 16]).unwrap();
        let n: f64 = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert_relative_eq!(n, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn synthetic_frame_labels_pixels_consistently() {
        let scene = demo_room();
        let names = scene.class_names();
        let book = Codebook::generate(&names, 24, 7);
        let cam = small_camera();
        let pose = Trajectory::Orbit {
            center: [0.0, 0.0, 0.4],
            radius: 2.4,
            height: 1.4,
            arc_deg: 360.0,
        }
        .pose(0, 30);
        let (bundle, mask) = render_synthetic_frame(
            &scene,
            &pose,
            &cam,
            (40, 40),
            &book,
            &NoiseConfig::default(),
            0,
        );
        bundle.validate().unwrap();
        let mut labeled = 0;
        for p in 0..40 * 40 {
            if mask[p] == MASK_BACKGROUND {
                assert_eq!(bundle.depth_gt[p], 0.0);
                let f = &bundle.feature_gt_hi[p * 24..(p + 1) * 24];
                assert!(f.iter().all(|v| *v == 0.0));
            } else {
                labeled += 1;
                assert!(bundle.depth_gt[p] > 0.0);
                // noise-free pixel feature equals its class vector
                let ci = mask[p] as usize;
                let v = book.vector(ci);
                let f = &bundle.feature_gt_hi[p * 24..(p + 1) * 24];
                for k in 0..24 {
                    assert_relative_eq!(f[k] as f64, v[k], epsilon = 1e-6);
                }
            }
        }
        assert!(labeled > 200, "scene should fill much of the frame: {labeled}");
    }

    #[test]
    fn noisy_features_stay_close_to_class_vectors() {
        let scene = demo_room();
        let names = scene.class_names();
        let book = Codebook::generate(&names, 96, 7);
        let cam = small_camera();
        let pose = look_at(&Vector3::new(2.0, 0.0, 1.2), &Vector3::new(0.0, 0.0, 0.4));
        let noise = NoiseConfig { sigma: 0.05, seed: 4 };
        let (bundle, mask) = render_synthetic_frame(&scene, &pose, &cam, (40, 40), &book, &noise, 3);
        let mut good = 0;
        let mut count = 0;
        for p in 0..40 * 40 {
            if mask[p] == MASK_BACKGROUND {
                continue;
            }
            count += 1;
            let v = book.vector(mask[p] as usize);
            let f = &bundle.feature_gt_hi[p * 96..(p + 1) * 96];
            let nf: f64 = f.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
            let dot: f64 = f.iter().zip(v).map(|(a, b)| (*a as f64) * b).sum();
            if dot / nf > 0.99 {
                good += 1;
            }
        }
        assert!(good as f64 >= 0.99 * count as f64, "{good}/{count}");
    }

    #[test]
    fn ften_roundtrip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ften");
        let data: Vec<f32> = (0..2 * 3 * 4).map(|i| i as f32 * 0.5).collect();
        save_ften(&path, 2, 3, 4, &data).unwrap();
        let (h, w, c, back) = load_ften(&path).unwrap();
        assert_eq!((h, w, c), (2, 3, 4));
        assert_eq!(back, data);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_ften(&path).unwrap_err();
        assert!(err.to_string().contains("byte"), "{err}");
    }

    #[test]
    fn sequence_roundtrip_is_bit_exact() {
        let scene = demo_room();
        let names = scene.class_names();
        let book = Codebook::generate(&names, 16, 9);
        let source = SyntheticSource {
            scene,
            trajectory: Trajectory::Orbit {
                center: [0.0, 0.0, 0.4],
                radius: 2.4,
                height: 1.4,
                arc_deg: 360.0,
            },
            camera: small_camera(),
            codebook: book.clone(),
            frames: 2,
            feat_size: (20, 20),
            noise: NoiseConfig::default(),
        };
        let dir = tempfile::tempdir().unwrap();
        write_sequence(dir.path(), &source, &book).unwrap();
        let dump = DumpSource::open(dir.path()).unwrap();
        assert_eq!(dump.len(), 2);
        let b = dump.frame(0).unwrap();
        assert_eq!(b.width, 40);
        assert_eq!(b.feat_dim, 16);
        assert!(dump.mask(0).unwrap().is_some());
        assert_eq!(dump.codebook().unwrap(), book);

        // writing the loaded sequence again produces identical files
        let dir2 = tempfile::tempdir().unwrap();
        write_sequence(dir2.path(), &dump, &book).unwrap();
        for name in ["frames/color_000000.png", "frames/depth_000001.png", "frames/feat_000000.ften"] {
            let a = std::fs::read(dir.path().join(name)).unwrap();
            let b = std::fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
    }

    #[test]
    fn manifest_pose_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        let pose = look_at(&Vector3::new(1.0, 2.0, 1.5), &Vector3::new(0.0, 0.0, 0.0));
        let entries = vec![ManifestEntry {
            index: 7,
            color: PathBuf::from("c.png"),
            depth: PathBuf::from("d.png"),
            feature: PathBuf::from("f.ften"),
            pose: Some(pose),
        }];
        write_manifest(&path, &entries).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].index, 7);
        let (rot_err, trans_err) = back[0].pose.unwrap().error_to(&pose);
        assert!(rot_err < 1e-9 && trans_err < 1e-9);
    }

    #[test]
    fn orbit_poses_look_at_center() {
        let traj = Trajectory::Orbit {
            center: [0.5, -0.5, 0.3],
            radius: 2.0,
            height: 1.0,
            arc_deg: 360.0,
        };
        for i in 0..8 {
            let pose = traj.pose(i, 8);
            pose.validate().unwrap();
            let c = pose.transform(&Vector3::new(0.5, -0.5, 0.3));
            assert!(c.z > 0.0);
            assert!(c.x.abs() < 1e-9 && c.y.abs() < 1e-9, "center projects on axis");
        }
    }

    #[test]
    fn spectrum_corpus_is_deterministic() {
        let a = spectrum_corpus(64, 10, 5);
        let b = spectrum_corpus(64, 10, 5);
        assert_eq!(a, b);
        let c = spectrum_corpus(64, 10, 6);
        assert_ne!(a, c);
    }
}
