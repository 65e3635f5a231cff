//! 2D query evaluation on rendered language maps, plus standard rendering
//! and tracking metrics.

use crate::codec::TwoStageCodec;
use crate::error::{Result, SplatError};
use nalgebra::{Matrix3, Vector3};

/// Per-query relevancy over one rendered feature map.
#[derive(Debug, Clone)]
pub struct QueryResult2D {
    pub width: usize,
    pub height: usize,
    /// Raw per-pixel cosine relevancy in [-1, 1].
    pub relevancy: Vec<f64>,
    /// After the mean filter.
    pub smoothed: Vec<f64>,
    pub mask: Vec<bool>,
    /// (x, y) of the maximum smoothed relevancy; ties break row-major.
    pub peak: (usize, usize),
}

/// Decode a rendered K-dim feature map and score it against a query
/// vector: per-pixel cosine, then a mean filter (kernel × kernel window,
/// zero-padded, normalized by the in-bounds count), then a threshold mask.
pub fn relevancy_map(
    feature: &[f64],
    width: usize,
    height: usize,
    codec: &TwoStageCodec,
    query: &[f64],
    kernel: usize,
    threshold: f64,
) -> Result<QueryResult2D> {
    let k = codec.code_dim();
    if feature.len() != width * height * k {
        return Err(SplatError::Contract("feature map shape mismatch".into()));
    }
    if query.len() != codec.feat_dim() {
        return Err(SplatError::Contract(format!(
            "query has {} dims, codec decodes to {}",
            query.len(),
            codec.feat_dim()
        )));
    }
    let n = width * height;
    let decoded = codec.decode2(feature, n)?;
    let d = codec.feat_dim();
    let qn = query.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let mut relevancy = vec![0.0; n];
    for p in 0..n {
        let x = &decoded[p * d..(p + 1) * d];
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nx < 1e-8 {
            continue;
        }
        let dot: f64 = x.iter().zip(query).map(|(a, b)| a * b).sum();
        relevancy[p] = dot / (nx * qn);
    }
    let smoothed = mean_filter(&relevancy, width, height, kernel);
    let mask: Vec<bool> = smoothed.iter().map(|v| *v >= threshold).collect();
    let mut peak = (0usize, 0usize);
    let mut best = f64::NEG_INFINITY;
    for y in 0..height {
        for x in 0..width {
            let v = smoothed[y * width + x];
            if v > best {
                best = v;
                peak = (x, y);
            }
        }
    }
    Ok(QueryResult2D {
        width,
        height,
        relevancy,
        smoothed,
        mask,
        peak,
    })
}

/// Box mean filter via a summed-area table; border windows average over
/// their in-bounds pixels only. An even kernel anchors at index k/2.
pub fn mean_filter(img: &[f64], width: usize, height: usize, kernel: usize) -> Vec<f64> {
    if kernel <= 1 {
        return img.to_vec();
    }
    let mut sat = vec![0.0f64; (width + 1) * (height + 1)];
    for y in 0..height {
        for x in 0..width {
            sat[(y + 1) * (width + 1) + (x + 1)] = img[y * width + x]
                + sat[y * (width + 1) + (x + 1)]
                + sat[(y + 1) * (width + 1) + x]
                - sat[y * (width + 1) + x];
        }
    }
    let lo = (kernel / 2) as isize;
    let hi = (kernel - 1) as isize - lo;
    let mut out = vec![0.0; width * height];
    for y in 0..height as isize {
        let y0 = (y - lo).max(0) as usize;
        let y1 = ((y + hi).min(height as isize - 1) + 1) as usize;
        for x in 0..width as isize {
            let x0 = (x - lo).max(0) as usize;
            let x1 = ((x + hi).min(width as isize - 1) + 1) as usize;
            let sum = sat[y1 * (width + 1) + x1] - sat[y0 * (width + 1) + x1]
                - sat[y1 * (width + 1) + x0]
                + sat[y0 * (width + 1) + x0];
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            out[y as usize * width + x as usize] = sum / count;
        }
    }
    out
}

/// Intersection over union of two boolean masks. Both empty → 1.
pub fn miou(pred: &[bool], gt: &[bool]) -> f64 {
    assert_eq!(pred.len(), gt.len());
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        if *p && *g {
            inter += 1;
        }
        if *p || *g {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bbox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

pub fn bbox_of_mask(mask: &[bool], width: usize) -> Option<Bbox> {
    let mut b: Option<Bbox> = None;
    for (p, m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let (x, y) = (p % width, p / width);
        b = Some(match b {
            None => Bbox {
                x_min: x,
                y_min: y,
                x_max: x,
                y_max: y,
            },
            Some(bb) => Bbox {
                x_min: bb.x_min.min(x),
                y_min: bb.y_min.min(y),
                x_max: bb.x_max.max(x),
                y_max: bb.y_max.max(y),
            },
        });
    }
    b
}

/// Localization hit: the peak pixel lies inside the (inclusive) box.
pub fn loc_hit(peak: (usize, usize), bbox: &Bbox) -> bool {
    peak.0 >= bbox.x_min && peak.0 <= bbox.x_max && peak.1 >= bbox.y_min && peak.1 <= bbox.y_max
}

/// PSNR in dB for values in [0, 1]; +∞ for identical inputs.
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mse: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Single-channel SSIM with the standard 11×11 Gaussian window (σ = 1.5),
/// K1 = 0.01, K2 = 0.03, averaged over the valid region.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize) -> f64 {
    assert_eq!(a.len(), width * height);
    assert_eq!(b.len(), width * height);
    const WIN: usize = 11;
    const SIGMA: f64 = 1.5;
    if width < WIN || height < WIN {
        // degenerate images: global statistics
        return ssim_window(a, b);
    }
    let mut kernel = [0.0f64; WIN];
    let c = (WIN / 2) as f64;
    let mut sum = 0.0;
    for (i, k) in kernel.iter_mut().enumerate() {
        *k = (-((i as f64 - c) * (i as f64 - c)) / (2.0 * SIGMA * SIGMA)).exp();
        sum += *k;
    }
    for k in &mut kernel {
        *k /= sum;
    }
    let blur = |img: &[f64]| -> Vec<f64> {
        // separable valid convolution
        let w2 = width - WIN + 1;
        let mut tmp = vec![0.0; w2 * height];
        for y in 0..height {
            for x in 0..w2 {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    acc += k * img[y * width + x + i];
                }
                tmp[y * w2 + x] = acc;
            }
        }
        let h2 = height - WIN + 1;
        let mut out = vec![0.0; w2 * h2];
        for y in 0..h2 {
            for x in 0..w2 {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    acc += k * tmp[(y + i) * w2 + x];
                }
                out[y * w2 + x] = acc;
            }
        }
        out
    };
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = blur(a);
    let mu_b = blur(b);
    let e_aa = blur(&aa);
    let e_bb = blur(&bb);
    let e_ab = blur(&ab);
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
            / ((ma * ma + mb * mb + C1) * (va + vb + C2));
    }
    total / mu_a.len() as f64
}

fn ssim_window(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let va = a.iter().map(|v| (v - ma) * (v - ma)).sum::<f64>() / n;
    let vb = b.iter().map(|v| (v - mb) * (v - mb)).sum::<f64>() / n;
    let cov = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / n;
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))
}

/// Mean of per-channel SSIM over an H×W×3 image.
pub fn ssim_rgb(a: &[f64], b: &[f64], width: usize, height: usize) -> f64 {
    let mut total = 0.0;
    for ch in 0..3 {
        let ca: Vec<f64> = a.iter().skip(ch).step_by(3).copied().collect();
        let cb: Vec<f64> = b.iter().skip(ch).step_by(3).copied().collect();
        total += ssim(&ca, &cb, width, height);
    }
    total / 3.0
}

/// Absolute trajectory error: rigid (Kabsch) alignment of camera centers,
/// then translational RMSE.
pub fn ate_rmse(estimated: &[Vector3<f64>], ground_truth: &[Vector3<f64>]) -> Result<f64> {
    if estimated.len() != ground_truth.len() {
        return Err(SplatError::Contract("trajectory length mismatch".into()));
    }
    if estimated.len() < 3 {
        return Err(SplatError::Contract("need at least 3 poses for alignment".into()));
    }
    let n = estimated.len() as f64;
    let mut ce = Vector3::zeros();
    let mut cg = Vector3::zeros();
    for (e, g) in estimated.iter().zip(ground_truth) {
        ce += e;
        cg += g;
    }
    ce /= n;
    cg /= n;
    let mut h = Matrix3::<f64>::zeros();
    for (e, g) in estimated.iter().zip(ground_truth) {
        h += (e - ce) * (g - cg).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd vt");
    let mut d = Matrix3::identity();
    if (vt.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = vt.transpose() * d * u.transpose();
    let t = cg - r * ce;
    let mut sq = 0.0;
    for (e, g) in estimated.iter().zip(ground_truth) {
        sq += (r * e + t - g).norm_squared();
    }
    Ok((sq / n).sqrt())
}
