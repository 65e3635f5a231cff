//! 3D localization protocol: fuse language renderings into a TSDF volume,
//! extract a feature-carrying mesh by marching cubes, localize queries on
//! it, and score point sets with Chamfer and Earth Mover's distances under
//! the population failure rule.

use crate::codec::TwoStageCodec;
use crate::error::{Result, SplatError};
use crate::scene::{CameraModel, PoseSE3};
use nalgebra::Vector3;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

/// Truncated signed distance grid with per-voxel running feature averages.
#[derive(Debug, Clone)]
pub struct TsdfVolume {
    pub origin: Vector3<f64>,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    pub feat_dim: usize,
    /// Clamped signed distance in [-1, 1]; +1 = empty space.
    pub tsdf: Vec<f64>,
    pub weight: Vec<f64>,
    pub feature: Vec<f64>,
}

impl TsdfVolume {
    pub fn new(origin: Vector3<f64>, voxel_size: f64, dims: [usize; 3], feat_dim: usize) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        TsdfVolume {
            origin,
            voxel_size,
            dims,
            feat_dim,
            tsdf: vec![1.0; n],
            weight: vec![0.0; n],
            feature: vec![0.0; n * feat_dim],
        }
    }

    /// Truncation band: 3 voxels.
    pub fn truncation(&self) -> f64 {
        3.0 * self.voxel_size
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    pub fn center(&self, x: usize, y: usize, z: usize) -> Vector3<f64> {
        self.origin
            + Vector3::new(
                (x as f64 + 0.5) * self.voxel_size,
                (y as f64 + 0.5) * self.voxel_size,
                (z as f64 + 0.5) * self.voxel_size,
            )
    }

    /// Fuse one view: per in-frustum voxel, compare the voxel's camera
    /// depth against the depth image at its projection and update the
    /// running tsdf / feature averages (weight 1 per observation).
    pub fn integrate(
        &mut self,
        depth: &[f64],
        feature: &[f64],
        feat_dim: usize,
        camera: &CameraModel,
        pose: &PoseSE3,
    ) -> Result<()> {
        if depth.len() != camera.width * camera.height {
            return Err(SplatError::Contract("depth image size mismatch".into()));
        }
        if feature.len() != camera.width * camera.height * feat_dim || feat_dim != self.feat_dim {
            return Err(SplatError::Contract("feature image size mismatch".into()));
        }
        let trunc = self.truncation();
        let (nx, ny) = (self.dims[0], self.dims[1]);
        let slab = nx * ny;
        let origin = self.origin;
        let voxel = self.voxel_size;
        self.tsdf
            .par_chunks_mut(slab)
            .zip(self.weight.par_chunks_mut(slab))
            .zip(self.feature.par_chunks_mut(slab * feat_dim))
            .enumerate()
            .for_each(|(z, ((tsdf_s, weight_s), feat_s))| {
                for y in 0..ny {
                    for x in 0..nx {
                        let p_world = origin
                            + Vector3::new(
                                (x as f64 + 0.5) * voxel,
                                (y as f64 + 0.5) * voxel,
                                (z as f64 + 0.5) * voxel,
                            );
                        let p_cam = pose.transform(&p_world);
                        if p_cam.z <= 0.0 {
                            continue;
                        }
                        let u = (camera.fx * p_cam.x / p_cam.z + camera.cx).round();
                        let v = (camera.fy * p_cam.y / p_cam.z + camera.cy).round();
                        if u < 0.0 || v < 0.0 || u >= camera.width as f64 || v >= camera.height as f64
                        {
                            continue;
                        }
                        let pix = v as usize * camera.width + u as usize;
                        let d = depth[pix];
                        if d <= 0.0 {
                            continue;
                        }
                        let sdf = d - p_cam.z;
                        if sdf < -trunc {
                            continue;
                        }
                        let sample = (sdf / trunc).clamp(-1.0, 1.0);
                        let vi = y * nx + x;
                        let w = weight_s[vi];
                        tsdf_s[vi] = (tsdf_s[vi] * w + sample) / (w + 1.0);
                        for k in 0..feat_dim {
                            feat_s[vi * feat_dim + k] =
                                (feat_s[vi * feat_dim + k] * w + feature[pix * feat_dim + k])
                                    / (w + 1.0);
                        }
                        weight_s[vi] = w + 1.0;
                    }
                }
            });
        Ok(())
    }
}

/// Triangle mesh whose vertices carry language codes.
#[derive(Debug, Clone, Default)]
pub struct FeatureMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
    pub feat_dim: usize,
    /// feat_dim floats per vertex.
    pub features: Vec<f64>,
}

// --- marching cubes case table -------------------------------------------------
//
// Corner numbering: bit i set = corner i inside (tsdf < 0).
//   0:(0,0,0) 1:(1,0,0) 2:(1,1,0) 3:(0,1,0) 4:(0,0,1) 5:(1,0,1) 6:(1,1,1) 7:(0,1,1)
// Edge numbering (corner pairs):
pub const EDGE_CORNERS: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

// Each face as (cyclic corner list, boundary edge list).
const FACES: [([usize; 4], [usize; 4]); 6] = [
    ([0, 1, 2, 3], [0, 1, 2, 3]),
    ([4, 7, 6, 5], [7, 6, 5, 4]),
    ([0, 4, 5, 1], [8, 4, 9, 0]),
    ([1, 5, 6, 2], [9, 5, 10, 1]),
    ([2, 6, 7, 3], [10, 6, 11, 2]),
    ([3, 7, 4, 0], [11, 7, 8, 3]),
];

/// Triangulations per case: flat edge-index triples.
fn build_case_table() -> Vec<Vec<[usize; 3]>> {
    let mut table = Vec::with_capacity(256);
    for case in 0..256usize {
        let inside = |c: usize| (case >> c) & 1 == 1;
        // per-face segments pairing the crossings around inside runs
        let mut links: Vec<Vec<usize>> = vec![Vec::new(); 12];
        for (corners, edges) in FACES {
            // crossing on edges[i] ⇔ inside flips between corners[i], corners[i+1]
            let crossing: Vec<bool> = (0..4)
                .map(|i| inside(corners[i]) != inside(corners[(i + 1) % 4]))
                .collect();
            if !crossing.iter().any(|c| *c) {
                continue;
            }
            // walk inside runs: the crossing entering a run pairs with the
            // crossing leaving it
            for start in 0..4 {
                let prev = (start + 3) % 4;
                if inside(corners[start]) && !inside(corners[prev]) {
                    // run starts at `start`; entering crossing is on edges[prev]
                    let mut end = start;
                    while inside(corners[(end + 1) % 4]) {
                        end = (end + 1) % 4;
                    }
                    let e_in = edges[prev];
                    let e_out = edges[end];
                    links[e_in].push(e_out);
                    links[e_out].push(e_in);
                }
            }
        }
        // active edges have exactly two links; walk closed loops
        let mut visited = [false; 12];
        let mut tris = Vec::new();
        for e0 in 0..12 {
            if links[e0].is_empty() || visited[e0] {
                continue;
            }
            let mut loop_edges = vec![e0];
            visited[e0] = true;
            let mut prev = e0;
            let mut cur = links[e0][0];
            while cur != e0 {
                visited[cur] = true;
                loop_edges.push(cur);
                let next = if links[cur][0] == prev {
                    links[cur][1]
                } else {
                    links[cur][0]
                };
                prev = cur;
                cur = next;
            }
            for i in 1..loop_edges.len() - 1 {
                tris.push([loop_edges[0], loop_edges[i], loop_edges[i + 1]]);
            }
        }
        table.push(tris);
    }
    table
}

fn case_table() -> &'static Vec<Vec<[usize; 3]>> {
    static TABLE: OnceLock<Vec<Vec<[usize; 3]>>> = OnceLock::new();
    TABLE.get_or_init(build_case_table)
}

/// Extract the zero level set. Cells where any corner is unobserved
/// (weight 0) are skipped; vertex positions and features interpolate
/// linearly along the crossing edge.
pub fn marching_cubes(volume: &TsdfVolume) -> FeatureMesh {
    let [nx, ny, nz] = volume.dims;
    let k = volume.feat_dim;
    let mut mesh = FeatureMesh {
        feat_dim: k,
        ..Default::default()
    };
    if nx < 2 || ny < 2 || nz < 2 {
        return mesh;
    }
    let table = case_table();
    let corner_offsets = [
        (0usize, 0usize, 0usize),
        (1, 0, 0),
        (1, 1, 0),
        (0, 1, 0),
        (0, 0, 1),
        (1, 0, 1),
        (1, 1, 1),
        (0, 1, 1),
    ];
    // global vertex per grid edge, assigned in scan order
    let mut edge_vertex: HashMap<(usize, usize), u32> = HashMap::new();
    for z in 0..nz - 1 {
        for y in 0..ny - 1 {
            for x in 0..nx - 1 {
                let mut case = 0usize;
                let mut observed = true;
                let mut idxs = [0usize; 8];
                for (ci, (dx, dy, dz)) in corner_offsets.iter().enumerate() {
                    let vi = volume.index(x + dx, y + dy, z + dz);
                    idxs[ci] = vi;
                    if volume.weight[vi] <= 0.0 {
                        observed = false;
                        break;
                    }
                    if volume.tsdf[vi] < 0.0 {
                        case |= 1 << ci;
                    }
                }
                if !observed {
                    continue;
                }
                let tris = &table[case];
                if tris.is_empty() {
                    continue;
                }
                let mut edge_to_vert = [u32::MAX; 12];
                for tri in tris {
                    for &e in tri {
                        if edge_to_vert[e] != u32::MAX {
                            continue;
                        }
                        let (ca, cb) = EDGE_CORNERS[e];
                        let (ia, ib) = (idxs[ca], idxs[cb]);
                        let key = (ia.min(ib), ia.max(ib));
                        let next_id = mesh.vertices.len() as u32;
                        let id = *edge_vertex.entry(key).or_insert_with(|| {
                            let (va, vb) = (volume.tsdf[ia], volume.tsdf[ib]);
                            let t = if (va - vb).abs() < 1e-12 {
                                0.5
                            } else {
                                (va / (va - vb)).clamp(0.0, 1.0)
                            };
                            let (oa, ob) = (corner_offsets[ca], corner_offsets[cb]);
                            let pa = volume.center(x + oa.0, y + oa.1, z + oa.2);
                            let pb = volume.center(x + ob.0, y + ob.1, z + ob.2);
                            mesh.vertices.push(pa + (pb - pa) * t);
                            for kk in 0..k {
                                let fa = volume.feature[ia * k + kk];
                                let fb = volume.feature[ib * k + kk];
                                mesh.features.push(fa + (fb - fa) * t);
                            }
                            next_id
                        });
                        edge_to_vert[e] = id;
                    }
                    mesh.triangles.push([
                        edge_to_vert[tri[0]],
                        edge_to_vert[tri[1]],
                        edge_to_vert[tri[2]],
                    ]);
                }
            }
        }
    }
    mesh
}

/// Decode each vertex feature, score against the query, return the
/// positions at or above the relevancy threshold.
pub fn localize_query_3d(
    mesh: &FeatureMesh,
    codec: &TwoStageCodec,
    query: &[f64],
    threshold: f64,
) -> Result<Vec<Vector3<f64>>> {
    if mesh.vertices.is_empty() {
        return Ok(Vec::new());
    }
    let n = mesh.vertices.len();
    let decoded = codec.decode2(&mesh.features, n)?;
    let d = codec.feat_dim();
    let qn = query.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let mut out = Vec::new();
    for i in 0..n {
        let x = &decoded[i * d..(i + 1) * d];
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nx < 1e-8 {
            continue;
        }
        let dot: f64 = x.iter().zip(query).map(|(a, b)| a * b).sum();
        if dot / (nx * qn) >= threshold {
            out.push(mesh.vertices[i]);
        }
    }
    Ok(out)
}

// --- point-set distances ---------------------------------------------------------

/// Exact nearest-neighbor queries over a uniform grid hash.
struct GridIndex<'a> {
    points: &'a [Vector3<f64>],
    cell: f64,
    map: HashMap<(i64, i64, i64), Vec<u32>>,
    cell_lo: (i64, i64, i64),
    cell_hi: (i64, i64, i64),
}

impl<'a> GridIndex<'a> {
    fn build(points: &'a [Vector3<f64>]) -> Self {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = (hi - lo).norm().max(1e-9);
        let cell = (extent / (points.len() as f64).cbrt()).max(1e-9);
        let mut map: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        let mut cell_lo = (i64::MAX, i64::MAX, i64::MAX);
        let mut cell_hi = (i64::MIN, i64::MIN, i64::MIN);
        for (i, p) in points.iter().enumerate() {
            let k = Self::key(p, cell);
            cell_lo = (cell_lo.0.min(k.0), cell_lo.1.min(k.1), cell_lo.2.min(k.2));
            cell_hi = (cell_hi.0.max(k.0), cell_hi.1.max(k.1), cell_hi.2.max(k.2));
            map.entry(k).or_default().push(i as u32);
        }
        GridIndex {
            points,
            cell,
            map,
            cell_lo,
            cell_hi,
        }
    }

    fn key(p: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Exact nearest distance via expanding rings clamped to the occupied
    /// cell box. The search starts at the box's Chebyshev distance and a
    /// ring at radius r is abandoned once (r-1)·cell exceeds the best
    /// distance found.
    fn nearest(&self, q: &Vector3<f64>) -> f64 {
        let (cx, cy, cz) = Self::key(q, self.cell);
        let axis_dist = |c: i64, lo: i64, hi: i64| -> i64 {
            if c < lo {
                lo - c
            } else if c > hi {
                c - hi
            } else {
                0
            }
        };
        let r0 = axis_dist(cx, self.cell_lo.0, self.cell_hi.0)
            .max(axis_dist(cy, self.cell_lo.1, self.cell_hi.1))
            .max(axis_dist(cz, self.cell_lo.2, self.cell_hi.2));
        let r_max = (cx - self.cell_lo.0)
            .abs()
            .max((cx - self.cell_hi.0).abs())
            .max((cy - self.cell_lo.1).abs())
            .max((cy - self.cell_hi.1).abs())
            .max((cz - self.cell_lo.2).abs())
            .max((cz - self.cell_hi.2).abs());
        let mut best = f64::INFINITY;
        for r in r0..=r_max {
            if best.is_finite() && (r - 1).max(0) as f64 * self.cell > best {
                break;
            }
            let x_lo = (cx - r).max(self.cell_lo.0);
            let x_hi = (cx + r).min(self.cell_hi.0);
            let y_lo = (cy - r).max(self.cell_lo.1);
            let y_hi = (cy + r).min(self.cell_hi.1);
            let z_lo = (cz - r).max(self.cell_lo.2);
            let z_hi = (cz + r).min(self.cell_hi.2);
            for dx in x_lo..=x_hi {
                for dy in y_lo..=y_hi {
                    for dz in z_lo..=z_hi {
                        let cheb = (dx - cx).abs().max((dy - cy).abs()).max((dz - cz).abs());
                        if cheb != r {
                            continue;
                        }
                        if let Some(ids) = self.map.get(&(dx, dy, dz)) {
                            for &i in ids {
                                let d = (self.points[i as usize] - q).norm();
                                if d < best {
                                    best = d;
                                }
                            }
                        }
                    }
                }
            }
        }
        best
    }
}

/// Symmetric mean nearest-neighbor distance.
pub fn chamfer(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(SplatError::Contract("chamfer of an empty point set".into()));
    }
    let ib = GridIndex::build(b);
    let ia = GridIndex::build(a);
    let d_ab: f64 = a.par_iter().map(|p| ib.nearest(p)).sum::<f64>() / a.len() as f64;
    let d_ba: f64 = b.par_iter().map(|p| ia.nearest(p)).sum::<f64>() / b.len() as f64;
    Ok(0.5 * (d_ab + d_ba))
}

/// Exact optimal-assignment mean cost (Hungarian with potentials) between
/// equal-size sets; both sides are seeded-uniformly subsampled to
/// min(|a|, |b|, cap) first.
pub fn emd(a: &[Vector3<f64>], b: &[Vector3<f64>], cap: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(SplatError::Contract("emd of an empty point set".into()));
    }
    let m = a.len().min(b.len()).min(cap.max(1));
    let sa = subsample(a, m, rng);
    let sb = subsample(b, m, rng);
    let mut cost = vec![0.0f64; m * m];
    for i in 0..m {
        for j in 0..m {
            cost[i * m + j] = (sa[i] - sb[j]).norm();
        }
    }
    let total = hungarian_min_cost(&cost, m);
    Ok(total / m as f64)
}

fn subsample(points: &[Vector3<f64>], m: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    use rand::Rng;
    if points.len() <= m {
        return points.to_vec();
    }
    let mut idx: Vec<usize> = (0..points.len()).collect();
    for i in 0..m {
        let j = rng.gen_range(i..points.len());
        idx.swap(i, j);
    }
    idx[..m].iter().map(|&i| points[i]).collect()
}

/// O(n³) assignment with row/column potentials; returns the minimum total
/// cost over perfect matchings of the n×n matrix.
pub fn hungarian_min_cost(cost: &[f64], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched = vec![0usize; n + 1]; // column -> row (1-based, 0 = free)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut total = 0.0;
    for j in 1..=n {
        if matched[j] > 0 {
            total += cost[(matched[j] - 1) * n + (j - 1)];
        }
    }
    total
}

// --- failure rule -----------------------------------------------------------------

/// Per-metric outcome of the failure rule.
#[derive(Debug, Clone, PartialEq)]
pub struct FailureRuleOutcome {
    /// Population mean + 2 × population std over the defined distances.
    pub threshold: f64,
    /// Mean over queries that are not failures; None when all fail.
    pub mean: Option<f64>,
    pub failures: usize,
}

/// A query fails when its distance exceeds the population mean plus twice
/// the population standard deviation, or when it produced no points
/// (distance None). Failures are excluded from the reported mean.
pub fn apply_failure_rule(distances: &[Option<f64>]) -> Result<FailureRuleOutcome> {
    if distances.len() < 2 {
        return Err(SplatError::Contract("failure rule needs at least 2 queries".into()));
    }
    let defined: Vec<f64> = distances.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Ok(FailureRuleOutcome {
            threshold: 0.0,
            mean: None,
            failures: distances.len(),
        });
    }
    let n = defined.len() as f64;
    let mean = defined.iter().sum::<f64>() / n;
    let var = defined.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    let threshold = mean + 2.0 * var.sqrt();
    let mut kept = Vec::new();
    let mut failures = 0usize;
    for d in distances {
        match d {
            Some(d) if *d <= threshold => kept.push(*d),
            _ => failures += 1,
        }
    }
    let mean = if kept.is_empty() {
        None
    } else {
        Some(kept.iter().sum::<f64>() / kept.len() as f64)
    };
    Ok(FailureRuleOutcome {
        threshold,
        mean,
        failures,
    })
}

// --- mesh export --------------------------------------------------------------------

/// Binary little-endian PLY with per-vertex feature properties.
pub fn save_mesh_ply(mesh: &FeatureMesh, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| SplatError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let err = |e| SplatError::io(path, e);
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", mesh.vertices.len()));
    header.push_str("property float x\nproperty float y\nproperty float z\n");
    for k in 0..mesh.feat_dim {
        header.push_str(&format!("property float feature_{k}\n"));
    }
    header.push_str(&format!("element face {}\n", mesh.triangles.len()));
    header.push_str("property list uchar uint vertex_indices\nend_header\n");
    w.write_all(header.as_bytes()).map_err(err)?;
    for (i, vtx) in mesh.vertices.iter().enumerate() {
        for v in [vtx.x, vtx.y, vtx.z] {
            w.write_all(&(v as f32).to_le_bytes()).map_err(err)?;
        }
        for k in 0..mesh.feat_dim {
            w.write_all(&(mesh.features[i * mesh.feat_dim + k] as f32).to_le_bytes())
                .map_err(err)?;
        }
    }
    for tri in &mesh.triangles {
        w.write_all(&[3u8]).map_err(err)?;
        for idx in tri {
            w.write_all(&idx.to_le_bytes()).map_err(err)?;
        }
    }
    w.flush().map_err(err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    /// Fill a volume from an analytic SDF, marking everything observed.
    fn volume_from_sdf(
        dims: [usize; 3],
        voxel: f64,
        origin: Vector3<f64>,
        sdf: impl Fn(&Vector3<f64>) -> f64,
    ) -> TsdfVolume {
        let mut v = TsdfVolume::new(origin, voxel, dims, 1);
        let trunc = v.truncation();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let i = v.index(x, y, z);
                    v.tsdf[i] = (sdf(&v.center(x, y, z)) / trunc).clamp(-1.0, 1.0);
                    v.weight[i] = 1.0;
                    v.feature[i] = 1.0;
                }
            }
        }
        v
    }

    #[test]
    fn case_table_covers_all_cases_consistently() {
        let table = case_table();
        assert_eq!(table.len(), 256);
        assert!(table[0].is_empty());
        assert!(table[255].is_empty());
        // single corner inside: one triangle on its three incident edges
        assert_eq!(table[1].len(), 1);
        // each active edge of each case must be used by the triangulation
        for (case, tris) in table.iter().enumerate() {
            let mut active = [false; 12];
            for (e, (a, b)) in EDGE_CORNERS.iter().enumerate() {
                let ia = (case >> a) & 1 == 1;
                let ib = (case >> b) & 1 == 1;
                active[e] = ia != ib;
            }
            let mut used = [false; 12];
            for t in tris {
                for &e in t {
                    assert!(active[e], "case {case} uses inactive edge {e}");
                    used[e] = true;
                }
            }
            for e in 0..12 {
                assert_eq!(active[e], used[e], "case {case} edge {e} active≠used");
            }
        }
    }

    #[test]
    fn sphere_mesh_is_watertight_and_accurate() {
        let r = 0.8;
        let voxel = 0.1;
        let dims = [24, 24, 24];
        let origin = Vector3::new(-1.2, -1.2, -1.2);
        let vol = volume_from_sdf(dims, voxel, origin, |p| p.norm() - r);
        let mesh = marching_cubes(&vol);
        assert!(mesh.vertices.len() > 100);

        // vertex distance to the analytic surface
        let mut worst: f64 = 0.0;
        let mut mean = 0.0;
        for v in &mesh.vertices {
            let err = (v.norm() - r).abs();
            worst = worst.max(err);
            mean += err;
        }
        mean /= mesh.vertices.len() as f64;
        assert!(worst < voxel / 2.0, "worst vertex error {worst}");
        assert!(mean < voxel / 4.0, "mean vertex error {mean}");

        // watertight: every undirected edge is shared by exactly two faces
        let mut edge_count: HashMap<(u32, u32), usize> = HashMap::new();
        for t in &mesh.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *edge_count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        for (e, c) in edge_count {
            assert_eq!(c, 2, "edge {e:?} shared by {c} faces");
        }
    }

    #[test]
    fn all_positive_volume_gives_empty_mesh() {
        let vol = volume_from_sdf([8, 8, 8], 0.1, Vector3::zeros(), |_| 1.0);
        let mesh = marching_cubes(&vol);
        assert!(mesh.vertices.is_empty());
        assert!(mesh.triangles.is_empty());
    }

    #[test]
    fn boundary_vertex_features_interpolate_between_regions() {
        // plane x = 0.4 between feature 0 (left) and surface; feature value
        // ramps linearly in x, so crossing vertices interpolate on segment
        let dims = [10, 4, 4];
        let voxel = 0.1;
        let mut vol = TsdfVolume::new(Vector3::zeros(), voxel, dims, 2);
        let trunc = vol.truncation();
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..10 {
                    let i = vol.index(x, y, z);
                    let p = vol.center(x, y, z);
                    vol.tsdf[i] = ((0.42 - p.x) / trunc).clamp(-1.0, 1.0) * -1.0;
                    vol.weight[i] = 1.0;
                    // class a left of the crossing, class b right
                    vol.feature[i * 2] = if p.x < 0.42 { 1.0 } else { 0.0 };
                    vol.feature[i * 2 + 1] = if p.x < 0.42 { 0.0 } else { 1.0 };
                }
            }
        }
        let mesh = marching_cubes(&vol);
        assert!(!mesh.vertices.is_empty());
        for i in 0..mesh.vertices.len() {
            let fa = mesh.features[i * 2];
            let fb = mesh.features[i * 2 + 1];
            // convex combination of the two class codes
            assert_relative_eq!(fa + fb, 1.0, epsilon = 1e-9);
            assert!((0.0..=1.0).contains(&fa));
        }
    }

    #[test]
    fn integrate_plane_produces_zero_crossing_at_depth() {
        let cam = CameraModel {
            fx: 50.0,
            fy: 50.0,
            cx: 23.5,
            cy: 23.5,
            width: 48,
            height: 48,
            depth_scale: 5000.0,
        };
        // wall at z = 2 in camera coordinates
        let depth = vec![2.0; 48 * 48];
        let feature = vec![0.5; 48 * 48];
        let mut vol = TsdfVolume::new(Vector3::new(-1.0, -1.0, 1.0), 0.1, [20, 20, 16], 1);
        vol.integrate(&depth, &feature, 1, &cam, &PoseSE3::identity())
            .unwrap();

        // along the central column, tsdf flips sign near z = 2
        let mut crossing_z = None;
        for z in 0..15 {
            let a = vol.index(10, 10, z);
            let b = vol.index(10, 10, z + 1);
            if vol.weight[a] > 0.0 && vol.weight[b] > 0.0 && vol.tsdf[a] > 0.0 && vol.tsdf[b] <= 0.0
            {
                crossing_z = Some(vol.center(10, 10, z).z);
            }
        }
        let cz = crossing_z.expect("plane crossing found");
        assert!((cz - 2.0).abs() <= 0.1 + 1e-9, "crossing at {cz}");

        // integrating the same view again: identical tsdf, doubled weights
        let before = vol.tsdf.clone();
        let w_before = vol.weight.clone();
        vol.integrate(&depth, &feature, 1, &cam, &PoseSE3::identity())
            .unwrap();
        for i in 0..vol.tsdf.len() {
            assert_relative_eq!(vol.tsdf[i], before[i], epsilon = 1e-12);
            assert_eq!(vol.weight[i], w_before[i] * 2.0);
        }

        // an empty depth frame changes nothing
        let empty = vec![0.0; 48 * 48];
        let snapshot = vol.tsdf.clone();
        vol.integrate(&empty, &feature, 1, &cam, &PoseSE3::identity())
            .unwrap();
        assert_eq!(vol.tsdf, snapshot);
    }

    #[test]
    fn chamfer_cases_and_brute_force_agreement() {
        let a = vec![Vector3::new(0.0, 0.0, 0.0)];
        let b = vec![Vector3::new(1.0, 0.0, 0.0)];
        assert_relative_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert_relative_eq!(chamfer(&a, &b).unwrap(), 1.0);
        assert!(chamfer(&a, &[]).is_err());

        let mut rng = crate::rng::stream(5, "chamfer");
        let pa: Vec<Vector3<f64>> = (0..100)
            .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let pb: Vec<Vector3<f64>> = (0..80)
            .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let fast = chamfer(&pa, &pb).unwrap();
        let mut brute = 0.0;
        for p in &pa {
            brute += pb.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min);
        }
        let mut brute_ba = 0.0;
        for q in &pb {
            brute_ba += pa.iter().map(|p| (p - q).norm()).fold(f64::INFINITY, f64::min);
        }
        let expect = 0.5 * (brute / 100.0 + brute_ba / 80.0);
        assert_relative_eq!(fast, expect, epsilon = 1e-12);
        // symmetry
        assert_relative_eq!(chamfer(&pb, &pa).unwrap(), fast, epsilon = 1e-12);
    }

    #[test]
    fn emd_simple_cases_and_permutation_oracle() {
        let mut rng = crate::rng::stream(6, "emd");
        let a = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)];
        let b = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(2.0, 0.0, 0.0)];
        assert_relative_eq!(emd(&a, &a, 512, &mut rng).unwrap(), 0.0);
        assert_relative_eq!(emd(&a, &b, 512, &mut rng).unwrap(), 0.5);

        // exact agreement with factorial enumeration on sets up to 7
        for n in 2..=7usize {
            let pa: Vec<Vector3<f64>> = (0..n)
                .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let pb: Vec<Vector3<f64>> = (0..n)
                .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let fast = emd(&pa, &pb, 512, &mut rng).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut best = f64::INFINITY;
            permute(&mut perm, 0, &mut |p| {
                let c: f64 = p.iter().enumerate().map(|(i, &j)| (pa[i] - pb[j]).norm()).sum();
                if c < best {
                    best = c;
                }
            });
            assert_relative_eq!(fast, best / n as f64, epsilon = 1e-9);
        }
    }

    fn permute(perm: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == perm.len() {
            f(perm);
            return;
        }
        for i in k..perm.len() {
            perm.swap(k, i);
            permute(perm, k + 1, f);
            perm.swap(k, i);
        }
    }

    #[test]
    fn chamfer_lower_bounds_emd_on_equal_sets() {
        let mut rng = crate::rng::stream(7, "cd-le-emd");
        for _ in 0..20 {
            let n = rng.gen_range(3..30usize);
            let pa: Vec<Vector3<f64>> = (0..n)
                .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let pb: Vec<Vector3<f64>> = (0..n)
                .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let cd = chamfer(&pa, &pb).unwrap();
            let e = emd(&pa, &pb, 512, &mut rng).unwrap();
            assert!(cd <= e + 1e-12, "cd {cd} > emd {e}");
        }
    }

    #[test]
    fn failure_rule_worked_examples() {
        let out = apply_failure_rule(&[Some(1.0), Some(1.0), Some(1.0), Some(1.0)]).unwrap();
        assert_eq!(out.threshold, 1.0);
        assert_eq!(out.failures, 0);
        assert_eq!(out.mean, Some(1.0));

        let out = apply_failure_rule(&[Some(1.0), Some(1.0), Some(1.0), Some(100.0)]).unwrap();
        assert_relative_eq!(out.threshold, 25.75 + 2.0 * 1837.6875f64.sqrt(), epsilon = 1e-9);
        assert_eq!(out.failures, 0);
        assert_relative_eq!(out.mean.unwrap(), 25.75);

        let mut d = vec![Some(0.0); 9];
        d.push(Some(10.0));
        let out = apply_failure_rule(&d).unwrap();
        // mean 1, σ 3 → threshold 7 → the 10 fails, mean of the rest 0
        assert_relative_eq!(out.threshold, 7.0, epsilon = 1e-12);
        assert_eq!(out.failures, 1);
        assert_eq!(out.mean, Some(0.0));

        // empty-result queries count as failures
        let out = apply_failure_rule(&[Some(1.0), None, Some(1.0)]).unwrap();
        assert_eq!(out.failures, 1);

        assert!(apply_failure_rule(&[Some(1.0)]).is_err());
    }

    #[test]
    fn mesh_ply_export_writes_features() {
        let mesh = FeatureMesh {
            vertices: vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
            ],
            triangles: vec![[0, 1, 2]],
            feat_dim: 2,
            features: vec![0.1, 0.9, 0.5, 0.5, 0.9, 0.1],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mesh.ply");
        save_mesh_ply(&mesh, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_end = bytes.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        // 3 vertices × 5 f32 + 1 face (1 + 12 bytes)
        assert_eq!(bytes.len() - header_end, 3 * 5 * 4 + 13);
    }
}
