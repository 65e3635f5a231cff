//! Library entry points behind the CLI subcommands: sequence generation,
//! offline compressor training, pipeline runs, evaluation and
//! benchmarking. Everything is callable from code; the binary only parses
//! arguments.

use crate::codec::{self, MlpCodec, TwoStageCodec};
use crate::config::PipelineConfig;
use crate::error::{Result, SplatError};
use crate::eval2d;
use crate::eval3d::{self, TsdfVolume};
use crate::mapper::{self, run_pipeline};
use crate::render::render_frame;
use crate::scene::{load_field_ply, save_field_ply, CameraModel, GaussianField, PoseSE3};
use crate::synth::{
    self, Codebook, DumpSource, FrameSource, NoiseConfig, ScenePrim, SyntheticScene,
    SyntheticSource, Trajectory, MASK_BACKGROUND,
};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Everything needed to replay a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub out_dir: String,
    pub config: Option<PipelineConfig>,
    /// Wall-clock milliseconds per stage; informational, not deterministic.
    pub timings_ms: BTreeMap<String, f64>,
}

impl RunManifest {
    fn new(command: &str, seed: u64, inputs: Vec<String>, out_dir: &Path) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            inputs,
            out_dir: out_dir.display().to_string(),
            config: None,
            timings_ms: BTreeMap::new(),
        }
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| SplatError::io(path, e))
    }
}

// --- gen -------------------------------------------------------------------------

/// Declarative synthetic sequence: camera, trajectory, primitives.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub camera: CameraModel,
    pub sequence: SequenceSpec,
    pub trajectory: Trajectory,
    pub prims: Vec<ScenePrim>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSpec {
    pub frames: usize,
    pub feat_width: usize,
    pub feat_height: usize,
    pub feat_dim: usize,
    #[serde(default)]
    pub noise_sigma: f64,
}

impl SceneSpec {
    pub fn load(path: &Path) -> Result<SceneSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| SplatError::io(path, e))?;
        toml::from_str(&text).map_err(|e| SplatError::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).expect("scene spec serializes");
        std::fs::write(path, text).map_err(|e| SplatError::io(path, e))
    }

    /// The staple demo: the canned room on a 30-frame orbit.
    pub fn demo(frames: usize, feat_dim: usize) -> SceneSpec {
        SceneSpec {
            camera: CameraModel {
                fx: 120.0,
                fy: 120.0,
                cx: 63.5,
                cy: 63.5,
                width: 128,
                height: 128,
                depth_scale: 5000.0,
            },
            sequence: SequenceSpec {
                frames,
                feat_width: 64,
                feat_height: 64,
                feat_dim,
                noise_sigma: 0.0,
            },
            trajectory: Trajectory::Orbit {
                center: [0.0, 0.0, 0.4],
                radius: 2.6,
                height: 1.6,
                arc_deg: 360.0,
            },
            prims: synth::demo_room().prims,
        }
    }

    pub fn source(&self, seed: u64) -> SyntheticSource {
        let scene = SyntheticScene {
            prims: self.prims.clone(),
        };
        let names = scene.class_names();
        let codebook = Codebook::generate(&names, self.sequence.feat_dim, seed);
        SyntheticSource {
            scene,
            trajectory: self.trajectory.clone(),
            camera: self.camera,
            codebook,
            frames: self.sequence.frames,
            feat_size: (self.sequence.feat_width, self.sequence.feat_height),
            noise: NoiseConfig {
                sigma: self.sequence.noise_sigma,
                seed,
            },
        }
    }
}

/// Render a synthetic sequence to disk (frames, masks, poses, codebook).
pub fn cmd_gen(spec_path: &Path, out_dir: &Path, seed: u64) -> Result<()> {
    let t0 = Instant::now();
    let spec = SceneSpec::load(spec_path)?;
    let source = spec.source(seed);
    std::fs::create_dir_all(out_dir).map_err(|e| SplatError::io(out_dir, e))?;
    synth::write_sequence(out_dir, &source, &source.codebook)?;
    spec.save(&out_dir.join("scene_spec.toml"))?;
    let mut manifest = RunManifest::new(
        "gen",
        seed,
        vec![spec_path.display().to_string()],
        out_dir,
    );
    manifest
        .timings_ms
        .insert("total".into(), t0.elapsed().as_secs_f64() * 1000.0);
    manifest.save(out_dir)?;
    println!(
        "generated {} frames ({}x{}) in {}",
        source.frames,
        source.camera.width,
        source.camera.height,
        out_dir.display()
    );
    Ok(())
}

// --- train-stage1 -----------------------------------------------------------------

/// Train the generalized compressor on feature vectors sampled from dumped
/// sequences; writes the codec file and reports the round-trip cosine.
pub fn cmd_train_stage1(
    seq_dirs: &[PathBuf],
    code_size: usize,
    out_path: &Path,
    iters: usize,
    seed: u64,
) -> Result<f64> {
    use rand::Rng;
    if seq_dirs.is_empty() {
        return Err(SplatError::Config("no sequence directories given".into()));
    }
    let mut corpus: Vec<f64> = Vec::new();
    let mut dim = 0usize;
    let mut rng = crate::rng::stream(seed, "stage1-corpus");
    let per_frame = 512usize;
    for dir in seq_dirs {
        let source = DumpSource::open(dir)?;
        for i in 0..source.len() {
            let bundle = source.frame(i)?;
            if dim == 0 {
                dim = bundle.feat_dim;
            } else if dim != bundle.feat_dim {
                return Err(SplatError::Contract("sequences have mixed feature dims".into()));
            }
            let n = bundle.feat_width * bundle.feat_height;
            let mut taken = 0usize;
            let mut attempts = 0usize;
            while taken < per_frame.min(n) && attempts < 4 * n {
                attempts += 1;
                let p = rng.gen_range(0..n);
                let v = &bundle.feature_gt_hi[p * dim..(p + 1) * dim];
                // background pixels carry a zero vector; skip them
                if v.iter().all(|x| x.abs() < 1e-12) {
                    continue;
                }
                corpus.extend(v.iter().map(|x| *x as f64));
                taken += 1;
            }
        }
    }
    let n = corpus.len() / dim.max(1);
    let (codec, _trace) =
        codec::train_stage1_offline(&corpus, dim, code_size, 4, iters, 256, 3e-3, seed)?;
    codec::save_codec(&codec, out_path)?;
    let eval_n = n.min(2048);
    let cosine = codec::eval_cosine(&codec, &corpus[..eval_n * dim], eval_n);
    println!(
        "trained {dim} -> {code_size} on {n} vectors; round-trip cosine {cosine:.4}; wrote {}",
        out_path.display()
    );
    Ok(cosine)
}

// --- run --------------------------------------------------------------------------

pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub result: mapper::PipelineResult,
}

/// Full pipeline over a dumped sequence; writes the map, trajectory,
/// deterministic metrics, timing table and manifest.
pub fn cmd_run(
    seq_dir: &Path,
    stage1_path: &Path,
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<RunArtifacts> {
    config.validate()?;
    let source = DumpSource::open(seq_dir)?;
    let stage1 = codec::load_codec(stage1_path)?;
    if stage1.input_dim() != config.codec.feat_dim || stage1.code_dim() != config.codec.code_mid {
        return Err(SplatError::Config(format!(
            "codec.feat_dim/code_mid ({}, {}) do not match the codec file ({}, {})",
            config.codec.feat_dim,
            config.codec.code_mid,
            stage1.input_dim(),
            stage1.code_dim()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| SplatError::io(out_dir, e))?;

    let t0 = Instant::now();
    let result = run_with_threads(&source, stage1, config)?;
    let total_ms = t0.elapsed().as_secs_f64() * 1000.0;

    save_field_ply(&result.field, &out_dir.join("map.ply"))?;
    mapper::save_trajectory(&out_dir.join("trajectory.txt"), &result.trajectory)?;
    let metrics = serde_json::to_string_pretty(&result.records).expect("records serialize");
    std::fs::write(out_dir.join("metrics.json"), metrics)
        .map_err(|e| SplatError::io(out_dir.join("metrics.json"), e))?;
    codec::save_codec(&result.codec.stage2, &out_dir.join("stage2.mlpc"))?;

    let mut timings = result.timings.clone();
    timings.insert("wall_total".into(), total_ms);
    let per_frame: BTreeMap<String, f64> = timings
        .iter()
        .map(|(k, v)| (format!("{k}_per_frame"), v / source.len() as f64))
        .collect();
    timings.extend(per_frame);
    let timing_text = serde_json::to_string_pretty(&timings).expect("timings serialize");
    std::fs::write(out_dir.join("timings.json"), timing_text)
        .map_err(|e| SplatError::io(out_dir.join("timings.json"), e))?;

    let mut manifest = RunManifest::new(
        "run",
        config.run.seed,
        vec![
            seq_dir.display().to_string(),
            stage1_path.display().to_string(),
        ],
        out_dir,
    );
    manifest.config = Some(config.clone());
    manifest.timings_ms = timings;
    manifest.save(out_dir)?;
    println!(
        "mapped {} frames into {} gaussians ({} keyframes); artifacts in {}",
        source.len(),
        result.field.count(),
        result.records.iter().filter(|r| r.keyframe).count(),
        out_dir.display()
    );
    Ok(RunArtifacts {
        out_dir: out_dir.to_path_buf(),
        result,
    })
}

/// Install the configured rayon pool (0 = default) around the pipeline.
pub fn run_with_threads(
    source: &dyn FrameSource,
    stage1: MlpCodec,
    config: &PipelineConfig,
) -> Result<mapper::PipelineResult> {
    if config.run.threads == 0 {
        run_pipeline(source, stage1, config)
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.run.threads)
            .build()
            .map_err(|e| SplatError::Contract(e.to_string()))?;
        pool.install(|| run_pipeline(source, stage1, config))
    }
}

// --- eval -------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryFrameEval {
    pub frame: usize,
    pub miou: f64,
    pub loc_hit: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryEval {
    pub query: String,
    pub frames: Vec<QueryFrameEval>,
    pub mean_miou: f64,
    pub loc_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Query3dEval {
    pub query: String,
    pub chamfer: Option<f64>,
    pub emd: Option<f64>,
    pub localized_points: usize,
    pub gt_points: usize,
    pub chamfer_failure: bool,
    pub emd_failure: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub eval_frames: Vec<usize>,
    /// None encodes infinite PSNR (identical images).
    pub psnr: Vec<Option<f64>>,
    pub ssim: Vec<f64>,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: f64,
    pub ate_rmse: Option<f64>,
    pub queries: Vec<QueryEval>,
    pub skipped_queries: Vec<String>,
    pub queries_3d: Vec<Query3dEval>,
    pub chamfer_mean: Option<f64>,
    pub chamfer_threshold: Option<f64>,
    pub chamfer_failures: usize,
    pub emd_mean: Option<f64>,
    pub emd_threshold: Option<f64>,
    pub emd_failures: usize,
}

/// Evaluate a finished run directory against its source sequence: 2D query
/// metrics, render quality, trajectory error, and the fused-mesh 3D
/// localization protocol.
pub fn cmd_eval(run_dir: &Path, queries_path: &Path, export_heatmaps: bool) -> Result<EvalReport> {
    let manifest_text = std::fs::read_to_string(run_dir.join("manifest.json"))
        .map_err(|e| SplatError::io(run_dir.join("manifest.json"), e))?;
    let manifest: RunManifest = serde_json::from_str(&manifest_text)
        .map_err(|e| SplatError::format(run_dir.join("manifest.json"), e.to_string()))?;
    let config = manifest
        .config
        .clone()
        .ok_or_else(|| SplatError::Contract("run manifest has no config".into()))?;
    let seq_dir = PathBuf::from(&manifest.inputs[0]);
    let stage1_path = PathBuf::from(&manifest.inputs[1]);

    let source = DumpSource::open(&seq_dir)?;
    let codebook = source.codebook()?;
    let camera = source.camera();
    let field = load_field_ply(&run_dir.join("map.ply"))?;
    let trajectory = mapper::load_trajectory(&run_dir.join("trajectory.txt"))?;
    let stage1 = codec::load_codec(&stage1_path)?;
    let stage2 = codec::load_codec(&run_dir.join("stage2.mlpc"))?;
    let mut codec2 = TwoStageCodec::new(stage1, &config.codec, config.run.seed);
    codec2.stage2 = stage2;

    let queries_text = std::fs::read_to_string(queries_path)
        .map_err(|e| SplatError::io(queries_path, e))?;
    let query_names: Vec<String> = queries_text
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect();
    let mut skipped = Vec::new();
    let mut queries = Vec::new();
    for q in &query_names {
        if codebook.index_of(q).is_none() {
            skipped.push(q.clone());
        } else {
            queries.push(q.clone());
        }
    }

    let stride = config.eval.frame_stride.max(1);
    let eval_frames: Vec<usize> = (0..source.len()).step_by(stride).collect();

    let heat_dir = run_dir.join("heatmaps");
    if export_heatmaps {
        std::fs::create_dir_all(&heat_dir).map_err(|e| SplatError::io(&heat_dir, e))?;
    }

    // 2D per-frame evaluation + TSDF fusion for the 3D protocol
    let mut psnr = Vec::new();
    let mut ssim = Vec::new();
    let mut per_query: BTreeMap<String, Vec<QueryFrameEval>> = BTreeMap::new();
    let (vol_origin, vol_dims) = fit_volume(&source, &trajectory, config.eval.tsdf_voxel_size)?;
    let k = config.codec.code_final;
    let mut volume = TsdfVolume::new(vol_origin, config.eval.tsdf_voxel_size, vol_dims, k);
    let n_classes = codebook.len();
    let mut gt_volume = TsdfVolume::new(vol_origin, config.eval.tsdf_voxel_size, vol_dims, n_classes);

    for &fi in &eval_frames {
        let bundle = source.frame(fi)?;
        let pose = trajectory
            .get(fi)
            .copied()
            .ok_or_else(|| SplatError::Contract(format!("trajectory missing frame {fi}")))?;
        let out = render_frame(&field, &camera, &pose, config.run.mode);
        psnr.push(finite_or_none(eval2d::psnr(&out.color, &bundle.color_gt)));
        ssim.push(eval2d::ssim_rgb(&out.color, &bundle.color_gt, camera.width, camera.height));

        let mask = source.mask(fi)?.ok_or_else(|| {
            SplatError::Contract(format!("sequence has no ground-truth mask for frame {fi}"))
        })?;
        for q in &queries {
            let class = codebook.index_of(q).expect("filtered") as u16;
            let gt_mask: Vec<bool> = mask.iter().map(|m| *m == class).collect();
            let visible = gt_mask.iter().filter(|m| **m).count();
            if visible < config.eval.min_mask_pixels {
                continue;
            }
            let query_vec = codebook.query_embedding(q)?;
            let rel = eval2d::relevancy_map(
                &out.feature,
                camera.width,
                camera.height,
                &codec2,
                &query_vec,
                config.eval.heatmap_kernel,
                config.eval.relevancy_threshold,
            )?;
            let bbox = eval2d::bbox_of_mask(&gt_mask, camera.width).expect("visible pixels");
            per_query.entry(q.clone()).or_default().push(QueryFrameEval {
                frame: fi,
                miou: eval2d::miou(&rel.mask, &gt_mask),
                loc_hit: eval2d::loc_hit(rel.peak, &bbox),
            });
            if export_heatmaps {
                save_heatmap_png(
                    &heat_dir.join(format!("{q}_{fi:06}.png")),
                    &rel.smoothed,
                    camera.width,
                    camera.height,
                )?;
            }
        }

        // fuse rendered depth + language for the 3D protocol, and the
        // ground-truth depth + one-hot class map for the reference mesh
        volume.integrate(&out.depth, &out.feature, k, &camera, &pose)?;
        let mut onehot = vec![0.0f64; camera.width * camera.height * n_classes];
        for (p, m) in mask.iter().enumerate() {
            if *m != MASK_BACKGROUND {
                onehot[p * n_classes + *m as usize] = 1.0;
            }
        }
        let gt_pose = bundle
            .pose_gt
            .ok_or_else(|| SplatError::Contract("sequence lacks ground-truth poses".into()))?;
        gt_volume.integrate(&bundle.depth_gt, &onehot, n_classes, &camera, &gt_pose)?;
    }

    let queries_2d: Vec<QueryEval> = per_query
        .into_iter()
        .map(|(query, frames)| {
            let mean_miou = frames.iter().map(|f| f.miou).sum::<f64>() / frames.len() as f64;
            let loc_accuracy =
                frames.iter().filter(|f| f.loc_hit).count() as f64 / frames.len() as f64;
            QueryEval {
                query,
                frames,
                mean_miou,
                loc_accuracy,
            }
        })
        .collect();

    // trajectory error against the ground truth
    let gt_poses: Vec<PoseSE3> = (0..source.len())
        .map(|i| {
            source.frame(i).and_then(|b| {
                b.pose_gt
                    .ok_or_else(|| SplatError::Contract("missing gt pose".into()))
            })
        })
        .collect::<Result<_>>()?;
    let est_centers: Vec<Vector3<f64>> =
        trajectory.iter().map(|p| p.inverse().translation).collect();
    let gt_centers: Vec<Vector3<f64>> = gt_poses.iter().map(|p| p.inverse().translation).collect();
    let ate = eval2d::ate_rmse(&est_centers, &gt_centers).ok();

    // 3D localization protocol
    let mesh = eval3d::marching_cubes(&volume);
    let gt_mesh = eval3d::marching_cubes(&gt_volume);
    eval3d::save_mesh_ply(&mesh, &run_dir.join("mesh.ply"))?;
    let mut rng = crate::rng::stream(config.run.seed, "emd-subsample");
    let mut queries_3d = Vec::new();
    let mut cd_list = Vec::new();
    let mut emd_list = Vec::new();
    for q in &queries {
        let class = codebook.index_of(q).expect("filtered");
        let query_vec = codebook.query_embedding(q)?;
        let localized = eval3d::localize_query_3d(
            &mesh,
            &codec2,
            &query_vec,
            config.eval.relevancy_threshold,
        )?;
        let gt_points = gt_class_points(&gt_mesh, class, n_classes);
        let (cd, em) = if localized.is_empty() || gt_points.is_empty() {
            (None, None)
        } else {
            (
                Some(eval3d::chamfer(&localized, &gt_points)?),
                Some(eval3d::emd(&localized, &gt_points, config.eval.emd_cap, &mut rng)?),
            )
        };
        cd_list.push(cd);
        emd_list.push(em);
        queries_3d.push(Query3dEval {
            query: q.clone(),
            chamfer: cd,
            emd: em,
            localized_points: localized.len(),
            gt_points: gt_points.len(),
            chamfer_failure: false,
            emd_failure: false,
        });
    }
    let (cd_outcome, emd_outcome) = if queries.len() >= 2 {
        let cd_o = eval3d::apply_failure_rule(&cd_list)?;
        let emd_o = eval3d::apply_failure_rule(&emd_list)?;
        for (i, q) in queries_3d.iter_mut().enumerate() {
            q.chamfer_failure = cd_list[i].map_or(true, |d| d > cd_o.threshold);
            q.emd_failure = emd_list[i].map_or(true, |d| d > emd_o.threshold);
        }
        (Some(cd_o), Some(emd_o))
    } else {
        (None, None)
    };

    let finite_psnr: Vec<f64> = psnr.iter().flatten().copied().collect();
    let report = EvalReport {
        eval_frames,
        mean_psnr: if finite_psnr.is_empty() {
            None
        } else {
            Some(finite_psnr.iter().sum::<f64>() / finite_psnr.len() as f64)
        },
        mean_ssim: ssim.iter().sum::<f64>() / ssim.len().max(1) as f64,
        psnr,
        ssim,
        ate_rmse: ate,
        queries: queries_2d,
        skipped_queries: skipped,
        queries_3d,
        chamfer_mean: cd_outcome.as_ref().and_then(|o| o.mean),
        chamfer_threshold: cd_outcome.as_ref().map(|o| o.threshold),
        chamfer_failures: cd_outcome.as_ref().map_or(0, |o| o.failures),
        emd_mean: emd_outcome.as_ref().and_then(|o| o.mean),
        emd_threshold: emd_outcome.as_ref().map(|o| o.threshold),
        emd_failures: emd_outcome.as_ref().map_or(0, |o| o.failures),
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(run_dir.join("eval_report.json"), text)
        .map_err(|e| SplatError::io(run_dir.join("eval_report.json"), e))?;
    println!(
        "evaluated {} frames, {} queries ({} skipped); ATE {:?} m",
        report.eval_frames.len(),
        report.queries.len(),
        report.skipped_queries.len(),
        report.ate_rmse
    );
    Ok(report)
}

fn finite_or_none(v: f64) -> Option<f64> {
    if v.is_finite() {
        Some(v)
    } else {
        None
    }
}

/// Vertices of the ground-truth mesh whose dominant fused class matches.
fn gt_class_points(
    mesh: &eval3d::FeatureMesh,
    class: usize,
    n_classes: usize,
) -> Vec<Vector3<f64>> {
    let mut out = Vec::new();
    for (i, v) in mesh.vertices.iter().enumerate() {
        let f = &mesh.features[i * n_classes..(i + 1) * n_classes];
        let mut best = 0usize;
        for c in 1..n_classes {
            if f[c] > f[best] {
                best = c;
            }
        }
        if best == class && f[best] > 0.3 {
            out.push(*v);
        }
    }
    out
}

/// Volume bounds covering every camera frustum to its depth range.
fn fit_volume(
    source: &DumpSource,
    trajectory: &[PoseSE3],
    voxel: f64,
) -> Result<(Vector3<f64>, [usize; 3])> {
    let camera = source.camera();
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for (i, pose) in trajectory.iter().enumerate() {
        let bundle = source.frame(i)?;
        let inv = pose.inverse();
        let max_d = bundle.depth_gt.iter().cloned().fold(0.0, f64::max).max(0.5);
        for (u, v) in [
            (0.0, 0.0),
            (camera.width as f64 - 1.0, 0.0),
            (0.0, camera.height as f64 - 1.0),
            (camera.width as f64 - 1.0, camera.height as f64 - 1.0),
            (camera.cx, camera.cy),
        ] {
            for d in [0.05, max_d] {
                let p = inv.transform(&(camera.ray_dir(u, v) * d));
                lo = lo.inf(&p);
                hi = hi.sup(&p);
            }
        }
    }
    let lo = lo - Vector3::repeat(voxel);
    let hi = hi + Vector3::repeat(voxel);
    let dims = [
        ((hi.x - lo.x) / voxel).ceil().max(2.0) as usize,
        ((hi.y - lo.y) / voxel).ceil().max(2.0) as usize,
        ((hi.z - lo.z) / voxel).ceil().max(2.0) as usize,
    ];
    Ok((lo, dims))
}

fn save_heatmap_png(path: &Path, map: &[f64], width: usize, height: usize) -> Result<()> {
    // three-stop blue → green → red over relevancy [-1, 1]
    let mut bytes = Vec::with_capacity(width * height * 3);
    for v in map {
        let t = ((v + 1.0) * 0.5).clamp(0.0, 1.0);
        let (r, g, b) = if t < 0.5 {
            let s = t * 2.0;
            (0.0, s, 1.0 - s)
        } else {
            let s = (t - 0.5) * 2.0;
            (s, 1.0 - s, 0.0)
        };
        bytes.push((r * 255.0) as u8);
        bytes.push((g * 255.0) as u8);
        bytes.push((b * 255.0) as u8);
    }
    let img = image::RgbImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| SplatError::Contract("heatmap buffer mismatch".into()))?;
    img.save(path)
        .map_err(|e| SplatError::format(path, e.to_string()))
}

// --- bench ------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub gaussians: usize,
    pub width: usize,
    pub height: usize,
    pub iterations: usize,
    pub threads: Vec<BenchThreadRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchThreadRow {
    pub threads: usize,
    pub forward_median_ms: f64,
    pub forward_p95_ms: f64,
    pub forward_backward_median_ms: f64,
    pub forward_backward_p95_ms: f64,
    /// Image checksum; identical across thread counts.
    pub checksum: String,
}

/// Time forward and forward+backward over a random field at a given
/// resolution, sweeping thread counts. The checksum proves the output is
/// bit-identical regardless of parallelism.
pub fn cmd_bench(
    gaussians: usize,
    width: usize,
    height: usize,
    iterations: usize,
    threads: &[usize],
    seed: u64,
) -> Result<BenchReport> {
    use rand::Rng;
    let k = 15usize;
    let camera = CameraModel {
        fx: width as f64 * 0.9,
        fy: width as f64 * 0.9,
        cx: (width as f64 - 1.0) / 2.0,
        cy: (height as f64 - 1.0) / 2.0,
        width,
        height,
        depth_scale: 5000.0,
    };
    let mut rng = crate::rng::stream(seed, "bench-field");
    let mut field = GaussianField::new(k, gaussians);
    for _ in 0..gaussians {
        field.push(&crate::scene::GaussianInit {
            mean: Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(2.0..5.0),
            ),
            rotation: crate::geom::quat_normalize(&[
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]),
            log_scale: Vector3::new(
                rng.gen_range(-4.2..-3.2),
                rng.gen_range(-4.2..-3.2),
                rng.gen_range(-4.2..-3.2),
            ),
            opacity_logit: rng.gen_range(-1.0..2.0),
            color: [rng.gen(), rng.gen(), rng.gen()],
            feature: (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        });
    }
    let pose = PoseSE3::identity();
    let npix = width * height;
    let color_t: Vec<f64> = (0..npix * 3).map(|_| rng.gen()).collect();
    let depth_t: Vec<f64> = (0..npix).map(|_| rng.gen_range(1.0..5.0)).collect();
    let feat_t: Vec<f64> = (0..npix * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let weights = crate::grad::LossWeights::default();

    let mut rows = Vec::new();
    for &t in threads {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| SplatError::Contract(e.to_string()))?;
        let (fw, fb, checksum) = pool.install(|| {
            let mut fw = Vec::with_capacity(iterations);
            let mut fb = Vec::with_capacity(iterations);
            let mut checksum = 0u64;
            for _ in 0..iterations {
                let t0 = Instant::now();
                let out = render_frame(&field, &camera, &pose, crate::config::OptimMode::Disentangled);
                fw.push(t0.elapsed().as_secs_f64() * 1000.0);
                checksum = image_checksum(&out.color) ^ image_checksum(&out.feature);

                let t1 = Instant::now();
                let out2 = render_frame(&field, &camera, &pose, crate::config::OptimMode::Disentangled);
                let targets = crate::grad::RenderTargets {
                    color: &color_t,
                    depth: &depth_t,
                    feature: &feat_t,
                };
                let _g = crate::grad::backward_disentangled(
                    &out2, &field, &camera, &pose, &targets, &weights,
                )
                .expect("bench backward");
                fb.push(t1.elapsed().as_secs_f64() * 1000.0);
            }
            (fw, fb, checksum)
        });
        rows.push(BenchThreadRow {
            threads: t,
            forward_median_ms: median(&fw),
            forward_p95_ms: p95(&fw),
            forward_backward_median_ms: median(&fb),
            forward_backward_p95_ms: p95(&fb),
            checksum: format!("{checksum:016x}"),
        });
        println!(
            "threads {t}: forward {:.1} ms, forward+backward {:.1} ms (median), checksum {}",
            rows.last().unwrap().forward_median_ms,
            rows.last().unwrap().forward_backward_median_ms,
            rows.last().unwrap().checksum
        );
    }
    Ok(BenchReport {
        gaussians,
        width,
        height,
        iterations,
        threads: rows,
    })
}

fn image_checksum(data: &[f64]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for v in data {
        h ^= v.to_bits();
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn p95(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v[((v.len() as f64 * 0.95) as usize).min(v.len() - 1)]
}
