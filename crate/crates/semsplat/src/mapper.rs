//! The online mapping loop: per-frame camera tracking, keyframe selection
//! with dual-modality co-visibility, Gaussian insertion from back-projected
//! depth, windowed map optimization, and dual-opacity pruning.

use crate::codec::{MlpCodec, TwoStageCodec};
use crate::config::{OptimMode, PipelineConfig};
use crate::error::{Result, SplatError};
use crate::geom;
use crate::grad::{
    adam_step, backward_disentangled, backward_joint, loss_total, AdamState, FieldGradients,
    FieldLearningRates, LossWeights, PoseAdam, RenderTargets,
};
use crate::render::{render_for_tracking, render_frame, RenderOutput};
use crate::scene::{CameraModel, FrameBundle, GaussianField, GaussianInit, Mode, PoseSE3};
use crate::synth::FrameSource;
use nalgebra::Vector3;
use rand::Rng;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

/// Cached optimization targets for one keyframe.
#[derive(Debug, Clone)]
pub struct KeyframeEntry {
    pub frame_index: usize,
    pub pose: PoseSE3,
    pub color: Vec<f64>,
    pub depth: Vec<f64>,
    /// Compressed language target at render resolution (H×W×K).
    pub feature_k: Vec<f64>,
}

/// Sliding window of recent keyframes; the oldest entry leaves first.
#[derive(Debug, Clone, Default)]
pub struct KeyframeWindow {
    entries: Vec<KeyframeEntry>,
    max_size: usize,
}

impl KeyframeWindow {
    pub fn new(max_size: usize) -> Self {
        KeyframeWindow {
            entries: Vec::new(),
            max_size: max_size.max(1),
        }
    }

    pub fn push(&mut self, entry: KeyframeEntry) {
        if let Some(last) = self.entries.last() {
            assert!(entry.frame_index > last.frame_index, "keyframe indices must increase");
        }
        self.entries.push(entry);
        if self.entries.len() > self.max_size {
            self.entries.remove(0);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[KeyframeEntry] {
        &self.entries
    }

    /// Update the stored pose of a keyframe (after tracking refinement).
    pub fn entry_mut(&mut self, i: usize) -> &mut KeyframeEntry {
        &mut self.entries[i]
    }
}

/// Pose tracking bookkeeping across the run.
#[derive(Debug, Clone)]
pub struct TrackingState {
    pub pose: PoseSE3,
    pub prev_pose: Option<PoseSE3>,
    pub iterations: usize,
    pub converged: bool,
    pub trajectory: Vec<PoseSE3>,
}

impl Default for TrackingState {
    fn default() -> Self {
        TrackingState {
            pose: PoseSE3::identity(),
            prev_pose: None,
            iterations: 0,
            converged: false,
            trajectory: Vec::new(),
        }
    }
}

impl TrackingState {
    /// Constant-velocity initialization from the previous two poses.
    pub fn predict(&self) -> PoseSE3 {
        match self.prev_pose {
            Some(prev) => self.pose.compose(&prev.inverse()).compose(&self.pose),
            None => self.pose,
        }
    }

    pub fn advance(&mut self, pose: PoseSE3) {
        // no velocity estimate until two real poses exist
        self.prev_pose = if self.trajectory.is_empty() {
            None
        } else {
            Some(self.pose)
        };
        self.pose = pose;
        self.trajectory.push(pose);
    }
}

/// Minimize the photometric + depth loss over the camera pose by iterated
/// render / pose-twist Adam steps (color-mode geometry only). Returns the
/// refined pose, iterations used, the final loss, and a convergence flag.
pub fn track_frame(
    field: &GaussianField,
    frame: &FrameBundle,
    camera: &CameraModel,
    init_pose: &PoseSE3,
    cfg: &PipelineConfig,
) -> (PoseSE3, usize, f64, bool) {
    if field.is_empty() {
        return (*init_pose, 0, 0.0, false);
    }
    let weights = LossWeights {
        lambda_feat: 0.0,
        ..cfg.loss.clone()
    };
    // Adam on an L1 objective is not monotone per iteration, so early stop
    // watches the best loss seen with a patience window and the best pose
    // is what gets returned.
    const PATIENCE: usize = 8;
    // final third of the budget polishes from the best pose with a reset
    // optimizer and a much smaller step
    let polish_at = cfg.mapper.tracking_iters - cfg.mapper.tracking_iters / 3;
    let empty_feat: Vec<f64> = Vec::new();
    let mut pose = *init_pose;
    let mut adam = PoseAdam::default();
    let mut best_pose = pose;
    let mut best_loss = f64::INFINITY;
    let mut best_it = 0usize;
    let mut first_loss = None;
    let mut iters = 0;
    let mut early = false;
    let mut lr_scale = 1.0;
    let mut phase_start = 0usize;
    for it in 0..cfg.mapper.tracking_iters {
        if it == polish_at && it > 0 {
            pose = best_pose;
            adam = PoseAdam::default();
            lr_scale = 0.1;
            phase_start = it;
        }
        let out = render_for_tracking(field, camera, &pose, cfg.run.mode);
        let targets = RenderTargets {
            color: &frame.color_gt,
            depth: &frame.depth_gt,
            feature: &empty_feat,
        };
        let grads = match cfg.run.mode {
            OptimMode::Disentangled => {
                backward_disentangled(&out, field, camera, &pose, &targets, &weights)
            }
            OptimMode::Joint => backward_joint(&out, field, camera, &pose, &targets, &weights),
        }
        .expect("tracking backward");
        let loss = loss_total(&out, field, &targets, &weights)
            .expect("tracking loss")
            .photo_depth();
        first_loss.get_or_insert(loss);
        iters = it + 1;
        if loss < best_loss {
            let improvement = best_loss - loss;
            best_loss = loss;
            best_pose = pose;
            if improvement >= cfg.mapper.tracking_early_stop {
                best_it = it;
            }
        }
        if it - best_it >= PATIENCE && it >= polish_at {
            early = true;
            break;
        }
        // decay the step size so the L1 endgame settles instead of cycling
        let decay = lr_scale * cfg.mapper.tracking_lr_decay.powi((it - phase_start) as i32);
        let twist = adam.step(
            &grads.pose,
            cfg.mapper.lr_pose_rot * decay,
            cfg.mapper.lr_pose_trans * decay,
        );
        pose = pose.retract(&twist);
    }
    let converged = early && first_loss.map_or(false, |f| best_loss < f);
    (best_pose, iters, best_loss, converged)
}

/// Fraction of pixels whose accumulated alpha is below the coverage cutoff,
/// per mode. An empty field is fully novel.
pub fn covisibility_novelty(out: &RenderOutput, coverage_alpha: f64) -> (f64, f64) {
    let n = (out.width * out.height) as f64;
    let nc = out
        .alpha_acc_c
        .iter()
        .filter(|a| **a < coverage_alpha)
        .count() as f64
        / n;
    let nf = out
        .alpha_acc_f
        .iter()
        .filter(|a| **a < coverage_alpha)
        .count() as f64
        / n;
    (nc, nf)
}

/// A frame becomes a keyframe when BOTH modalities see enough novel area,
/// or when too many frames passed since the last keyframe.
pub fn select_keyframe(novelty: (f64, f64), frames_since_last: usize, cfg: &PipelineConfig) -> bool {
    (novelty.0 > cfg.mapper.novelty_threshold && novelty.1 > cfg.mapper.novelty_threshold)
        || frames_since_last > cfg.mapper.max_keyframe_gap
}

/// Spawn Gaussians for uncovered pixels on a stride grid, back-projecting
/// the depth image. Both modes start identical: opacity logit 0, isotropic
/// scale depth·stride/fx, identity rotation.
pub fn insert_gaussians(
    field: &mut GaussianField,
    frame: &FrameBundle,
    pose: &PoseSE3,
    feature_target_k: &[f64],
    alpha_acc_c: &[f64],
    camera: &CameraModel,
    cfg: &PipelineConfig,
) -> usize {
    let k = field.feat_dim();
    let stride = cfg.mapper.insert_stride;
    let cam_to_world = pose.inverse();
    let mut inserted = 0;
    for y in (0..camera.height).step_by(stride) {
        for x in (0..camera.width).step_by(stride) {
            let p = y * camera.width + x;
            if alpha_acc_c[p] >= cfg.mapper.coverage_alpha {
                continue;
            }
            let d = frame.depth_gt[p];
            if d <= 0.0 {
                continue;
            }
            let p_cam = camera.ray_dir(x as f64, y as f64) * d;
            let mean = cam_to_world.transform(&p_cam);
            let scale = (d * stride as f64 / camera.fx).max(1e-4);
            field.push(&GaussianInit {
                mean,
                rotation: geom::QUAT_IDENTITY,
                log_scale: Vector3::repeat(scale.ln()),
                opacity_logit: 0.0,
                color: [
                    frame.color_gt[p * 3],
                    frame.color_gt[p * 3 + 1],
                    frame.color_gt[p * 3 + 2],
                ],
                feature: feature_target_k[p * k..(p + 1) * k].to_vec(),
            });
            inserted += 1;
        }
    }
    inserted
}

/// Windowed map optimization: `iters` rounds of render → backward → Adam
/// step, sampling window keyframes round-robin. Returns per-iteration
/// losses.
pub fn optimize_window(
    field: &mut GaussianField,
    window: &KeyframeWindow,
    camera: &CameraModel,
    state: &mut AdamState,
    cfg: &PipelineConfig,
    iters: usize,
) -> Vec<f64> {
    if window.is_empty() || field.is_empty() {
        return Vec::new();
    }
    let lr = FieldLearningRates {
        mean: cfg.mapper.lr_mean,
        rot: cfg.mapper.lr_rot,
        scale: cfg.mapper.lr_scale,
        opacity: cfg.mapper.lr_opacity,
        color: cfg.mapper.lr_color,
        feature: cfg.mapper.lr_feature,
    };
    let mut losses = Vec::with_capacity(iters);
    for it in 0..iters {
        let entry = &window.entries()[it % window.len()];
        let out = render_frame(field, camera, &entry.pose, cfg.run.mode);
        let targets = RenderTargets {
            color: &entry.color,
            depth: &entry.depth,
            feature: &entry.feature_k,
        };
        let grads: FieldGradients = match cfg.run.mode {
            OptimMode::Disentangled => {
                backward_disentangled(&out, field, camera, &entry.pose, &targets, &cfg.loss)
            }
            OptimMode::Joint => {
                backward_joint(&out, field, camera, &entry.pose, &targets, &cfg.loss)
            }
        }
        .expect("mapping backward");
        losses.push(
            loss_total(&out, field, &targets, &cfg.loss)
                .expect("mapping loss")
                .total(),
        );
        adam_step(field, &grads, state, &lr);
    }
    losses
}

/// Remove Gaussians whose opacity fell below the threshold in BOTH modes
/// (single mode in joint runs). Returns the number removed.
pub fn prune(
    field: &mut GaussianField,
    state: &mut AdamState,
    cfg: &PipelineConfig,
) -> usize {
    let thr = cfg.mapper.prune_alpha_thresh;
    let joint = cfg.run.mode == OptimMode::Joint;
    let keep: Vec<bool> = (0..field.count())
        .map(|i| {
            let ac = field.opacity_at(i, Mode::Color);
            if joint {
                ac >= thr
            } else {
                ac >= thr || field.opacity_at(i, Mode::Language) >= thr
            }
        })
        .collect();
    let feat_dim = field.feat_dim();
    let removed = field.retain_by_mask(&keep);
    if removed > 0 {
        state.retain_by_mask(&keep, feat_dim);
    }
    removed
}

/// Nearest-neighbor resample of an Hs×Ws×C map to Hd×Wd.
pub fn resize_nearest(
    src: &[f64],
    sw: usize,
    sh: usize,
    c: usize,
    dw: usize,
    dh: usize,
) -> Vec<f64> {
    if (sw, sh) == (dw, dh) {
        return src.to_vec();
    }
    let mut out = vec![0.0; dw * dh * c];
    for y in 0..dh {
        let sy = (y * sh) / dh;
        for x in 0..dw {
            let sx = (x * sw) / dw;
            out[(y * dw + x) * c..(y * dw + x + 1) * c]
                .copy_from_slice(&src[(sy * sw + sx) * c..(sy * sw + sx + 1) * c]);
        }
    }
    out
}

/// Per-frame log entry; everything here is deterministic under a fixed
/// seed.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub keyframe: bool,
    pub novelty_color: f64,
    pub novelty_language: f64,
    pub track_iters: usize,
    pub track_converged: bool,
    pub track_loss: f64,
    pub olae_loss: Option<f64>,
    pub inserted: usize,
    pub pruned: usize,
    pub gaussians: usize,
    pub map_loss_first: Option<f64>,
    pub map_loss_last: Option<f64>,
}

/// Wall-clock per stage, milliseconds. Not part of the deterministic
/// outputs.
pub type StageTimings = BTreeMap<String, f64>;

pub struct PipelineResult {
    pub field: GaussianField,
    /// World-to-camera pose per frame.
    pub trajectory: Vec<PoseSE3>,
    pub records: Vec<FrameRecord>,
    pub codec: TwoStageCodec,
    pub timings: StageTimings,
}

/// Run the full online loop over a frame source: compress features, track,
/// decide keyframes, insert, optimize the window, prune.
pub fn run_pipeline(
    source: &dyn FrameSource,
    stage1: MlpCodec,
    cfg: &PipelineConfig,
) -> Result<PipelineResult> {
    if source.is_empty() {
        return Err(SplatError::Contract("frame source is empty".into()));
    }
    cfg.validate()?;
    let camera = source.camera();
    camera.validate()?;
    let k = cfg.codec.code_final;
    let mut field = GaussianField::new(k, 4096);
    let mut adam = AdamState::new(&field);
    let mut codec = TwoStageCodec::new(stage1, &cfg.codec, cfg.run.seed);
    let mut window = KeyframeWindow::new(cfg.mapper.window_size);
    let mut tracking = TrackingState::default();
    let mut records = Vec::with_capacity(source.len());
    let mut timings: StageTimings = BTreeMap::new();
    let mut noise_rng = crate::rng::stream(cfg.run.seed, "pose-init-noise");
    let mut last_keyframe: Option<usize> = None;

    let add_time = |timings: &mut StageTimings, key: &str, t0: Instant| {
        *timings.entry(key.to_string()).or_insert(0.0) += t0.elapsed().as_secs_f64() * 1000.0;
    };

    for i in 0..source.len() {
        let t_frame = Instant::now();
        let bundle = source
            .frame(i)
            .map_err(|e| SplatError::Contract(format!("frame {i}: {e}")))?;

        // pose initialization: ground truth + optional noise for
        // robustness studies, otherwise constant velocity
        let init_pose = if cfg.mapper.pose_init_trans_noise > 0.0
            || cfg.mapper.pose_init_rot_noise_deg > 0.0
        {
            let gt = bundle.pose_gt.ok_or_else(|| {
                SplatError::Contract("pose_init noise requires ground-truth poses".into())
            })?;
            perturb_pose(
                &gt,
                cfg.mapper.pose_init_trans_noise,
                cfg.mapper.pose_init_rot_noise_deg,
                &mut noise_rng,
            )
        } else if i == 0 {
            bundle.pose_gt.unwrap_or_else(PoseSE3::identity)
        } else {
            tracking.predict()
        };

        // online compressor step (after init, every frame)
        let mut olae_loss = None;
        if codec.initialized {
            let t0 = Instant::now();
            olae_loss = Some(codec.step_online(&bundle.feature_gt_hi, bundle.feat_dim)?);
            add_time(&mut timings, "olae_step", t0);
        }

        // track against the current map
        let t0 = Instant::now();
        let (pose, track_iters, track_loss, converged) =
            track_frame(&field, &bundle, &camera, &init_pose, cfg);
        add_time(&mut timings, "tracking", t0);

        // co-visibility in both modalities
        let t0 = Instant::now();
        let covis = render_frame(&field, &camera, &pose, cfg.run.mode);
        let novelty = covisibility_novelty(&covis, cfg.mapper.coverage_alpha);
        add_time(&mut timings, "covisibility", t0);
        let gap = last_keyframe.map_or(usize::MAX, |kf| i - kf);
        let is_keyframe = select_keyframe(novelty, gap, cfg);

        let mut inserted = 0;
        let mut pruned = 0;
        let mut map_losses = Vec::new();
        if is_keyframe {
            last_keyframe = Some(i);
            let t0 = Instant::now();
            codec.buffer_keyframe(&bundle.feature_gt_hi, bundle.feat_dim, i)?;
            if !codec.initialized {
                codec.init_online()?;
            }
            add_time(&mut timings, "olae_keyframe", t0);

            // compress the language target and lift it to render resolution
            let t0 = Instant::now();
            let n_feat = bundle.feat_width * bundle.feat_height;
            let hi: Vec<f64> = bundle.feature_gt_hi.iter().map(|v| *v as f64).collect();
            let codes = codec.encode2(&hi, n_feat)?;
            let feature_k = resize_nearest(
                &codes,
                bundle.feat_width,
                bundle.feat_height,
                k,
                camera.width,
                camera.height,
            );
            add_time(&mut timings, "encode", t0);

            let t0 = Instant::now();
            inserted = insert_gaussians(
                &mut field,
                &bundle,
                &pose,
                &feature_k,
                &covis.alpha_acc_c,
                &camera,
                cfg,
            );
            adam.grow_to(&field);
            add_time(&mut timings, "insertion", t0);

            window.push(KeyframeEntry {
                frame_index: i,
                pose,
                color: bundle.color_gt.clone(),
                depth: bundle.depth_gt.clone(),
                feature_k,
            });

            let t0 = Instant::now();
            map_losses = optimize_window(
                &mut field,
                &window,
                &camera,
                &mut adam,
                cfg,
                cfg.mapper.mapping_iters,
            );
            add_time(&mut timings, "map_optimization", t0);

            let t0 = Instant::now();
            pruned = prune(&mut field, &mut adam, cfg);
            add_time(&mut timings, "pruning", t0);
        }

        tracking.advance(pose);
        tracking.iterations = track_iters;
        tracking.converged = converged;
        records.push(FrameRecord {
            frame: i,
            keyframe: is_keyframe,
            novelty_color: novelty.0,
            novelty_language: novelty.1,
            track_iters,
            track_converged: converged,
            track_loss,
            olae_loss,
            inserted,
            pruned,
            gaussians: field.count(),
            map_loss_first: map_losses.first().copied(),
            map_loss_last: map_losses.last().copied(),
        });
        add_time(&mut timings, "total", t_frame);
    }

    Ok(PipelineResult {
        field,
        trajectory: tracking.trajectory,
        records,
        codec,
        timings,
    })
}

/// Perturb the camera center by `trans_m` meters in a random direction and
/// the orientation by `rot_deg` degrees about a random axis.
pub fn perturb_pose(
    gt: &PoseSE3,
    trans_m: f64,
    rot_deg: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> PoseSE3 {
    let rand_dir = |rng: &mut rand_chacha::ChaCha8Rng| loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        if v.norm() > 1e-6 {
            break v.normalize();
        }
    };
    let dir = rand_dir(rng);
    let axis = rand_dir(rng);
    let c2w = gt.inverse();
    let d_rot = geom::so3_exp(&(axis * rot_deg.to_radians()));
    let perturbed = PoseSE3 {
        rotation: c2w.rotation * d_rot,
        translation: c2w.translation + dir * trans_m,
    };
    perturbed.inverse()
}

// --- trajectory files --------------------------------------------------------------

/// Write one line per frame: `index tx ty tz qx qy qz qw` (camera-to-world).
pub fn save_trajectory(path: &Path, poses: &[PoseSE3]) -> Result<()> {
    let mut out = String::new();
    for (i, p) in poses.iter().enumerate() {
        let c2w = p.inverse();
        let q = geom::rot_to_quat(&c2w.rotation);
        let t = c2w.translation;
        out.push_str(&format!(
            "{i} {:?} {:?} {:?} {:?} {:?} {:?} {:?}\n",
            t.x, t.y, t.z, q[1], q[2], q[3], q[0]
        ));
    }
    std::fs::write(path, out).map_err(|e| SplatError::io(path, e))
}

/// Read a trajectory file back as world-to-camera poses.
pub fn load_trajectory(path: &Path) -> Result<Vec<PoseSE3>> {
    let text = std::fs::read_to_string(path).map_err(|e| SplatError::io(path, e))?;
    let mut poses = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .skip(1)
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| SplatError::format(path, format!("line {}: {e}", ln + 1)))?;
        if vals.len() != 7 {
            return Err(SplatError::format(path, format!("line {}: expected 7 pose values", ln + 1)));
        }
        let q = geom::quat_normalize(&[vals[6], vals[3], vals[4], vals[5]]);
        let c2w = PoseSE3 {
            rotation: geom::quat_to_rot(&q),
            translation: Vector3::new(vals[0], vals[1], vals[2]),
        };
        poses.push(c2w.inverse());
    }
    Ok(poses)
}
