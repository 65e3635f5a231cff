//! Pipeline configuration.
//!
//! Flat `key = value` text with bracketed sections. Unknown keys are
//! rejected so typos fail fast. Any key can be overridden through the
//! environment as `SEMSPLAT_<SECTION>_<KEY>`.

use crate::error::{Result, SplatError};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const ENV_PREFIX: &str = "SEMSPLAT_";

/// Which optimization scheme a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimMode {
    /// Separate rotation/scale/opacity per modality, shared means.
    Disentangled,
    /// One shared parameter set; language gradients entangle with color.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub mode: OptimMode,
    /// 0 = use all available cores.
    pub threads: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 1,
            mode: OptimMode::Disentangled,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    /// λ: photometric weight; depth gets (1 - λ).
    pub lambda_photo: f64,
    pub lambda_feat: f64,
    pub lambda_iso: f64,
    pub lambda_scale_tie: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            lambda_photo: 0.9,
            lambda_feat: 1.0,
            lambda_iso: 0.01,
            lambda_scale_tie: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapperSection {
    pub window_size: usize,
    pub tracking_iters: usize,
    pub tracking_early_stop: f64,
    /// Per-iteration multiplier on the pose learning rates.
    pub tracking_lr_decay: f64,
    /// Optimization iterations per accepted keyframe.
    pub mapping_iters: usize,
    /// A frame must be at least this novel in both modes to become a keyframe.
    pub novelty_threshold: f64,
    /// Accumulated alpha below this counts a pixel as uncovered.
    pub coverage_alpha: f64,
    pub max_keyframe_gap: usize,
    pub insert_stride: usize,
    pub prune_alpha_thresh: f64,
    /// Per-frame pose initialization noise for synthetic robustness runs
    /// (meters / degrees); 0 = constant-velocity initialization.
    pub pose_init_trans_noise: f64,
    pub pose_init_rot_noise_deg: f64,
    pub lr_mean: f64,
    pub lr_rot: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub lr_feature: f64,
    pub lr_pose_rot: f64,
    pub lr_pose_trans: f64,
}

impl Default for MapperSection {
    fn default() -> Self {
        MapperSection {
            window_size: 8,
            tracking_iters: 40,
            tracking_early_stop: 1e-6,
            tracking_lr_decay: 0.98,
            mapping_iters: 60,
            novelty_threshold: 0.10,
            coverage_alpha: 0.5,
            max_keyframe_gap: 30,
            insert_stride: 4,
            prune_alpha_thresh: 0.05,
            pose_init_trans_noise: 0.0,
            pose_init_rot_noise_deg: 0.0,
            lr_mean: 1e-3,
            lr_rot: 2e-3,
            lr_scale: 5e-3,
            lr_opacity: 5e-2,
            lr_color: 2.5e-2,
            lr_feature: 2.5e-2,
            lr_pose_rot: 2e-3,
            lr_pose_trans: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    /// Input feature dimension D.
    pub feat_dim: usize,
    /// Intermediate code width of the pretrained stage.
    pub code_mid: usize,
    /// Final code width K of the online stage.
    pub code_final: usize,
    pub init_iters: usize,
    /// Keyframes buffered for the initial online training phase.
    pub init_keyframes: usize,
    /// Random past keyframes mixed into every online step.
    pub replay_keyframes: usize,
    pub samples_per_keyframe: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub plateau_threshold: f64,
    pub plateau_window: usize,
    pub lr_floor: f64,
}

impl Default for CodecSection {
    fn default() -> Self {
        CodecSection {
            feat_dim: 768,
            code_mid: 32,
            code_final: 15,
            init_iters: 200,
            init_keyframes: 10,
            replay_keyframes: 2,
            samples_per_keyframe: 2048,
            minibatch: 4096,
            lr: 1e-3,
            plateau_threshold: 1e-4,
            plateau_window: 20,
            lr_floor: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub tsdf_voxel_size: f64,
    pub heatmap_kernel: usize,
    pub relevancy_threshold: f64,
    /// A class needs at least this many visible pixels in a frame for the
    /// frame to count toward that query.
    pub min_mask_pixels: usize,
    pub emd_cap: usize,
    /// Evaluate every Nth frame.
    pub frame_stride: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            tsdf_voxel_size: 0.20,
            heatmap_kernel: 20,
            relevancy_threshold: 0.5,
            min_mask_pixels: 50,
            emd_cap: 512,
            frame_stride: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub run: RunSection,
    pub loss: LossSection,
    pub mapper: MapperSection,
    pub codec: CodecSection,
    pub eval: EvalSection,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |k: &str| Err(SplatError::Config(format!("{k} out of range")));
        if !(0.0..=1.0).contains(&self.loss.lambda_photo) {
            return err("loss.lambda_photo");
        }
        for (k, v) in [
            ("loss.lambda_feat", self.loss.lambda_feat),
            ("loss.lambda_iso", self.loss.lambda_iso),
            ("loss.lambda_scale_tie", self.loss.lambda_scale_tie),
        ] {
            if v < 0.0 || !v.is_finite() {
                return err(k);
            }
        }
        if self.mapper.window_size == 0 {
            return err("mapper.window_size");
        }
        if self.mapper.insert_stride == 0 {
            return err("mapper.insert_stride");
        }
        if !(self.mapper.tracking_lr_decay > 0.0 && self.mapper.tracking_lr_decay <= 1.0) {
            return err("mapper.tracking_lr_decay");
        }
        if !(0.0..=1.0).contains(&self.mapper.novelty_threshold) {
            return err("mapper.novelty_threshold");
        }
        if !(0.0..=1.0).contains(&self.mapper.coverage_alpha) {
            return err("mapper.coverage_alpha");
        }
        if !(0.0..=1.0).contains(&self.mapper.prune_alpha_thresh) {
            return err("mapper.prune_alpha_thresh");
        }
        if self.codec.code_mid == 0
            || self.codec.code_final == 0
            || self.codec.code_final > self.codec.code_mid
            || self.codec.code_mid > self.codec.feat_dim
        {
            return err("codec.code sizes");
        }
        if self.codec.minibatch == 0 || self.codec.samples_per_keyframe == 0 {
            return err("codec.batch sizes");
        }
        if self.eval.tsdf_voxel_size <= 0.0 {
            return err("eval.tsdf_voxel_size");
        }
        if self.eval.heatmap_kernel == 0 {
            return err("eval.heatmap_kernel");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| SplatError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SplatError::io(path, e))?;
        let mut cfg = Self::from_text(&text)?;
        cfg.apply_env_overrides()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| SplatError::io(path, e))
    }

    /// Apply `SEMSPLAT_<SECTION>_<KEY>=<value>` overrides from the process
    /// environment.
    pub fn apply_env_overrides(&mut self) -> Result<()> {
        let mut doc: toml::Table =
            toml::from_str(&self.to_text()).map_err(|e| SplatError::Config(e.to_string()))?;
        let mut touched = false;
        for (name, value) in std::env::vars() {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let Some((section, key)) = rest.split_once('_') else {
                continue;
            };
            let section = section.to_lowercase();
            let key = key.to_lowercase();
            let table = doc
                .get_mut(&section)
                .and_then(|v| v.as_table_mut())
                .ok_or_else(|| SplatError::Config(format!("unknown config section in {name}")))?;
            if !table.contains_key(&key) {
                return Err(SplatError::Config(format!("unknown config key in {name}")));
            }
            let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
                .or_else(|_| toml::from_str::<toml::Table>(&format!("v = \"{value}\"")))
                .map_err(|e| SplatError::Config(format!("{name}: {e}")))?
                .remove("v")
                .unwrap();
            table.insert(key, parsed);
            touched = true;
        }
        if touched {
            let text = toml::to_string(&doc).map_err(|e| SplatError::Config(e.to_string()))?;
            *self = Self::from_text(&text)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact() {
        let mut cfg = PipelineConfig::default();
        cfg.run.seed = 42;
        cfg.loss.lambda_photo = 0.8125;
        cfg.mapper.lr_mean = 1.7e-3;
        let text = cfg.to_text();
        let back = PipelineConfig::from_text(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(text, back.to_text());
    }

    #[test]
    fn unknown_key_rejected() {
        let text = "[mapper]\nwindow_size = 4\nno_such_key = 1\n";
        let err = PipelineConfig::from_text(text).unwrap_err();
        assert!(err.to_string().contains("no_such_key"), "{err}");
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = PipelineConfig::from_text("[run]\nseed = 9\n").unwrap();
        assert_eq!(cfg.run.seed, 9);
        assert_eq!(cfg.mapper.window_size, 8);
        assert_eq!(cfg.codec.code_final, 15);
        assert_eq!(cfg.eval.tsdf_voxel_size, 0.20);
        assert_eq!(cfg.eval.heatmap_kernel, 20);
        assert_eq!(cfg.eval.relevancy_threshold, 0.5);
    }

    #[test]
    fn out_of_range_rejected() {
        let text = "[loss]\nlambda_photo = 1.5\n";
        assert!(PipelineConfig::from_text(text).is_err());
    }

    #[test]
    fn env_override_applies() {
        let mut cfg = PipelineConfig::default();
        std::env::set_var("SEMSPLAT_MAPPER_WINDOW_SIZE", "3");
        let r = cfg.apply_env_overrides();
        std::env::remove_var("SEMSPLAT_MAPPER_WINDOW_SIZE");
        r.unwrap();
        assert_eq!(cfg.mapper.window_size, 3);
    }
}
