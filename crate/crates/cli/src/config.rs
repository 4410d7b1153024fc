//! Flat key/value run configuration. Every key is required and unknown keys
//! are rejected, so a config file fully determines its run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use slomo_core::engine::AdaptationConfig;
use slomo_core::runner::{RunConfig, Variant};
use slomo_core::streams::{CyclicMode, ScheduleConfig, Setting, TaskConfig, TrainConfig};

/// Environment variable overriding `out_dir` (but not `--out`).
pub const OUT_DIR_ENV: &str = "SLOMO_OUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {message}")]
    Schema { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CyclicModeKey {
    Protocol,
    Dwell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub variant: Variant,
    pub setting: Setting,
    pub out_dir: PathBuf,

    pub num_classes: usize,
    pub dim: usize,
    pub mean_radius: f64,
    pub center_offset: f64,
    pub base_noise: f64,
    pub n_train: usize,
    pub n_eval: usize,
    pub task_seed: u64,

    pub hidden: Vec<usize>,
    pub source_epochs: usize,
    pub source_lr: f64,
    pub source_batch_size: usize,
    pub source_seed: u64,
    pub required_accuracy: f64,

    pub alpha: f64,
    pub sigma: f64,
    pub delta: f64,
    pub tau: f64,
    pub lambda_cl: f64,
    pub lambda_mse: f64,
    pub lambda_im: f64,
    pub gamma: f64,
    pub queue_capacity: usize,
    pub evict_interval: u64,
    pub restore_prob: f64,
    pub lr_student: f64,
    pub lr_t2: f64,
    pub pl_noise_ratio: f64,
    pub view_jitter: f64,
    pub plpd_segments: usize,
    pub plpd_occlusion: f64,
    pub adaptation_seed: u64,

    pub batch_size: usize,
    pub batches_per_domain: usize,
    pub severity: u8,
    pub cycles: usize,
    pub cyclic_mode: CyclicModeKey,
    pub dwell_batches: usize,
    pub gradual_batches_per_level: usize,
    pub variants_per_group: usize,
    pub schedule_seed: u64,

    pub window: usize,
    pub stability_weight: f64,
    pub probe_forgetting: bool,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig::from_run(&RunConfig::default(), PathBuf::from("out"))
    }
}

impl FileConfig {
    pub fn from_run(c: &RunConfig, out_dir: PathBuf) -> FileConfig {
        let a = &c.adaptation;
        let (cyclic_mode, dwell_batches) = match c.schedule.cyclic_mode {
            CyclicMode::Protocol => (CyclicModeKey::Protocol, c.schedule.batches_per_domain),
            CyclicMode::Dwell { batches_per_group } => (CyclicModeKey::Dwell, batches_per_group),
        };
        FileConfig {
            variant: c.variant,
            setting: c.schedule.setting,
            out_dir,
            num_classes: c.task.num_classes,
            dim: c.task.dim,
            mean_radius: c.task.mean_radius,
            center_offset: c.task.center_offset,
            base_noise: c.task.base_noise,
            n_train: c.task.n_train,
            n_eval: c.task.n_eval,
            task_seed: c.task.seed,
            hidden: c.hidden.clone(),
            source_epochs: c.source_training.epochs,
            source_lr: c.source_training.lr,
            source_batch_size: c.source_training.batch_size,
            source_seed: c.source_training.seed,
            required_accuracy: c.source_training.required_accuracy,
            alpha: a.alpha,
            sigma: a.sigma,
            delta: a.delta,
            tau: a.tau,
            lambda_cl: a.lambda_cl,
            lambda_mse: a.lambda_mse,
            lambda_im: a.lambda_im,
            gamma: a.gamma,
            queue_capacity: a.queue_capacity,
            evict_interval: a.evict_interval,
            restore_prob: a.restore_prob,
            lr_student: a.lr_student,
            lr_t2: a.lr_t2,
            pl_noise_ratio: a.pl_noise_ratio,
            view_jitter: a.view_jitter,
            plpd_segments: a.plpd_segments,
            plpd_occlusion: a.plpd_occlusion,
            adaptation_seed: c.adaptation_seed,
            batch_size: a.batch_size,
            batches_per_domain: c.schedule.batches_per_domain,
            severity: c.schedule.severity,
            cycles: c.schedule.cycles,
            cyclic_mode,
            dwell_batches,
            gradual_batches_per_level: c.schedule.gradual_batches_per_level,
            variants_per_group: c.variants_per_group,
            schedule_seed: c.schedule.seed,
            window: c.window,
            stability_weight: c.stability_weight,
            probe_forgetting: c.probe_forgetting,
        }
    }

    pub fn to_run(&self) -> RunConfig {
        RunConfig {
            variant: self.variant,
            task: TaskConfig {
                num_classes: self.num_classes,
                dim: self.dim,
                mean_radius: self.mean_radius,
                center_offset: self.center_offset,
                base_noise: self.base_noise,
                n_train: self.n_train,
                n_eval: self.n_eval,
                seed: self.task_seed,
            },
            hidden: self.hidden.clone(),
            source_training: TrainConfig {
                epochs: self.source_epochs,
                lr: self.source_lr,
                batch_size: self.source_batch_size,
                seed: self.source_seed,
                required_accuracy: self.required_accuracy,
            },
            adaptation: AdaptationConfig {
                alpha: self.alpha,
                sigma: self.sigma,
                delta: self.delta,
                tau: self.tau,
                lambda_cl: self.lambda_cl,
                lambda_mse: self.lambda_mse,
                lambda_im: self.lambda_im,
                gamma: self.gamma,
                queue_capacity: self.queue_capacity,
                evict_interval: self.evict_interval,
                restore_prob: self.restore_prob,
                lr_student: self.lr_student,
                lr_t2: self.lr_t2,
                student_mode: self.variant.student_mode(),
                pl_noise_ratio: self.pl_noise_ratio,
                batch_size: self.batch_size,
                view_jitter: self.view_jitter,
                plpd_segments: self.plpd_segments,
                plpd_occlusion: self.plpd_occlusion,
            },
            schedule: ScheduleConfig {
                setting: self.setting,
                batch_size: self.batch_size,
                batches_per_domain: self.batches_per_domain,
                severity: self.severity,
                cycles: self.cycles,
                cyclic_mode: match self.cyclic_mode {
                    CyclicModeKey::Protocol => CyclicMode::Protocol,
                    CyclicModeKey::Dwell => CyclicMode::Dwell { batches_per_group: self.dwell_batches },
                },
                gradual_batches_per_level: self.gradual_batches_per_level,
                seed: self.schedule_seed,
            },
            variants_per_group: self.variants_per_group,
            adaptation_seed: self.adaptation_seed,
            window: self.window,
            stability_weight: self.stability_weight,
            probe_forgetting: self.probe_forgetting,
        }
    }

    /// Range checks that name the offending key.
    fn check_ranges(&self) -> Result<(), String> {
        let positive = [
            ("num_classes", self.num_classes),
            ("dim", self.dim),
            ("n_train", self.n_train),
            ("n_eval", self.n_eval),
            ("source_epochs", self.source_epochs),
            ("batches_per_domain", self.batches_per_domain),
            ("window", self.window),
            ("variants_per_group", self.variants_per_group),
            ("queue_capacity", self.queue_capacity),
            ("plpd_segments", self.plpd_segments),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(format!("key `{k}` must be >= 1"));
            }
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err("key `hidden` must list at least one positive width".into());
        }
        if self.severity == 0 || self.severity > 5 {
            return Err(format!("key `severity` must be in 1..=5, got {}", self.severity));
        }
        if self.cyclic_mode == CyclicModeKey::Dwell && self.dwell_batches == 0 {
            return Err("key `dwell_batches` must be >= 1 in dwell mode".into());
        }
        let rc = self.to_run();
        rc.validate().map_err(|e| e.to_string())?;
        rc.network_spec().map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn parse(text: &str, path: &Path) -> Result<FileConfig, ConfigError> {
        let schema = |message: String| ConfigError::Schema { path: path.to_path_buf(), message };
        let cfg: FileConfig = toml::from_str(text).map_err(|e| schema(e.message().to_string()))?;
        cfg.check_ranges().map_err(schema)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<FileConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        FileConfig::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Output directory: `--out`, then the environment override, then the file.
pub fn resolve_out_dir(flag: Option<&Path>, file: &FileConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => file.out_dir.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let d = FileConfig::default();
        let back = FileConfig::parse(&d.to_toml(), Path::new("x.toml")).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_run(), RunConfig::default());
    }

    #[test]
    fn missing_and_unknown_keys_are_named() {
        let text = FileConfig::default().to_toml();
        let without: String = text.lines().filter(|l| !l.starts_with("sigma ")).map(|l| format!("{l}\n")).collect();
        let e = FileConfig::parse(&without, Path::new("x.toml")).unwrap_err().to_string();
        assert!(e.contains("sigma"), "{e}");
        let extra = format!("bogus_key = 1\n{text}");
        let e = FileConfig::parse(&extra, Path::new("x.toml")).unwrap_err().to_string();
        assert!(e.contains("bogus_key"), "{e}");
        let bad = text.replace("sigma = 0.5", "sigma = -1.0");
        let e = FileConfig::parse(&bad, Path::new("x.toml")).unwrap_err().to_string();
        assert!(e.contains("sigma"), "{e}");
    }
}
