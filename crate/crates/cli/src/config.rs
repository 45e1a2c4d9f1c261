//! Run configuration: flat `key = value` text with dotted keys.
//!
//! Unknown keys are hard errors. Missing keys fall back to the desk-scale
//! defaults. `to_config_text` renders a canonical form that reparses to an
//! identical config; checkpoints embed that canonical text.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use spineseg_core::fusion::FusionConfig;
use spineseg_core::network::ModelConfig;
use spineseg_core::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> OptimConfig {
        OptimConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub steps: u64,
    /// Gradient-accumulation count; parameter updates happen once per
    /// `batch_size` consecutive samples.
    pub batch_size: usize,
    /// Evaluate every this many steps (0 disables interim evaluation).
    pub eval_interval: u64,
    /// Snapshot a checkpoint every this many steps (0 = final only).
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            optim: OptimConfig::default(),
            steps: 200,
            batch_size: 1,
            eval_interval: 50,
            checkpoint_interval: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataConfig {
    pub train_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            model: ModelConfig::desk_default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

fn parse_scalar<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|part| parse_scalar::<usize>(key, part))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(Error::config(format!("{key}: expected true/false, got {other:?}"))),
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    /// Parse `key = value` lines; `#` starts a comment, blank lines are
    /// skipped, unknown keys are errors.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::config(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
            match key {
                "model.in_channels" => cfg.model.in_channels = parse_scalar(key, value)?,
                "model.num_classes" => cfg.model.num_classes = parse_scalar(key, value)?,
                "model.patch_size" => cfg.model.patch_size = parse_scalar(key, value)?,
                "model.embed_dim" => cfg.model.embed_dim = parse_scalar(key, value)?,
                "model.depths" => cfg.model.depths = parse_list(key, value)?,
                "model.heads" => cfg.model.heads = parse_list(key, value)?,
                "model.window" => cfg.model.window = parse_scalar(key, value)?,
                "model.lambda" => cfg.model.lambda = parse_scalar(key, value)?,
                "model.use_multiscale" => cfg.model.use_multiscale = parse_bool(key, value)?,
                "model.use_adaptive" => cfg.model.use_adaptive = parse_bool(key, value)?,
                "model.seed" => cfg.model.seed = parse_scalar(key, value)?,
                "fusion.kernel_sizes" => cfg.model.fusion.kernel_sizes = parse_list(key, value)?,
                "fusion.out_channels" => cfg.model.fusion.out_channels = parse_scalar(key, value)?,
                "train.lr" => cfg.train.optim.lr = parse_scalar(key, value)?,
                "train.beta1" => cfg.train.optim.beta1 = parse_scalar(key, value)?,
                "train.beta2" => cfg.train.optim.beta2 = parse_scalar(key, value)?,
                "train.eps" => cfg.train.optim.eps = parse_scalar(key, value)?,
                "train.steps" => cfg.train.steps = parse_scalar(key, value)?,
                "train.batch_size" => cfg.train.batch_size = parse_scalar(key, value)?,
                "train.eval_interval" => cfg.train.eval_interval = parse_scalar(key, value)?,
                "train.checkpoint_interval" => {
                    cfg.train.checkpoint_interval = parse_scalar(key, value)?
                }
                "data.train_dir" => cfg.data.train_dir = Some(PathBuf::from(value)),
                "data.test_dir" => cfg.data.test_dir = Some(PathBuf::from(value)),
                other => {
                    return Err(Error::config(format!(
                        "line {}: unknown key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        // The fusion stem always reads the model input.
        cfg.model.fusion.in_channels = cfg.model.in_channels;
        cfg.model.validate()?;
        if cfg.train.batch_size == 0 {
            return Err(Error::config("train.batch_size: must be positive"));
        }
        if cfg.train.optim.lr < 0.0 {
            return Err(Error::config(format!(
                "train.lr: must be >= 0, got {}",
                cfg.train.optim.lr
            )));
        }
        Ok(cfg)
    }

    /// Canonical rendering; `parse(to_config_text(c)) == c`.
    pub fn to_config_text(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = String::new();
        let m = &self.model;
        s.push_str(&format!("model.in_channels = {}\n", m.in_channels));
        s.push_str(&format!("model.num_classes = {}\n", m.num_classes));
        s.push_str(&format!("model.patch_size = {}\n", m.patch_size));
        s.push_str(&format!("model.embed_dim = {}\n", m.embed_dim));
        s.push_str(&format!("model.depths = {}\n", list(&m.depths)));
        s.push_str(&format!("model.heads = {}\n", list(&m.heads)));
        s.push_str(&format!("model.window = {}\n", m.window));
        s.push_str(&format!("model.lambda = {}\n", m.lambda));
        s.push_str(&format!("model.use_multiscale = {}\n", m.use_multiscale));
        s.push_str(&format!("model.use_adaptive = {}\n", m.use_adaptive));
        s.push_str(&format!("model.seed = {}\n", m.seed));
        s.push_str(&format!(
            "fusion.kernel_sizes = {}\n",
            list(&m.fusion.kernel_sizes)
        ));
        s.push_str(&format!("fusion.out_channels = {}\n", m.fusion.out_channels));
        let t = &self.train;
        s.push_str(&format!("train.lr = {}\n", t.optim.lr));
        s.push_str(&format!("train.beta1 = {}\n", t.optim.beta1));
        s.push_str(&format!("train.beta2 = {}\n", t.optim.beta2));
        s.push_str(&format!("train.eps = {}\n", t.optim.eps));
        s.push_str(&format!("train.steps = {}\n", t.steps));
        s.push_str(&format!("train.batch_size = {}\n", t.batch_size));
        s.push_str(&format!("train.eval_interval = {}\n", t.eval_interval));
        s.push_str(&format!(
            "train.checkpoint_interval = {}\n",
            t.checkpoint_interval
        ));
        if let Some(dir) = &self.data.train_dir {
            s.push_str(&format!("data.train_dir = {}\n", dir.display()));
        }
        if let Some(dir) = &self.data.test_dir {
            s.push_str(&format!("data.test_dir = {}\n", dir.display()));
        }
        s
    }

    /// A tiny configuration for gradient checking (matches
    /// `ModelConfig::tiny`).
    pub fn tiny() -> RunConfig {
        RunConfig {
            model: ModelConfig::tiny(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }

    /// Overfit-smoke setup: desk model, single-volume training.
    pub fn smoke() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.train.steps = 300;
        cfg.train.optim.lr = 3e-3;
        cfg.train.eval_interval = 50;
        cfg
    }
}

impl RunConfig {
    /// Check that configured dataset paths exist.
    pub fn validate_paths(&self, need_train: bool, need_test: bool) -> Result<()> {
        if need_train {
            match &self.data.train_dir {
                None => return Err(Error::config("data.train_dir: not set")),
                Some(dir) if !dir.is_dir() => {
                    return Err(Error::config(format!(
                        "data.train_dir: {} does not exist",
                        dir.display()
                    )))
                }
                _ => {}
            }
        }
        if need_test {
            match &self.data.test_dir {
                None => return Err(Error::config("data.test_dir: not set")),
                Some(dir) if !dir.is_dir() => {
                    return Err(Error::config(format!(
                        "data.test_dir: {} does not exist",
                        dir.display()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Default fusion geometry for a given input channel count.
pub fn default_fusion(in_channels: usize) -> FusionConfig {
    FusionConfig {
        kernel_sizes: vec![1, 3, 5],
        in_channels,
        out_channels: 8,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let text = cfg.to_config_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(text, back.to_config_text());
    }

    #[test]
    fn unknown_key_is_a_hard_error() {
        let err = RunConfig::parse("model.embed_dims = 24\n").unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let err = RunConfig::parse("model.window = 2\nmodel.window = 4\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let cfg = RunConfig::parse("# a comment\n\nmodel.embed_dim = 12\n").unwrap();
        assert_eq!(cfg.model.embed_dim, 12);
    }

    #[test]
    fn lists_parse_as_comma_separated() {
        let cfg = RunConfig::parse("fusion.kernel_sizes = 1,3\nmodel.depths = 2,2\nmodel.heads = 3,3\n")
            .unwrap();
        assert_eq!(cfg.model.fusion.kernel_sizes, vec![1, 3]);
        assert_eq!(cfg.model.depths, vec![2, 2]);
    }

    #[test]
    fn invalid_model_values_name_the_field() {
        let err = RunConfig::parse("model.heads = 5,5\n").unwrap_err();
        assert!(err.to_string().contains("model.heads"), "{err}");
    }

    #[test]
    fn fusion_in_channels_follows_model() {
        let cfg = RunConfig::parse("model.in_channels = 2\n").unwrap();
        assert_eq!(cfg.model.fusion.in_channels, 2);
    }

    #[test]
    fn non_default_values_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.model.lambda = 0.5;
        cfg.model.use_adaptive = false;
        cfg.train.optim.lr = 0.0025;
        cfg.train.checkpoint_interval = 25;
        cfg.data.train_dir = Some(PathBuf::from("/tmp/ds"));
        let back = RunConfig::parse(&cfg.to_config_text()).unwrap();
        assert_eq!(cfg, back);
    }
}
