//! Flat experiment configuration: one TOML table, every key defaulted,
//! unknown keys rejected. Command-line `--key value` pairs override file
//! values before validation.

use std::path::{Path, PathBuf};

use mft_core::data::{load_cifar10, make_synthetic, Dataset, Split};
use mft_core::masking::{MaskKind, MaskStrategy, DEFAULT_RATIO_SET};
use mft_core::objectives::{DistillConfig, DistillMode, KlDirection, TeacherInput};
use mft_core::scenes::{make_scenes, SceneParams};
use mft_core::schedule::AttentionSource;
use mft_core::train::{OptimConfig, TrainConfig};
use mft_core::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Category, CliError, Result};

pub const OUTPUT_ROOT_ENV: &str = "MFT_OUTPUT_ROOT";
pub const CIFAR_DIR_ENV: &str = "MFT_CIFAR10_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Cifar10,
    Scenes,
    Synthetic,
}

impl DataSource {
    pub fn as_str(self) -> &'static str {
        match self {
            DataSource::Cifar10 => "cifar10",
            DataSource::Scenes => "scenes",
            DataSource::Synthetic => "synthetic",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,

    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,

    pub dataset: DataSource,
    pub data_dir: Option<PathBuf>,
    /// CIFAR-10 subset sizes; 0 keeps the whole split.
    pub train_limit: usize,
    pub test_limit: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub data_seed: u64,
    pub synthetic_sigma: f64,
    pub scene_min_glyph: usize,
    pub scene_max_glyph: usize,
    pub scene_background_jitter: f64,
    pub scene_background_contrast: f64,
    pub scene_grating_amplitude: f64,
    pub scene_orientation_jitter: f64,
    pub scene_pixel_noise: f64,
    pub scene_class_colour: bool,
    pub scene_glyph_colour_jitter: f64,

    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_epochs: usize,
    pub cosine: bool,
    pub min_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub augment: bool,
    pub eval_batch: usize,

    pub mask_kind: MaskKind,
    pub mask_ratio: f64,
    pub mask_ratios: Vec<f64>,

    pub distill: DistillMode,
    pub temperature: f64,
    pub balance: f64,
    pub teacher_input: TeacherInput,
    pub kl_direction: KlDirection,
    pub teacher: Option<PathBuf>,

    pub attention_source: AttentionSource,

    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let m = ModelConfig::toy();
        let o = OptimConfig::default();
        let s = SceneParams::default();
        let d = DistillConfig::default();
        Self {
            seed: None,
            image_size: m.image_size,
            patch_size: m.patch_size,
            channels: m.channels,
            embed_dim: m.embed_dim,
            depth: m.depth,
            heads: m.heads,
            mlp_ratio: m.mlp_ratio,
            num_classes: m.num_classes,
            dataset: DataSource::Cifar10,
            data_dir: None,
            train_limit: 0,
            test_limit: 0,
            train_per_class: 500,
            test_per_class: 100,
            data_seed: 0,
            synthetic_sigma: 30.0,
            scene_min_glyph: s.min_glyph,
            scene_max_glyph: s.max_glyph,
            scene_background_jitter: s.background_jitter,
            scene_background_contrast: s.background_contrast,
            scene_grating_amplitude: s.grating_amplitude,
            scene_orientation_jitter: s.orientation_jitter,
            scene_pixel_noise: s.pixel_noise,
            scene_class_colour: s.class_colour,
            scene_glyph_colour_jitter: s.glyph_colour_jitter,
            optimizer: OptimizerKind::Adamw,
            lr: o.lr,
            weight_decay: o.weight_decay,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            warmup_epochs: o.warmup_epochs,
            cosine: o.cosine,
            min_lr: o.min_lr,
            epochs: 50,
            batch_size: 64,
            augment: true,
            eval_batch: 250,
            mask_kind: MaskKind::None,
            mask_ratio: 0.75,
            mask_ratios: DEFAULT_RATIO_SET.to_vec(),
            distill: d.mode,
            temperature: d.temperature,
            balance: d.balance,
            teacher_input: d.teacher_input,
            kl_direction: d.kl_direction,
            teacher: None,
            attention_source: AttentionSource::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::new(Category::Config, msg)
}

/// Parses `--key value` / `--key=value` pairs; dashes in keys become
/// underscores.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            return Err(CliError::new(Category::Usage, format!("expected --key, found `{a}`")));
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::new(Category::Usage, format!("--{flag} needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}

/// Interprets a command-line value as TOML, falling back to a string.
/// Comma-separated values become arrays.
fn override_value(raw: &str) -> toml::Value {
    let parse = |s: &str| -> toml::Value {
        format!("v = {s}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(s.to_string()))
    };
    if raw.contains(',') && !raw.starts_with('[') && !raw.starts_with('"') {
        return toml::Value::Array(raw.split(',').map(|s| parse(s.trim())).collect());
    }
    parse(raw)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_table(toml::from_str(text).map_err(|e| config_err(e.to_string()))?)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.message().to_string()))
    }

    /// File (if any) plus overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::new(Category::Io, format!("{}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| config_err(format!("{}: {}", p.display(), e.message())))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            table.insert(k.clone(), override_value(v));
        }
        Self::from_table(table)
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| config_err("`seed` is required"))
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            channels: self.channels,
            embed_dim: self.embed_dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            num_classes: self.num_classes,
        }
    }

    pub fn scene_params(&self) -> SceneParams {
        SceneParams {
            min_glyph: self.scene_min_glyph,
            max_glyph: self.scene_max_glyph,
            background_jitter: self.scene_background_jitter,
            background_contrast: self.scene_background_contrast,
            grating_amplitude: self.scene_grating_amplitude,
            orientation_jitter: self.scene_orientation_jitter,
            pixel_noise: self.scene_pixel_noise,
            class_colour: self.scene_class_colour,
            glyph_colour_jitter: self.scene_glyph_colour_jitter,
        }
    }

    pub fn mask(&self) -> MaskStrategy {
        MaskStrategy {
            kind: self.mask_kind,
            single_ratio: self.mask_ratio,
            ratio_set: self.mask_ratios.clone(),
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            mode: self.distill,
            temperature: self.temperature,
            balance: self.balance,
            teacher_input: self.teacher_input,
            kl_direction: self.kl_direction,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let OptimizerKind::Adamw = self.optimizer;
        Ok(TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optim: OptimConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                warmup_epochs: self.warmup_epochs,
                cosine: self.cosine,
                min_lr: self.min_lr,
            },
            mask: self.mask(),
            distill: self.distill_config(),
            augment: self.augment,
            seed: self.seed()?,
            eval_batch: self.eval_batch,
        })
    }

    /// Checks everything that can fail before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        self.model().validate()?;
        self.mask().validate()?;
        self.distill_config().validate()?;
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(config_err("batch sizes must be positive"));
        }
        if self.distill != DistillMode::None {
            match &self.teacher {
                None => return Err(config_err("distillation needs `teacher`")),
                Some(p) if !p.is_file() => {
                    return Err(CliError::new(Category::Io, format!("teacher checkpoint {} not found", p.display())))
                }
                Some(_) => {}
            }
        }
        if self.dataset == DataSource::Cifar10 {
            let dir = self.cifar_dir()?;
            if !dir.is_dir() {
                return Err(CliError::new(Category::Io, format!("data_dir {} not found", dir.display())));
            }
        }
        Ok(())
    }

    fn cifar_dir(&self) -> Result<PathBuf> {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(CIFAR_DIR_ENV).map(PathBuf::from))
            .ok_or_else(|| config_err(format!("cifar10 needs `data_dir` or {CIFAR_DIR_ENV}")))
    }

    /// Output directory, joined onto `MFT_OUTPUT_ROOT` when relative.
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.out_dir.is_relative() => PathBuf::from(root).join(&self.out_dir),
            _ => self.out_dir.clone(),
        }
    }

    pub fn load_split(&self, split: Split) -> Result<Dataset> {
        let (per_class, limit) = match split {
            Split::Train => (self.train_per_class, self.train_limit),
            Split::Test => (self.test_per_class, self.test_limit),
        };
        let ds = match self.dataset {
            DataSource::Cifar10 => {
                let ds = load_cifar10(&self.cifar_dir()?, split)?;
                if limit > 0 {
                    ds.take(limit)
                } else {
                    ds
                }
            }
            DataSource::Scenes => make_scenes(&self.scene_params(), per_class, self.data_seed, split)?,
            DataSource::Synthetic => {
                make_synthetic(self.num_classes, per_class, self.synthetic_sigma, self.data_seed, split)?
            }
        };
        if ds.num_classes != self.num_classes {
            return Err(CliError::new(
                Category::Mismatch,
                format!("dataset has {} classes, num_classes is {}", ds.num_classes, self.num_classes),
            ));
        }
        Ok(ds)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("seed = 1\nlearning_rate = 0.1\n").unwrap_err();
        assert_eq!(err.category, Category::Config);
        assert!(err.message.contains("learning_rate"), "{}", err.message);
    }

    #[test]
    fn every_key_has_a_default() {
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.model(), ModelConfig::toy());
        assert_eq!(c.seed().unwrap_err().category, Category::Config);
    }

    #[test]
    fn overrides_win_and_parse_types() {
        let args: Vec<String> = ["--seed", "7", "--mask-kind", "hybrid", "--mask_ratios=0,0.5", "--lr", "5e-4"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let o = parse_overrides(&args).unwrap();
        let c = ExperimentConfig::load(None, &o).unwrap();
        assert_eq!(c.seed, Some(7));
        assert_eq!(c.mask_kind, MaskKind::Hybrid);
        assert_eq!(c.mask_ratios, vec![0.0, 0.5]);
        assert_eq!(c.lr, 5e-4);
        assert!(parse_overrides(&["--seed".to_string()]).is_err());
        assert!(parse_overrides(&["seed".to_string()]).is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = ExperimentConfig {
            seed: Some(3),
            dataset: DataSource::Scenes,
            ..Default::default()
        };
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn distillation_without_teacher_fails_validation() {
        let c = ExperimentConfig {
            seed: Some(0),
            dataset: DataSource::Synthetic,
            distill: DistillMode::Soft,
            ..Default::default()
        };
        assert!(c.validate().unwrap_err().message.contains("teacher"));
    }
}
