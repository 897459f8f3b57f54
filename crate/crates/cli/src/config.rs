//! Flat key=value run configuration with include-by-path.
//!
//! Every field has a documented default; unknown keys are rejected. Values
//! from an `include`d file are applied first, so later keys (and CLI flags)
//! override them.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use canids_core::lora::LoraConfig;
use canids_core::model::ModelConfig;
use canids_core::textify::{Arch, Vocab};
use canids_core::train::TrainConfig;

const MAX_INCLUDE_DEPTH: usize = 8;

/// Merged model/train/split/LoRA settings plus paths.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub arch: Arch,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
    pub head_hidden: usize,
    pub dropout: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub val_batch_size: usize,
    pub accum_steps: usize,
    /// Defaults to 5e-5 (encoder) or 3e-5 (decoder) when unset.
    pub lr: Option<f64>,
    pub weight_decay: f64,
    pub seed: u64,

    pub train_fraction: f64,
    pub p: f64,
    pub inner_train_fraction: f64,

    pub lora: LoraConfig,

    pub data_dir: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
    pub plot: bool,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        let model = ModelConfig::encoder_default(Vocab::built_in().len());
        RunConfig {
            arch: model.arch,
            n_layers: model.n_layers,
            d_model: model.d_model,
            n_heads: model.n_heads,
            n_kv_heads: model.n_kv_heads,
            ffn_mult: model.ffn_mult,
            max_len: model.max_len,
            head_hidden: model.head_hidden,
            dropout: model.dropout,
            epochs: 10,
            batch_size: 4,
            val_batch_size: 32,
            accum_steps: 1,
            lr: None,
            weight_decay: 0.01,
            seed: 42,
            train_fraction: 0.7,
            p: 0.1,
            inner_train_fraction: 0.7,
            lora: LoraConfig::default(),
            data_dir: None,
            init_checkpoint: None,
            plot: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        config.merge_file(path, 0)?;
        Ok(config)
    }

    fn merge_file(&mut self, path: &Path, depth: usize) -> Result<()> {
        if depth > MAX_INCLUDE_DEPTH {
            bail!("config includes nested deeper than {MAX_INCLUDE_DEPTH} at {}", path.display());
        }
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}:{}: expected key = value", path.display(), no + 1))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "include" {
                self.merge_file(&dir.join(value), depth + 1)?;
            } else {
                self.set(key, value)
                    .with_context(|| format!("{}:{}", path.display(), no + 1))?;
            }
        }
        Ok(())
    }

    /// Applies one key; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| anyhow!("invalid value {value:?} for key {key}"))
        }
        match key {
            "arch" => {
                self.arch =
                    Arch::parse_name(value).ok_or_else(|| anyhow!("unknown arch {value:?}"))?
            }
            "n_layers" => self.n_layers = num(key, value)?,
            "d_model" => self.d_model = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "n_kv_heads" => self.n_kv_heads = num(key, value)?,
            "ffn_mult" => self.ffn_mult = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "head_hidden" => self.head_hidden = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "val_batch_size" => self.val_batch_size = num(key, value)?,
            "accum_steps" => self.accum_steps = num(key, value)?,
            "lr" => self.lr = Some(num(key, value)?),
            "weight_decay" => self.weight_decay = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "train_fraction" => self.train_fraction = num(key, value)?,
            "p" => self.p = num(key, value)?,
            "inner_train_fraction" => self.inner_train_fraction = num(key, value)?,
            "lora_r" => self.lora.rank = num(key, value)?,
            "lora_alpha" => self.lora.alpha = num(key, value)?,
            "lora_dropout" => self.lora.dropout = num(key, value)?,
            "lora_targets" => {
                self.lora.targets = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
            }
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "init_checkpoint" => self.init_checkpoint = Some(PathBuf::from(value)),
            "plot" => {
                self.plot = match value {
                    "true" | "1" | "yes" => true,
                    "false" | "0" | "no" => false,
                    _ => bail!("invalid value {value:?} for key plot"),
                }
            }
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            arch: self.arch,
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            ffn_mult: self.ffn_mult,
            vocab_size: Vocab::built_in().len(),
            max_len: self.max_len,
            n_classes: canids_core::can::AttackClass::COUNT,
            head_hidden: self.head_hidden,
            dropout: self.dropout,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let default_lr = match self.arch {
            Arch::Encoder => 5e-5,
            Arch::Decoder => 3e-5,
        };
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            val_batch_size: self.val_batch_size,
            accum_steps: self.accum_steps,
            lr: self.lr.unwrap_or(default_lr),
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }
}
