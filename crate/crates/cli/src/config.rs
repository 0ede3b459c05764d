use std::path::{Path, PathBuf};

use mvam_core::data::SynthSpec;
use mvam_core::trainer::TrainConfig;
use serde::Deserialize;

/// The run file: everything that affects results lives here, flags only pick
/// files. Every section is optional and falls back to its defaults.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub train: TrainConfig,
    pub synth: SynthSpec,
    /// Dataset directory; `--data` overrides it.
    pub data: Option<PathBuf>,
    /// Output directory; `--out` overrides it.
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum ConfigError {
    Read(PathBuf, std::io::Error),
    Schema(PathBuf, String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Read(p, e) => write!(f, "{}: {e}", p.display()),
            ConfigError::Schema(p, e) => write!(f, "{}: {e}", p.display()),
        }
    }
}

/// Parses `path` as `T`, naming the offending field path on schema errors.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read(path.to_path_buf(), e))?;
    parse_json(&text).map_err(|e| ConfigError::Schema(path.to_path_buf(), e))
}

pub fn parse_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T, String> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            e.inner().to_string()
        } else {
            format!("at `{path}`: {}", e.inner())
        }
    })
}

pub const CONFIG_HELP: &str = "\
Run file (JSON, unknown keys rejected, every key optional):
  train.views (alias m)     view codes per modality [16]
  train.view_dim (alias d)  per-view width after projection [64]
  train.pooling             \"mvam\" (view-code attention) or \"cls\" (first token) [mvam]
  train.project             project tokens to view_dim before attention [true]
  train.encoder_dim         width of the trainable per-token toy encoders; null ingests features as-is [32]
  train.beta                weight of the diversity penalty [10]
  train.variant             diversity penalty: \"none\", \"base\" (||AA^T - I||^2) or \"sqrt\" (on sqrt(A)) [base]
  train.temperature         contrastive logit temperature [0.01]
  train.batch_size          pairs per batch; at most the number of training images [64]
  train.epochs              total epochs [20]
  train.lr_stage1           learning rate while encoders are frozen [0.01]
  train.lr_stage2           learning rate once encoders are trained too [0.001]
  train.stage2_epochs       trailing epochs that also train the encoders (a guess) [5]
  train.optimizer           {\"kind\":\"adam\",\"beta1\":0.9,\"beta2\":0.999,\"eps\":1e-8} or {\"kind\":\"sgd\"}
  train.seed                initialisation and batching seed [0]
  synth.num_images / val_images / test_images   split sizes [500/50/50]
  synth.aspects_per_image   aspects per image (k) [4]
  synth.aspect_vocab_size   aspect vocabulary size [32]
  synth.noise_tokens        noise tokens per image [6]
  synth.caption_noise_tokens noise tokens per caption [2]
  synth.noise_scale         expected noise-token norm [1.0]
  synth.captions_per_image  captions per image [3]
  synth.aspect_dim          token width [32]
  synth.seed                generator seed [0]
  data, out                 default dataset and output directories";
