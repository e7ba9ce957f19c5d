use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::asr::{AsrKind, LasConfig, RnntConfig};
use crate::data::{CorpusSpec, TokenizerMode};
use crate::error::{Error, Result};
use crate::interfaces::InterfaceKind;
use crate::losses::{validate_mode, MetricCost, TrainingMode};
use crate::nlu::TnluConfig;

pub const CONFIG_VERSION: u32 = 1;
pub const ENV_OUTPUT_DIR: &str = "SLU_OUTPUT_DIR";
pub const ENV_THREADS: &str = "SLU_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Step size of the joint phase; `learning_rate` when unset.
    pub joint_learning_rate: Option<f64>,
    /// Rescale each batch gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            joint_learning_rate: None,
            clip_norm: None,
            batch_size: 8,
        }
    }
}

/// Either a synthetic corpus generated on the fly or three dataset files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub corpus: Option<CorpusSpec>,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: Some(CorpusSpec::default()),
            train: None,
            dev: None,
            test: None,
        }
    }
}

/// Everything a run depends on. Serialized as TOML; unknown keys are
/// rejected so typos in overrides surface immediately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub asr_kind: AsrKind,
    pub interface: InterfaceKind,
    pub mode: TrainingMode,
    /// Warm-start the NLU on ground-truth text instead of on ASR
    /// representations.
    pub pretrained_nlu: bool,
    /// Keep ASR parameters fixed during the joint phase.
    pub freeze_asr: bool,
    /// Skip the maximum-likelihood warm start of a joint run.
    pub cold_start: bool,
    /// Parameters copied by name before training; shapes that do not match
    /// are left at their initial values.
    pub init_checkpoint: Option<PathBuf>,
    /// Maximum-likelihood epochs (the whole run in independent mode).
    pub epochs: usize,
    /// Leading maximum-likelihood epochs in which the transducer's prediction
    /// path stays fixed, so the encoder learns the acoustics before the
    /// prediction network can act as a language model.
    pub encoder_only_epochs: usize,
    pub joint_epochs: usize,
    pub optimizer: OptimizerConfig,
    pub beam_width: usize,
    pub nbest_size: usize,
    pub lambda_seq: f64,
    pub cost_metric: MetricCost,
    /// Keep the parameters of the epoch with the lowest dev SemER.
    pub select_best: bool,
    /// Standardize ASR input features with training-set statistics.
    pub normalize_features: bool,
    pub asr_tokenizer: TokenizerMode,
    pub nlu_tokenizer: TokenizerMode,
    pub rnnt: RnntConfig,
    pub las: LasConfig,
    pub nlu: TnluConfig,
    pub data: DataConfig,
    pub output_dir: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            asr_kind: AsrKind::Rnnt,
            interface: InterfaceKind::Text,
            mode: TrainingMode::Independent,
            pretrained_nlu: false,
            freeze_asr: false,
            cold_start: false,
            init_checkpoint: None,
            epochs: 10,
            encoder_only_epochs: 0,
            joint_epochs: 5,
            optimizer: OptimizerConfig::default(),
            beam_width: 4,
            nbest_size: 4,
            lambda_seq: 1.0,
            cost_metric: MetricCost::Semer,
            select_best: true,
            normalize_features: true,
            asr_tokenizer: TokenizerMode::Word,
            nlu_tokenizer: TokenizerMode::Word,
            rnnt: RnntConfig::default(),
            las: LasConfig::default(),
            nlu: TnluConfig::default(),
            data: DataConfig::default(),
            output_dir: None,
            threads: None,
        }
    }
}

impl RunConfig {
    /// Parses TOML, applies `key=value` overrides (dotted keys, values in
    /// TOML syntax with bare strings accepted) and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let cfg: RunConfig = parse_toml_with_overrides(text, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies the output-directory and thread-count environment variables.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(dir) = std::env::var(ENV_OUTPUT_DIR) {
            self.output_dir = Some(dir.into());
        }
        if let Ok(n) = std::env::var(ENV_THREADS) {
            let n = n
                .parse()
                .map_err(|_| Error::Config(format!("{ENV_THREADS}={n} is not a thread count")))?;
            self.threads = Some(n);
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        validate_mode(self.mode, self.interface, self.pretrained_nlu)?;
        let positive = [
            ("beam_width", self.beam_width),
            ("nbest_size", self.nbest_size),
            ("optimizer.batch_size", self.optimizer.batch_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        let reals = [
            (
                "optimizer.learning_rate",
                Some(self.optimizer.learning_rate),
            ),
            (
                "optimizer.joint_learning_rate",
                self.optimizer.joint_learning_rate,
            ),
            ("optimizer.clip_norm", self.optimizer.clip_norm),
        ];
        for (name, v) in reals {
            if v.is_some_and(|v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lambda_seq >= 0.0 && self.lambda_seq.is_finite()) {
            return Err(Error::Config("lambda_seq must be non-negative".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        let files = [&self.data.train, &self.data.dev, &self.data.test];
        let given = files.iter().filter(|f| f.is_some()).count();
        match (self.data.corpus.is_some(), given) {
            (true, 0) | (false, 3) => Ok(()),
            (true, _) => Err(Error::Config(
                "give either data.corpus or dataset files, not both".into(),
            )),
            (false, _) => Err(Error::Config(
                "data.train, data.dev and data.test must all be set".into(),
            )),
        }
    }

    /// SHA-256 over the crate version and the canonical JSON of the config.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(env!("CARGO_PKG_VERSION").as_bytes());
        h.update(serde_json::to_vec(self).expect("config serializes"));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parses TOML into `T` after applying `key=value` overrides.
pub fn parse_toml_with_overrides<T: serde::de::DeserializeOwned>(
    text: &str,
    overrides: &[String],
) -> Result<T> {
    let mut value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    value
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| Error::Config(format!("empty override key in `{spec}`")))?;
    let mut node = root;
    for p in parts {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
        node = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::Config(format!("override `{key}` does not address a table entry")))?
        .insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text, &[]).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("", &[]).unwrap(), cfg);
    }

    #[test]
    fn overrides() {
        let cfg = RunConfig::from_toml(
            "epochs = 3\n",
            &[
                "epochs=1".into(),
                "interface=hidden".into(),
                "mode = joint_mle_seq".into(),
                "data.corpus.noise_std=0.25".into(),
                "optimizer.learning_rate=0.01".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.epochs, 1);
        assert_eq!(cfg.interface, InterfaceKind::Hidden);
        assert_eq!(cfg.data.corpus.unwrap().noise_std, 0.25);
        assert_eq!(cfg.optimizer.learning_rate, 0.01);
    }

    #[test]
    fn rejections() {
        let bad = |text: &str, ov: &[&str]| {
            let ov: Vec<String> = ov.iter().map(|s| s.to_string()).collect();
            RunConfig::from_toml(text, &ov).unwrap_err().to_string()
        };
        assert!(bad("", &["interface=posterior"]).contains("posterior"));
        assert!(bad("", &["epochz=2"]).contains("epochz"));
        assert!(bad("", &["beam_width=0"]).contains("beam_width"));
        assert!(bad("version = 2", &[]).contains("version"));
        assert!(bad("", &["data.train=a.jsonl"]).contains("data"));
        assert!(bad("", &["noequals"]).contains("key=value"));
    }

    #[test]
    fn hash_tracks_config() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn shipped_baseline_loads() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/baseline.toml");
        let cfg = RunConfig::load(&path, &[]).unwrap();
        assert_eq!(cfg.encoder_only_epochs, 10);
        assert_eq!(cfg.optimizer.clip_norm, Some(5.0));
        assert_eq!(cfg.data.corpus.unwrap().noise_std, 0.25);
    }
}
