use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::asr::{AsrExposure, AsrKind, AsrModel, LasConfig, LasModel, RnntConfig, RnntModel};
use crate::autograd::{ParamStore, Tape, Tensor};
use crate::data::{LabelSet, Tokenizer, Utterance, EOS};
use crate::error::{Error, Result};
use crate::interfaces::{
    apply_interface, continuous_dim, InterfaceKind, InterfaceOutput, InterfaceValue,
};
use crate::losses::{run_candidate_through_nlu, SluContext};
use crate::metrics::SluAnnotation;
use crate::nlu::{nlu_predict, TnluConfig, TnluModel};
use crate::nn::Graph;

pub const ASR_PREFIX: &str = "asr";
pub const NLU_PREFIX: &str = "nlu";
pub const CHECKPOINT_FORMAT: &str = "slu-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Per-dimension feature standardization estimated on training frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl FeatureNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            inv_std: vec![1.0; dim],
        }
    }

    pub fn estimate(utts: &[Utterance], dim: usize) -> Self {
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut n = 0usize;
        for frame in utts.iter().flat_map(|u| &u.features) {
            for (k, &v) in frame.iter().enumerate().take(dim) {
                sum[k] += v;
                sq[k] += v * v;
            }
            n += 1;
        }
        if n == 0 {
            return Self::identity(dim);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let inv_std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = q / n as f64 - m * m;
                if var > 1e-12 {
                    1.0 / var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, inv_std }
    }

    pub fn apply(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|f| {
                f.iter()
                    .zip(self.mean.iter().zip(&self.inv_std))
                    .map(|(v, (m, s))| (v - m) * s)
                    .collect()
            })
            .collect()
    }
}

/// ASR, interface and NLU sharing one parameter store.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub store: ParamStore,
    pub feature_norm: FeatureNorm,
    pub asr: AsrModel,
    pub nlu: TnluModel,
    pub interface: InterfaceKind,
    pub asr_tokenizer: Tokenizer,
    pub nlu_tokenizer: Tokenizer,
    pub labels: LabelSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Architecture, vocabularies and parameter values; enough to rebuild a
/// [`Pipeline`] without the training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub asr_kind: AsrKind,
    pub interface: InterfaceKind,
    pub rnnt: RnntConfig,
    pub las: LasConfig,
    pub nlu: TnluConfig,
    pub asr_tokenizer: Tokenizer,
    pub nlu_tokenizer: Tokenizer,
    pub labels: LabelSet,
    pub feature_norm: FeatureNorm,
    pub params: BTreeMap<String, SavedTensor>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let ckpt: Checkpoint = serde_json::from_reader(file)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "{} is not a version {CHECKPOINT_VERSION} checkpoint",
                path.display()
            )));
        }
        Ok(ckpt)
    }
}

/// One decoded utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub id: String,
    pub annotation: SluAnnotation,
    /// Beam entries as (text, score).
    pub nbest: Vec<(String, f64)>,
}

/// Training inputs for the NLU derived from an utterance's reference.
#[derive(Debug, Clone, PartialEq)]
pub struct NluTargets {
    pub slots: Vec<usize>,
    pub intent: usize,
    pub domain: usize,
}

impl Pipeline {
    /// Builds fresh models sized from the training data.
    pub fn new(cfg: &RunConfig, train: &[Utterance]) -> Result<Self> {
        let first = train.first().ok_or(Error::EmptyInput("training set"))?;
        let feature_dim = first
            .features
            .first()
            .map(Vec::len)
            .ok_or(Error::EmptyInput("utterance features"))?;
        let texts = || train.iter().map(|u| u.transcript.as_str());
        let asr_tokenizer = Tokenizer::from_texts(cfg.asr_tokenizer, texts());
        let nlu_tokenizer = Tokenizer::from_texts(cfg.nlu_tokenizer, texts());
        let labels = LabelSet::from_utterances(train);
        let rnnt = RnntConfig {
            feature_dim,
            vocab_size: asr_tokenizer.vocab_size(),
            ..cfg.rnnt.clone()
        };
        let las = LasConfig {
            feature_dim,
            vocab_size: asr_tokenizer.vocab_size(),
            ..cfg.las.clone()
        };
        let norm = if cfg.normalize_features {
            FeatureNorm::estimate(train, feature_dim)
        } else {
            FeatureNorm::identity(feature_dim)
        };
        Self::build(
            cfg.seed,
            cfg.asr_kind,
            cfg.interface,
            rnnt,
            las,
            cfg.nlu.clone(),
            asr_tokenizer,
            nlu_tokenizer,
            labels,
            norm,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        seed: u64,
        asr_kind: AsrKind,
        interface: InterfaceKind,
        rnnt: RnntConfig,
        las: LasConfig,
        nlu: TnluConfig,
        asr_tokenizer: Tokenizer,
        nlu_tokenizer: Tokenizer,
        labels: LabelSet,
        feature_norm: FeatureNorm,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let asr = match asr_kind {
            AsrKind::Rnnt => {
                AsrModel::Rnnt(RnntModel::new(&mut store, ASR_PREFIX, rnnt, &mut rng)?)
            }
            AsrKind::Las => AsrModel::Las(LasModel::new(&mut store, ASR_PREFIX, las, &mut rng)?),
        };
        let nlu_config = TnluConfig {
            vocab_size: nlu_tokenizer.vocab_size(),
            num_tags: labels.num_tags(),
            num_intents: labels.intents.len(),
            num_domains: labels.domains.len(),
            continuous_dim: continuous_dim(interface, &asr),
            memory_dim: (interface == InterfaceKind::AudioAttention).then(|| asr.encoder_dim()),
            ..nlu
        };
        let nlu = TnluModel::new(&mut store, NLU_PREFIX, nlu_config, &mut rng)?;
        Ok(Self {
            store,
            feature_norm,
            asr,
            nlu,
            interface,
            asr_tokenizer,
            nlu_tokenizer,
            labels,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut p = Self::build(
            0,
            ckpt.asr_kind,
            ckpt.interface,
            ckpt.rnnt.clone(),
            ckpt.las.clone(),
            ckpt.nlu.clone(),
            ckpt.asr_tokenizer.clone(),
            ckpt.nlu_tokenizer.clone(),
            ckpt.labels.clone(),
            ckpt.feature_norm.clone(),
        )?;
        p.load_params(ckpt, true)?;
        Ok(p)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let (rnnt, las) = match &self.asr {
            AsrModel::Rnnt(m) => (m.config.clone(), LasConfig::default()),
            AsrModel::Las(m) => (RnntConfig::default(), m.config.clone()),
        };
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            asr_kind: self.asr.kind(),
            interface: self.interface,
            rnnt,
            las,
            nlu: self.nlu.config.clone(),
            asr_tokenizer: self.asr_tokenizer.clone(),
            nlu_tokenizer: self.nlu_tokenizer.clone(),
            labels: self.labels.clone(),
            feature_norm: self.feature_norm.clone(),
            params: self
                .store
                .iter()
                .map(|(_, name, t)| {
                    (
                        name.to_string(),
                        SavedTensor {
                            shape: t.shape().to_vec(),
                            data: t.data().to_vec(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Copies checkpoint values into the store by name. In strict mode every
    /// parameter must be present with the same shape; otherwise mismatches
    /// are skipped. Returns the number of tensors copied.
    pub fn load_params(&mut self, ckpt: &Checkpoint, strict: bool) -> Result<usize> {
        let ids: Vec<_> = self.store.ids().collect();
        let mut copied = 0;
        for id in ids {
            let name = self.store.name(id).to_string();
            let Some(saved) = ckpt.params.get(&name) else {
                if strict {
                    return Err(Error::Checkpoint {
                        param: name,
                        message: "missing from checkpoint".into(),
                    });
                }
                continue;
            };
            let shape = self.store.get(id).shape().to_vec();
            if saved.shape != shape || saved.data.len() != shape.iter().product::<usize>() {
                if strict {
                    return Err(Error::Checkpoint {
                        param: name,
                        message: format!(
                            "checkpoint shape {:?}, model shape {:?}",
                            saved.shape, shape
                        ),
                    });
                }
                continue;
            }
            self.store
                .get_mut(id)
                .data_mut()
                .copy_from_slice(&saved.data);
            copied += 1;
        }
        Ok(copied)
    }

    /// Normalized ASR input frames.
    pub fn features(&self, utt: &Utterance) -> Vec<Vec<f64>> {
        self.feature_norm.apply(&utt.features)
    }

    pub fn context(&self) -> SluContext<'_> {
        SluContext {
            asr_tokenizer: &self.asr_tokenizer,
            nlu_tokenizer: &self.nlu_tokenizer,
            labels: &self.labels,
        }
    }

    pub fn asr_prefix(&self) -> String {
        format!("{ASR_PREFIX}.")
    }

    /// Reference token sequence for the ASR; attention models also score the
    /// end-of-sequence token.
    pub fn asr_targets(&self, utt: &Utterance) -> Vec<usize> {
        let mut y = self.asr_tokenizer.tokenize(&utt.transcript);
        if self.asr.kind() == AsrKind::Las {
            y.push(EOS);
        }
        y
    }

    pub fn reference_tokens(&self, utt: &Utterance) -> Vec<usize> {
        self.asr_tokenizer.tokenize(&utt.transcript)
    }

    /// Slot, intent and domain targets for an NLU whose input tokens are
    /// `stream` (tokens of the interface's stream tokenizer).
    pub fn nlu_targets(&self, utt: &Utterance, stream: &[usize]) -> Result<NluTargets> {
        let tok = self.context().stream_tokenizer(self.interface);
        let reference = tok.tokenize(&utt.transcript);
        let ref_tags = self
            .labels
            .token_tags(tok, &reference, &self.labels.word_tags(utt)?)?;
        let slots = if stream == reference.as_slice() {
            ref_tags
        } else {
            crate::losses::align_slot_targets(&reference, &ref_tags, stream)?
        };
        Ok(NluTargets {
            slots,
            intent: self.labels.intent_id(&utt.intent)?,
            domain: self.labels.domain_id(&utt.domain)?,
        })
    }

    /// ASR representations with the decoder forced onto the reference.
    pub fn forced_exposure<'a>(&self, g: Graph<'a>, utt: &Utterance) -> Result<AsrExposure<'a>> {
        self.asr
            .expose(g, &self.features(utt), &self.reference_tokens(utt), None)
    }

    /// NLU input built from the reference transcript alone: tokens for
    /// token-input NLUs, one-hot rows for the posterior NLU. Other interfaces
    /// have no text-only form.
    pub fn text_input<'a>(&self, g: Graph<'a>, utt: &Utterance) -> Result<InterfaceOutput<'a>> {
        let v = match self.interface {
            InterfaceKind::Text => {
                InterfaceValue::Tokens(self.nlu_tokenizer.tokenize(&utt.transcript))
            }
            InterfaceKind::Posterior => {
                let ids = self.reference_tokens(utt);
                let v = self.asr.vocab_size();
                let mut t = Tensor::zeros(&[ids.len(), v]);
                for (r, &id) in ids.iter().enumerate() {
                    t.data_mut()[r * v + id] = 1.0;
                }
                InterfaceValue::Continuous(g.constant(t))
            }
            other => {
                return Err(Error::Interface {
                    interface: other.name(),
                    reason: "has no text-only input; use the forced ASR exposure".into(),
                })
            }
        };
        Ok(InterfaceOutput {
            v,
            h_i: None,
            differentiable: false,
        })
    }

    /// NLU input from the reference: text when the interface allows it and
    /// `prefer_text` is set, the forced ASR exposure otherwise.
    pub fn reference_input<'a>(
        &self,
        g: Graph<'a>,
        utt: &Utterance,
        prefer_text: bool,
    ) -> Result<(InterfaceOutput<'a>, Vec<usize>)> {
        let text_ok = matches!(
            self.interface,
            InterfaceKind::Text | InterfaceKind::Posterior
        );
        if prefer_text && text_ok {
            let io = self.text_input(g, utt)?;
            let stream = match &io.v {
                InterfaceValue::Tokens(t) => t.clone(),
                InterfaceValue::Continuous(_) => self.reference_tokens(utt),
            };
            return Ok((io, stream));
        }
        self.interface_input(&self.forced_exposure(g, utt)?)
    }

    /// The configured interface applied to an exposure, with the token stream
    /// its NLU labels align to.
    pub fn interface_input<'a>(
        &self,
        exp: &AsrExposure<'a>,
    ) -> Result<(InterfaceOutput<'a>, Vec<usize>)> {
        let io = apply_interface(
            self.interface,
            exp,
            &self.asr_tokenizer,
            &self.nlu_tokenizer,
        )?;
        let stream = match &io.v {
            InterfaceValue::Tokens(t) => t.clone(),
            InterfaceValue::Continuous(_) => exp.hypothesis.tokens.clone(),
        };
        Ok((io, stream))
    }

    /// Beam decoding followed by interface and NLU on the best hypothesis.
    pub fn decode(&self, utt: &Utterance, beam_width: usize) -> Result<Decoded> {
        let x = self.features(utt);
        let beam = self.asr.search(&self.store, &x, beam_width)?;
        let (tokens, score) = beam.first().cloned().unwrap_or_default();
        let tape = Tape::inference();
        let g = Graph::new(&tape, &self.store);
        let exp = self.asr.expose(g, &x, &tokens, Some(score))?;
        let cand = run_candidate_through_nlu(g, &exp, self.interface, &self.nlu, self.context())?;
        Ok(Decoded {
            id: utt.id.clone(),
            annotation: cand.annotation,
            nbest: beam
                .iter()
                .map(|(t, s)| (self.asr_tokenizer.detokenize(t), *s))
                .collect(),
        })
    }

    /// NLU prediction from the reference transcript (no ASR errors). Uses the
    /// forced ASR exposure for interfaces without a text-only input.
    pub fn predict_from_reference(&self, utt: &Utterance) -> Result<SluAnnotation> {
        let tape = Tape::inference();
        let g = Graph::new(&tape, &self.store);
        let (io, stream) = self.reference_input(g, utt, true)?;
        let labels = nlu_predict(&self.nlu.forward(g, &io)?);
        let words: Vec<String> = utt.words().iter().map(|w| w.to_string()).collect();
        let tok = self.context().stream_tokenizer(self.interface);
        let word_tags = self
            .labels
            .word_tags_from_tokens(tok, &stream, &labels.slots);
        Ok(self
            .labels
            .annotation(&words, &word_tags, labels.intent, labels.domain))
    }
}
