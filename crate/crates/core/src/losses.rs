//! Training objectives: ASR and NLU maximum likelihood, their multi-task sum,
//! and the n-best expected-cost sequence loss.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::asr::{AsrExposure, AsrModel};
use crate::autograd::{ParamStore, Tape, Tensor, Var};
use crate::data::{LabelSet, Tokenizer, TAG_O};
use crate::error::{Error, Result};
use crate::interfaces::{apply_interface, InterfaceKind, InterfaceValue};
use crate::metrics::{align, semer, slu_f1, EditOp, SluAnnotation};
use crate::nlu::{nlu_predict, NluLabels, NluPrediction, TnluModel};
use crate::nn::Graph;

/// `-ln P(y | x)` under teacher forcing. `y` is scored as given.
pub fn asr_mle_loss<'a>(
    model: &AsrModel,
    g: Graph<'a>,
    x: &[Vec<f64>],
    y: &[usize],
) -> Result<Var<'a>> {
    model.mle_loss(g, x, y)
}

/// Sum of per-token slot cross-entropies plus intent and domain
/// cross-entropies.
pub fn nlu_loss<'a>(
    pred: &NluPrediction<'a>,
    slots: &[usize],
    intent: usize,
    domain: usize,
) -> Result<Var<'a>> {
    let shape = pred.slot_logits.shape();
    if shape[0] != slots.len() {
        return Err(Error::LengthMismatch {
            what: "slot targets vs NLU tokens",
            left: slots.len(),
            right: shape[0],
        });
    }
    let tags = shape[1];
    let mut idx = Vec::with_capacity(slots.len());
    for (i, &s) in slots.iter().enumerate() {
        if s >= tags {
            return Err(Error::IndexOutOfRange {
                op: "slot target",
                index: s,
                size: tags,
            });
        }
        idx.push(i * tags + s);
    }
    let slot_ll = pred.slot_logits.log_softmax(1)?.gather(&idx)?.sum();
    let intent_ll = pred.intent_logits.log_softmax(0)?.gather(&[intent])?.sum();
    let domain_ll = pred.domain_logits.log_softmax(0)?.gather(&[domain])?.sum();
    Ok(slot_ll.add(intent_ll)?.add(domain_ll)?.neg())
}

pub fn multitask_loss<'a>(l_asr: Var<'a>, l_nlu: Var<'a>) -> Result<Var<'a>> {
    l_asr.add(l_nlu)
}

/// `sum_c M(c) p(c)` with `p` normalized over the candidates. Its gradient
/// is the n-best approximation of the expected-cost gradient; costs are
/// constants.
pub fn sequence_loss<'a>(log_probs: &[Var<'a>], costs: &[f64]) -> Result<Var<'a>> {
    let first = log_probs.first().ok_or(Error::EmptyInput("n-best list"))?;
    if log_probs.len() != costs.len() {
        return Err(Error::LengthMismatch {
            what: "candidates vs costs",
            left: log_probs.len(),
            right: costs.len(),
        });
    }
    if let Some(c) = costs.iter().find(|c| !c.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "candidate cost {c} is not finite"
        )));
    }
    let tape = first.tape();
    let column: Vec<Var<'a>> = log_probs
        .iter()
        .map(|lp| lp.reshape(&[1]))
        .collect::<Result<_>>()?;
    let p = tape.concat(&column, 0)?.softmax(0)?;
    Ok(p.mul(tape.constant(Tensor::vector(costs.to_vec())))?.sum())
}

/// Backpropagates the sequence loss and adds the resulting parameter
/// gradients into `store`. Returns the loss value.
pub fn sequence_loss_grad<'a>(
    store: &mut ParamStore,
    tape: &'a Tape,
    log_probs: &[Var<'a>],
    costs: &[f64],
) -> Result<f64> {
    let loss = sequence_loss(log_probs, costs)?;
    tape.backward(loss)?;
    store.accumulate(&tape.param_grads(), 1.0);
    Ok(loss.item())
}

/// Non-differentiable SLU cost of a candidate against the reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricCost {
    Wer,
    Semer,
    SluF1,
}

impl MetricCost {
    pub fn cost(self, candidate: &SluAnnotation, reference: &SluAnnotation) -> f64 {
        match self {
            MetricCost::Wer => {
                let (_, c) = align(&reference.transcript, &candidate.transcript);
                if reference.transcript.is_empty() {
                    c.errors() as f64
                } else {
                    c.errors() as f64 / reference.transcript.len() as f64
                }
            }
            MetricCost::Semer => {
                let (rate, c) = semer(reference, candidate);
                if rate.is_finite() {
                    rate
                } else {
                    c.errors() as f64
                }
            }
            MetricCost::SluF1 => 1.0 - slu_f1(reference, candidate).0,
        }
    }
}

impl FromStr for MetricCost {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wer" => Ok(MetricCost::Wer),
            "semer" => Ok(MetricCost::Semer),
            "slu_f1" => Ok(MetricCost::SluF1),
            _ => Err(Error::Config(format!("unknown cost metric `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    Independent,
    JointSeq,
    JointMleSeq,
}

impl TrainingMode {
    pub const ALL: [TrainingMode; 3] = [
        TrainingMode::Independent,
        TrainingMode::JointSeq,
        TrainingMode::JointMleSeq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainingMode::Independent => "independent",
            TrainingMode::JointSeq => "joint_seq",
            TrainingMode::JointMleSeq => "joint_mle_seq",
        }
    }
}

impl fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainingMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown training mode `{s}`")))
    }
}

/// Allowed combinations: text trains independently or jointly with the
/// sequence loss; every neural interface trains jointly with MLE plus the
/// sequence loss; a pretrained NLU can only sit behind the text or
/// posterior interface.
pub fn validate_mode(
    mode: TrainingMode,
    interface: InterfaceKind,
    pretrained_nlu: bool,
) -> Result<()> {
    let reject = |why: &str| {
        Err(Error::Config(format!(
            "interface `{interface}` with mode `{mode}`{}: {why}",
            if pretrained_nlu {
                " and a pretrained NLU"
            } else {
                ""
            }
        )))
    };
    let mode_ok = match interface {
        InterfaceKind::Text => matches!(mode, TrainingMode::Independent | TrainingMode::JointSeq),
        _ => mode == TrainingMode::JointMleSeq,
    };
    if !mode_ok {
        return reject(match interface {
            InterfaceKind::Text => {
                "the text interface trains independently or with the sequence loss"
            }
            _ => "neural interfaces train jointly with MLE plus the sequence loss",
        });
    }
    if pretrained_nlu && !matches!(interface, InterfaceKind::Text | InterfaceKind::Posterior) {
        return reject("only the text and posterior interfaces accept a pretrained NLU");
    }
    if pretrained_nlu && mode == TrainingMode::Independent {
        return reject("independent training builds its own NLU");
    }
    Ok(())
}

/// Tokenizers and label inventories shared by ASR and NLU.
#[derive(Debug, Clone, Copy)]
pub struct SluContext<'c> {
    pub asr_tokenizer: &'c Tokenizer,
    pub nlu_tokenizer: &'c Tokenizer,
    pub labels: &'c LabelSet,
}

impl<'c> SluContext<'c> {
    /// Tokenizer whose tokens line up with `v` for this interface.
    pub fn stream_tokenizer(&self, kind: InterfaceKind) -> &'c Tokenizer {
        if kind.is_discrete() {
            self.nlu_tokenizer
        } else {
            self.asr_tokenizer
        }
    }
}

/// An n-best entry after interface and NLU.
#[derive(Debug, Clone)]
pub struct Candidate<'a> {
    pub annotation: SluAnnotation,
    pub labels: NluLabels,
    /// `ln P_asr(w | x) + ln P_nlu(labels | v)`, differentiable.
    pub log_prob: Var<'a>,
    pub prediction: NluPrediction<'a>,
    /// Token stream aligned with `v` (NLU tokens for discrete interfaces,
    /// ASR tokens otherwise).
    pub stream: Vec<usize>,
}

pub fn run_candidate_through_nlu<'a>(
    g: Graph<'a>,
    exp: &AsrExposure<'a>,
    kind: InterfaceKind,
    nlu: &TnluModel,
    ctx: SluContext<'_>,
) -> Result<Candidate<'a>> {
    let io = apply_interface(kind, exp, ctx.asr_tokenizer, ctx.nlu_tokenizer)?;
    let stream = match &io.v {
        InterfaceValue::Tokens(t) => t.clone(),
        InterfaceValue::Continuous(_) => exp.hypothesis.tokens.clone(),
    };
    let prediction = nlu.forward(g, &io)?;
    let labels = nlu_predict(&prediction);
    let nlu_lp = nlu_loss(&prediction, &labels.slots, labels.intent, labels.domain)?.neg();
    let words: Vec<String> = ctx
        .asr_tokenizer
        .detokenize(&exp.hypothesis.tokens)
        .split_whitespace()
        .map(str::to_string)
        .collect();
    let word_tags =
        ctx.labels
            .word_tags_from_tokens(ctx.stream_tokenizer(kind), &stream, &labels.slots);
    let annotation = ctx
        .labels
        .annotation(&words, &word_tags, labels.intent, labels.domain);
    Ok(Candidate {
        annotation,
        labels,
        log_prob: exp.log_prob.add(nlu_lp)?,
        prediction,
        stream,
    })
}

/// Transfers reference tags onto a hypothesis token stream through the edit
/// alignment: matched and substituted tokens inherit the reference tag,
/// inserted tokens are tagged `O`.
pub fn align_slot_targets(
    reference: &[usize],
    ref_tags: &[usize],
    hyp: &[usize],
) -> Result<Vec<usize>> {
    if reference.len() != ref_tags.len() {
        return Err(Error::LengthMismatch {
            what: "reference tokens vs tags",
            left: reference.len(),
            right: ref_tags.len(),
        });
    }
    let mut out = vec![TAG_O; hyp.len()];
    for op in align(reference, hyp).0 {
        match op {
            EditOp::Match { ref_pos, hyp_pos } | EditOp::Substitute { ref_pos, hyp_pos } => {
                out[hyp_pos] = ref_tags[ref_pos]
            }
            EditOp::Insert { .. } | EditOp::Delete { .. } => {}
        }
    }
    Ok(out)
}
