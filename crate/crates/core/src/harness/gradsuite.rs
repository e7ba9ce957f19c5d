use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::pipeline::Pipeline;
use crate::asr::{AsrKind, LasConfig, RnntConfig};
use crate::autograd::{grad_check_params, GradCheckReport, ParamStore, Tape, Var};
use crate::data::{
    generate_corpus, CorpusSpec, Grammar, IntentDef, SlotLexicon, TemplateItem, Utterance,
};
use crate::error::Result;
use crate::interfaces::{apply_interface, InterfaceKind};
use crate::losses::{
    multitask_loss, nlu_loss, run_candidate_through_nlu, sequence_loss, MetricCost,
};
use crate::nlu::{NluLabels, TnluConfig};
use crate::nn::Graph;

pub const SUITE_EPS: f64 = 1e-5;
pub const SUITE_RTOL: f64 = 1e-3;
/// Coordinates probed per parameter tensor.
const COORDS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl GradCheckRow {
    fn new(name: String, r: &GradCheckReport) -> Self {
        Self {
            name,
            coords: r.entries.len(),
            max_rel_error: r.max_rel_error,
            passed: r.passed,
        }
    }
}

fn tiny_grammar() -> Grammar {
    let w = |s: &str| TemplateItem::Word(s.into());
    let s = |s: &str| TemplateItem::Slot(s.into());
    Grammar {
        intents: vec![
            IntentDef {
                name: "play".into(),
                domain: "media".into(),
                templates: vec![vec![w("play"), s("song")]],
            },
            IntentDef {
                name: "stop".into(),
                domain: "media".into(),
                templates: vec![vec![w("stop"), s("song")], vec![s("place"), w("off")]],
            },
        ],
        slots: vec![
            SlotLexicon {
                name: "song".into(),
                values: vec!["jazz".into(), "rock".into()],
            },
            SlotLexicon {
                name: "place".into(),
                values: vec!["home".into()],
            },
        ],
    }
}

/// Two-token utterances rendered with at most two frames per token, so every
/// lattice has `T <= 4`.
pub fn tiny_corpus(seed: u64) -> Result<Vec<Utterance>> {
    generate_corpus(&CorpusSpec {
        grammar: Some(tiny_grammar()),
        utterance_count: 12,
        feature_dim: 3,
        frames_per_token: (1, 2),
        noise_std: 0.3,
        seed,
        ..CorpusSpec::default()
    })
}

pub fn tiny_config(seed: u64, asr_kind: AsrKind, interface: InterfaceKind) -> RunConfig {
    RunConfig {
        seed,
        asr_kind,
        interface,
        rnnt: RnntConfig {
            encoder_layers: 1,
            encoder_dim: 5,
            embed_dim: 4,
            pred_layers: 1,
            pred_dim: 5,
            joint_dim: 6,
            max_symbols_per_frame: 2,
            ..RnntConfig::default()
        },
        las: LasConfig {
            encoder_layers: 1,
            encoder_dim: 3,
            embed_dim: 4,
            decoder_layers: 1,
            decoder_dim: 5,
            attention_dim: 4,
            attention_heads: 2,
            decoder_out_dim: 6,
            max_len: 3,
            ..LasConfig::default()
        },
        nlu: TnluConfig {
            model_dim: 6,
            layers: 1,
            heads: 2,
            ff_dim: 7,
            cross_layers: 1,
            head_hidden: 5,
            ..TnluConfig::default()
        },
        ..RunConfig::default()
    }
}

fn check<F>(store: &mut ParamStore, prefix: &str, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t ParamStore, &'t Tape) -> Result<Var<'t>>,
{
    let ids = store.ids_with_prefix(prefix);
    grad_check_params(store, &ids, f, SUITE_EPS, SUITE_RTOL, COORDS)
}

/// Finite-difference checks of every training objective on tiny models:
/// ASR likelihood for both ASR families, NLU likelihood, and the multi-task
/// and sequence losses through each of the five interfaces.
pub fn grad_check_suite(seed: u64) -> Result<Vec<GradCheckRow>> {
    let corpus = tiny_corpus(seed)?;
    let utt = &corpus[0];
    let mut rows = Vec::new();
    for asr_kind in [AsrKind::Rnnt, AsrKind::Las] {
        let asr_name = match asr_kind {
            AsrKind::Rnnt => "rnnt",
            AsrKind::Las => "las",
        };
        for kind in InterfaceKind::ALL {
            let p = Pipeline::new(&tiny_config(seed, asr_kind, kind), &corpus)?;
            let mut store = p.store.clone();
            let y = p.asr_targets(utt);
            let x = p.features(utt);
            if kind == InterfaceKind::Text {
                let r = check(&mut store, "asr.", |s, tape| {
                    p.asr.mle_loss(Graph::new(tape, s), &x, &y)
                })?;
                rows.push(GradCheckRow::new(format!("asr_mle/{asr_name}"), &r));
                if asr_kind == AsrKind::Rnnt {
                    let r = check(&mut store, "nlu.", |s, tape| {
                        let g = Graph::new(tape, s);
                        let (io, stream) = p.reference_input(g, utt, true)?;
                        let t = p.nlu_targets(utt, &stream)?;
                        nlu_loss(&p.nlu.forward(g, &io)?, &t.slots, t.intent, t.domain)
                    })?;
                    rows.push(GradCheckRow::new("nlu_mle/text".into(), &r));
                }
            }
            let r = check(&mut store, "", |s, tape| {
                let g = Graph::new(tape, s);
                let l_asr = p.asr.mle_loss(g, &x, &y)?;
                let (io, stream) = p.reference_input(g, utt, false)?;
                let t = p.nlu_targets(utt, &stream)?;
                multitask_loss(
                    l_asr,
                    nlu_loss(&p.nlu.forward(g, &io)?, &t.slots, t.intent, t.domain)?,
                )
            })?;
            rows.push(GradCheckRow::new(
                format!("multitask/{asr_name}/{kind}"),
                &r,
            ));

            // candidates, predicted labels and costs are fixed outside the
            // differentiated function
            let beam = p.asr.search(&p.store, &x, 3)?;
            let reference = utt.annotation();
            let mut fixed: Vec<(Vec<usize>, NluLabels, f64)> = Vec::new();
            for (i, (tokens, _)) in beam.iter().enumerate() {
                let tape = Tape::inference();
                let g = Graph::new(&tape, &p.store);
                let exp = p.asr.expose(g, &x, tokens, None)?;
                let cand = run_candidate_through_nlu(g, &exp, kind, &p.nlu, p.context())?;
                let cost = MetricCost::Wer.cost(&cand.annotation, &reference) + 0.25 * i as f64;
                fixed.push((tokens.clone(), cand.labels, cost));
            }
            let costs: Vec<f64> = fixed.iter().map(|c| c.2).collect();
            let r = check(&mut store, "", |s, tape| {
                let g = Graph::new(tape, s);
                let mut lps = Vec::new();
                for (tokens, labels, _) in &fixed {
                    let exp = p.asr.expose(g, &x, tokens, None)?;
                    let io = apply_interface(kind, &exp, &p.asr_tokenizer, &p.nlu_tokenizer)?;
                    let pred = p.nlu.forward(g, &io)?;
                    let nlu_lp =
                        nlu_loss(&pred, &labels.slots, labels.intent, labels.domain)?.neg();
                    lps.push(exp.log_prob.add(nlu_lp)?);
                }
                sequence_loss(&lps, &costs)
            })?;
            rows.push(GradCheckRow::new(format!("sequence/{asr_name}/{kind}"), &r));
        }
    }
    Ok(rows)
}
