use std::path::Path;
use std::time::Instant;

use crate::asr::AsrModel;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use super::config::{OptimizerKind, RunConfig};
use super::pipeline::{Checkpoint, Pipeline};
use crate::autograd::{Adam, ParamId, ParamStore, Sgd, Tape};
use crate::data::{generate_corpus, read_dataset, split_corpus, Splits, Utterance};
use crate::error::{Error, Result};
use crate::interfaces::InterfaceKind;
use crate::losses::{nlu_loss, run_candidate_through_nlu, sequence_loss, TrainingMode};
use crate::metrics::{evaluate_corpus, MetricReport, SluAnnotation};
use crate::nn::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Separate maximum-likelihood training of ASR and NLU.
    Warmup,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: Phase,
    pub epoch: usize,
    /// Mean per-utterance objective.
    pub loss: f64,
    pub asr_loss: f64,
    pub nlu_loss: f64,
    pub seq_loss: f64,
    pub dev_semer: Option<f64>,
    pub dev_wer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub config_hash: String,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept; `None` means the final ones.
    pub selected: Option<(Phase, usize)>,
    pub dev: MetricReport,
    pub test: MetricReport,
    /// NLU fed the reference transcript instead of ASR output.
    pub dev_reference_text: MetricReport,
    pub wall_clock_secs: f64,
}

impl RunReport {
    /// The report with timing removed; equal across repeated runs.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub pipeline: Pipeline,
}

#[derive(Debug, Clone, Copy, Default)]
struct LossParts {
    total: f64,
    asr: f64,
    nlu: f64,
    seq: f64,
}

type Grads = Vec<(ParamId, Vec<f64>)>;

enum Optimizer {
    Adam(Adam),
    Sgd(Sgd),
}

fn without_prediction_path(p: &Pipeline, ids: &[ParamId]) -> Vec<ParamId> {
    if !matches!(p.asr, AsrModel::Rnnt(_)) {
        return ids.to_vec();
    }
    let prefix = p.asr_prefix();
    let frozen = [
        format!("{prefix}prediction."),
        format!("{prefix}joint.prediction."),
    ];
    ids.iter()
        .copied()
        .filter(|&id| {
            let name = p.store.name(id);
            !frozen.iter().any(|f| name.starts_with(f.as_str()))
        })
        .collect()
}

impl Optimizer {
    fn new(cfg: &RunConfig, phase: Phase) -> Self {
        let o = &cfg.optimizer;
        let lr = match phase {
            Phase::Warmup => o.learning_rate,
            Phase::Joint => o.joint_learning_rate.unwrap_or(o.learning_rate),
        };
        match o.kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr)),
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(lr)),
        }
    }

    fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        match self {
            Optimizer::Adam(o) => o.step(store, ids),
            Optimizer::Sgd(o) => o.step(store, ids),
        }
    }
}

pub fn thread_pool(threads: Option<usize>) -> Result<ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Generates or reads the train/dev/test splits named by the config.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    match &cfg.data.corpus {
        Some(spec) => Ok(split_corpus(generate_corpus(spec)?)),
        None => {
            let read =
                |p: &Option<std::path::PathBuf>| read_dataset(p.as_deref().expect("validated"));
            Ok(Splits {
                train: read(&cfg.data.train)?,
                dev: read(&cfg.data.dev)?,
                test: read(&cfg.data.test)?,
            })
        }
    }
}

/// Decodes every utterance and scores the results.
pub fn evaluate(
    p: &Pipeline,
    data: &[Utterance],
    beam_width: usize,
    pool: &ThreadPool,
) -> Result<MetricReport> {
    let hyps: Vec<SluAnnotation> = pool.install(|| {
        data.par_iter()
            .map(|u| p.decode(u, beam_width).map(|d| d.annotation))
            .collect::<Result<_>>()
    })?;
    let refs: Vec<SluAnnotation> = data.iter().map(Utterance::annotation).collect();
    evaluate_corpus(&refs, &hyps, true)
}

/// Scores the NLU on reference transcripts; no word error rate.
pub fn evaluate_reference_text(
    p: &Pipeline,
    data: &[Utterance],
    pool: &ThreadPool,
) -> Result<MetricReport> {
    let hyps: Vec<SluAnnotation> = pool.install(|| {
        data.par_iter()
            .map(|u| p.predict_from_reference(u))
            .collect::<Result<_>>()
    })?;
    let refs: Vec<SluAnnotation> = data.iter().map(Utterance::annotation).collect();
    evaluate_corpus(&refs, &hyps, false)
}

fn warmup_grads(p: &Pipeline, utt: &Utterance, prefer_text: bool) -> Result<(LossParts, Grads)> {
    let tape = Tape::new();
    let g = Graph::new(&tape, &p.store);
    let l_asr = p.asr.mle_loss(g, &p.features(utt), &p.asr_targets(utt))?;
    tape.backward(l_asr)?;
    let mut grads = tape.param_grads();

    let tape = Tape::with_frozen(vec![p.asr_prefix()]);
    let g = Graph::new(&tape, &p.store);
    let (io, stream) = p.reference_input(g, utt, prefer_text)?;
    let t = p.nlu_targets(utt, &stream)?;
    let l_nlu = nlu_loss(&p.nlu.forward(g, &io)?, &t.slots, t.intent, t.domain)?;
    tape.backward(l_nlu)?;
    grads.extend(tape.param_grads());
    let (asr, nlu) = (l_asr.item(), l_nlu.item());
    Ok((
        LossParts {
            total: asr + nlu,
            asr,
            nlu,
            seq: 0.0,
        },
        grads,
    ))
}

fn joint_grads(p: &Pipeline, cfg: &RunConfig, utt: &Utterance) -> Result<(LossParts, Grads)> {
    let x = p.features(utt);
    let beam = p
        .asr
        .search(&p.store, &x, cfg.beam_width.max(cfg.nbest_size))?;
    let tape = if cfg.freeze_asr {
        Tape::with_frozen(vec![p.asr_prefix()])
    } else {
        Tape::new()
    };
    let g = Graph::new(&tape, &p.store);
    let h_e = p.asr.encode(g, &x)?;
    let reference = utt.annotation();
    let mut log_probs = Vec::new();
    let mut costs = Vec::new();
    for (tokens, _) in beam.iter().take(cfg.nbest_size) {
        let exp = p.asr.expose_encoded(g, h_e, tokens, None)?;
        let cand = run_candidate_through_nlu(g, &exp, p.interface, &p.nlu, p.context())?;
        costs.push(cfg.cost_metric.cost(&cand.annotation, &reference));
        log_probs.push(cand.log_prob);
    }
    let seq = sequence_loss(&log_probs, &costs)?.scale(cfg.lambda_seq);
    let mut parts = LossParts {
        seq: seq.item(),
        ..Default::default()
    };
    let mut total = seq;
    if cfg.mode == TrainingMode::JointMleSeq {
        // the forced exposure scores the reference exactly as the MLE loss does
        let forced = p
            .asr
            .expose_encoded(g, h_e, &p.reference_tokens(utt), None)?;
        let l_asr = forced.log_prob.neg();
        let (io, stream) = p.interface_input(&forced)?;
        let t = p.nlu_targets(utt, &stream)?;
        let l_nlu = nlu_loss(&p.nlu.forward(g, &io)?, &t.slots, t.intent, t.domain)?;
        parts.asr = l_asr.item();
        parts.nlu = l_nlu.item();
        total = total.add(l_asr)?.add(l_nlu)?;
    }
    parts.total = total.item();
    tape.backward(total)?;
    Ok((parts, tape.param_grads()))
}

fn epoch_order(seed: u64, phase: Phase, epoch: usize, n: usize) -> Vec<usize> {
    let tag = match phase {
        Phase::Warmup => 0x5741_524d,
        Phase::Joint => 0x4a4f_494e,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag ^ ((epoch as u64) << 32));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

struct Best {
    semer: f64,
    at: (Phase, usize),
    store: ParamStore,
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    splits: &'a Splits,
    pool: ThreadPool,
    log: Vec<EpochLog>,
}

impl Trainer<'_> {
    /// Trains one phase; with `select`, evaluates dev after every epoch and
    /// returns the best parameters seen.
    fn run_phase(
        &mut self,
        p: &mut Pipeline,
        phase: Phase,
        epochs: usize,
        select: bool,
    ) -> Result<Option<Best>> {
        let cfg = self.cfg;
        let train = &self.splits.train;
        let mut opt = Optimizer::new(cfg, phase);
        let trainable: Vec<ParamId> = match phase {
            Phase::Joint if cfg.freeze_asr => {
                let prefix = p.asr_prefix();
                p.store
                    .ids()
                    .filter(|&id| !p.store.name(id).starts_with(&prefix))
                    .collect()
            }
            _ => p.store.ids().collect(),
        };
        let prefer_text = cfg.pretrained_nlu || p.interface == InterfaceKind::Text;
        let mut best: Option<Best> = None;
        for epoch in 0..epochs {
            let order = epoch_order(cfg.seed, phase, epoch, train.len());
            let trainable = if phase == Phase::Warmup && epoch < cfg.encoder_only_epochs {
                without_prediction_path(p, &trainable)
            } else {
                trainable.clone()
            };
            let mut sum = LossParts::default();
            for batch in order.chunks(cfg.optimizer.batch_size) {
                let results: Vec<Result<(LossParts, Grads)>> = {
                    let p = &*p;
                    self.pool.install(|| {
                        batch
                            .par_iter()
                            .map(|&i| match phase {
                                Phase::Warmup => warmup_grads(p, &train[i], prefer_text),
                                Phase::Joint => joint_grads(p, cfg, &train[i]),
                            })
                            .collect()
                    })
                };
                p.store.zero_grad(&trainable);
                let scale = 1.0 / batch.len() as f64;
                for r in results {
                    let (parts, grads) = r?;
                    sum.total += parts.total;
                    sum.asr += parts.asr;
                    sum.nlu += parts.nlu;
                    sum.seq += parts.seq;
                    let grads: Grads = grads
                        .into_iter()
                        .filter(|(id, _)| trainable.contains(id))
                        .collect();
                    p.store.accumulate(&grads, scale);
                }
                if let Some(max) = cfg.optimizer.clip_norm {
                    p.store.clip_grad_norm(&trainable, max);
                }
                opt.step(&mut p.store, &trainable)?;
            }
            let n = train.len().max(1) as f64;
            let dev = if select && !self.splits.dev.is_empty() {
                Some(evaluate(p, &self.splits.dev, cfg.beam_width, &self.pool)?)
            } else {
                None
            };
            if !sum.total.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{phase:?} epoch {epoch}: loss is not finite"
                )));
            }
            self.log.push(EpochLog {
                phase,
                epoch,
                loss: sum.total / n,
                asr_loss: sum.asr / n,
                nlu_loss: sum.nlu / n,
                seq_loss: sum.seq / n,
                dev_semer: dev.as_ref().map(|d| d.semer),
                dev_wer: dev.as_ref().and_then(|d| d.wer),
            });
            if let Some(d) = dev {
                if best.as_ref().is_none_or(|b| d.semer < b.semer) {
                    best = Some(Best {
                        semer: d.semer,
                        at: (phase, epoch),
                        store: p.store.clone(),
                    });
                }
            }
        }
        Ok(best)
    }
}

/// Independent maximum-likelihood training of ASR and NLU, evaluated as a
/// pipeline (ASR one-best text into the NLU).
pub fn train_independent(cfg: &RunConfig, splits: &Splits) -> Result<RunOutcome> {
    cfg.validate()?;
    if cfg.mode != TrainingMode::Independent {
        return Err(Error::Config(format!(
            "train_independent called with mode `{}`",
            cfg.mode
        )));
    }
    train_on(cfg, splits, None)
}

/// Joint training: maximum-likelihood warm start (unless cold-started)
/// followed by the sequence loss, plus the multi-task loss in
/// `joint_mle_seq` mode.
pub fn train_joint(
    cfg: &RunConfig,
    splits: &Splits,
    init: Option<&Checkpoint>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    if cfg.mode == TrainingMode::Independent {
        return Err(Error::Config(
            "train_joint needs mode joint_seq or joint_mle_seq".into(),
        ));
    }
    train_on(cfg, splits, init)
}

/// Trains according to `cfg.mode` on prepared splits. `init` overrides
/// `cfg.init_checkpoint`.
pub fn train_on(cfg: &RunConfig, splits: &Splits, init: Option<&Checkpoint>) -> Result<RunOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let mut pipeline = Pipeline::new(cfg, &splits.train)?;
    let loaded;
    let init = match (init, &cfg.init_checkpoint) {
        (Some(c), _) => Some(c),
        (None, Some(path)) => {
            loaded = Checkpoint::load(path)?;
            Some(&loaded)
        }
        (None, None) => None,
    };
    if let Some(ckpt) = init {
        pipeline.load_params(ckpt, false)?;
    }
    let mut trainer = Trainer {
        cfg,
        splits,
        pool: thread_pool(cfg.threads)?,
        log: Vec::new(),
    };
    let warmup = if cfg.mode == TrainingMode::Independent || !cfg.cold_start {
        cfg.epochs
    } else {
        0
    };
    // selection happens within the last phase that trains
    let joint = cfg.mode != TrainingMode::Independent && cfg.joint_epochs > 0;
    let mut best = trainer.run_phase(
        &mut pipeline,
        Phase::Warmup,
        warmup,
        cfg.select_best && !joint,
    )?;
    if joint {
        best = trainer.run_phase(
            &mut pipeline,
            Phase::Joint,
            cfg.joint_epochs,
            cfg.select_best,
        )?;
    }
    let selected = best.map(|b| {
        pipeline.store = b.store;
        b.at
    });
    let pool = &trainer.pool;
    let dev = evaluate(&pipeline, &splits.dev, cfg.beam_width, pool)?;
    let test = evaluate(&pipeline, &splits.test, cfg.beam_width, pool)?;
    let dev_reference_text = evaluate_reference_text(&pipeline, &splits.dev, pool)?;
    let report = RunReport {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        epochs: trainer.log,
        selected,
        dev,
        test,
        dev_reference_text,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutcome { report, pipeline })
}

/// Loads data, trains, and writes `report.json`, `checkpoint.json` and
/// `config.toml` under the output directory when one is configured.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let splits = load_splits(cfg)?;
    let outcome = train_on(cfg, &splits, None)?;
    if let Some(dir) = &cfg.output_dir {
        write_outputs(dir, cfg, &outcome)?;
    }
    Ok(outcome)
}

pub fn write_outputs(dir: &Path, cfg: &RunConfig, outcome: &RunOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&outcome.report)?,
    )?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    outcome
        .pipeline
        .checkpoint()
        .save(&dir.join("checkpoint.json"))
}
