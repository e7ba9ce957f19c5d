use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{Slot, SluAnnotation};

/// One element of an utterance template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateItem {
    Word(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentDef {
    pub name: String,
    pub domain: String,
    pub templates: Vec<Vec<TemplateItem>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotLexicon {
    pub name: String,
    pub values: Vec<String>,
}

/// Intent templates plus slot lexicons.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grammar {
    pub intents: Vec<IntentDef>,
    pub slots: Vec<SlotLexicon>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub num_intents: usize,
    pub num_slot_types: usize,
    pub num_domains: usize,
    pub values_per_slot: usize,
    /// Explicit grammar; generated from `seed` when absent.
    pub grammar: Option<Grammar>,
    pub utterance_count: usize,
    pub feature_dim: usize,
    pub frames_per_token: (usize, usize),
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 48,
            num_intents: 8,
            num_slot_types: 6,
            num_domains: 4,
            values_per_slot: 4,
            grammar: None,
            utterance_count: 500,
            feature_dim: 16,
            frames_per_token: (2, 3),
            noise_std: 0.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub features: Vec<Vec<f64>>,
    pub transcript: String,
    pub slots: Vec<(String, String)>,
    pub intent: String,
    pub domain: String,
}

impl Utterance {
    pub fn words(&self) -> Vec<&str> {
        self.transcript.split_whitespace().collect()
    }

    pub fn annotation(&self) -> SluAnnotation {
        SluAnnotation::new(
            &self.transcript,
            self.slots.iter().map(|(n, v)| Slot::new(n, v)).collect(),
            &self.intent,
            &self.domain,
        )
    }

    /// Word index ranges of each slot, located left to right in the transcript.
    pub fn slot_spans(&self) -> Option<Vec<(usize, usize)>> {
        let words = self.words();
        let mut from = 0;
        let mut spans = Vec::with_capacity(self.slots.len());
        for (_, value) in &self.slots {
            let v: Vec<&str> = value.split_whitespace().collect();
            if v.is_empty() {
                return None;
            }
            let start = (from..=words.len().saturating_sub(v.len()))
                .find(|&s| s + v.len() <= words.len() && words[s..s + v.len()] == v[..])?;
            spans.push((start, start + v.len()));
            from = start + v.len();
        }
        Some(spans)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Splits {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

pub(crate) fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn pseudo_words(count: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    const ONSETS: &[&str] = &[
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
    ];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
    let mut syllables: Vec<String> = ONSETS
        .iter()
        .flat_map(|o| VOWELS.iter().map(move |v| format!("{o}{v}")))
        .collect();
    syllables.shuffle(rng);
    let mut words = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let n = rng.gen_range(1..=2);
        let w: String = (0..n)
            .map(|_| syllables[rng.gen_range(0..syllables.len())].as_str())
            .collect();
        if words.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

impl Grammar {
    /// Procedural grammar: disjoint slot lexicons, per-domain carrier words,
    /// and one keyword per intent.
    pub fn generate(spec: &CorpusSpec) -> Result<Self> {
        if spec.num_intents == 0 || spec.num_domains == 0 {
            return Err(Error::Config(
                "corpus needs at least one intent and domain".into(),
            ));
        }
        if spec.vocab_size < spec.num_slot_types {
            return Err(Error::Config(format!(
                "vocab_size {} is smaller than num_slot_types {}",
                spec.vocab_size, spec.num_slot_types
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6772_616d);
        let words = pseudo_words(spec.vocab_size, &mut rng);
        let slot_word_budget =
            (spec.num_slot_types * spec.values_per_slot).min(spec.vocab_size / 2);
        let (slot_words, carrier) = words.split_at(slot_word_budget.max(spec.num_slot_types));
        if carrier.len() < spec.num_intents + 2 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves too few carrier words for {} intents",
                spec.vocab_size, spec.num_intents
            )));
        }

        let mut slots = Vec::with_capacity(spec.num_slot_types);
        for k in 0..spec.num_slot_types {
            let own: Vec<&String> = slot_words
                .iter()
                .skip(k)
                .step_by(spec.num_slot_types.max(1))
                .collect();
            let mut values = BTreeSet::new();
            for (i, w) in own.iter().enumerate() {
                values.insert(w.to_string());
                if i + 1 < own.len() && rng.gen_bool(0.3) {
                    values.insert(format!("{} {}", w, own[i + 1]));
                }
            }
            slots.push(SlotLexicon {
                name: format!("slot{k}"),
                values: values.into_iter().collect(),
            });
        }

        let (keywords, shared) = carrier.split_at(spec.num_intents);
        let mut intents = Vec::with_capacity(spec.num_intents);
        for i in 0..spec.num_intents {
            let domain = format!("domain{}", i % spec.num_domains);
            let d = i % spec.num_domains;
            // carrier words shared by intents of the same domain
            let pool: Vec<&String> = shared
                .iter()
                .skip(d % shared.len())
                .step_by(spec.num_domains.min(shared.len()).max(1))
                .collect();
            let mut templates = Vec::new();
            for t in 0..2 {
                let mut items = Vec::new();
                let lead = pool[(i + t) % pool.len()];
                items.push(TemplateItem::Word(lead.clone()));
                items.push(TemplateItem::Word(keywords[i].clone()));
                if spec.num_slot_types > 0 {
                    let s1 = (i + t) % spec.num_slot_types;
                    items.push(TemplateItem::Slot(format!("slot{s1}")));
                    if t == 1 && spec.num_slot_types > 1 {
                        let joiner = pool[(i + t + 1) % pool.len()];
                        if joiner != lead {
                            items.push(TemplateItem::Word(joiner.clone()));
                        } else {
                            items.push(TemplateItem::Word(
                                keywords[(i + 1) % keywords.len()].clone(),
                            ));
                        }
                        let s2 = (i + t + 1) % spec.num_slot_types;
                        items.push(TemplateItem::Slot(format!("slot{s2}")));
                    }
                }
                templates.push(items);
            }
            intents.push(IntentDef {
                name: format!("intent{i}"),
                domain,
                templates,
            });
        }
        Ok(Self { intents, slots })
    }

    fn lexicon(&self, name: &str) -> Result<&SlotLexicon> {
        let lex =
            self.slots.iter().find(|s| s.name == name).ok_or_else(|| {
                Error::Config(format!("template uses unknown slot type `{name}`"))
            })?;
        if lex.values.is_empty() {
            return Err(Error::Config(format!(
                "slot type `{name}` has an empty lexicon"
            )));
        }
        Ok(lex)
    }

    /// All words the grammar can emit.
    pub fn words(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for intent in &self.intents {
            for t in &intent.templates {
                for item in t {
                    if let TemplateItem::Word(w) = item {
                        out.insert(w.clone());
                    }
                }
            }
        }
        for s in &self.slots {
            for v in &s.values {
                out.extend(v.split_whitespace().map(str::to_string));
            }
        }
        out
    }
}

/// Fixed random unit vector for a word, shared by every utterance.
pub fn prototype(word: &str, seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&[word.as_bytes(), &seed.to_le_bytes()]));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Renders each token as `k` frames of its prototype plus Gaussian noise,
/// with `k` drawn uniformly from `spec.frames_per_token`.
pub fn synth_audio(tokens: &[&str], spec: &CorpusSpec, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (kmin, kmax) = spec.frames_per_token;
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("noise std");
    let mut frames = Vec::new();
    for tok in tokens {
        let proto = prototype(tok, spec.seed, spec.feature_dim);
        let k = rng.gen_range(kmin..=kmax.max(kmin));
        for _ in 0..k {
            frames.push(
                proto
                    .iter()
                    .map(|&p| {
                        if spec.noise_std > 0.0 {
                            p + noise.sample(&mut rng)
                        } else {
                            p
                        }
                    })
                    .collect(),
            );
        }
    }
    frames
}

fn validate(spec: &CorpusSpec) -> Result<()> {
    let (kmin, kmax) = spec.frames_per_token;
    if kmin < 1 || kmax < kmin {
        return Err(Error::Config(format!(
            "frames_per_token range ({kmin}, {kmax}) must satisfy 1 <= min <= max"
        )));
    }
    if spec.feature_dim == 0 {
        return Err(Error::Config("feature_dim must be positive".into()));
    }
    if !(spec.noise_std >= 0.0) {
        return Err(Error::Config("noise_std must be >= 0".into()));
    }
    Ok(())
}

/// Generates the corpus; a pure function of `spec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<Utterance>> {
    validate(spec)?;
    let grammar = match &spec.grammar {
        Some(g) => g.clone(),
        None => Grammar::generate(spec)?,
    };
    for intent in &grammar.intents {
        if intent.templates.is_empty() {
            return Err(Error::Config(format!(
                "intent `{}` has no templates",
                intent.name
            )));
        }
        for t in &intent.templates {
            for item in t {
                if let TemplateItem::Slot(s) = item {
                    grammar.lexicon(s)?;
                }
            }
        }
    }
    if grammar.intents.is_empty() {
        return Err(Error::Config("grammar has no intents".into()));
    }
    (0..spec.utterance_count)
        .map(|i| {
            let utt_seed = stable_hash(&[&spec.seed.to_le_bytes(), &(i as u64).to_le_bytes()]);
            let mut rng = ChaCha8Rng::seed_from_u64(utt_seed);
            let intent = &grammar.intents[rng.gen_range(0..grammar.intents.len())];
            let template = &intent.templates[rng.gen_range(0..intent.templates.len())];
            let mut words: Vec<String> = Vec::new();
            let mut slots = Vec::new();
            for item in template {
                match item {
                    TemplateItem::Word(w) => words.push(w.clone()),
                    TemplateItem::Slot(s) => {
                        let lex = grammar.lexicon(s)?;
                        let value = lex.values[rng.gen_range(0..lex.values.len())].clone();
                        words.extend(value.split_whitespace().map(str::to_string));
                        slots.push((s.clone(), value));
                    }
                }
            }
            let refs: Vec<&str> = words.iter().map(String::as_str).collect();
            let features = synth_audio(&refs, spec, utt_seed ^ 0x6175_6469_6f);
            Ok(Utterance {
                id: format!("utt{i:05}"),
                features,
                transcript: words.join(" "),
                slots,
                intent: intent.name.clone(),
                domain: intent.domain.clone(),
            })
        })
        .collect()
}

/// 80/10/10 split ordered by a stable hash of the utterance id.
pub fn split_corpus(utts: Vec<Utterance>) -> Splits {
    let mut keyed: Vec<(u64, Utterance)> = utts
        .into_iter()
        .map(|u| (stable_hash(&[u.id.as_bytes()]), u))
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
    let n = keyed.len();
    let n_train = n * 8 / 10;
    let n_dev = n / 10;
    let mut it = keyed.into_iter().map(|(_, u)| u);
    let train = it.by_ref().take(n_train).collect();
    let dev = it.by_ref().take(n_dev).collect();
    let test = it.collect();
    Splits { train, dev, test }
}
