//! ASR and SLU evaluation metrics: WER/SER, ICER/IntAcc, SemER and SLU-F1.
//!
//! All metrics are pure functions. Corpus-level numbers pool raw tallies
//! before normalizing, so aggregation is an associative merge.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOp {
    Match { ref_pos: usize, hyp_pos: usize },
    Substitute { ref_pos: usize, hyp_pos: usize },
    Insert { hyp_pos: usize },
    Delete { ref_pos: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn merge(&mut self, other: &EditCounts) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.ref_len += other.ref_len;
    }
}

/// Minimum edit alignment of `hyp` against `reference`.
///
/// When several edit scripts have the same cost, the backtrace prefers
/// match/substitution, then insertion, then deletion.
pub fn align<T: PartialEq>(reference: &[T], hyp: &[T]) -> (Vec<EditOp>, EditCounts) {
    let (n, m) = (reference.len(), hyp.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i][j] = diag.min(d[i][j - 1] + 1).min(d[i - 1][j] + 1);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let mut counts = EditCounts {
        ref_len: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if d[i][j] == d[i - 1][j - 1] + usize::from(!same) {
                if same {
                    ops.push(EditOp::Match {
                        ref_pos: i - 1,
                        hyp_pos: j - 1,
                    });
                } else {
                    ops.push(EditOp::Substitute {
                        ref_pos: i - 1,
                        hyp_pos: j - 1,
                    });
                    counts.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i][j] == d[i][j - 1] + 1 {
            ops.push(EditOp::Insert { hyp_pos: j - 1 });
            counts.insertions += 1;
            j -= 1;
        } else {
            ops.push(EditOp::Delete { ref_pos: i - 1 });
            counts.deletions += 1;
            i -= 1;
        }
    }
    ops.reverse();
    (ops, counts)
}

/// Word error rate as a ratio, with the underlying edit counts.
pub fn wer<T: PartialEq>(reference: &[T], hyp: &[T]) -> Result<(f64, EditCounts)> {
    if reference.is_empty() {
        return Err(Error::EmptyInput("wer reference"));
    }
    let (_, counts) = align(reference, hyp);
    Ok((counts.errors() as f64 / reference.len() as f64, counts))
}

/// Percentage of utterances with at least one word error.
pub fn ser<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("ser corpus"));
    }
    let errored = pairs
        .iter()
        .filter(|(r, h)| align(r, h).1.errors() > 0)
        .count();
    Ok(100.0 * errored as f64 / pairs.len() as f64)
}

/// `(icer, int_acc)` in percent from `(reference, predicted)` intent pairs.
pub fn icer_intacc<T: PartialEq>(pairs: &[(T, T)]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("intent corpus"));
    }
    let wrong = pairs.iter().filter(|(r, h)| r != h).count();
    let icer = 100.0 * wrong as f64 / pairs.len() as f64;
    Ok((icer, 100.0 - icer))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub value: Vec<String>,
}

impl Slot {
    pub fn new(name: &str, value: &str) -> Self {
        Self {
            name: name.to_string(),
            value: value.split_whitespace().map(str::to_string).collect(),
        }
    }
}

/// Transcript plus semantics for one utterance. An empty `intent` means the
/// hypothesis produced none.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SluAnnotation {
    pub transcript: Vec<String>,
    pub slots: Vec<Slot>,
    pub intent: String,
    pub domain: String,
}

impl SluAnnotation {
    pub fn new(transcript: &str, slots: Vec<Slot>, intent: &str, domain: &str) -> Self {
        Self {
            transcript: transcript.split_whitespace().map(str::to_string).collect(),
            slots,
            intent: intent.to_string(),
            domain: domain.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SlotPair {
    Matched(usize, usize),
    Deleted(usize),
    Inserted(usize),
}

/// Pairs reference and hypothesis slots by name. Exact (name, value) matches
/// are taken first; remaining slots pair by name in order of appearance.
fn match_slots(reference: &[Slot], hyp: &[Slot]) -> Vec<SlotPair> {
    let mut ref_to_hyp: Vec<Option<usize>> = vec![None; reference.len()];
    let mut used = vec![false; hyp.len()];
    for exact in [true, false] {
        for (ri, r) in reference.iter().enumerate() {
            if ref_to_hyp[ri].is_some() {
                continue;
            }
            let found = hyp.iter().enumerate().position(|(hi, h)| {
                !used[hi] && h.name == r.name && (!exact || h.value == r.value)
            });
            if let Some(hi) = found {
                used[hi] = true;
                ref_to_hyp[ri] = Some(hi);
            }
        }
    }
    let mut out: Vec<SlotPair> = ref_to_hyp
        .iter()
        .enumerate()
        .map(|(ri, m)| match m {
            Some(hi) => SlotPair::Matched(ri, *hi),
            None => SlotPair::Deleted(ri),
        })
        .collect();
    out.extend(
        used.iter()
            .enumerate()
            .filter(|(_, u)| !**u)
            .map(|(hi, _)| SlotPair::Inserted(hi)),
    );
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotErrorCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    /// Reference slots, the intent included.
    pub ref_slots: usize,
}

impl SlotErrorCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn merge(&mut self, other: &SlotErrorCounts) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.ref_slots += other.ref_slots;
    }

    pub fn rate(&self) -> f64 {
        if self.ref_slots == 0 {
            return if self.errors() == 0 {
                0.0
            } else {
                f64::INFINITY
            };
        }
        self.errors() as f64 / self.ref_slots as f64
    }
}

/// Semantic error rate (ratio). The intent is scored as one extra slot.
pub fn semer(reference: &SluAnnotation, hyp: &SluAnnotation) -> (f64, SlotErrorCounts) {
    let mut c = SlotErrorCounts::default();
    match (reference.intent.is_empty(), hyp.intent.is_empty()) {
        (false, true) => c.deletions += 1,
        (true, false) => c.insertions += 1,
        (false, false) if reference.intent != hyp.intent => c.substitutions += 1,
        _ => {}
    }
    c.ref_slots = usize::from(!reference.intent.is_empty()) + reference.slots.len();
    for pair in match_slots(&reference.slots, &hyp.slots) {
        match pair {
            SlotPair::Matched(r, h) if reference.slots[r].value != hyp.slots[h].value => {
                c.substitutions += 1
            }
            SlotPair::Matched(..) => {}
            SlotPair::Deleted(_) => c.deletions += 1,
            SlotPair::Inserted(_) => c.insertions += 1,
        }
    }
    (c.rate(), c)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct F1Tally {
    pub tp: f64,
    pub fp: f64,
    pub fn_: f64,
}

impl F1Tally {
    /// F1 of the tally; 1.0 when there was nothing to find and nothing found.
    pub fn f1(&self) -> f64 {
        let denom = 2.0 * self.tp + self.fp + self.fn_;
        if denom == 0.0 {
            1.0
        } else {
            2.0 * self.tp / denom
        }
    }

    pub fn merge(&mut self, other: &F1Tally) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    fn add_partial(&mut self, distance: f64) {
        let d = distance.clamp(0.0, 1.0);
        self.tp += 1.0 - d;
        self.fp += d;
        self.fn_ += d;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SluF1Tally {
    pub word: F1Tally,
    pub char: F1Tally,
}

impl SluF1Tally {
    pub fn merge(&mut self, other: &SluF1Tally) {
        self.word.merge(&other.word);
        self.char.merge(&other.char);
    }

    /// Mean of the word-level and character-level F1.
    pub fn f1(&self) -> f64 {
        0.5 * (self.word.f1() + self.char.f1())
    }
}

fn value_error_rate<T: PartialEq>(reference: &[T], hyp: &[T]) -> f64 {
    if reference.is_empty() {
        return if hyp.is_empty() { 0.0 } else { 1.0 };
    }
    align(reference, hyp).1.errors() as f64 / reference.len() as f64
}

/// SLU-F1 over slots (intent and domain excluded). A value substitution counts
/// as a partial true positive penalized by the value's word (resp. character)
/// error rate, clamped to `[0, 1]`.
pub fn slu_f1(reference: &SluAnnotation, hyp: &SluAnnotation) -> (f64, SluF1Tally) {
    let mut t = SluF1Tally::default();
    for pair in match_slots(&reference.slots, &hyp.slots) {
        match pair {
            SlotPair::Matched(r, h) => {
                let (rv, hv) = (&reference.slots[r].value, &hyp.slots[h].value);
                if rv == hv {
                    t.word.tp += 1.0;
                    t.char.tp += 1.0;
                } else {
                    t.word.add_partial(value_error_rate(rv, hv));
                    let rc: Vec<char> = rv.join(" ").chars().collect();
                    let hc: Vec<char> = hv.join(" ").chars().collect();
                    t.char.add_partial(value_error_rate(&rc, &hc));
                }
            }
            SlotPair::Deleted(_) => {
                t.word.fn_ += 1.0;
                t.char.fn_ += 1.0;
            }
            SlotPair::Inserted(_) => {
                t.word.fp += 1.0;
                t.char.fp += 1.0;
            }
        }
    }
    (t.f1(), t)
}

/// Corpus-level metrics. Rates are percentages except `slu_f1`, which is a
/// ratio in `[0, 1]`. `wer`/`ser` are absent when no speech was decoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub utterances: usize,
    pub wer: Option<f64>,
    pub ser: Option<f64>,
    pub icer: f64,
    pub int_acc: f64,
    pub semer: f64,
    pub slu_f1: f64,
    pub word_edits: Option<EditCounts>,
    pub sentence_errors: Option<usize>,
    pub intent_errors: usize,
    pub slot_errors: SlotErrorCounts,
    pub slu_f1_tally: SluF1Tally,
}

/// Pools per-utterance tallies over a corpus.
pub fn evaluate_corpus(
    refs: &[SluAnnotation],
    hyps: &[SluAnnotation],
    with_wer: bool,
) -> Result<MetricReport> {
    if refs.len() != hyps.len() {
        return Err(Error::LengthMismatch {
            what: "evaluate_corpus",
            left: refs.len(),
            right: hyps.len(),
        });
    }
    if refs.is_empty() {
        return Err(Error::EmptyInput("evaluation corpus"));
    }
    let mut edits = EditCounts::default();
    let mut sentence_errors = 0;
    let mut intent_errors = 0;
    let mut slots = SlotErrorCounts::default();
    let mut f1 = SluF1Tally::default();
    for (r, h) in refs.iter().zip(hyps) {
        if with_wer {
            let (_, c) = align(&r.transcript, &h.transcript);
            sentence_errors += usize::from(c.errors() > 0);
            edits.merge(&c);
        }
        intent_errors += usize::from(r.intent != h.intent);
        slots.merge(&semer(r, h).1);
        f1.merge(&slu_f1(r, h).1);
    }
    let n = refs.len() as f64;
    let icer = 100.0 * intent_errors as f64 / n;
    let wer = with_wer.then(|| {
        if edits.ref_len == 0 {
            if edits.errors() == 0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            100.0 * edits.errors() as f64 / edits.ref_len as f64
        }
    });
    Ok(MetricReport {
        utterances: refs.len(),
        wer,
        ser: with_wer.then(|| 100.0 * sentence_errors as f64 / n),
        icer,
        int_acc: 100.0 - icer,
        semer: 100.0 * slots.rate(),
        slu_f1: f1.f1(),
        word_edits: with_wer.then_some(edits),
        sentence_errors: with_wer.then_some(sentence_errors),
        intent_errors,
        slot_errors: slots,
        slu_f1_tally: f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&words("a b c"), &words("a b c")).unwrap().0, 0.0);
        let (w, c) = wer(&words("turn on lights"), &words("turn off lights")).unwrap();
        assert!((w - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.substitutions, 1);
        let (w, c) = wer(&words("a b c"), &[]).unwrap();
        assert_eq!(w, 1.0);
        assert_eq!(c.deletions, 3);
        assert!(wer::<&str>(&[], &words("a")).is_err());
    }

    #[test]
    fn alignment_prefers_substitution() {
        // "a b" vs "c": one sub + one del either way; the sub pairs with the
        // last reference word because the backtrace starts at the end.
        let (ops, c) = align(&words("a b"), &words("c"));
        assert_eq!(c.substitutions, 1);
        assert_eq!(c.deletions, 1);
        assert_eq!(
            ops[1],
            EditOp::Substitute {
                ref_pos: 1,
                hyp_pos: 0
            }
        );
    }

    #[test]
    fn ser_and_intents() {
        let good = (vec!["a"], vec!["a"]);
        let bad = (vec!["a"], vec!["b"]);
        assert_eq!(ser(&[good.clone(), good.clone()]).unwrap(), 0.0);
        assert_eq!(ser(&[good.clone(), good.clone(), good, bad]).unwrap(), 25.0);
        assert!(ser::<&str>(&[]).is_err());

        assert_eq!(icer_intacc(&[("x", "x"); 3]).unwrap(), (0.0, 100.0));
        let mut pairs = vec![("x", "x"); 6];
        pairs.extend([("x", "y"), ("z", "y")]);
        assert_eq!(icer_intacc(&pairs).unwrap(), (25.0, 75.0));
        assert!(icer_intacc::<&str>(&[]).is_err());
    }

    #[test]
    fn semer_examples() {
        let r = SluAnnotation::new(
            "turn on the lights",
            vec![Slot::new("device", "lights")],
            "on",
            "iot",
        );
        assert_eq!(semer(&r, &r).0, 0.0);
        let mut h = r.clone();
        h.slots[0] = Slot::new("device", "fan");
        let (s, c) = semer(&r, &h);
        assert_eq!(s, 0.5);
        assert_eq!(c.substitutions, 1);
        let (s, c) = semer(&r, &SluAnnotation::default());
        assert_eq!(s, 1.0);
        assert_eq!(c.deletions, 2);
        // insertions are not clamped
        let mut h = r.clone();
        h.slots.extend([
            Slot::new("room", "x"),
            Slot::new("room", "y"),
            Slot::new("time", "z"),
        ]);
        assert_eq!(semer(&r, &h).0, 1.5);
    }

    #[test]
    fn slot_matching_duplicates_in_order() {
        let r = SluAnnotation::new("", vec![Slot::new("p", "a"), Slot::new("p", "b")], "i", "d");
        let h = SluAnnotation::new("", vec![Slot::new("p", "b"), Slot::new("p", "c")], "i", "d");
        // p=b matches exactly, p=a substituted by p=c
        let (_, c) = semer(&r, &h);
        assert_eq!((c.substitutions, c.insertions, c.deletions), (1, 0, 0));
    }

    #[test]
    fn slu_f1_examples() {
        let r = SluAnnotation::new(
            "turn on living room lights",
            vec![Slot::new("device", "living room lights")],
            "on",
            "iot",
        );
        assert_eq!(slu_f1(&r, &r).0, 1.0);
        let mut h = r.clone();
        h.slots.clear();
        assert_eq!(slu_f1(&r, &h).0, 0.0);

        h.slots = vec![Slot::new("device", "living lights")];
        let (f, t) = slu_f1(&r, &h);
        // word: d_w = 1/3 -> TP 2/3, FP = FN = 1/3, F1 = 2/3
        assert!((t.word.tp - 2.0 / 3.0).abs() < 1e-12);
        assert!((t.word.fp - 1.0 / 3.0).abs() < 1e-12);
        assert!((t.word.fn_ - 1.0 / 3.0).abs() < 1e-12);
        assert!((t.word.f1() - 2.0 / 3.0).abs() < 1e-12);
        // char: "living room lights" (18) -> "living lights" deletes "room " -> d_c = 5/18
        let dc = 5.0 / 18.0;
        assert!((t.char.tp - (1.0 - dc)).abs() < 1e-12);
        assert!((t.char.fp - dc).abs() < 1e-12);
        assert!((t.char.f1() - (1.0 - dc)).abs() < 1e-12);
        assert!((f - 0.5 * (2.0 / 3.0 + 1.0 - dc)).abs() < 1e-12);
    }

    #[test]
    fn penalty_is_clamped() {
        let r = SluAnnotation::new("", vec![Slot::new("a", "x")], "i", "d");
        let h = SluAnnotation::new("", vec![Slot::new("a", "y z w")], "i", "d");
        let (_, t) = slu_f1(&r, &h);
        assert_eq!(t.word.tp, 0.0);
        assert_eq!(t.word.fp, 1.0);
    }

    #[test]
    fn corpus_pooling() {
        let r = SluAnnotation::new("a b c", vec![Slot::new("s", "b")], "i", "d");
        let h = SluAnnotation::new("a x c", vec![Slot::new("s", "x")], "j", "d");
        let one = evaluate_corpus(&[r.clone()], &[h.clone()], true).unwrap();
        assert!((one.wer.unwrap() - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(one.semer, 100.0);
        assert_eq!(one.icer, 100.0);
        assert_eq!(one.slu_f1, slu_f1(&r, &h).0);
        let two = evaluate_corpus(&[r.clone(), r.clone()], &[h.clone(), h.clone()], true).unwrap();
        assert_eq!(one.wer, two.wer);
        assert_eq!(one.semer, two.semer);
        assert_eq!(one.slu_f1, two.slu_f1);
        assert!(evaluate_corpus(&[r], &[], true).is_err());
        let no_wer = evaluate_corpus(&[h.clone()], &[h], false).unwrap();
        assert_eq!(no_wer.wer, None);
        assert_eq!(no_wer.semer, 0.0);
    }

    fn brute_force_edits(r: &[u8], h: &[u8]) -> usize {
        // exhaustive search over edit scripts: each step consumes a ref
        // symbol, a hyp symbol, or both
        fn go(r: &[u8], h: &[u8]) -> usize {
            match (r.split_first(), h.split_first()) {
                (None, None) => 0,
                (Some(_), None) => r.len(),
                (None, Some(_)) => h.len(),
                (Some((a, rr)), Some((b, hh))) => {
                    let diag = go(rr, hh) + usize::from(a != b);
                    diag.min(go(rr, h) + 1).min(go(r, hh) + 1)
                }
            }
        }
        go(r, h)
    }

    proptest! {
        #[test]
        fn dp_equals_exhaustive(r in proptest::collection::vec(0u8..3, 1..=6),
                                h in proptest::collection::vec(0u8..3, 0..=6)) {
            let (_, c) = align(&r, &h);
            prop_assert_eq!(c.errors(), brute_force_edits(&r, &h));
        }

        #[test]
        fn slu_f1_bounds(rs in proptest::collection::vec((0u8..3, 0u8..3), 0..4),
                         hs in proptest::collection::vec((0u8..3, 0u8..3), 0..4)) {
            let mk = |v: &[(u8, u8)]| SluAnnotation {
                slots: v.iter().map(|(n, x)| Slot::new(&format!("n{n}"), &format!("v{x} w"))).collect(),
                intent: "i".into(),
                ..Default::default()
            };
            let (r, h) = (mk(&rs), mk(&hs));
            let (f, _) = slu_f1(&r, &h);
            prop_assert!((0.0..=1.0).contains(&f));
            let exact = rs.len() == hs.len() && semer(&r, &h).1.errors() == 0;
            prop_assert_eq!(f == 1.0, exact);
            prop_assert_eq!(semer(&r, &h).0 == 0.0, exact);
        }
    }
}
