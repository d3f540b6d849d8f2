//! Acoustic subword modelling: segment labels become pseudo transcriptions,
//! which are refined by alternating Gaussian-HMM training and Viterbi
//! decoding until successive transcriptions agree.
//!
//! Each unit is a left-to-right chain of `S` diagonal-Gaussian states. For
//! decoding the chain is expanded to `L = max(S, min_dur)` slots so that every
//! decoded token spans at least `L` frames; only the last slot of each state
//! carries a self-loop. Units are connected by a free loop with uniform entry
//! probability.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{Artifact, FeatureMatrix};
use crate::numeric::{levenshtein, squared_euclidean};
use crate::segmentation::Segment;

pub const DEFAULT_STATES: usize = 3;
pub const DEFAULT_MIN_DUR: usize = 3;
pub const ASM_VARIANCE_FLOOR: f64 = 1e-6;
pub const DEFAULT_MIN_OCCUPANCY: usize = 3;
pub const DEFAULT_STOP_EPS: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub unit_id: usize,
    pub start_frame: usize,
    pub end_frame: usize,
}

impl Token {
    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame
    }

    pub fn is_empty(&self) -> bool {
        self.end_frame == self.start_frame
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoTranscription {
    pub recording_id: String,
    pub tokens: Vec<Token>,
}

impl PseudoTranscription {
    pub fn units(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.unit_id).collect()
    }

    /// Unit id of every frame.
    pub fn frame_units(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.tokens.last().map_or(0, |t| t.end_frame));
        for t in &self.tokens {
            out.extend(std::iter::repeat_n(t.unit_id, t.len()));
        }
        out
    }

    /// Checks that the tokens tile `[0, frames)` and use ids below `units`.
    pub fn validate(&self, frames: usize, units: usize) -> Result<()> {
        let mut at = 0;
        for (i, t) in self.tokens.iter().enumerate() {
            if t.start_frame != at || t.end_frame <= t.start_frame {
                return Err(Error::invalid(format!(
                    "{}: token {i} spans [{}, {}) but should start at {at}",
                    self.recording_id, t.start_frame, t.end_frame
                )));
            }
            if t.unit_id >= units {
                return Err(Error::invalid(format!(
                    "{}: token {i} has unit {} outside inventory of {units}",
                    self.recording_id, t.unit_id
                )));
            }
            at = t.end_frame;
        }
        if at != frames {
            return Err(Error::LengthMismatch {
                what: format!("{} transcription frames", self.recording_id),
                expected: frames,
                actual: at,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptionSet {
    /// Size of the unit inventory the ids are drawn from.
    pub units: usize,
    pub transcriptions: Vec<PseudoTranscription>,
}

impl Artifact for TranscriptionSet {
    const KIND: &'static str = "transcription_set";
}

/// One token per segment, in segment order; same-unit neighbours stay apart.
pub fn initial_transcribe(recording_id: &str, labels: &[usize], segments: &[Segment]) -> Result<PseudoTranscription> {
    if labels.len() != segments.len() {
        return Err(Error::LengthMismatch {
            what: "labels".into(),
            expected: segments.len(),
            actual: labels.len(),
        });
    }
    if let Some(s) = segments.iter().find(|s| s.recording_id != recording_id) {
        return Err(Error::MixedRecordings(recording_id.to_string(), s.recording_id.clone()));
    }
    let tokens = segments
        .iter()
        .zip(labels)
        .map(|(s, &unit_id)| Token {
            unit_id,
            start_frame: s.start_frame,
            end_frame: s.end_frame,
        })
        .collect();
    Ok(PseudoTranscription {
        recording_id: recording_id.to_string(),
        tokens,
    })
}

/// Splits a corpus-wide labeling into one transcription per recording,
/// in order of first appearance.
pub fn initial_transcribe_corpus(labels: &[usize], segments: &[Segment]) -> Result<Vec<PseudoTranscription>> {
    if labels.len() != segments.len() {
        return Err(Error::LengthMismatch {
            what: "labels".into(),
            expected: segments.len(),
            actual: labels.len(),
        });
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, (Vec<usize>, Vec<Segment>)> = BTreeMap::new();
    for (s, &l) in segments.iter().zip(labels) {
        let entry = groups.entry(s.recording_id.clone()).or_insert_with(|| {
            order.push(s.recording_id.clone());
            (Vec::new(), Vec::new())
        });
        entry.0.push(l);
        entry.1.push(s.clone());
    }
    order
        .iter()
        .map(|id| {
            let (l, s) = &groups[id];
            initial_transcribe(id, l, s)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateModel {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub self_loop: f64,
}

impl StateModel {
    fn log_likelihood(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((v, m), s) in x.iter().zip(&self.mean).zip(&self.variance) {
            let d = v - m;
            acc += (2.0 * std::f64::consts::PI * s).ln() + d * d / s;
        }
        -0.5 * acc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitModel {
    pub unit_id: usize,
    pub states: Vec<StateModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitModelSet {
    pub inventory: usize,
    pub states_per_unit: usize,
    pub dims: usize,
    /// Trained units in ascending id order; ids absent here were merged away.
    pub units: Vec<UnitModel>,
    /// Weak unit id mapped to the unit that absorbed it.
    pub merged: BTreeMap<usize, usize>,
}

impl Artifact for UnitModelSet {
    const KIND: &'static str = "unit_model_set";
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub states: usize,
    pub min_occupancy: usize,
    pub variance_floor: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            states: DEFAULT_STATES,
            min_occupancy: DEFAULT_MIN_OCCUPANCY,
            variance_floor: ASM_VARIANCE_FLOOR,
        }
    }
}

#[derive(Clone)]
struct Accumulator {
    count: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl Accumulator {
    fn new(dims: usize) -> Self {
        Accumulator {
            count: 0,
            sum: vec![0.0; dims],
            sum_sq: vec![0.0; dims],
        }
    }

    fn add(&mut self, x: &[f64]) {
        self.count += 1;
        for ((s, q), v) in self.sum.iter_mut().zip(self.sum_sq.iter_mut()).zip(x) {
            *s += v;
            *q += v * v;
        }
    }

    fn merge(&mut self, other: &Accumulator) {
        self.count += other.count;
        for (s, o) in self.sum.iter_mut().zip(&other.sum) {
            *s += o;
        }
        for (s, o) in self.sum_sq.iter_mut().zip(&other.sum_sq) {
            *s += o;
        }
    }

    fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.count as f64).collect()
    }

    fn variance(&self, floor: f64) -> Vec<f64> {
        let n = self.count as f64;
        self.sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s, q)| {
                let m = s / n;
                (q / n - m * m).max(floor)
            })
            .collect()
    }
}

fn check_corpus(features: &[FeatureMatrix], trans: &[PseudoTranscription]) -> Result<usize> {
    if features.len() != trans.len() {
        return Err(Error::LengthMismatch {
            what: "transcriptions".into(),
            expected: features.len(),
            actual: trans.len(),
        });
    }
    let dims = features.first().map_or(0, FeatureMatrix::dims);
    for (f, t) in features.iter().zip(trans) {
        if f.recording_id != t.recording_id {
            return Err(Error::MixedRecordings(f.recording_id.clone(), t.recording_id.clone()));
        }
        if f.dims() != dims {
            return Err(Error::LengthMismatch {
                what: format!("{} feature dims", f.recording_id),
                expected: dims,
                actual: f.dims(),
            });
        }
        t.validate(f.frames(), usize::MAX)?;
    }
    Ok(dims)
}

/// Viterbi-style training from fixed alignments: each token's frames are
/// split uniformly across the states, emissions are ML diagonal Gaussians
/// and self-loops follow the mean state duration.
pub fn train_unit_models(
    features: &[FeatureMatrix],
    trans: &[PseudoTranscription],
    options: &TrainOptions,
) -> Result<UnitModelSet> {
    let dims = check_corpus(features, trans)?;
    let s_count = options.states.max(1);
    let inventory = trans
        .iter()
        .flat_map(|t| t.tokens.iter().map(|k| k.unit_id + 1))
        .max()
        .unwrap_or(0);
    if inventory == 0 {
        return Err(Error::invalid("no tokens to train unit models on"));
    }

    // Per-recording accumulators, merged in recording order.
    type Acc = (Vec<Accumulator>, Vec<Vec<Accumulator>>, Vec<usize>, Vec<usize>);
    let per_recording: Vec<Acc> = features
        .par_iter()
        .zip(trans.par_iter())
        .map(|(f, t)| {
            let mut whole = vec![Accumulator::new(dims); inventory];
            let mut states = vec![vec![Accumulator::new(dims); s_count]; inventory];
            let mut tokens = vec![0usize; inventory];
            let mut frames = vec![0usize; inventory];
            for tok in &t.tokens {
                let n = tok.len();
                tokens[tok.unit_id] += 1;
                frames[tok.unit_id] += n;
                for off in 0..n {
                    let x = f.row(tok.start_frame + off);
                    whole[tok.unit_id].add(x);
                    states[tok.unit_id][off * s_count / n].add(x);
                }
            }
            (whole, states, tokens, frames)
        })
        .collect();
    let mut whole = vec![Accumulator::new(dims); inventory];
    let mut states = vec![vec![Accumulator::new(dims); s_count]; inventory];
    let mut tokens = vec![0usize; inventory];
    let mut frames = vec![0usize; inventory];
    for (w, s, k, n) in &per_recording {
        for u in 0..inventory {
            whole[u].merge(&w[u]);
            for (a, b) in states[u].iter_mut().zip(&s[u]) {
                a.merge(b);
            }
            tokens[u] += k[u];
            frames[u] += n[u];
        }
    }

    let observed: Vec<usize> = (0..inventory).filter(|&u| tokens[u] > 0).collect();
    let mut strong: Vec<usize> = observed
        .iter()
        .copied()
        .filter(|&u| tokens[u] >= options.min_occupancy)
        .collect();
    if strong.is_empty() {
        strong = observed.clone();
    }
    let means: Vec<Option<Vec<f64>>> = (0..inventory)
        .map(|u| (whole[u].count > 0).then(|| whole[u].mean()))
        .collect();
    let mut merged = BTreeMap::new();
    for &u in observed.iter().filter(|u| !strong.contains(u)) {
        let mu = means[u].as_ref().expect("observed unit has frames");
        let mut best = (strong[0], f64::INFINITY);
        for &v in &strong {
            let d = squared_euclidean(mu, means[v].as_ref().expect("strong unit has frames"));
            if d < best.1 {
                best = (v, d);
            }
        }
        merged.insert(u, best.0);
    }
    for (&weak, &target) in &merged {
        let (w, s, k, n) = (whole[weak].clone(), states[weak].clone(), tokens[weak], frames[weak]);
        whole[target].merge(&w);
        for (a, b) in states[target].iter_mut().zip(&s) {
            a.merge(b);
        }
        tokens[target] += k;
        frames[target] += n;
    }

    let units = strong
        .iter()
        .map(|&u| {
            let avg_state_duration = frames[u] as f64 / (tokens[u] * s_count) as f64;
            let self_loop = (1.0 - 1.0 / avg_state_duration).clamp(0.01, 0.99);
            let fallback = &whole[u];
            let states = states[u]
                .iter()
                .map(|acc| {
                    let src = if acc.count > 0 { acc } else { fallback };
                    StateModel {
                        mean: src.mean(),
                        variance: src.variance(options.variance_floor),
                        self_loop,
                    }
                })
                .collect();
            UnitModel { unit_id: u, states }
        })
        .collect();
    Ok(UnitModelSet {
        inventory,
        states_per_unit: s_count,
        dims,
        units,
        merged,
    })
}

const FROM_PREVIOUS: u8 = 0;
const FROM_SELF: u8 = 1;
const FROM_EXIT: u8 = 2;

/// Viterbi decoding over a free loop of all trained units; every token
/// spans at least `max(states, min_dur)` frames.
pub fn decode(features: &FeatureMatrix, models: &UnitModelSet, min_dur: usize) -> Result<PseudoTranscription> {
    let k = models.units.len();
    if k == 0 {
        return Err(Error::invalid("unit model set is empty"));
    }
    if features.dims() != models.dims {
        return Err(Error::LengthMismatch {
            what: format!("{} feature dims", features.recording_id),
            expected: models.dims,
            actual: features.dims(),
        });
    }
    let s_count = models.states_per_unit;
    let slots = s_count.max(min_dur).max(1);
    let t_len = features.frames();
    if t_len < slots {
        return Err(Error::TooShort {
            recording: features.recording_id.clone(),
            frames: t_len,
            min_dur: slots,
        });
    }

    let state_of: Vec<usize> = (0..slots).map(|j| j * s_count / slots).collect();
    let loops: Vec<bool> = (0..slots).map(|j| j + 1 == slots || state_of[j + 1] != state_of[j]).collect();
    let log_stay: Vec<Vec<f64>> = models
        .units
        .iter()
        .map(|u| u.states.iter().map(|s| s.self_loop.ln()).collect())
        .collect();
    let log_leave: Vec<Vec<f64>> = models
        .units
        .iter()
        .map(|u| u.states.iter().map(|s| (1.0 - s.self_loop).ln()).collect())
        .collect();
    let log_entry = -(k as f64).ln();

    let width = k * slots;
    let mut back = vec![FROM_PREVIOUS; t_len * width];
    let mut exit_unit = vec![0usize; t_len];
    let mut prev = vec![f64::NEG_INFINITY; width];
    let mut cur = vec![f64::NEG_INFINITY; width];
    let mut emit = vec![0.0; k * s_count];

    for t in 0..t_len {
        let x = features.row(t);
        for (u, unit) in models.units.iter().enumerate() {
            for (s, state) in unit.states.iter().enumerate() {
                emit[u * s_count + s] = state.log_likelihood(x);
            }
        }
        let entry = if t == 0 {
            log_entry
        } else {
            let mut best = (0, f64::NEG_INFINITY);
            for u in 0..k {
                let v = prev[u * slots + slots - 1] + log_leave[u][s_count - 1];
                if v > best.1 {
                    best = (u, v);
                }
            }
            exit_unit[t] = best.0;
            best.1 + log_entry
        };
        let row = &mut back[t * width..(t + 1) * width];
        for u in 0..k {
            for j in 0..slots {
                let idx = u * slots + j;
                let state = state_of[j];
                let (mut score, mut from) = if j == 0 {
                    (entry, FROM_EXIT)
                } else if t == 0 {
                    (f64::NEG_INFINITY, FROM_PREVIOUS)
                } else {
                    let step = if loops[j - 1] { log_leave[u][state_of[j - 1]] } else { 0.0 };
                    (prev[idx - 1] + step, FROM_PREVIOUS)
                };
                if t > 0 && loops[j] {
                    let stay = prev[idx] + log_stay[u][state];
                    if stay > score {
                        score = stay;
                        from = FROM_SELF;
                    }
                }
                cur[idx] = score + emit[u * s_count + state];
                row[idx] = from;
            }
        }
        std::mem::swap(&mut prev, &mut cur);
    }

    let mut best = (0, f64::NEG_INFINITY);
    for u in 0..k {
        let v = prev[u * slots + slots - 1];
        if v > best.1 {
            best = (u, v);
        }
    }
    if !best.1.is_finite() {
        return Err(Error::invalid(format!("{}: no complete decoding path", features.recording_id)));
    }

    let mut tokens = Vec::new();
    let (mut u, mut j) = (best.0, slots - 1);
    let mut end = t_len;
    for t in (0..t_len).rev() {
        match back[t * width + u * slots + j] {
            FROM_SELF => {}
            FROM_PREVIOUS => j -= 1,
            _ => {
                tokens.push(Token {
                    unit_id: models.units[u].unit_id,
                    start_frame: t,
                    end_frame: end,
                });
                end = t;
                if t > 0 {
                    u = exit_unit[t];
                    j = slots - 1;
                }
            }
        }
    }
    tokens.reverse();
    Ok(PseudoTranscription {
        recording_id: features.recording_id.clone(),
        tokens,
    })
}

/// Unit-level edit distance divided by the reference token count.
pub fn swer(reference: &PseudoTranscription, hypothesis: &PseudoTranscription) -> Result<f64> {
    let (edits, total) = swer_counts(reference, hypothesis)?;
    Ok(edits as f64 / total as f64)
}

fn swer_counts(reference: &PseudoTranscription, hypothesis: &PseudoTranscription) -> Result<(usize, usize)> {
    if reference.recording_id != hypothesis.recording_id {
        return Err(Error::MixedRecordings(
            reference.recording_id.clone(),
            hypothesis.recording_id.clone(),
        ));
    }
    if reference.tokens.is_empty() {
        return Err(Error::invalid(format!("{}: empty reference transcription", reference.recording_id)));
    }
    Ok((levenshtein(&reference.units(), &hypothesis.units()), reference.tokens.len()))
}

/// Pooled SWER over a corpus: total edits over total reference tokens.
pub fn corpus_swer(reference: &[PseudoTranscription], hypothesis: &[PseudoTranscription]) -> Result<f64> {
    if reference.len() != hypothesis.len() {
        return Err(Error::LengthMismatch {
            what: "hypothesis transcriptions".into(),
            expected: reference.len(),
            actual: hypothesis.len(),
        });
    }
    let counts: Vec<(usize, usize)> = reference
        .iter()
        .zip(hypothesis)
        .map(|(r, h)| swer_counts(r, h))
        .collect::<Result<_>>()?;
    let edits: usize = counts.iter().map(|c| c.0).sum();
    let total: usize = counts.iter().map(|c| c.1).sum();
    Ok(edits as f64 / total as f64)
}

/// SHA-256 over the recording ids and unit-id sequences, ignoring spans.
pub fn transcription_checksum(trans: &[PseudoTranscription]) -> String {
    let mut hasher = Sha256::new();
    for t in trans {
        hasher.update(t.recording_id.as_bytes());
        hasher.update([0u8]);
        for tok in &t.tokens {
            hasher.update((tok.unit_id as u64).to_le_bytes());
        }
        hasher.update([0xff; 8]);
    }
    let mut out = String::with_capacity(64);
    for b in hasher.finalize() {
        let _ = write!(out, "{b:02x}");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub swer: f64,
    pub checksum: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iterations: Vec<IterationRecord>,
}

impl IterationTrace {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("iter\tswer\n");
        for r in &self.iterations {
            let _ = writeln!(out, "{}\t{}", r.iteration, r.swer);
        }
        out
    }
}

impl Artifact for IterationTrace {
    const KIND: &'static str = "iteration_trace";
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterateOptions {
    pub iterations: usize,
    pub min_dur: usize,
    pub stop_eps: f64,
    pub train: TrainOptions,
}

impl Default for IterateOptions {
    fn default() -> Self {
        IterateOptions {
            iterations: 10,
            min_dur: DEFAULT_MIN_DUR,
            stop_eps: DEFAULT_STOP_EPS,
            train: TrainOptions::default(),
        }
    }
}

/// Alternates training and decoding. Stops after `options.iterations`
/// rounds or once the SWER between successive transcriptions drops below
/// `options.stop_eps`.
pub fn iterate(
    features: &[FeatureMatrix],
    initial: &[PseudoTranscription],
    options: &IterateOptions,
) -> Result<(Vec<PseudoTranscription>, IterationTrace)> {
    if options.iterations == 0 {
        return Err(Error::invalid("iteration count must be at least 1"));
    }
    let mut current = initial.to_vec();
    let mut trace = IterationTrace::default();
    for iteration in 1..=options.iterations {
        let models = train_unit_models(features, &current, &options.train)?;
        let decoded: Vec<PseudoTranscription> = features
            .par_iter()
            .map(|f| decode(f, &models, options.min_dur))
            .collect::<Result<_>>()?;
        let rate = corpus_swer(&current, &decoded)?;
        trace.iterations.push(IterationRecord {
            iteration,
            swer: rate,
            checksum: transcription_checksum(&decoded),
        });
        current = decoded;
        if rate < options.stop_eps {
            break;
        }
    }
    Ok((current, trace))
}

/// Frame accuracy after mapping each hypothesis unit to the true unit it
/// most often overlaps (ties to the smaller id).
pub fn mapped_frame_accuracy(truth: &[Vec<usize>], hypothesis: &[Vec<usize>]) -> f64 {
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut total = 0;
    for (t, h) in truth.iter().zip(hypothesis) {
        for (&a, &b) in t.iter().zip(h) {
            *counts.entry((b, a)).or_default() += 1;
            total += 1;
        }
    }
    let mut best: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&(h, t), &c) in &counts {
        let e = best.entry(h).or_insert((t, c));
        if c > e.1 {
            *e = (t, c);
        }
    }
    let correct: usize = best.values().map(|v| v.1).sum();
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}
