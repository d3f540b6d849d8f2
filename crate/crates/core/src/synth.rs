//! Seeded synthetic corpora with known subword units and planted keywords.
//!
//! Unit 0 is silence (zero mean, unvoiced); every other unit is a three-state
//! left-to-right model whose state means sit within `0.5 * sigma` of a unit
//! mean, and unit means are pairwise at least `separation * sigma` apart.
//! Recordings alternate utterances and silences. Utterances are word
//! sequences where each word is either a planted keyword (with at most one
//! unit edit) or a filler of 2 to 5 random units. Adjacent units never
//! repeat, so unit tokens are recoverable from the frame sequence.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::asm::{PseudoTranscription, Token};
use crate::error::{Error, Result};
use crate::io::{self, Artifact, FeatureMatrix, ReferenceTranscript, ReferenceWord, SpeakerTag, VadTrack, DEFAULT_FRAME_PERIOD_MS};
use crate::segmentation::BoundarySet;

pub const SILENCE_UNIT: usize = 0;
const STATES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub recordings: usize,
    /// Alphabet size including the silence unit.
    pub units: usize,
    pub dims: usize,
    pub sigma: f64,
    /// Minimum distance between unit means, in multiples of `sigma`.
    pub separation: f64,
    pub keywords: usize,
    pub keyword_len_min: usize,
    pub keyword_len_max: usize,
    /// Probability that a word slot holds a keyword.
    pub keyword_rate: f64,
    /// Probability that a keyword occurrence carries one edit.
    pub edit_prob: f64,
    pub utterances: usize,
    pub words_min: usize,
    pub words_max: usize,
    pub silence_min: usize,
    pub silence_max: usize,
    pub speakers: usize,
    /// Boundary jitter of the two noisy boundary sources, in frames.
    pub boundary_jitter: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            recordings: 20,
            units: 50,
            dims: 12,
            sigma: 1.0,
            separation: 6.0,
            keywords: 2,
            keyword_len_min: 8,
            keyword_len_max: 8,
            keyword_rate: 0.15,
            edit_prob: 0.5,
            utterances: 8,
            words_min: 4,
            words_max: 8,
            silence_min: 30,
            silence_max: 60,
            speakers: 4,
            boundary_jitter: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.recordings == 0 {
            problems.push("recordings must be at least 1".to_string());
        }
        if self.keyword_len_min < 2 || self.keyword_len_min > self.keyword_len_max {
            problems.push("keyword lengths need 2 <= keyword_len_min <= keyword_len_max".to_string());
        }
        if self.units < 4 || self.units - 1 < self.keywords * self.keyword_len_max + 2 {
            problems.push("units must leave room for disjoint keywords plus two other speech units".to_string());
        }
        if self.dims == 0 {
            problems.push("dims must be positive".to_string());
        }
        if self.sigma.is_nan() || self.sigma <= 0.0 || self.separation.is_nan() || self.separation <= 0.0 {
            problems.push("sigma and separation must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.keyword_rate) || !(0.0..=1.0).contains(&self.edit_prob) {
            problems.push("keyword_rate and edit_prob must lie in [0, 1]".to_string());
        }
        if self.words_min == 0 || self.words_min > self.words_max || self.utterances == 0 {
            problems.push("need utterances >= 1 and 1 <= words_min <= words_max".to_string());
        }
        if self.silence_min < STATES || self.silence_min > self.silence_max {
            problems.push(format!("need {STATES} <= silence_min <= silence_max"));
        }
        if self.speakers == 0 {
            problems.push("speakers must be at least 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordOccurrence {
    pub recording_id: String,
    pub keyword: usize,
    pub start_frame: usize,
    pub end_frame: usize,
    pub units: Vec<usize>,
    pub edited: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub keywords: Vec<Vec<usize>>,
    /// Unit means; state means are jittered copies.
    pub unit_means: Vec<Vec<f64>>,
    pub transcriptions: Vec<PseudoTranscription>,
    pub occurrences: Vec<KeywordOccurrence>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub features: Vec<FeatureMatrix>,
    pub vad: Vec<VadTrack>,
    pub speakers: Vec<SpeakerTag>,
    pub references: Vec<ReferenceTranscript>,
    /// Two noisy boundary hypotheses per recording.
    pub boundary_sources: [Vec<BoundarySet>; 2],
    pub truth: SynthTruth,
}

enum Word {
    Keyword(usize, Vec<usize>, bool),
    Filler(usize),
}

fn draw_unit(rng: &mut ChaCha8Rng, units: usize, avoid: &[usize]) -> usize {
    loop {
        let u = rng.random_range(1..units);
        if !avoid.contains(&u) {
            return u;
        }
    }
}

fn unit_means(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let min_dist = cfg.separation * cfg.sigma;
    // Speech means also keep `min_dist` from the silence mean at the origin.
    let spread = min_dist * (cfg.units as f64).powf(1.0 / cfg.dims as f64) * 2.0;
    let mut means = vec![vec![0.0; cfg.dims]];
    while means.len() < cfg.units {
        let candidate: Vec<f64> = (0..cfg.dims).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * spread).collect();
        let ok = means.iter().all(|m| crate::numeric::euclidean(m, &candidate) >= min_dist);
        if ok {
            means.push(candidate);
        }
    }
    means
}

fn keyword_with_edit(kw: &[usize], cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (Vec<usize>, bool) {
    if rng.random::<f64>() >= cfg.edit_prob {
        return (kw.to_vec(), false);
    }
    let mut units = kw.to_vec();
    match rng.random_range(0..3) {
        0 => {
            let p = rng.random_range(0..units.len());
            let mut avoid = vec![kw[p]];
            if p > 0 {
                avoid.push(units[p - 1]);
            }
            if p + 1 < units.len() {
                avoid.push(units[p + 1]);
            }
            units[p] = draw_unit(rng, cfg.units, &avoid);
        }
        1 => {
            let p = rng.random_range(0..=units.len());
            let mut avoid = Vec::new();
            if p > 0 {
                avoid.push(units[p - 1]);
            }
            if p < units.len() {
                avoid.push(units[p]);
            }
            let u = draw_unit(rng, cfg.units, &avoid);
            units.insert(p, u);
        }
        _ => {
            let p = rng.random_range(0..units.len());
            units.remove(p);
        }
    }
    (units, true)
}

fn jitter(b: usize, amount: usize, frames: usize, rng: &mut ChaCha8Rng) -> usize {
    let delta = rng.random_range(0..=2 * amount) as i64 - amount as i64;
    (b as i64 + delta).clamp(1, frames as i64 - 1) as usize
}

/// Builds the whole corpus from `cfg.seed`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means = unit_means(cfg, &mut rng);
    let state_means: Vec<Vec<Vec<f64>>> = means
        .iter()
        .map(|m| {
            (0..STATES)
                .map(|_| m.iter().map(|v| v + (rng.random::<f64>() - 0.5) * cfg.sigma).collect())
                .collect()
        })
        .collect();
    let speaker_offsets: Vec<Vec<f64>> = (0..cfg.speakers)
        .map(|_| (0..cfg.dims).map(|_| (rng.random::<f64>() - 0.5) * 0.4 * cfg.sigma).collect())
        .collect();

    let mut pool: Vec<usize> = (1..cfg.units).collect();
    pool.shuffle(&mut rng);
    let mut taken = 0;
    let keywords: Vec<Vec<usize>> = (0..cfg.keywords)
        .map(|_| {
            let len = rng.random_range(cfg.keyword_len_min..=cfg.keyword_len_max);
            taken += len;
            pool[taken - len..taken].to_vec()
        })
        .collect();
    let noise = Normal::new(0.0, cfg.sigma).map_err(|e| Error::invalid(e.to_string()))?;

    let mut corpus = SynthCorpus {
        features: Vec::new(),
        vad: Vec::new(),
        speakers: Vec::new(),
        references: Vec::new(),
        boundary_sources: [Vec::new(), Vec::new()],
        truth: SynthTruth {
            keywords: keywords.clone(),
            unit_means: means.clone(),
            transcriptions: Vec::new(),
            occurrences: Vec::new(),
        },
    };

    for r in 0..cfg.recordings {
        let id = format!("rec{r:03}");
        let speaker = r % cfg.speakers;
        let mut units: Vec<usize> = Vec::new();
        let mut word_of_unit: Vec<Option<(usize, String)>> = Vec::new();
        let mut occurrence_of_unit: Vec<Option<usize>> = Vec::new();
        let mut pending_occurrences: Vec<(usize, Vec<usize>, bool)> = Vec::new();
        let mut word_counter = 0;

        let push_silence = |units: &mut Vec<usize>, words: &mut Vec<Option<(usize, String)>>, occ: &mut Vec<Option<usize>>| {
            units.push(SILENCE_UNIT);
            words.push(None);
            occ.push(None);
        };
        push_silence(&mut units, &mut word_of_unit, &mut occurrence_of_unit);
        for _ in 0..cfg.utterances {
            let n_words = rng.random_range(cfg.words_min..=cfg.words_max);
            // Keywords never follow each other directly.
            let mut words: Vec<Word> = Vec::with_capacity(n_words);
            for _ in 0..n_words {
                let after_keyword = matches!(words.last(), Some(Word::Keyword(..)));
                if cfg.keywords > 0 && !after_keyword && rng.random::<f64>() < cfg.keyword_rate {
                    let k = rng.random_range(0..cfg.keywords);
                    let (u, edited) = keyword_with_edit(&keywords[k], cfg, &mut rng);
                    words.push(Word::Keyword(k, u, edited));
                } else {
                    words.push(Word::Filler(rng.random_range(2..=5)));
                }
            }
            for (w, word) in words.iter().enumerate() {
                let next_first = match words.get(w + 1) {
                    Some(Word::Keyword(_, u, _)) => Some(u[0]),
                    _ => None,
                };
                match word {
                    Word::Keyword(k, u, edited) => {
                        let name = format!("kw{k}");
                        pending_occurrences.push((*k, u.clone(), *edited));
                        let occ = pending_occurrences.len() - 1;
                        for &x in u {
                            units.push(x);
                            word_of_unit.push(Some((word_counter, name.clone())));
                            occurrence_of_unit.push(Some(occ));
                        }
                    }
                    Word::Filler(len) => {
                        let mut fill = Vec::with_capacity(*len);
                        for i in 0..*len {
                            let mut avoid = vec![units.last().copied().unwrap_or(SILENCE_UNIT)];
                            if i + 1 == *len {
                                avoid.extend(next_first);
                            }
                            let u = draw_unit(&mut rng, cfg.units, &avoid);
                            units.push(u);
                            fill.push(u);
                        }
                        let name = format!(
                            "w{}",
                            fill.iter().map(|u| u.to_string()).collect::<Vec<_>>().join("-")
                        );
                        for _ in 0..*len {
                            word_of_unit.push(Some((word_counter, name.clone())));
                            occurrence_of_unit.push(None);
                        }
                    }
                }
                word_counter += 1;
            }
            push_silence(&mut units, &mut word_of_unit, &mut occurrence_of_unit);
        }

        // Durations and frames.
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut tokens: Vec<Token> = Vec::new();
        for &u in &units {
            let start = rows.len();
            if u == SILENCE_UNIT {
                let len = rng.random_range(cfg.silence_min..=cfg.silence_max);
                for _ in 0..len {
                    rows.push((0..cfg.dims).map(|_| noise.sample(&mut rng) * 0.5).collect());
                }
            } else {
                for state in &state_means[u] {
                    let len = rng.random_range(1..=3);
                    for _ in 0..len {
                        rows.push(
                            state
                                .iter()
                                .zip(&speaker_offsets[speaker])
                                .map(|(m, o)| m + o + noise.sample(&mut rng))
                                .collect(),
                        );
                    }
                }
            }
            tokens.push(Token {
                unit_id: u,
                start_frame: start,
                end_frame: rows.len(),
            });
        }
        let frames = rows.len();

        let mut words: Vec<ReferenceWord> = Vec::new();
        let mut current: Option<usize> = None;
        for (tok, w) in tokens.iter().zip(&word_of_unit) {
            match w {
                Some((n, _)) if current == Some(*n) => {
                    words.last_mut().expect("open word").end_frame = tok.end_frame;
                }
                Some((n, name)) => {
                    words.push(ReferenceWord {
                        word: name.clone(),
                        start_frame: tok.start_frame,
                        end_frame: tok.end_frame,
                    });
                    current = Some(*n);
                }
                None => current = None,
            }
        }

        for (occ, (k, u, edited)) in pending_occurrences.iter().enumerate() {
            let spans: Vec<&Token> = tokens
                .iter()
                .zip(&occurrence_of_unit)
                .filter(|(_, o)| **o == Some(occ))
                .map(|(t, _)| t)
                .collect();
            corpus.truth.occurrences.push(KeywordOccurrence {
                recording_id: id.clone(),
                keyword: *k,
                start_frame: spans[0].start_frame,
                end_frame: spans[spans.len() - 1].end_frame,
                units: u.clone(),
                edited: *edited,
            });
        }

        let true_bounds: Vec<usize> = tokens.iter().skip(1).map(|t| t.start_frame).collect();
        let mut src0: Vec<usize> = Vec::with_capacity(true_bounds.len());
        for &b in &true_bounds {
            if rng.random::<f64>() >= 0.1 {
                src0.push(jitter(b, cfg.boundary_jitter, frames, &mut rng));
            }
        }
        let mut src1: Vec<usize> = true_bounds
            .iter()
            .map(|&b| jitter(b, cfg.boundary_jitter, frames, &mut rng))
            .collect();
        let extra = true_bounds.len() / 10;
        for _ in 0..extra {
            src1.push(rng.random_range(1..frames));
        }
        src0.sort_unstable();
        src0.dedup();
        src1.sort_unstable();
        src1.dedup();

        corpus.vad.push(VadTrack {
            recording_id: id.clone(),
            voiced: tokens
                .iter()
                .flat_map(|t| std::iter::repeat_n(t.unit_id != SILENCE_UNIT, t.len()))
                .collect(),
        });
        corpus.speakers.push(SpeakerTag {
            recording_id: id.clone(),
            speaker_id: format!("spk{speaker}"),
        });
        corpus.references.push(ReferenceTranscript {
            recording_id: id.clone(),
            words,
        });
        corpus.boundary_sources[0].push(BoundarySet {
            recording_id: id.clone(),
            boundaries: src0,
        });
        corpus.boundary_sources[1].push(BoundarySet {
            recording_id: id.clone(),
            boundaries: src1,
        });
        corpus.truth.transcriptions.push(PseudoTranscription {
            recording_id: id.clone(),
            tokens,
        });
        corpus.features.push(FeatureMatrix::new(id, DEFAULT_FRAME_PERIOD_MS, rows)?);
    }
    Ok(corpus)
}

impl Artifact for SynthTruth {
    const KIND: &'static str = "synth_truth";
}

/// Writes a corpus in the layout the pipeline reads: `features/`, `vad/`,
/// `speakers/`, `transcripts/`, `boundaries/src0|src1/`, plus `truth.json`,
/// the generating `config.json` and a starter `pipeline.json`.
pub fn write_corpus(corpus: &SynthCorpus, cfg: &SynthConfig, dir: &Path) -> Result<()> {
    for f in &corpus.features {
        io::write_features_csv(f, dir.join("features").join(format!("{}.csv", f.recording_id)))?;
    }
    for v in &corpus.vad {
        io::write_vad(v, dir.join("vad").join(format!("{}.txt", v.recording_id)))?;
    }
    for s in &corpus.speakers {
        io::write_speaker(s, dir.join("speakers").join(format!("{}.txt", s.recording_id)))?;
    }
    for t in &corpus.references {
        io::write_transcript(t, dir.join("transcripts").join(format!("{}.txt", t.recording_id)))?;
    }
    for (k, source) in corpus.boundary_sources.iter().enumerate() {
        for b in source {
            io::persist(b, dir.join("boundaries").join(format!("src{k}")).join(format!("{}.json", b.recording_id)))?;
        }
    }
    io::persist(&corpus.truth, dir.join("truth.json"))?;
    let json = |v: serde_json::Result<String>| {
        v.map(|s| s + "\n").map_err(|source| Error::Json {
            path: dir.to_path_buf(),
            source,
        })
    };
    io::write_atomic(&dir.join("config.json"), json(serde_json::to_string_pretty(cfg))?.as_bytes())?;
    let starter = serde_json::json!({
        "seed": cfg.seed,
        "paths": {
            "features": "features",
            "boundaries": ["boundaries/src0", "boundaries/src1"],
            "vad": "vad",
            "transcripts": "transcripts",
            "workdir": "work"
        },
        "clustering": { "method": "ahc", "k": cfg.units }
    });
    io::write_atomic(&dir.join("pipeline.json"), json(serde_json::to_string_pretty(&starter))?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            recordings: 3,
            utterances: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn truth_is_consistent() {
        let c = generate(&small()).unwrap();
        for ((f, t), v) in c.features.iter().zip(&c.truth.transcriptions).zip(&c.vad) {
            t.validate(f.frames(), 50).unwrap();
            assert_eq!(v.voiced.len(), f.frames());
            assert!(t.tokens.windows(2).all(|w| w[0].unit_id != w[1].unit_id));
        }
        for r in &c.references {
            r.validate().unwrap();
        }
        for o in &c.truth.occurrences {
            let kw = &c.truth.keywords[o.keyword];
            let edits = crate::numeric::levenshtein(kw, &o.units);
            assert!(edits <= 1);
            assert_eq!(edits == 1, o.edited);
        }
    }

    #[test]
    fn means_are_separated() {
        let c = generate(&small()).unwrap();
        let m = &c.truth.unit_means;
        for i in 0..m.len() {
            for j in i + 1..m.len() {
                assert!(crate::numeric::euclidean(&m[i], &m[j]) >= 6.0);
            }
        }
    }

    #[test]
    fn invalid_config_lists_problems() {
        let bad = SynthConfig {
            recordings: 0,
            speakers: 0,
            ..SynthConfig::default()
        };
        match generate(&bad) {
            Err(Error::Config(p)) => assert_eq!(p.len(), 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
