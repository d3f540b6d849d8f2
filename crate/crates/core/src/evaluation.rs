//! Scoring of discovered keyword clusters against reference word
//! transcripts, plus DTW-based ABX discriminability of feature sequences.
//!
//! A member is mapped to the words lying more than half inside its span.
//! When no word qualifies it takes the single word it overlaps most (ties to
//! the earlier word), and with no overlap at all it maps to `<nonspeech>`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discovery::{CandidateSequence, KeywordCluster, KeywordClusterSet};
use crate::error::{Error, Result};
use crate::io::{Artifact, FeatureMatrix, ReferenceTranscript, ReferenceWord};
use crate::numeric::{cosine_similarity, f_score, levenshtein, pairwise_sum, ratio};

pub const NONSPEECH: &str = "<nonspeech>";
pub const DEFAULT_TOLERANCE_FRAMES: usize = 2;

/// Reference transcripts indexed by recording id.
pub struct Reference<'a> {
    by_id: BTreeMap<&'a str, &'a ReferenceTranscript>,
}

impl<'a> Reference<'a> {
    pub fn new(transcripts: &'a [ReferenceTranscript]) -> Result<Self> {
        let mut by_id = BTreeMap::new();
        for t in transcripts {
            t.validate()?;
            if by_id.insert(t.recording_id.as_str(), t).is_some() {
                return Err(Error::invalid(format!("duplicate reference for '{}'", t.recording_id)));
            }
        }
        Ok(Reference { by_id })
    }

    fn words(&self, recording: &str) -> &'a [ReferenceWord] {
        self.by_id.get(recording).map_or(&[], |t| t.words.as_slice())
    }

    fn overlapping(&self, m: &CandidateSequence) -> impl Iterator<Item = (&'a ReferenceWord, usize)> + '_ {
        let (s, e) = (m.start_frame, m.end_frame);
        self.words(&m.recording_id).iter().filter_map(move |w| {
            let o = e.min(w.end_frame).saturating_sub(s.max(w.start_frame));
            (o > 0).then_some((w, o))
        })
    }

    /// Reference string a member stands for.
    pub fn mapped_string(&self, m: &CandidateSequence) -> String {
        let mut inside = Vec::new();
        let mut best: Option<(&ReferenceWord, usize)> = None;
        for (w, o) in self.overlapping(m) {
            if 2 * o > w.end_frame - w.start_frame {
                inside.push(w.word.as_str());
            }
            if best.is_none_or(|b| o > b.1) {
                best = Some((w, o));
            }
        }
        if !inside.is_empty() {
            inside.join(" ")
        } else {
            best.map_or_else(|| NONSPEECH.to_string(), |(w, _)| w.word.clone())
        }
    }

    /// Every word touching the member span, in order.
    fn touched_words(&self, m: &CandidateSequence) -> Vec<&'a str> {
        self.overlapping(m).map(|(w, _)| w.word.as_str()).collect()
    }
}

fn modal(strings: &[String]) -> (String, usize) {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in strings {
        *counts.entry(s).or_default() += 1;
    }
    let mut best = ("", 0);
    for (s, c) in counts {
        if c > best.1 {
            best = (s, c);
        }
    }
    (best.0.to_string(), best.1)
}

/// Share of members mapped to the cluster's most common reference string.
pub fn cluster_purity(cluster: &KeywordCluster, reference: &Reference) -> f64 {
    let mapped: Vec<String> = cluster.members.iter().map(|m| reference.mapped_string(m)).collect();
    ratio(modal(&mapped).1, mapped.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

impl Prf {
    pub fn from_counts(hits_p: usize, total_p: usize, hits_r: usize, total_r: usize) -> Self {
        let precision = ratio(hits_p, total_p);
        let recall = ratio(hits_r, total_r);
        Prf {
            precision,
            recall,
            f: f_score(precision, recall),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchingMetrics {
    pub ned: f64,
    pub coverage: f64,
    pub n_pairs: usize,
}

fn word_ned(x: &[&str], y: &[&str]) -> f64 {
    match (x.is_empty(), y.is_empty()) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 1.0,
        _ => levenshtein(x, y) as f64 / x.len().max(y.len()) as f64,
    }
}

fn live_clusters(clusters: &KeywordClusterSet) -> impl Iterator<Item = &KeywordCluster> {
    clusters.clusters.iter().filter(|c| !c.members.is_empty())
}

/// NED over all intra-cluster pairs and the share of reference word frames
/// covered by at least one member.
pub fn matching_metrics(clusters: &KeywordClusterSet, reference: &Reference) -> MatchingMetrics {
    let per_cluster: Vec<Vec<f64>> = clusters
        .clusters
        .par_iter()
        .filter(|c| !c.members.is_empty())
        .map(|c| {
            let words: Vec<Vec<&str>> = c.members.iter().map(|m| reference.touched_words(m)).collect();
            let mut out = Vec::new();
            for i in 0..words.len() {
                for j in i + 1..words.len() {
                    out.push(word_ned(&words[i], &words[j]));
                }
            }
            out
        })
        .collect();
    let neds: Vec<f64> = per_cluster.into_iter().flatten().collect();
    let ned = if neds.is_empty() { 0.0 } else { pairwise_sum(&neds) / neds.len() as f64 };

    let mut spans: BTreeMap<&str, Vec<(usize, usize)>> = BTreeMap::new();
    for c in live_clusters(clusters) {
        for m in &c.members {
            spans.entry(m.recording_id.as_str()).or_default().push((m.start_frame, m.end_frame));
        }
    }
    let mut covered = 0;
    let mut total = 0;
    for (id, t) in &reference.by_id {
        let member_spans = spans.get(id).map_or(&[][..], Vec::as_slice);
        for w in &t.words {
            total += w.end_frame - w.start_frame;
            covered += (w.start_frame..w.end_frame)
                .filter(|&f| member_spans.iter().any(|&(s, e)| s <= f && f < e))
                .count();
        }
    }
    MatchingMetrics {
        ned,
        coverage: ratio(covered, total),
        n_pairs: neds.len(),
    }
}

type FragmentKey = (String, usize, usize);

fn key(m: &CandidateSequence) -> FragmentKey {
    (m.recording_id.clone(), m.start_frame, m.end_frame)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteringMetrics {
    pub grouping: Prf,
    pub types: Prf,
}

/// Grouping scores compare intra-cluster pairs with all fragment pairs that
/// share a reference string. Type scores compare cluster modal strings with
/// the word types more than half covered by some member.
pub fn clustering_metrics(clusters: &KeywordClusterSet, reference: &Reference) -> ClusteringMetrics {
    let mut mapped: BTreeMap<FragmentKey, String> = BTreeMap::new();
    let mut discovered: BTreeSet<(FragmentKey, FragmentKey)> = BTreeSet::new();
    let mut types: BTreeSet<String> = BTreeSet::new();
    for c in live_clusters(clusters) {
        let keys: Vec<FragmentKey> = c.members.iter().map(key).collect();
        let strings: Vec<String> = c.members.iter().map(|m| reference.mapped_string(m)).collect();
        for (k, s) in keys.iter().zip(&strings) {
            mapped.insert(k.clone(), s.clone());
        }
        for i in 0..keys.len() {
            for j in i + 1..keys.len() {
                if keys[i] != keys[j] {
                    let (a, b) = if keys[i] < keys[j] { (i, j) } else { (j, i) };
                    discovered.insert((keys[a].clone(), keys[b].clone()));
                }
            }
        }
        let (m, _) = modal(&strings);
        if m != NONSPEECH {
            types.insert(m);
        }
    }
    let fragments: Vec<(&FragmentKey, &String)> = mapped.iter().collect();
    let mut gold: BTreeSet<(FragmentKey, FragmentKey)> = BTreeSet::new();
    for i in 0..fragments.len() {
        for j in i + 1..fragments.len() {
            if fragments[i].1 == fragments[j].1 && fragments[i].1 != NONSPEECH {
                gold.insert((fragments[i].0.clone(), fragments[j].0.clone()));
            }
        }
    }
    let hits = discovered.intersection(&gold).count();
    let grouping = Prf::from_counts(hits, discovered.len(), hits, gold.len());

    let mut lexicon: BTreeSet<String> = BTreeSet::new();
    for (id, t) in &reference.by_id {
        for w in &t.words {
            let covered = live_clusters(clusters).flat_map(|c| &c.members).any(|m| {
                m.recording_id == *id && 2 * m.end_frame.min(w.end_frame).saturating_sub(m.start_frame.max(w.start_frame)) > w.end_frame - w.start_frame
            });
            if covered {
                lexicon.insert(w.word.clone());
            }
        }
    }
    let type_hits = types.intersection(&lexicon).count();
    ClusteringMetrics {
        grouping,
        types: Prf::from_counts(type_hits, types.len(), type_hits, lexicon.len()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParsingMetrics {
    pub token: Prf,
    pub boundary: Prf,
}

fn near(a: usize, b: usize, tolerance: usize) -> bool {
    a.abs_diff(b) <= tolerance
}

/// Token and boundary scores with edges matched within `tolerance` frames.
pub fn parsing_metrics(clusters: &KeywordClusterSet, reference: &Reference, tolerance: usize) -> ParsingMetrics {
    let members: BTreeSet<FragmentKey> = live_clusters(clusters).flat_map(|c| c.members.iter().map(key)).collect();
    let words: Vec<(&str, &ReferenceWord)> = reference
        .by_id
        .iter()
        .flat_map(|(id, t)| t.words.iter().map(move |w| (*id, w)))
        .collect();
    let token_match = |m: &FragmentKey, (id, w): &(&str, &ReferenceWord)| {
        m.0 == *id && near(m.1, w.start_frame, tolerance) && near(m.2, w.end_frame, tolerance)
    };
    let member_hits = members.iter().filter(|m| words.iter().any(|w| token_match(m, w))).count();
    let word_hits = words.iter().filter(|w| members.iter().any(|m| token_match(m, w))).count();
    let token = Prf::from_counts(member_hits, members.len(), word_hits, words.len());

    let found: BTreeSet<(&str, usize)> = members
        .iter()
        .flat_map(|(id, s, e)| [(id.as_str(), *s), (id.as_str(), *e)])
        .collect();
    let truth: BTreeSet<(&str, usize)> = words
        .iter()
        .flat_map(|(id, w)| [(*id, w.start_frame), (*id, w.end_frame)])
        .collect();
    let edge_match = |a: &(&str, usize), b: &(&str, usize)| a.0 == b.0 && near(a.1, b.1, tolerance);
    let found_hits = found.iter().filter(|f| truth.iter().any(|t| edge_match(f, t))).count();
    let truth_hits = truth.iter().filter(|t| found.iter().any(|f| edge_match(f, t))).count();
    ParsingMetrics {
        token,
        boundary: Prf::from_counts(found_hits, found.len(), truth_hits, truth.len()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub n_words: usize,
    pub n_pairs: usize,
}

impl Artifact for EvalReport {
    const KIND: &'static str = "eval_report";
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (name, value) in &self.metrics {
            let _ = writeln!(out, "{name:<20} {value:>8.4}");
        }
        let _ = writeln!(out, "{:<20} {:>8}", "n_words", self.n_words);
        let _ = writeln!(out, "{:<20} {:>8}", "n_pairs", self.n_pairs);
        out
    }
}

/// Every cluster metric in one report.
pub fn evaluate(clusters: &KeywordClusterSet, reference: &Reference, tolerance: usize) -> EvalReport {
    let matching = matching_metrics(clusters, reference);
    let clustering = clustering_metrics(clusters, reference);
    let parsing = parsing_metrics(clusters, reference, tolerance);
    let purities: Vec<f64> = live_clusters(clusters).map(|c| cluster_purity(c, reference)).collect();
    let mut metrics = BTreeMap::new();
    metrics.insert("ned".to_string(), matching.ned);
    metrics.insert("coverage".to_string(), matching.coverage);
    metrics.insert(
        "purity".to_string(),
        if purities.is_empty() { 0.0 } else { pairwise_sum(&purities) / purities.len() as f64 },
    );
    for (name, prf) in [
        ("grouping", clustering.grouping),
        ("type", clustering.types),
        ("token", parsing.token),
        ("boundary", parsing.boundary),
    ] {
        metrics.insert(format!("{name}_precision"), prf.precision);
        metrics.insert(format!("{name}_recall"), prf.recall);
        metrics.insert(format!("{name}_f"), prf.f);
    }
    let n_words = live_clusters(clusters)
        .flat_map(|c| c.members.iter().map(key))
        .collect::<BTreeSet<_>>()
        .len();
    EvalReport {
        metrics,
        n_words,
        n_pairs: matching.n_pairs,
    }
}

fn cosine_distance(x: &[f64], y: &[f64]) -> f64 {
    cosine_similarity(x, y).map_or(1.0, |s| 1.0 - s)
}

/// DTW with cosine frame distance; the path minimising total cost (then
/// length) is chosen and its cost is averaged over its length.
pub fn dtw_cosine(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<f64> {
    if x.dims() != y.dims() {
        return Err(Error::LengthMismatch {
            what: "DTW feature dims".into(),
            expected: x.dims(),
            actual: y.dims(),
        });
    }
    let (n, m) = (x.frames(), y.frames());
    if n == 0 || m == 0 {
        return Err(Error::invalid("DTW over an empty sequence"));
    }
    let mut prev: Vec<(f64, usize)> = vec![(f64::INFINITY, 0); m];
    let mut cur = prev.clone();
    for i in 0..n {
        for j in 0..m {
            let d = cosine_distance(x.row(i), y.row(j));
            let best = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut options = Vec::with_capacity(3);
                if i > 0 && j > 0 {
                    options.push(prev[j - 1]);
                }
                if i > 0 {
                    options.push(prev[j]);
                }
                if j > 0 {
                    options.push(cur[j - 1]);
                }
                options
                    .into_iter()
                    .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                    .expect("at least one predecessor")
            };
            cur[j] = (best.0 + d, best.1 + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let (cost, len) = prev[m - 1];
    Ok(cost / len as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct AbxTriple<'a> {
    pub a: &'a FeatureMatrix,
    pub b: &'a FeatureMatrix,
    pub x: &'a FeatureMatrix,
    pub category_a: &'a str,
    pub category_b: &'a str,
    pub category_x: &'a str,
    pub speaker_a: &'a str,
    pub speaker_b: &'a str,
    pub speaker_x: &'a str,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbxResult {
    /// `None` when no triple fell in the condition.
    pub within: Option<f64>,
    pub across: Option<f64>,
}

fn triple_error(t: &AbxTriple) -> Result<(bool, f64)> {
    if t.category_a == t.category_b {
        return Err(Error::invalid("ABX triple with A and B in the same category"));
    }
    let (right, wrong) = if t.category_x == t.category_a {
        (t.a, t.b)
    } else if t.category_x == t.category_b {
        (t.b, t.a)
    } else {
        return Err(Error::invalid("ABX triple where X matches neither A nor B"));
    };
    let d_right = dtw_cosine(t.x, right)?;
    let d_wrong = dtw_cosine(t.x, wrong)?;
    let error = if d_wrong < d_right {
        1.0
    } else if d_wrong == d_right {
        0.5
    } else {
        0.0
    };
    let within = t.speaker_a == t.speaker_b && t.speaker_b == t.speaker_x;
    Ok((within, error))
}

/// Mean ABX error per speaker condition.
pub fn abx_error(triples: &[AbxTriple]) -> Result<AbxResult> {
    let scored: Vec<(bool, f64)> = triples.par_iter().map(triple_error).collect::<Result<_>>()?;
    let mean = |within: bool| {
        let v: Vec<f64> = scored.iter().filter(|s| s.0 == within).map(|s| s.1).collect();
        (!v.is_empty()).then(|| pairwise_sum(&v) / v.len() as f64)
    };
    Ok(AbxResult {
        within: mean(true),
        across: mean(false),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn word(w: &str, s: usize, e: usize) -> ReferenceWord {
        ReferenceWord {
            word: w.into(),
            start_frame: s,
            end_frame: e,
        }
    }

    fn refs() -> Vec<ReferenceTranscript> {
        vec![ReferenceTranscript {
            recording_id: "r".into(),
            words: vec![word("plus", 0, 10), word("one", 10, 20), word("this", 30, 40), word("one", 40, 50)],
        }]
    }

    fn member(s: usize, e: usize) -> CandidateSequence {
        CandidateSequence {
            recording_id: "r".into(),
            start_frame: s,
            end_frame: e,
            units: vec![1],
        }
    }

    fn cluster(spans: &[(usize, usize)]) -> KeywordCluster {
        let members: Vec<_> = spans.iter().map(|&(s, e)| member(s, e)).collect();
        KeywordCluster {
            centroid: members[0].clone(),
            members,
        }
    }

    #[test]
    fn mapping_rules() {
        let r = refs();
        let reference = Reference::new(&r).unwrap();
        assert_eq!(reference.mapped_string(&member(0, 20)), "plus one");
        assert_eq!(reference.mapped_string(&member(8, 14)), "one");
        assert_eq!(reference.mapped_string(&member(5, 15)), "plus");
        assert_eq!(reference.mapped_string(&member(21, 29)), NONSPEECH);
    }

    #[test]
    fn purity_ratios() {
        let r = refs();
        let reference = Reference::new(&r).unwrap();
        assert_eq!(cluster_purity(&cluster(&[(10, 20), (40, 50)]), &reference), 1.0);
        let mixed = cluster(&[(0, 20), (30, 50), (0, 20), (0, 20)]);
        assert_eq!(cluster_purity(&mixed, &reference), 0.75);
    }

    #[test]
    fn coverage_half() {
        let r = refs();
        let reference = Reference::new(&r).unwrap();
        let set = KeywordClusterSet {
            clusters: vec![cluster(&[(0, 10), (10, 20)])],
            outliers: vec![],
        };
        let m = matching_metrics(&set, &reference);
        assert_eq!(m.coverage, 0.5);
        assert_eq!(m.n_pairs, 1);
        assert_eq!(m.ned, 1.0);
    }

    #[test]
    fn perfect_discovery_scores_one() {
        let r = vec![ReferenceTranscript {
            recording_id: "r".into(),
            words: vec![word("a", 0, 10), word("b", 10, 20), word("a", 20, 30), word("b", 30, 40)],
        }];
        let reference = Reference::new(&r).unwrap();
        let set = KeywordClusterSet {
            clusters: vec![cluster(&[(0, 10), (20, 30)]), cluster(&[(10, 20), (30, 40)])],
            outliers: vec![],
        };
        let c = clustering_metrics(&set, &reference);
        for prf in [c.grouping, c.types] {
            assert_eq!((prf.precision, prf.recall, prf.f), (1.0, 1.0, 1.0));
        }
        let p = parsing_metrics(&set, &reference, 2);
        assert_eq!((p.token.precision, p.token.recall), (1.0, 1.0));
        assert_eq!(matching_metrics(&set, &reference).ned, 0.0);
    }

    #[test]
    fn far_edges_miss() {
        let r = refs();
        let reference = Reference::new(&r).unwrap();
        let set = KeywordClusterSet {
            clusters: vec![cluster(&[(4, 25), (34, 55)])],
            outliers: vec![],
        };
        assert_eq!(parsing_metrics(&set, &reference, 2).boundary.precision, 0.0);
    }

    fn fm(rows: Vec<Vec<f64>>) -> FeatureMatrix {
        FeatureMatrix::new("x", 10.0, rows).unwrap()
    }

    #[test]
    fn dtw_identity_and_orthogonal() {
        let x = fm(vec![vec![1.0, 2.0], vec![0.5, -1.0], vec![3.0, 0.1]]);
        assert!(dtw_cosine(&x, &x).unwrap().abs() < 1e-12);
        let a = fm(vec![vec![1.0, 0.0]; 3]);
        let b = fm(vec![vec![0.0, 2.0]; 4]);
        assert!((dtw_cosine(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dtw_two_by_two_matches_path_enumeration() {
        let x = fm(vec![vec![1.0, 0.0], vec![1.0, 1.0]]);
        let y = fm(vec![vec![0.0, 1.0], vec![1.0, 0.2]]);
        let d = |i: usize, j: usize| cosine_distance(x.row(i), y.row(j));
        // Monotone paths: diagonal (2 cells), down-right and right-down (3 cells).
        let paths = [
            (d(0, 0) + d(1, 1), 2usize),
            (d(0, 0) + d(1, 0) + d(1, 1), 3),
            (d(0, 0) + d(0, 1) + d(1, 1), 3),
        ];
        let best = paths.iter().min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))).unwrap();
        assert!((dtw_cosine(&x, &y).unwrap() - best.0 / best.1 as f64).abs() < 1e-12);
    }

    #[test]
    fn zero_frame_distance_is_one() {
        let a = fm(vec![vec![0.0, 0.0]]);
        assert_eq!(dtw_cosine(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn abx_extremes() {
        let a = fm(vec![vec![1.0, 0.0, 0.0]; 4]);
        let b = fm(vec![vec![0.0, 1.0, 0.0]; 5]);
        let right = AbxTriple {
            a: &a,
            b: &b,
            x: &a,
            category_a: "p",
            category_b: "q",
            category_x: "p",
            speaker_a: "s",
            speaker_b: "s",
            speaker_x: "s",
        };
        let r = abx_error(&[right]).unwrap();
        assert_eq!(r.within, Some(0.0));
        assert_eq!(r.across, None);
        let wrong = AbxTriple { x: &b, category_x: "p", speaker_x: "z", ..right };
        let r = abx_error(&[wrong]).unwrap();
        assert_eq!(r.within, None);
        assert_eq!(r.across, Some(1.0));
    }
}
