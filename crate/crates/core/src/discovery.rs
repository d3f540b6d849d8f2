//! Keyword discovery from pseudo transcriptions.
//!
//! Repeated unit subsequences are mined by a weighted local alignment whose
//! recurrence carries values forward along rows and columns (so it behaves
//! like a weighted longest-common-subsequence table). Tracebacks start at
//! every cell where the last row or the last column strictly increases.
//! The harvested bag is grouped by leader clustering under a weighted,
//! length-normalised edit distance.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asm::PseudoTranscription;
use crate::error::{Error, Result};
use crate::io::Artifact;
use crate::weighting::WeightTable;

pub const DEFAULT_RADIUS: f64 = 0.3;
pub const DEFAULT_MARGIN: f64 = 1.4;
pub const DEFAULT_MIN_LEN: usize = 4;
pub const DEFAULT_MAX_ROUNDS: usize = 20;
/// Low-weight stretches at least this many frames long separate chunks.
pub const DEFAULT_CHUNK_GAP_FRAMES: usize = 30;
/// Units weighing less than this count as non-speech when chunking.
pub const LOW_WEIGHT: f64 = 0.1;

fn weight(weights: Option<&WeightTable>, unit: usize) -> f64 {
    weights.map_or(1.0, |w| w.get(unit))
}

/// One aligned pair: `a[a_start..a_start+len]` against `b[b_start..b_start+len]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignedPair {
    pub a_start: usize,
    pub b_start: usize,
    pub len: usize,
    pub score: f64,
}

impl AlignedPair {
    fn contains(&self, other: &AlignedPair) -> bool {
        self.a_start as isize - self.b_start as isize == other.a_start as isize - other.b_start as isize
            && self.a_start <= other.a_start
            && other.a_start + other.len <= self.a_start + self.len
    }
}

struct Table {
    cols: usize,
    values: Vec<f64>,
}

impl Table {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }
}

fn cell_score(a: &[usize], b: &[usize], weights: Option<&WeightTable>, i: usize, j: usize) -> f64 {
    let (x, y) = (a[i - 1], b[j - 1]);
    let w = weight(weights, x) * weight(weights, y);
    if x == y {
        w
    } else {
        -w
    }
}

fn fill(a: &[usize], b: &[usize], weights: Option<&WeightTable>) -> Table {
    let cols = b.len() + 1;
    let mut values = vec![0.0; (a.len() + 1) * cols];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let diag = values[(i - 1) * cols + j - 1] + cell_score(a, b, weights, i, j);
            let up = values[(i - 1) * cols + j];
            let left = values[i * cols + j - 1];
            values[i * cols + j] = diag.max(up).max(left).max(0.0);
        }
    }
    Table { cols, values }
}

/// Diagonal cells visited by the traceback from `(i, j)`, newest first.
/// Ties prefer diagonal, then up, then left; the walk stops at a zero cell.
fn traceback(table: &Table, a: &[usize], b: &[usize], weights: Option<&WeightTable>, mut i: usize, mut j: usize) -> Vec<(usize, usize)> {
    let mut cells = Vec::new();
    while i > 0 && j > 0 && table.at(i, j) > 0.0 {
        let here = table.at(i, j);
        if here == table.at(i - 1, j - 1) + cell_score(a, b, weights, i, j) {
            cells.push((i, j));
            i -= 1;
            j -= 1;
        } else if here == table.at(i - 1, j) {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    cells
}

/// Splits traceback cells into contiguous diagonal runs. A run may bridge
/// one skipped diagonal cell (a substitution) so both sides keep equal
/// length; mismatched cells at either end of a run are trimmed.
fn runs(cells: &[(usize, usize)], a: &[usize], b: &[usize], weights: Option<&WeightTable>) -> Vec<AlignedPair> {
    let mut out = Vec::new();
    let mut run: Vec<(usize, usize)> = Vec::new();
    let flush = |run: &mut Vec<(usize, usize)>, out: &mut Vec<AlignedPair>| {
        run.reverse();
        let matched = |&(i, j): &(usize, usize)| a[i - 1] == b[j - 1];
        let first = run.iter().position(matched);
        let last = run.iter().rposition(matched);
        if let (Some(f), Some(l)) = (first, last) {
            let kept = &run[f..=l];
            let score = kept.iter().map(|&(i, j)| cell_score(a, b, weights, i, j)).sum::<f64>();
            if score > 0.0 {
                out.push(AlignedPair {
                    a_start: kept[0].0 - 1,
                    b_start: kept[0].1 - 1,
                    len: kept.len(),
                    score,
                });
            }
        }
        run.clear();
    };
    for &(i, j) in cells {
        match run.last().copied() {
            None => run.push((i, j)),
            Some((pi, pj)) if pi == i + 1 && pj == j + 1 => run.push((i, j)),
            Some((pi, pj)) if pi == i + 2 && pj == j + 2 => {
                run.push((i + 1, j + 1));
                run.push((i, j));
            }
            Some(_) => {
                flush(&mut run, &mut out);
                run.push((i, j));
            }
        }
    }
    flush(&mut run, &mut out);
    out
}

/// Keeps one copy of each pair and drops pairs contained in another.
fn prune(mut pairs: Vec<AlignedPair>) -> Vec<AlignedPair> {
    pairs.sort_by(|x, y| (x.a_start, x.b_start, y.len).cmp(&(y.a_start, y.b_start, x.len)));
    pairs.dedup_by(|x, y| x.a_start == y.a_start && x.b_start == y.b_start && x.len == y.len);
    let keep: Vec<bool> = pairs
        .iter()
        .enumerate()
        .map(|(k, p)| !pairs.iter().enumerate().any(|(m, q)| m != k && q.contains(p) && q.len > p.len))
        .collect();
    pairs.into_iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| p).collect()
}

/// Aligned pairs from every strict increase along the last row and the last
/// column of the alignment table, sorted by `(a_start, b_start)`.
pub fn local_align(a: &[usize], b: &[usize], weights: Option<&WeightTable>) -> Vec<AlignedPair> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let (n, m) = (a.len(), b.len());
    let table = fill(a, b, weights);
    let mut starts: Vec<(usize, usize)> = (1..=m).filter(|&j| table.at(n, j) > table.at(n, j - 1)).map(|j| (n, j)).collect();
    starts.extend((1..n).filter(|&i| table.at(i, m) > table.at(i - 1, m)).map(|i| (i, m)));
    let pairs = starts
        .into_iter()
        .flat_map(|(i, j)| runs(&traceback(&table, a, b, weights, i, j), a, b, weights))
        .collect();
    prune(pairs)
}

/// Baseline: a single traceback from the first cell holding the table maximum.
pub fn local_align_global_max(a: &[usize], b: &[usize], weights: Option<&WeightTable>) -> Vec<AlignedPair> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let table = fill(a, b, weights);
    let mut best = (0, 0, 0.0);
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            if table.at(i, j) > best.2 {
                best = (i, j, table.at(i, j));
            }
        }
    }
    if best.2 <= 0.0 {
        return Vec::new();
    }
    prune(runs(&traceback(&table, a, b, weights, best.0, best.1), a, b, weights))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CandidateSequence {
    pub recording_id: String,
    pub start_frame: usize,
    pub end_frame: usize,
    pub units: Vec<usize>,
}

impl CandidateSequence {
    pub fn span(&self) -> usize {
        self.end_frame - self.start_frame
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BagOfSequences {
    /// Sorted by recording, span and units, without duplicates.
    pub entries: Vec<CandidateSequence>,
}

impl BagOfSequences {
    pub fn from_entries(mut entries: Vec<CandidateSequence>) -> Self {
        entries.sort();
        entries.dedup();
        BagOfSequences { entries }
    }
}

impl Artifact for BagOfSequences {
    const KIND: &'static str = "bag_of_sequences";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    WithinRecording,
    CrossRecording,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "within-recording" | "within" => Ok(Scope::WithinRecording),
            "cross-recording" | "cross" => Ok(Scope::CrossRecording),
            other => Err(Error::invalid(format!("unknown scope '{other}'"))),
        }
    }
}

struct Chunk {
    recording: usize,
    first: usize,
    units: Vec<usize>,
}

/// Splits each transcription at runs of low-weight tokens that span at
/// least `gap` frames.
fn chunks(trans: &[PseudoTranscription], weights: Option<&WeightTable>, gap: usize) -> Vec<Chunk> {
    let mut out = Vec::new();
    for (r, t) in trans.iter().enumerate() {
        let low: Vec<bool> = t.tokens.iter().map(|k| weight(weights, k.unit_id) < LOW_WEIGHT).collect();
        let mut cut = vec![false; low.len()];
        let mut i = 0;
        while i < low.len() {
            if low[i] {
                let mut j = i;
                while j < low.len() && low[j] {
                    j += 1;
                }
                let frames = t.tokens[j - 1].end_frame - t.tokens[i].start_frame;
                if frames >= gap.max(1) {
                    cut[i..j].iter_mut().for_each(|c| *c = true);
                }
                i = j;
            } else {
                i += 1;
            }
        }
        let mut start = None;
        for k in 0..=low.len() {
            let inside = k < low.len() && !cut[k];
            match (inside, start) {
                (true, None) => start = Some(k),
                (false, Some(s)) => {
                    out.push(Chunk {
                        recording: r,
                        first: s,
                        units: t.tokens[s..k].iter().map(|x| x.unit_id).collect(),
                    });
                    start = None;
                }
                _ => {}
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarvestOptions {
    pub min_len: usize,
    pub scope: Scope,
    pub chunk_gap_frames: usize,
}

impl Default for HarvestOptions {
    fn default() -> Self {
        HarvestOptions {
            min_len: DEFAULT_MIN_LEN,
            scope: Scope::CrossRecording,
            chunk_gap_frames: DEFAULT_CHUNK_GAP_FRAMES,
        }
    }
}

/// Aligns every unordered pair of distinct chunks in scope and keeps both
/// sides of each aligned pair that spans at least `min_len` units.
pub fn harvest_bag(trans: &[PseudoTranscription], weights: Option<&WeightTable>, options: &HarvestOptions) -> BagOfSequences {
    let chunks = chunks(trans, weights, options.chunk_gap_frames);
    let mut jobs = Vec::new();
    for x in 0..chunks.len() {
        for y in x + 1..chunks.len() {
            if options.scope == Scope::CrossRecording || chunks[x].recording == chunks[y].recording {
                jobs.push((x, y));
            }
        }
    }
    let candidate = |c: &Chunk, start: usize, len: usize| {
        let t = &trans[c.recording];
        let first = c.first + start;
        CandidateSequence {
            recording_id: t.recording_id.clone(),
            start_frame: t.tokens[first].start_frame,
            end_frame: t.tokens[first + len - 1].end_frame,
            units: c.units[start..start + len].to_vec(),
        }
    };
    let found: Vec<Vec<CandidateSequence>> = jobs
        .par_iter()
        .map(|&(x, y)| {
            let (cx, cy) = (&chunks[x], &chunks[y]);
            let mut out = Vec::new();
            for p in local_align(&cx.units, &cy.units, weights) {
                if p.len >= options.min_len {
                    out.push(candidate(cx, p.a_start, p.len));
                    out.push(candidate(cy, p.b_start, p.len));
                }
            }
            out
        })
        .collect();
    BagOfSequences::from_entries(found.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceParams {
    /// `None` means every unit weighs 1.
    pub weights: Option<WeightTable>,
    pub normalized: bool,
    pub radius: f64,
    pub margin: f64,
    pub min_len: usize,
    pub max_rounds: usize,
}

impl Default for DistanceParams {
    fn default() -> Self {
        DistanceParams {
            weights: None,
            normalized: true,
            radius: DEFAULT_RADIUS,
            margin: DEFAULT_MARGIN,
            min_len: DEFAULT_MIN_LEN,
            max_rounds: DEFAULT_MAX_ROUNDS,
        }
    }
}

impl DistanceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::invalid(format!("radius must be positive, got {}", self.radius)));
        }
        if !(self.margin > 1.0 && self.margin.is_finite()) {
            return Err(Error::invalid(format!("margin must exceed 1, got {}", self.margin)));
        }
        if self.max_rounds == 0 {
            return Err(Error::invalid("max_rounds must be at least 1"));
        }
        Ok(())
    }
}

/// Weighted edit distance: inserting or deleting unit `u` costs `w_u`,
/// substituting `u` by `v` costs `w_u * w_v` (0 when equal). Normalised
/// distances are divided by `sqrt(|x|^2 + |y|^2)`.
pub fn seq_distance(x: &[usize], y: &[usize], params: &DistanceParams) -> f64 {
    let w = params.weights.as_ref();
    let wx: Vec<f64> = x.iter().map(|&u| weight(w, u)).collect();
    let wy: Vec<f64> = y.iter().map(|&u| weight(w, u)).collect();
    let mut prev: Vec<f64> = Vec::with_capacity(y.len() + 1);
    prev.push(0.0);
    for (j, wj) in wy.iter().enumerate() {
        prev.push(prev[j] + wj);
    }
    let mut cur = vec![0.0; y.len() + 1];
    for (i, &xi) in x.iter().enumerate() {
        cur[0] = prev[0] + wx[i];
        for (j, &yj) in y.iter().enumerate() {
            let sub = if xi == yj { 0.0 } else { wx[i] * wy[j] };
            cur[j + 1] = (prev[j] + sub).min(prev[j + 1] + wx[i]).min(cur[j] + wy[j]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let d = prev[y.len()];
    if params.normalized {
        let norm = ((x.len() * x.len() + y.len() * y.len()) as f64).sqrt();
        if norm == 0.0 {
            0.0
        } else {
            d / norm
        }
    } else {
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordCluster {
    pub centroid: CandidateSequence,
    pub members: Vec<CandidateSequence>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KeywordClusterSet {
    pub clusters: Vec<KeywordCluster>,
    pub outliers: Vec<CandidateSequence>,
}

impl Artifact for KeywordClusterSet {
    const KIND: &'static str = "keyword_cluster_set";
}

/// Distances observed in one leader round.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    /// For each centroid added after the first: its distance to the nearest
    /// centroid selected before it.
    pub selection: Vec<f64>,
    /// For each assigned entry: its distance to the centroid it joined.
    pub assignment: Vec<f64>,
}

/// Selection pass: starting from `seeds` (bag indices, kept in order when
/// mutually separated), adds every entry farther than `margin * radius`
/// from all centroids selected so far.
pub fn selection_pass(bag: &BagOfSequences, params: &DistanceParams, seeds: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let limit = params.margin * params.radius;
    let mut selected: Vec<usize> = Vec::new();
    let mut gaps = Vec::new();
    for idx in seeds.iter().copied().chain(0..bag.entries.len()) {
        if selected.contains(&idx) {
            continue;
        }
        let nearest = selected
            .par_iter()
            .map(|&c| seq_distance(&bag.entries[idx].units, &bag.entries[c].units, params))
            .reduce(|| f64::INFINITY, f64::min);
        if nearest > limit {
            if !selected.is_empty() {
                gaps.push(nearest);
            }
            selected.push(idx);
        }
    }
    (selected, gaps)
}

/// Leader clustering with per-round traces.
pub fn leader_cluster_traced(bag: &BagOfSequences, params: &DistanceParams) -> Result<(KeywordClusterSet, Vec<RoundTrace>)> {
    params.validate()?;
    if bag.entries.is_empty() {
        return Ok((KeywordClusterSet::default(), Vec::new()));
    }
    let entries = &bag.entries;
    let mut seeds = vec![0usize];
    let mut previous_count = None;
    let mut rounds = Vec::new();
    loop {
        let (centroids, selection) = selection_pass(bag, params, &seeds);
        let assigned: Vec<Option<(usize, f64)>> = entries
            .par_iter()
            .map(|e| {
                let mut best: Option<(usize, f64)> = None;
                for (k, &c) in centroids.iter().enumerate() {
                    let d = seq_distance(&e.units, &entries[c].units, params);
                    if d < params.radius && best.is_none_or(|b| d < b.1) {
                        best = Some((k, d));
                    }
                }
                best
            })
            .collect();
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); centroids.len()];
        let mut assignment = Vec::new();
        for (i, a) in assigned.iter().enumerate() {
            if let Some((k, d)) = a {
                members[*k].push(i);
                assignment.push(*d);
            }
        }
        rounds.push(RoundTrace { selection, assignment });
        let live: Vec<(usize, Vec<usize>)> = centroids
            .iter()
            .copied()
            .zip(members)
            .filter(|(_, m)| !m.is_empty())
            .collect();
        let count = live.len();
        let done = rounds.len() >= params.max_rounds || (rounds.len() >= 2 && previous_count == Some(count));
        if done {
            let in_cluster: BTreeSet<usize> = live.iter().flat_map(|(_, m)| m.iter().copied()).collect();
            let clusters = live
                .iter()
                .map(|(c, m)| KeywordCluster {
                    centroid: entries[*c].clone(),
                    members: m.iter().map(|&i| entries[i].clone()).collect(),
                })
                .collect();
            let outliers = (0..entries.len())
                .filter(|i| !in_cluster.contains(i))
                .map(|i| entries[i].clone())
                .collect();
            return Ok((KeywordClusterSet { clusters, outliers }, rounds));
        }
        previous_count = Some(count);
        seeds = live
            .par_iter()
            .map(|(_, m)| {
                let mut best = (m[0], f64::INFINITY);
                for &i in m {
                    let total: f64 = m.iter().map(|&j| seq_distance(&entries[i].units, &entries[j].units, params)).sum();
                    if total < best.1 {
                        best = (i, total);
                    }
                }
                best.0
            })
            .collect();
    }
}

/// Leader clustering: repeated selection, assignment within `radius` and
/// centroid re-election until the cluster count settles.
pub fn leader_cluster(bag: &BagOfSequences, params: &DistanceParams) -> Result<KeywordClusterSet> {
    leader_cluster_traced(bag, params).map(|(set, _)| set)
}

fn overlap(x: &CandidateSequence, y: &CandidateSequence) -> usize {
    x.end_frame.min(y.end_frame).saturating_sub(x.start_frame.max(y.start_frame))
}

/// Within each cluster, drops same-recording members overlapping a longer
/// (or equally long and earlier) member by more than half the shorter span.
pub fn dedupe_overlaps(set: &KeywordClusterSet) -> KeywordClusterSet {
    let clusters = set
        .clusters
        .iter()
        .map(|c| {
            let mut order: Vec<usize> = (0..c.members.len()).collect();
            order.sort_by(|&i, &j| {
                let (x, y) = (&c.members[i], &c.members[j]);
                y.span().cmp(&x.span()).then(x.start_frame.cmp(&y.start_frame)).then(i.cmp(&j))
            });
            let mut kept: Vec<usize> = Vec::new();
            let mut suppressor = vec![usize::MAX; c.members.len()];
            for i in order {
                let x = &c.members[i];
                let by = kept.iter().copied().find(|&k| {
                    let y = &c.members[k];
                    x.recording_id == y.recording_id && 2 * overlap(x, y) > x.span().min(y.span())
                });
                match by {
                    Some(k) => suppressor[i] = k,
                    None => kept.push(i),
                }
            }
            kept.sort_unstable();
            let mut centroid = c.centroid.clone();
            if let Some(ci) = c.members.iter().position(|m| *m == c.centroid) {
                if suppressor[ci] != usize::MAX {
                    centroid = c.members[suppressor[ci]].clone();
                }
            }
            KeywordCluster {
                centroid,
                members: kept.into_iter().map(|i| c.members[i].clone()).collect(),
            }
        })
        .collect();
    KeywordClusterSet {
        clusters,
        outliers: set.outliers.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::Token;

    fn unweighted() -> DistanceParams {
        DistanceParams {
            normalized: false,
            ..DistanceParams::default()
        }
    }

    fn sides(a: &[usize], b: &[usize], pairs: &[AlignedPair]) -> Vec<(Vec<usize>, Vec<usize>)> {
        pairs
            .iter()
            .map(|p| (a[p.a_start..p.a_start + p.len].to_vec(), b[p.b_start..p.b_start + p.len].to_vec()))
            .collect()
    }

    #[test]
    fn today_we_went_hiking() {
        let a = [1, 2, 3, 4];
        let b = [2, 3, 5, 6, 1];
        let got = sides(&a, &b, &local_align(&a, &b, None));
        assert_eq!(got, vec![(vec![1], vec![1]), (vec![2, 3], vec![2, 3])]);
        let baseline = sides(&a, &b, &local_align_global_max(&a, &b, None));
        assert_eq!(baseline, vec![(vec![2, 3], vec![2, 3])]);
    }

    #[test]
    fn identical_sequences_align_fully() {
        let a = [4, 8, 15, 16, 23, 42];
        let pairs = local_align(&a, &a, None);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].len, 6);
        assert_eq!(pairs[0].score, 6.0);
    }

    #[test]
    fn disjoint_alphabets_align_nothing() {
        assert!(local_align(&[1, 2, 3], &[4, 5, 6, 7], None).is_empty());
    }

    #[test]
    fn substitution_is_bridged() {
        let a = [1, 2, 3, 4, 5];
        let b = [1, 2, 9, 4, 5];
        let pairs = local_align(&a, &b, None);
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].len, pairs[0].score), (5, 3.0));
    }

    #[test]
    fn kitten_sitting() {
        let enc = |s: &str| s.bytes().map(usize::from).collect::<Vec<_>>();
        assert_eq!(seq_distance(&enc("kitten"), &enc("sitting"), &unweighted()), 3.0);
    }

    #[test]
    fn full_mismatch_normalized() {
        let d = seq_distance(&[1, 2, 3, 4], &[5, 6, 7, 8], &DistanceParams::default());
        assert!((d - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn weighted_costs() {
        let params = DistanceParams {
            weights: Some(WeightTable {
                weights: vec![0.5, 0.25, 1.0],
            }),
            normalized: false,
            ..DistanceParams::default()
        };
        // Substituting 0 by 1 costs 0.125, cheaper than delete+insert.
        assert_eq!(seq_distance(&[0], &[1], &params), 0.125);
        assert_eq!(seq_distance(&[0, 2], &[2], &params), 0.5);
    }

    fn cand(rec: &str, s: usize, e: usize, units: &[usize]) -> CandidateSequence {
        CandidateSequence {
            recording_id: rec.into(),
            start_frame: s,
            end_frame: e,
            units: units.to_vec(),
        }
    }

    #[test]
    fn identical_entries_one_cluster() {
        let bag = BagOfSequences::from_entries((0..5).map(|i| cand("r", i * 10, i * 10 + 4, &[1, 2, 3, 4])).collect());
        let set = leader_cluster(&bag, &DistanceParams::default()).unwrap();
        assert_eq!(set.clusters.len(), 1);
        assert_eq!(set.clusters[0].members.len(), 5);
        assert!(set.outliers.is_empty());
    }

    #[test]
    fn distant_entries_are_singletons() {
        let bag = BagOfSequences::from_entries(vec![cand("r", 0, 4, &[1, 2, 3, 4]), cand("r", 4, 8, &[5, 6, 7, 8])]);
        let set = leader_cluster(&bag, &DistanceParams::default()).unwrap();
        assert_eq!(set.clusters.len(), 2);
        assert!(set.clusters.iter().all(|c| c.members.len() == 1));
    }

    #[test]
    fn bad_params_rejected() {
        let bag = BagOfSequences::from_entries(vec![cand("r", 0, 4, &[1, 2, 3, 4])]);
        let p = DistanceParams {
            margin: 1.0,
            ..DistanceParams::default()
        };
        assert!(leader_cluster(&bag, &p).is_err());
    }

    #[test]
    fn overlapping_members_deduplicated() {
        let c = KeywordCluster {
            centroid: cand("r", 2, 12, &[1, 2, 3, 4]),
            members: vec![cand("r", 0, 10, &[1, 2, 3, 4]), cand("r", 2, 12, &[1, 2, 3, 4]), cand("q", 2, 12, &[1, 2, 3, 4])],
        };
        let out = dedupe_overlaps(&KeywordClusterSet {
            clusters: vec![c],
            outliers: vec![],
        });
        let cl = &out.clusters[0];
        assert_eq!(cl.members, vec![cand("r", 0, 10, &[1, 2, 3, 4]), cand("q", 2, 12, &[1, 2, 3, 4])]);
        assert_eq!(cl.centroid, cand("r", 0, 10, &[1, 2, 3, 4]));
    }

    #[test]
    fn adjacent_members_kept() {
        let c = KeywordCluster {
            centroid: cand("r", 0, 10, &[1]),
            members: vec![cand("r", 0, 10, &[1]), cand("r", 10, 20, &[1])],
        };
        let set = KeywordClusterSet {
            clusters: vec![c],
            outliers: vec![],
        };
        assert_eq!(dedupe_overlaps(&set), set);
    }

    fn transcription(id: &str, units: &[usize]) -> PseudoTranscription {
        PseudoTranscription {
            recording_id: id.into(),
            tokens: units
                .iter()
                .enumerate()
                .map(|(i, &unit_id)| Token {
                    unit_id,
                    start_frame: i * 5,
                    end_frame: i * 5 + 5,
                })
                .collect(),
        }
    }

    #[test]
    fn single_chunk_gives_empty_bag() {
        let t = transcription("r", &[1, 2, 3, 4, 1, 2, 3, 4]);
        assert!(harvest_bag(&[t], None, &HarvestOptions::default()).entries.is_empty());
    }

    #[test]
    fn planted_motif_harvested() {
        let motif = [40, 41, 42, 43, 44];
        let mut a: Vec<usize> = vec![1, 7, 3, 9];
        a.extend(motif);
        a.extend([11, 12]);
        let mut b: Vec<usize> = vec![20, 21];
        b.extend(motif);
        b.extend([22, 23, 24]);
        let bag = harvest_bag(&[transcription("a", &a), transcription("b", &b)], None, &HarvestOptions::default());
        assert!(bag.entries.contains(&cand("a", 20, 45, &motif)));
        assert!(bag.entries.contains(&cand("b", 10, 35, &motif)));
        let long = HarvestOptions {
            min_len: 6,
            ..HarvestOptions::default()
        };
        assert!(harvest_bag(&[transcription("a", &a), transcription("b", &b)], None, &long).entries.is_empty());
    }

    #[test]
    fn low_weight_runs_split_chunks() {
        let mut units = vec![1, 2, 3, 4, 5];
        units.extend([0; 10]);
        units.extend([1, 2, 3, 4, 5]);
        let t = transcription("r", &units);
        let mut w = vec![1.0; 6];
        w[0] = 0.0;
        let table = WeightTable { weights: w };
        let opts = HarvestOptions {
            scope: Scope::WithinRecording,
            ..HarvestOptions::default()
        };
        let bag = harvest_bag(&[t], Some(&table), &opts);
        assert_eq!(bag.entries.len(), 2);
    }
}
