//! Keyword clusters as document terms: session windows, TF-IDF retrieval,
//! cross-validated same-lecture accuracy and skip-gram embeddings of
//! cluster-id streams.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discovery::KeywordClusterSet;
use crate::error::{Error, Result};
use crate::io::Artifact;
use crate::numeric::{cosine_similarity, pairwise_sum};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub document_id: String,
    pub recording_id: String,
    pub start_frame: usize,
    pub end_frame: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionIndex {
    pub sessions: Vec<Session>,
}

impl Artifact for SessionIndex {
    const KIND: &'static str = "session_index";
}

/// Sliding windows of `window` frames every `shift` frames. A trailing
/// session `[last + shift, frames)` is added when more than `shift / 2`
/// frames remain after the last full window; a recording shorter than one
/// window becomes a single session.
pub fn split_sessions(recordings: &[(String, usize)], window: usize, shift: usize) -> Result<SessionIndex> {
    if shift == 0 || window < shift {
        return Err(Error::invalid(format!("need window >= shift > 0, got window {window}, shift {shift}")));
    }
    let mut sessions = Vec::new();
    for (id, frames) in recordings {
        let mut spans = Vec::new();
        if *frames < window {
            spans.push((0, *frames));
        } else {
            let mut offset = 0;
            while offset + window <= *frames {
                spans.push((offset, offset + window));
                offset += shift;
            }
            let last = offset - shift;
            if 2 * (frames - (last + window)) > shift {
                spans.push((last + shift, *frames));
            }
        }
        for (k, (s, e)) in spans.into_iter().enumerate() {
            sessions.push(Session {
                document_id: format!("{id}#{k}"),
                recording_id: id.clone(),
                start_frame: s,
                end_frame: e,
            });
        }
    }
    Ok(SessionIndex { sessions })
}

/// Minutes to frames at the given frame period, rounded to nearest.
pub fn minutes_to_frames(minutes: f64, frame_period_ms: f64) -> usize {
    (minutes * 60_000.0 / frame_period_ms).round() as usize
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermCounts {
    pub document_id: String,
    pub recording_id: String,
    pub counts: BTreeMap<usize, usize>,
}

/// Counts, per session, the members of each cluster lying at least half
/// inside the session. Terms are cluster indices.
pub fn session_term_counts(sessions: &SessionIndex, clusters: &KeywordClusterSet) -> Vec<TermCounts> {
    sessions
        .sessions
        .par_iter()
        .map(|s| {
            let mut counts = BTreeMap::new();
            for (term, c) in clusters.clusters.iter().enumerate() {
                let n = c
                    .members
                    .iter()
                    .filter(|m| {
                        let overlap = m.end_frame.min(s.end_frame).saturating_sub(m.start_frame.max(s.start_frame));
                        m.recording_id == s.recording_id && 2 * overlap >= m.span()
                    })
                    .count();
                if n > 0 {
                    counts.insert(term, n);
                }
            }
            TermCounts {
                document_id: s.document_id.clone(),
                recording_id: s.recording_id.clone(),
                counts,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfIdfMatrix {
    pub terms: Vec<usize>,
    pub documents: Vec<String>,
    /// Source recording of each document.
    pub recordings: Vec<String>,
    /// `scores[t][d]`.
    pub scores: Vec<Vec<f64>>,
}

impl Artifact for TfIdfMatrix {
    const KIND: &'static str = "tfidf_matrix";
}

impl TfIdfMatrix {
    pub fn column(&self, d: usize) -> Vec<f64> {
        self.scores.iter().map(|row| row[d]).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("term");
        for d in &self.documents {
            out.push('\t');
            out.push_str(d);
        }
        out.push('\n');
        for (t, row) in self.terms.iter().zip(&self.scores) {
            let _ = write!(out, "{t}");
            for v in row {
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Raw-count tf times `ln(N / df)`. Terms absent from every document are
/// left out; with `max_df_ratio` set, terms in more than that share of
/// documents are dropped too.
pub fn tfidf(docs: &[TermCounts], max_df_ratio: Option<f64>) -> Result<TfIdfMatrix> {
    if docs.is_empty() {
        return Err(Error::invalid("TF-IDF needs at least one document"));
    }
    let n = docs.len() as f64;
    let mut df: BTreeMap<usize, usize> = BTreeMap::new();
    for d in docs {
        for (&t, &c) in &d.counts {
            if c > 0 {
                *df.entry(t).or_default() += 1;
            }
        }
    }
    let terms: Vec<usize> = df
        .iter()
        .filter(|(_, &k)| max_df_ratio.is_none_or(|r| k as f64 <= r * n))
        .map(|(&t, _)| t)
        .collect();
    let scores = terms
        .iter()
        .map(|t| {
            let idf = (n / df[t] as f64).ln();
            docs.iter()
                .map(|d| d.counts.get(t).copied().unwrap_or(0) as f64 * idf)
                .collect()
        })
        .collect();
    Ok(TfIdfMatrix {
        terms,
        documents: docs.iter().map(|d| d.document_id.clone()).collect(),
        recordings: docs.iter().map(|d| d.recording_id.clone()).collect(),
        scores,
    })
}

/// Other documents ranked by cosine similarity to the query column.
/// Zero columns come last with similarity 0; ties keep document order.
pub fn retrieve(query: &str, matrix: &TfIdfMatrix, exclude_same_recording: bool) -> Result<Vec<(String, f64)>> {
    let q = matrix
        .documents
        .iter()
        .position(|d| d == query)
        .ok_or_else(|| Error::invalid(format!("unknown document '{query}'")))?;
    let qv = matrix.column(q);
    let mut ranked: Vec<(bool, f64, usize)> = (0..matrix.documents.len())
        .filter(|&d| d != q && !(exclude_same_recording && matrix.recordings[d] == matrix.recordings[q]))
        .map(|d| {
            let v = matrix.column(d);
            let zero = v.iter().all(|&x| x == 0.0);
            (zero, cosine_similarity(&qv, &v).unwrap_or(0.0), d)
        })
        .collect();
    ranked.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2)));
    Ok(ranked.into_iter().map(|(_, s, d)| (matrix.documents[d].clone(), s)).collect())
}

/// Nearest-neighbour lecture prediction under `folds`-fold cross
/// validation. Returns the mean and sample standard deviation of the
/// per-fold accuracies.
pub fn cv_same_lecture_accuracy(matrix: &TfIdfMatrix, labels: &[String], folds: usize, seed: u64) -> Result<(f64, f64)> {
    let n = matrix.documents.len();
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            what: "lecture labels".into(),
            expected: n,
            actual: labels.len(),
        });
    }
    if folds < 2 || folds > n {
        return Err(Error::invalid(format!("need 2 <= folds <= {n}, got {folds}")));
    }
    if labels.iter().collect::<BTreeSet<_>>().len() < 2 {
        return Err(Error::invalid("need at least two lectures"));
    }
    let columns: Vec<Vec<f64>> = (0..n).map(|d| matrix.column(d)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold_of: Vec<usize> = {
        let mut f = vec![0; n];
        for (pos, &d) in order.iter().enumerate() {
            f[d] = pos % folds;
        }
        f
    };
    let accuracies: Vec<f64> = (0..folds)
        .into_par_iter()
        .map(|fold| {
            let train: Vec<usize> = (0..n).filter(|&d| fold_of[d] != fold).collect();
            if train.iter().map(|&d| &labels[d]).collect::<BTreeSet<_>>().len() < 2 {
                return Err(Error::invalid(format!("fold {fold} trains on a single lecture")));
            }
            let test: Vec<usize> = (0..n).filter(|&d| fold_of[d] == fold).collect();
            let correct = test
                .iter()
                .filter(|&&d| {
                    let mut best = (train[0], f64::NEG_INFINITY);
                    for &t in &train {
                        let s = cosine_similarity(&columns[d], &columns[t]).unwrap_or(-1.0);
                        if s > best.1 {
                            best = (t, s);
                        }
                    }
                    labels[best.0] == labels[d]
                })
                .count();
            Ok(correct as f64 / test.len() as f64)
        })
        .collect::<Result<_>>()?;
    let mean = pairwise_sum(&accuracies) / folds as f64;
    let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (folds - 1) as f64;
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkipGramOptions {
    pub dim: usize,
    /// Neighbours on each side of a target.
    pub context: usize,
    /// Neighbours drawn per target out of the `2 * context` available.
    pub subsample_k: usize,
    pub negatives: usize,
    pub batch: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SkipGramOptions {
    fn default() -> Self {
        SkipGramOptions {
            dim: 100,
            context: 3,
            subsample_k: 4,
            negatives: 10,
            batch: 256,
            epochs: 5,
            learning_rate: 0.025,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub ids: Vec<usize>,
    pub vectors: Vec<Vec<f64>>,
    /// Mean negative-sampling loss per epoch.
    pub epoch_losses: Vec<f64>,
}

impl Artifact for EmbeddingTable {
    const KIND: &'static str = "embedding_table";
}

impl EmbeddingTable {
    pub fn vector(&self, id: usize) -> Option<&[f64]> {
        self.ids.binary_search(&id).ok().map(|i| self.vectors[i].as_slice())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, v) in self.ids.iter().zip(&self.vectors) {
            let _ = write!(out, "{id}");
            for x in v {
                let _ = write!(out, "\t{x}");
            }
            out.push('\n');
        }
        out
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Skip-gram with negative sampling over cluster-id streams. Updates are
/// applied once per mini-batch from gradients accumulated in pair order.
pub fn skipgram_train(streams: &[Vec<usize>], options: &SkipGramOptions) -> Result<EmbeddingTable> {
    let streams: Vec<&Vec<usize>> = streams.iter().filter(|s| s.len() >= 2).collect();
    let ids: Vec<usize> = streams.iter().flat_map(|s| s.iter().copied()).collect::<BTreeSet<_>>().into_iter().collect();
    if ids.len() < 2 {
        return Err(Error::invalid("skip-gram needs a vocabulary of at least two ids"));
    }
    if options.dim == 0 || options.batch == 0 || options.epochs == 0 {
        return Err(Error::invalid("skip-gram dim, batch and epochs must be positive"));
    }
    let index: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let streams: Vec<Vec<usize>> = streams.iter().map(|s| s.iter().map(|id| index[id]).collect()).collect();
    let v = ids.len();
    let dim = options.dim;

    let mut freq = vec![0usize; v];
    for s in &streams {
        for &w in s {
            freq[w] += 1;
        }
    }
    let mut cumulative = Vec::with_capacity(v);
    let mut acc = 0.0;
    for &f in &freq {
        acc += (f as f64).powf(0.75);
        cumulative.push(acc);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut input: Vec<Vec<f64>> = (0..v)
        .map(|_| (0..dim).map(|_| (rng.random::<f64>() - 0.5) / dim as f64).collect())
        .collect();
    let mut output = vec![vec![0.0; dim]; v];

    let draw_negative = |rng: &mut ChaCha8Rng| {
        let r = rng.random::<f64>() * acc;
        cumulative.partition_point(|&c| c <= r).min(v - 1)
    };
    let pairs_per_epoch: usize = streams
        .iter()
        .map(|s| {
            (0..s.len())
                .map(|i| {
                    let lo = i.saturating_sub(options.context);
                    let hi = (i + options.context).min(s.len() - 1);
                    (hi - lo).min(options.subsample_k)
                })
                .sum::<usize>()
        })
        .sum();
    let total = (pairs_per_epoch * options.epochs).max(1) as f64;
    let mut processed = 0usize;
    let mut epoch_losses = Vec::with_capacity(options.epochs);

    for _ in 0..options.epochs {
        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(pairs_per_epoch);
        for s in &streams {
            for i in 0..s.len() {
                let lo = i.saturating_sub(options.context);
                let hi = (i + options.context).min(s.len() - 1);
                let mut neighbours: Vec<usize> = (lo..=hi).filter(|&j| j != i).collect();
                neighbours.shuffle(&mut rng);
                neighbours.truncate(options.subsample_k);
                neighbours.sort_unstable();
                pairs.extend(neighbours.into_iter().map(|j| (s[i], s[j])));
            }
        }
        let mut losses = Vec::with_capacity(pairs.len());
        for batch in pairs.chunks(options.batch) {
            let lr = options.learning_rate * (1.0 - processed as f64 / total).max(1e-4);
            let mut grad_in: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            let mut grad_out: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for &(target, context) in batch {
                let mut samples = vec![(context, 1.0)];
                for _ in 0..options.negatives {
                    let n = draw_negative(&mut rng);
                    if n != context {
                        samples.push((n, 0.0));
                    }
                }
                let mut loss = 0.0;
                let mut g_target = vec![0.0; dim];
                for (word, label) in samples {
                    let score = dot(&input[target], &output[word]);
                    loss -= if label > 0.0 { log_sigmoid(score) } else { log_sigmoid(-score) };
                    let g = label - sigmoid(score);
                    let go = grad_out.entry(word).or_insert_with(|| vec![0.0; dim]);
                    for k in 0..dim {
                        g_target[k] += g * output[word][k];
                        go[k] += g * input[target][k];
                    }
                }
                let gi = grad_in.entry(target).or_insert_with(|| vec![0.0; dim]);
                for k in 0..dim {
                    gi[k] += g_target[k];
                }
                losses.push(loss);
            }
            for (w, g) in grad_in {
                for (x, d) in input[w].iter_mut().zip(g) {
                    *x += lr * d;
                }
            }
            for (w, g) in grad_out {
                for (x, d) in output[w].iter_mut().zip(g) {
                    *x += lr * d;
                }
            }
            processed += batch.len();
        }
        epoch_losses.push(if losses.is_empty() { 0.0 } else { pairwise_sum(&losses) / losses.len() as f64 });
    }
    if input.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::invalid("skip-gram training diverged"));
    }
    Ok(EmbeddingTable {
        ids,
        vectors: input,
        epoch_losses,
    })
}

/// The `k` ids most cosine-similar to `query`, excluding it; ties keep id order.
pub fn embed_neighbors(table: &EmbeddingTable, query: usize, k: usize) -> Result<Vec<(usize, f64)>> {
    let q = table
        .vector(query)
        .ok_or_else(|| Error::invalid(format!("id {query} not in embedding table")))?;
    if k >= table.ids.len() {
        return Err(Error::invalid(format!("k = {k} must be below the vocabulary size {}", table.ids.len())));
    }
    let mut ranked: Vec<(usize, f64)> = table
        .ids
        .iter()
        .zip(&table.vectors)
        .filter(|(&id, _)| id != query)
        .map(|(&id, v)| (id, cosine_similarity(q, v).unwrap_or(0.0)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}

/// Cluster ids of every member, ordered by start frame, one stream per
/// recording (recordings in sorted order).
pub fn cluster_streams(clusters: &KeywordClusterSet) -> Vec<Vec<usize>> {
    let mut by_recording: BTreeMap<&str, Vec<(usize, usize, usize)>> = BTreeMap::new();
    for (c, cluster) in clusters.clusters.iter().enumerate() {
        for m in &cluster.members {
            by_recording.entry(m.recording_id.as_str()).or_default().push((m.start_frame, m.end_frame, c));
        }
    }
    by_recording
        .into_values()
        .map(|mut v| {
            v.sort_unstable();
            v.into_iter().map(|x| x.2).collect()
        })
        .collect()
}
