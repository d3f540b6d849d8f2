//! End-to-end orchestration over a working directory.
//!
//! Each stage reads the artifacts of earlier stages from the workdir and
//! writes its own atomically. Stages run inside a dedicated thread pool of
//! `workers` threads; every parallel step collects in input order, so the
//! worker count never changes an output byte.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asm::{self, IterateOptions, TrainOptions, TranscriptionSet};
use crate::clustering::{self, BgmmOptions, ClusterModel, Clustering, DensityOptions, Labeling, Linkage};
use crate::discovery::{self, BagOfSequences, DistanceParams, HarvestOptions, KeywordClusterSet, Scope};
use crate::error::{Error, Result};
use crate::evaluation::{self, EvalReport, Reference};
use crate::io::{self, Annotation, Artifact, FeatureMatrix, ReferenceTranscript, VadTrack};
use crate::segmentation::{self, BoundarySet, SegmentSet};
use crate::topics::{self, SessionIndex, SkipGramOptions};
use crate::weighting::{self, WeightTable};

pub const SNAPSHOT_FILE: &str = "config.resolved.json";

/// Artifact file names inside the workdir.
pub mod files {
    pub const SEGMENTS: &str = "segments.json";
    pub const CLUSTER_MODEL: &str = "cluster_model.json";
    pub const LABELING: &str = "labeling.json";
    pub const INITIAL_TRANSCRIPTIONS: &str = "transcriptions_initial.json";
    pub const TRANSCRIPTIONS: &str = "transcriptions.json";
    pub const UNIT_MODELS: &str = "unit_models.json";
    pub const ITERATION_TRACE: &str = "iteration_trace.json";
    pub const ITERATION_TRACE_TSV: &str = "iteration_trace.tsv";
    pub const WEIGHTS: &str = "weights.json";
    pub const BAG: &str = "bag.json";
    pub const CLUSTERS: &str = "clusters.json";
    pub const EVAL: &str = "eval.json";
    pub const EVAL_TABLE: &str = "eval.txt";
    pub const SESSIONS: &str = "sessions.json";
    pub const TFIDF: &str = "tfidf.json";
    pub const TFIDF_TSV: &str = "tfidf.tsv";
    pub const EMBEDDINGS: &str = "embeddings.json";
    pub const EMBEDDINGS_TSV: &str = "embeddings.tsv";
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory of `.csv` or `.f32` feature files, one per recording.
    pub features: Option<PathBuf>,
    /// Directories of boundary-set artifacts, one directory per source.
    pub boundaries: Vec<PathBuf>,
    /// Directory of VAD annotation files; energy VAD is used when absent.
    pub vad: Option<PathBuf>,
    /// Directory of reference transcripts; evaluation is skipped when absent.
    pub transcripts: Option<PathBuf>,
    pub workdir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationConfig {
    pub merge_window_ms: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig { merge_window_ms: 20.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Recipe {
    Kmeans,
    Ahc,
    Gmm,
    Bgmm,
    Density,
    /// Agglomerative clustering on a subsample picks k, k-means labels all.
    Hybrid,
}

impl std::str::FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(Recipe::Hybrid),
            other => Ok(match other.parse::<clustering::Method>()? {
                clustering::Method::Kmeans => Recipe::Kmeans,
                clustering::Method::Ahc => Recipe::Ahc,
                clustering::Method::Gmm => Recipe::Gmm,
                clustering::Method::Bgmm => Recipe::Bgmm,
                clustering::Method::Density => Recipe::Density,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    pub method: Recipe,
    pub k: usize,
    /// Upper bound for Bayesian pruning and for the hybrid k search.
    pub k_max: usize,
    pub k_min: usize,
    pub linkage: Linkage,
    pub ahc_cap: usize,
    pub subsample: usize,
    pub min_cluster_size: usize,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        ClusteringConfig {
            method: Recipe::Ahc,
            k: 50,
            k_max: 100,
            k_min: 2,
            linkage: Linkage::Ward,
            ahc_cap: clustering::DEFAULT_AHC_CAP,
            subsample: 5000,
            min_cluster_size: clustering::DEFAULT_MIN_CLUSTER_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsmConfig {
    pub iterations: usize,
    pub states: usize,
    pub min_dur: usize,
    pub stop_eps: f64,
    pub min_occupancy: usize,
}

impl Default for AsmConfig {
    fn default() -> Self {
        AsmConfig {
            iterations: 5,
            states: asm::DEFAULT_STATES,
            min_dur: asm::DEFAULT_MIN_DUR,
            stop_eps: asm::DEFAULT_STOP_EPS,
            min_occupancy: asm::DEFAULT_MIN_OCCUPANCY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightingConfig {
    /// Energy VAD threshold, used only without a VAD directory.
    pub vad_percentile: f64,
}

impl Default for WeightingConfig {
    fn default() -> Self {
        WeightingConfig {
            vad_percentile: weighting::DEFAULT_VAD_PERCENTILE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscoveryConfig {
    pub radius: f64,
    pub margin: f64,
    pub min_len: usize,
    pub scope: Scope,
    pub chunk_gap_frames: usize,
    pub max_rounds: usize,
    /// Use speechiness weights in alignment and distance.
    pub weighted: bool,
    pub normalized: bool,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        DiscoveryConfig {
            radius: discovery::DEFAULT_RADIUS,
            margin: discovery::DEFAULT_MARGIN,
            min_len: discovery::DEFAULT_MIN_LEN,
            scope: Scope::CrossRecording,
            chunk_gap_frames: discovery::DEFAULT_CHUNK_GAP_FRAMES,
            max_rounds: discovery::DEFAULT_MAX_ROUNDS,
            weighted: true,
            normalized: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub tolerance_frames: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            tolerance_frames: evaluation::DEFAULT_TOLERANCE_FRAMES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopicsConfig {
    pub window_minutes: f64,
    pub shift_minutes: f64,
    pub max_df_ratio: Option<f64>,
    pub dim: usize,
    pub context: usize,
    pub subsample_k: usize,
    pub negatives: usize,
    pub batch: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for TopicsConfig {
    fn default() -> Self {
        let sg = SkipGramOptions::default();
        TopicsConfig {
            window_minutes: 10.0,
            shift_minutes: 5.0,
            max_df_ratio: None,
            dim: sg.dim,
            context: sg.context,
            subsample_k: sg.subsample_k,
            negatives: sg.negatives,
            batch: sg.batch,
            epochs: sg.epochs,
            learning_rate: sg.learning_rate,
        }
    }
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub segmentation: SegmentationConfig,
    #[serde(default)]
    pub clustering: ClusteringConfig,
    #[serde(default)]
    pub asm: AsmConfig,
    #[serde(default)]
    pub weighting: WeightingConfig,
    #[serde(default)]
    pub discovery: DiscoveryConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub topics: TopicsConfig,
}

impl PipelineConfig {
    pub fn new(seed: u64) -> Self {
        PipelineConfig {
            seed,
            paths: Paths::default(),
            workers: default_workers(),
            segmentation: SegmentationConfig::default(),
            clustering: ClusteringConfig::default(),
            asm: AsmConfig::default(),
            weighting: WeightingConfig::default(),
            discovery: DiscoveryConfig::default(),
            evaluation: EvaluationConfig::default(),
            topics: TopicsConfig::default(),
        }
    }

    /// Parses JSON; a missing seed or an unknown field is a config error.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    /// Loads a config file and resolves its relative paths against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.paths.rebase(base);
        Ok(config)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: PathBuf::from(SNAPSHOT_FILE),
            source,
        })
    }

    /// Checks every numeric range and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let mut check = |ok: bool, field: &str, rule: &str| {
            if !ok {
                bad.push(format!("{field}: {rule}"));
            }
        };
        check(self.workers >= 1, "workers", "must be at least 1");
        let s = &self.segmentation;
        check(s.merge_window_ms >= 0.0 && s.merge_window_ms.is_finite(), "segmentation.merge_window_ms", "must be a finite value >= 0");
        let c = &self.clustering;
        check(c.k >= 1, "clustering.k", "must be at least 1");
        check(c.k_max >= 1, "clustering.k_max", "must be at least 1");
        check(c.k_min >= 1 && c.k_min <= c.k_max, "clustering.k_min", "must lie in [1, k_max]");
        check(c.ahc_cap >= 2, "clustering.ahc_cap", "must be at least 2");
        check(c.subsample >= 2, "clustering.subsample", "must be at least 2");
        check(c.min_cluster_size >= 2, "clustering.min_cluster_size", "must be at least 2");
        let a = &self.asm;
        check(a.iterations >= 1, "asm.iterations", "must be at least 1");
        check(a.states >= 1, "asm.states", "must be at least 1");
        check(a.min_dur >= 1, "asm.min_dur", "must be at least 1");
        check(a.stop_eps >= 0.0 && a.stop_eps.is_finite(), "asm.stop_eps", "must be a finite value >= 0");
        check(a.min_occupancy >= 1, "asm.min_occupancy", "must be at least 1");
        let w = &self.weighting;
        check(w.vad_percentile > 0.0 && w.vad_percentile < 100.0, "weighting.vad_percentile", "must lie in (0, 100)");
        let d = &self.discovery;
        check(d.radius > 0.0 && d.radius.is_finite(), "discovery.radius", "must be positive");
        check(d.margin > 1.0 && d.margin.is_finite(), "discovery.margin", "must exceed 1");
        check(d.min_len >= 1, "discovery.min_len", "must be at least 1");
        check(d.max_rounds >= 1, "discovery.max_rounds", "must be at least 1");
        let t = &self.topics;
        check(t.window_minutes > 0.0 && t.window_minutes.is_finite(), "topics.window_minutes", "must be positive");
        check(t.shift_minutes > 0.0 && t.shift_minutes.is_finite(), "topics.shift_minutes", "must be positive");
        check(
            t.max_df_ratio.is_none_or(|r| r > 0.0 && r <= 1.0),
            "topics.max_df_ratio",
            "must lie in (0, 1]",
        );
        check(t.dim >= 1, "topics.dim", "must be at least 1");
        check(t.context >= 1, "topics.context", "must be at least 1");
        check(
            t.subsample_k >= 1 && t.subsample_k <= 2 * t.context,
            "topics.subsample_k",
            "must lie in [1, 2 * context]",
        );
        check(t.batch >= 1, "topics.batch", "must be at least 1");
        check(t.epochs >= 1, "topics.epochs", "must be at least 1");
        check(t.learning_rate > 0.0 && t.learning_rate.is_finite(), "topics.learning_rate", "must be positive");
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    fn workdir(&self) -> Result<&Path> {
        self.paths
            .workdir
            .as_deref()
            .ok_or_else(|| Error::Config(vec!["paths.workdir: required".into()]))
    }

    fn skipgram(&self) -> SkipGramOptions {
        let t = &self.topics;
        SkipGramOptions {
            dim: t.dim,
            context: t.context,
            subsample_k: t.subsample_k,
            negatives: t.negatives,
            batch: t.batch,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            seed: self.seed,
        }
    }
}

impl Paths {
    fn rebase(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.features.iter_mut().for_each(join);
        self.boundaries.iter_mut().for_each(join);
        self.vad.iter_mut().for_each(join);
        self.transcripts.iter_mut().for_each(join);
        self.workdir.iter_mut().for_each(join);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Segment,
    Cluster,
    Label,
    Iterate,
    Weights,
    Discover,
    Eval,
    Tfidf,
    Embed,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Segment,
        Stage::Cluster,
        Stage::Label,
        Stage::Iterate,
        Stage::Weights,
        Stage::Discover,
        Stage::Eval,
        Stage::Tfidf,
        Stage::Embed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Segment => "segment",
            Stage::Cluster => "cluster",
            Stage::Label => "label",
            Stage::Iterate => "iterate",
            Stage::Weights => "weights",
            Stage::Discover => "discover",
            Stage::Eval => "eval",
            Stage::Tfidf => "tfidf",
            Stage::Embed => "embed",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Validates the config, writes the resolved snapshot and runs one stage.
pub fn run_stage(config: &PipelineConfig, stage: Stage) -> Result<()> {
    run_stages(config, &[stage])
}

/// Runs every stage in order. Evaluation is skipped when no reference
/// transcripts are configured.
pub fn run_pipeline(config: &PipelineConfig) -> Result<()> {
    let stages: Vec<Stage> = Stage::ALL
        .into_iter()
        .filter(|&s| s != Stage::Eval || config.paths.transcripts.is_some())
        .collect();
    run_stages(config, &stages)
}

fn run_stages(config: &PipelineConfig, stages: &[Stage]) -> Result<()> {
    config.validate()?;
    let workdir = config.workdir()?;
    io::write_atomic(&workdir.join(SNAPSHOT_FILE), format!("{}\n", config.to_json()?).as_bytes())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start {} workers: {e}", config.workers)))?;
    pool.install(|| {
        for &stage in stages {
            execute(config, workdir, stage).map_err(|source| Error::Stage {
                stage: stage.name().to_string(),
                source: Box::new(source),
            })?;
        }
        Ok(())
    })
}

fn execute(config: &PipelineConfig, dir: &Path, stage: Stage) -> Result<()> {
    match stage {
        Stage::Segment => segment(config, dir),
        Stage::Cluster => cluster(config, dir),
        Stage::Label => label(dir),
        Stage::Iterate => iterate(config, dir),
        Stage::Weights => weights(config, dir),
        Stage::Discover => discover(config, dir),
        Stage::Eval => eval(config, dir),
        Stage::Tfidf => tfidf(config, dir),
        Stage::Embed => embed(config, dir),
    }
}

fn input<A: Artifact>(dir: &Path, name: &str) -> Result<A> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(Error::load(path, "missing input artifact; run the producing stage first"));
    }
    io::load_artifact(path)
}

fn required<'a>(path: &'a Option<PathBuf>, field: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(vec![format!("paths.{field}: required by this stage")]))
}

fn sorted_files(dir: &Path, keep: impl Fn(&str) -> bool) -> Result<Vec<PathBuf>> {
    let io_err = |source| Error::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err)? {
        let path = entry.map_err(io_err)?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        let hidden = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with('.'));
        if path.is_file() && !hidden && keep(ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Loads every `.csv` and `.f32` feature file, ordered by recording id.
pub fn load_feature_dir(dir: &Path) -> Result<Vec<FeatureMatrix>> {
    let files = sorted_files(dir, |ext| ext == "csv" || ext == "f32")?;
    if files.is_empty() {
        return Err(Error::load(dir, "no feature files (.csv or .f32)"));
    }
    let mut features: Vec<FeatureMatrix> = files.par_iter().map(io::load_features).collect::<Result<_>>()?;
    features.sort_by(|a, b| a.recording_id.cmp(&b.recording_id));
    if let Some(w) = features.windows(2).find(|w| w[0].recording_id == w[1].recording_id) {
        return Err(Error::load(dir, format!("duplicate recording id '{}'", w[0].recording_id)));
    }
    Ok(features)
}

fn load_annotation_dir(dir: &Path) -> Result<Vec<Annotation>> {
    sorted_files(dir, |_| true)?.iter().map(|p| io::load_annotations(p, None)).collect()
}

/// VAD tracks keyed by recording id.
pub fn load_vad_dir(dir: &Path) -> Result<BTreeMap<String, VadTrack>> {
    let mut out = BTreeMap::new();
    for a in load_annotation_dir(dir)? {
        match a {
            Annotation::Vad(v) => {
                out.insert(v.recording_id.clone(), v);
            }
            _ => return Err(Error::load(dir, "expected only VAD annotation files")),
        }
    }
    Ok(out)
}

/// Reference transcripts ordered by recording id.
pub fn load_transcript_dir(dir: &Path) -> Result<Vec<ReferenceTranscript>> {
    let mut out = Vec::new();
    for a in load_annotation_dir(dir)? {
        match a {
            Annotation::Transcript(t) => out.push(t),
            _ => return Err(Error::load(dir, "expected only transcript annotation files")),
        }
    }
    out.sort_by(|a, b| a.recording_id.cmp(&b.recording_id));
    Ok(out)
}

fn load_boundary_dir(dir: &Path) -> Result<BTreeMap<String, BoundarySet>> {
    let mut out = BTreeMap::new();
    for path in sorted_files(dir, |ext| ext == "json")? {
        let set: BoundarySet = io::load_artifact(&path)?;
        if out.contains_key(&set.recording_id) {
            return Err(Error::load(path, format!("duplicate boundary set for '{}'", set.recording_id)));
        }
        out.insert(set.recording_id.clone(), set);
    }
    Ok(out)
}

fn features(config: &PipelineConfig) -> Result<Vec<FeatureMatrix>> {
    load_feature_dir(required(&config.paths.features, "features")?)
}

/// Features reordered to follow the transcriptions.
fn aligned_features(config: &PipelineConfig, trans: &TranscriptionSet) -> Result<Vec<FeatureMatrix>> {
    let mut by_id: BTreeMap<String, FeatureMatrix> =
        features(config)?.into_iter().map(|f| (f.recording_id.clone(), f)).collect();
    trans
        .transcriptions
        .iter()
        .map(|t| {
            by_id
                .remove(&t.recording_id)
                .ok_or_else(|| Error::invalid(format!("no features for recording '{}'", t.recording_id)))
        })
        .collect()
}

fn segment(config: &PipelineConfig, dir: &Path) -> Result<()> {
    let feats = features(config)?;
    if config.paths.boundaries.is_empty() {
        return Err(Error::Config(vec!["paths.boundaries: at least one source required".into()]));
    }
    let sources: Vec<(&PathBuf, BTreeMap<String, BoundarySet>)> = config
        .paths
        .boundaries
        .iter()
        .map(|d| load_boundary_dir(d).map(|m| (d, m)))
        .collect::<Result<_>>()?;
    let per_recording: Vec<Vec<segmentation::Segment>> = feats
        .par_iter()
        .map(|f| {
            let sets = sources
                .iter()
                .map(|(d, m)| {
                    m.get(&f.recording_id).cloned().ok_or_else(|| {
                        Error::load(d.as_path(), format!("no boundary set for recording '{}'", f.recording_id))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let merged = segmentation::merge_boundaries(
                &f.recording_id,
                &sets,
                config.segmentation.merge_window_ms,
                f.frame_period_ms,
                f.frames(),
            )?;
            segmentation::pool_segments(f, &merged)
        })
        .collect::<Result<_>>()?;
    let set = SegmentSet {
        segments: per_recording.into_iter().flatten().collect(),
    };
    io::persist(&set, dir.join(files::SEGMENTS))
}

fn run_clustering(config: &PipelineConfig, points: &[Vec<f64>]) -> Result<Clustering> {
    let c = &config.clustering;
    let seed = config.seed;
    match c.method {
        Recipe::Kmeans => clustering::kmeans(points, c.k, seed),
        Recipe::Ahc => clustering::ahc(points, c.k, c.linkage, c.ahc_cap),
        Recipe::Gmm => clustering::gmm_em(points, c.k, seed),
        Recipe::Bgmm => clustering::bgmm_variational(points, c.k_max, seed, BgmmOptions::default()),
        Recipe::Density => clustering::density_cluster(
            points,
            DensityOptions {
                min_cluster_size: c.min_cluster_size,
                min_samples: None,
            },
        ),
        Recipe::Hybrid => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = index::sample(&mut rng, points.len(), c.subsample.min(points.len())).into_vec();
            picked.sort_unstable();
            let sub: Vec<Vec<f64>> = picked.iter().map(|&i| points[i].clone()).collect();
            let tree = clustering::dendrogram(&sub, c.linkage, c.ahc_cap)?;
            let k = clustering::choose_k_by_merge_gap(&tree, c.k_min, c.k_max);
            clustering::kmeans(points, k, seed)
        }
    }
}

fn cluster(config: &PipelineConfig, dir: &Path) -> Result<()> {
    let segments: SegmentSet = input(dir, files::SEGMENTS)?;
    let points: Vec<Vec<f64>> = segments.segments.iter().map(|s| s.feature.clone()).collect();
    let result = run_clustering(config, &points)?;
    io::persist(&result.model, dir.join(files::CLUSTER_MODEL))?;
    io::persist(&result.labeling, dir.join(files::LABELING))
}

fn label(dir: &Path) -> Result<()> {
    let segments: SegmentSet = input(dir, files::SEGMENTS)?;
    let model: ClusterModel = input(dir, files::CLUSTER_MODEL)?;
    let labeling: Labeling = input(dir, files::LABELING)?;
    let set = TranscriptionSet {
        units: model.k_effective,
        transcriptions: asm::initial_transcribe_corpus(&labeling.labels, &segments.segments)?,
    };
    io::persist(&set, dir.join(files::INITIAL_TRANSCRIPTIONS))
}

fn iterate(config: &PipelineConfig, dir: &Path) -> Result<()> {
    let initial: TranscriptionSet = input(dir, files::INITIAL_TRANSCRIPTIONS)?;
    let feats = aligned_features(config, &initial)?;
    let train = TrainOptions {
        states: config.asm.states,
        min_occupancy: config.asm.min_occupancy,
        ..TrainOptions::default()
    };
    let options = IterateOptions {
        iterations: config.asm.iterations,
        min_dur: config.asm.min_dur,
        stop_eps: config.asm.stop_eps,
        train,
    };
    let (final_trans, trace) = asm::iterate(&feats, &initial.transcriptions, &options)?;
    let models = asm::train_unit_models(&feats, &final_trans, &train)?;
    let set = TranscriptionSet {
        units: initial.units,
        transcriptions: final_trans,
    };
    io::persist(&models, dir.join(files::UNIT_MODELS))?;
    io::persist(&trace, dir.join(files::ITERATION_TRACE))?;
    io::write_atomic(&dir.join(files::ITERATION_TRACE_TSV), trace.to_tsv().as_bytes())?;
    io::persist(&set, dir.join(files::TRANSCRIPTIONS))
}

fn weights(config: &PipelineConfig, dir: &Path) -> Result<()> {
    let trans: TranscriptionSet = input(dir, files::TRANSCRIPTIONS)?;
    let tracks: Vec<VadTrack> = match &config.paths.vad {
        Some(vad_dir) => {
            let by_id = load_vad_dir(vad_dir)?;
            trans
                .transcriptions
                .iter()
                .map(|t| {
                    by_id.get(&t.recording_id).cloned().ok_or_else(|| {
                        Error::load(vad_dir, format!("no VAD track for recording '{}'", t.recording_id))
                    })
                })
                .collect::<Result<_>>()?
        }
        None => aligned_features(config, &trans)?
            .par_iter()
            .map(|f| weighting::energy_vad(f, config.weighting.vad_percentile))
            .collect::<Result<_>>()?,
    };
    let table = weighting::unit_weights(&trans.transcriptions, &tracks, trans.units)?;
    io::persist(&table, dir.join(files::WEIGHTS))
}

fn discover(config: &PipelineConfig, dir: &Path) -> Result<()> {
    let trans: TranscriptionSet = input(dir, files::TRANSCRIPTIONS)?;
    let d = &config.discovery;
    let table: Option<WeightTable> = if d.weighted {
        Some(input(dir, files::WEIGHTS)?)
    } else {
        None
    };
    let harvest = HarvestOptions {
        min_len: d.min_len,
        scope: d.scope,
        chunk_gap_frames: d.chunk_gap_frames,
    };
    let bag: BagOfSequences = discovery::harvest_bag(&trans.transcriptions, table.as_ref(), &harvest);
    let params = DistanceParams {
        weights: table,
        normalized: d.normalized,
        radius: d.radius,
        margin: d.margin,
        min_len: d.min_len,
        max_rounds: d.max_rounds,
    };
    let clusters = if bag.entries.is_empty() {
        KeywordClusterSet::default()
    } else {
        discovery::dedupe_overlaps(&discovery::leader_cluster(&bag, &params)?)
    };
    io::persist(&bag, dir.join(files::BAG))?;
    io::persist(&clusters, dir.join(files::CLUSTERS))
}

fn eval(config: &PipelineConfig, dir: &Path) -> Result<()> {
    let clusters: KeywordClusterSet = input(dir, files::CLUSTERS)?;
    let transcripts = load_transcript_dir(required(&config.paths.transcripts, "transcripts")?)?;
    let reference = Reference::new(&transcripts)?;
    let report: EvalReport = evaluation::evaluate(&clusters, &reference, config.evaluation.tolerance_frames);
    io::persist(&report, dir.join(files::EVAL))?;
    io::write_atomic(&dir.join(files::EVAL_TABLE), report.to_table().as_bytes())
}

fn tfidf(config: &PipelineConfig, dir: &Path) -> Result<()> {
    let clusters: KeywordClusterSet = input(dir, files::CLUSTERS)?;
    let feats = features(config)?;
    let period = feats[0].frame_period_ms;
    let recordings: Vec<(String, usize)> = feats.iter().map(|f| (f.recording_id.clone(), f.frames())).collect();
    let window = topics::minutes_to_frames(config.topics.window_minutes, period).max(1);
    let shift = topics::minutes_to_frames(config.topics.shift_minutes, period).max(1);
    let sessions: SessionIndex = topics::split_sessions(&recordings, window, shift)?;
    let counts = topics::session_term_counts(&sessions, &clusters);
    let matrix = topics::tfidf(&counts, config.topics.max_df_ratio)?;
    io::persist(&sessions, dir.join(files::SESSIONS))?;
    io::persist(&matrix, dir.join(files::TFIDF))?;
    io::write_atomic(&dir.join(files::TFIDF_TSV), matrix.to_tsv().as_bytes())
}

fn embed(config: &PipelineConfig, dir: &Path) -> Result<()> {
    let clusters: KeywordClusterSet = input(dir, files::CLUSTERS)?;
    let streams = topics::cluster_streams(&clusters);
    let table = topics::skipgram_train(&streams, &config.skipgram())?;
    io::persist(&table, dir.join(files::EMBEDDINGS))?;
    io::write_atomic(&dir.join(files::EMBEDDINGS_TSV), table.to_tsv().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        assert!(matches!(PipelineConfig::from_json("{}"), Err(Error::Config(_))));
        assert_eq!(PipelineConfig::from_json(r#"{"seed": 3}"#).unwrap(), PipelineConfig::new(3));
    }

    #[test]
    fn unknown_fields_rejected() {
        let err = PipelineConfig::from_json(r#"{"seed": 1, "discovery": {"radious": 0.2}}"#).unwrap_err();
        assert!(err.to_string().contains("radious"));
    }

    #[test]
    fn validation_lists_every_bad_field() {
        let mut c = PipelineConfig::new(0);
        c.discovery.radius = 0.0;
        c.discovery.margin = 0.5;
        c.asm.iterations = 0;
        let Err(Error::Config(list)) = c.validate() else {
            panic!("expected config error");
        };
        assert_eq!(list.len(), 3);
        assert!(list.iter().any(|m| m.starts_with("discovery.margin")));
    }

    #[test]
    fn relative_paths_follow_config_file() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("c.json");
        fs::write(&path, r#"{"seed": 0, "paths": {"features": "f", "workdir": "/abs"}}"#).unwrap();
        let c = PipelineConfig::load(&path).unwrap();
        assert_eq!(c.paths.features.unwrap(), tmp.path().join("f"));
        assert_eq!(c.paths.workdir.unwrap(), PathBuf::from("/abs"));
    }

    #[test]
    fn missing_input_names_stage() {
        let tmp = tempfile::tempdir().unwrap();
        let mut c = PipelineConfig::new(0);
        c.paths.workdir = Some(tmp.path().to_path_buf());
        let err = run_stage(&c, Stage::Cluster).unwrap_err();
        assert!(matches!(&err, Error::Stage { stage, .. } if stage == "cluster"));
        assert!(tmp.path().join(SNAPSHOT_FILE).exists());
    }
}
