//! Feature matrices, annotations and versioned artifact files.
//!
//! Features come in two encodings:
//!
//! * CSV, one frame per row, with optional leading `# key=value` header
//!   lines (`recording_id`, `frame_period_ms`);
//! * raw little-endian `f32` (`<name>.f32`) next to a JSON sidecar
//!   (`<name>.json`) declaring `recording_id`, `frames`, `dims` and
//!   `frame_period_ms`.
//!
//! Annotation files are plain text whose first line declares the kind:
//! `# vad <recording>`, `# speaker <recording>` or `# transcript <recording>`.
//!
//! Every derived artifact is written as JSON inside an envelope carrying
//! `format_version` and `kind`, and always through a temp file plus rename.
//! Frame indices are 0-based and end-exclusive everywhere.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_FRAME_PERIOD_MS: f64 = 10.0;

/// A T x D matrix of frame features for one recording, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub recording_id: String,
    pub frame_period_ms: f64,
    frames: usize,
    dims: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(
        recording_id: impl Into<String>,
        frame_period_ms: f64,
        rows: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let recording_id = recording_id.into();
        let frames = rows.len();
        if frames == 0 {
            return Err(Error::invalid(format!("{recording_id}: no frames")));
        }
        let dims = rows[0].len();
        let mut data = Vec::with_capacity(frames * dims);
        for (t, row) in rows.into_iter().enumerate() {
            if row.len() != dims {
                return Err(Error::invalid(format!(
                    "{recording_id}: frame {t} has {} dims, expected {dims}",
                    row.len()
                )));
            }
            data.extend(row);
        }
        Self::from_flat(recording_id, frame_period_ms, frames, dims, data)
    }

    pub fn from_flat(
        recording_id: impl Into<String>,
        frame_period_ms: f64,
        frames: usize,
        dims: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let recording_id = recording_id.into();
        if frames == 0 {
            return Err(Error::invalid(format!("{recording_id}: no frames")));
        }
        if dims == 0 {
            return Err(Error::invalid(format!("{recording_id}: zero dimensions")));
        }
        if !(frame_period_ms > 0.0 && frame_period_ms.is_finite()) {
            return Err(Error::invalid(format!(
                "{recording_id}: frame period must be positive, got {frame_period_ms}"
            )));
        }
        if data.len() != frames * dims {
            return Err(Error::LengthMismatch {
                what: format!("{recording_id} feature data"),
                expected: frames * dims,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "{recording_id}: non-finite value at frame {}",
                i / dims
            )));
        }
        Ok(FeatureMatrix {
            recording_id,
            frame_period_ms,
            frames,
            dims,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dims..(t + 1) * self.dims]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dims)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn duration_minutes(&self) -> f64 {
        self.frames as f64 * self.frame_period_ms / 60_000.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VadTrack {
    pub recording_id: String,
    pub voiced: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerTag {
    pub recording_id: String,
    pub speaker_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceWord {
    pub word: String,
    pub start_frame: usize,
    pub end_frame: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceTranscript {
    pub recording_id: String,
    pub words: Vec<ReferenceWord>,
}

impl ReferenceTranscript {
    /// Checks that intervals are non-empty, sorted and non-overlapping.
    pub fn validate(&self) -> Result<()> {
        for (i, w) in self.words.iter().enumerate() {
            if w.end_frame <= w.start_frame {
                return Err(Error::invalid(format!(
                    "{}: word {i} ({}) has empty interval [{}, {})",
                    self.recording_id, w.word, w.start_frame, w.end_frame
                )));
            }
            if i > 0 && w.start_frame < self.words[i - 1].end_frame {
                return Err(Error::invalid(format!(
                    "{}: word {i} ({}) at [{}, {}) overlaps the previous word ending at {}",
                    self.recording_id,
                    w.word,
                    w.start_frame,
                    w.end_frame,
                    self.words[i - 1].end_frame
                )));
            }
        }
        Ok(())
    }

    pub fn total_frames(&self) -> usize {
        self.words.iter().map(|w| w.end_frame - w.start_frame).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Annotation {
    Vad(VadTrack),
    Speaker(SpeakerTag),
    Transcript(ReferenceTranscript),
}

#[derive(Debug, Deserialize, Serialize)]
struct RawSidecar {
    recording_id: String,
    frames: usize,
    dims: usize,
    frame_period_ms: f64,
}

/// Loads a feature matrix from a `.csv` file, a raw `.f32` file, or the
/// `.json` sidecar of a raw file.
pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("f32") => load_raw(&path.with_extension("json"), path),
        Some("json") => load_raw(path, &path.with_extension("f32")),
        _ => load_csv(path),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("recording")
        .to_string()
}

fn load_csv(path: &Path) -> Result<FeatureMatrix> {
    let text = read_text(path)?;
    let mut recording_id = file_stem(path);
    let mut frame_period_ms = DEFAULT_FRAME_PERIOD_MS;
    let mut data = Vec::new();
    let mut dims = None;
    let mut frames = 0usize;
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('#') {
            if frames > 0 {
                return Err(Error::load(path, format!("malformed header: line {} follows data", line_no + 1)));
            }
            for field in header.split_whitespace() {
                let (key, value) = field.split_once('=').ok_or_else(|| {
                    Error::load(path, format!("malformed header field '{field}'"))
                })?;
                match key {
                    "recording_id" => recording_id = value.to_string(),
                    "frame_period_ms" => {
                        frame_period_ms = value.parse().map_err(|_| {
                            Error::load(path, format!("malformed header: frame_period_ms '{value}'"))
                        })?
                    }
                    other => {
                        return Err(Error::load(path, format!("malformed header: unknown key '{other}'")))
                    }
                }
            }
            continue;
        }
        let mut count = 0usize;
        for cell in line.split(',') {
            let cell = cell.trim();
            let v: f64 = cell.parse().map_err(|_| {
                Error::load(path, format!("frame {frames}: cannot parse '{cell}'"))
            })?;
            if !v.is_finite() {
                return Err(Error::load(path, format!("frame {frames}: non-finite value '{cell}'")));
            }
            data.push(v);
            count += 1;
        }
        match dims {
            None => dims = Some(count),
            Some(d) if d != count => {
                return Err(Error::load(
                    path,
                    format!("dimension mismatch: frame {frames} has {count} values, expected {d}"),
                ))
            }
            _ => {}
        }
        frames += 1;
    }
    let Some(dims) = dims else {
        return Err(Error::load(path, "no frames"));
    };
    FeatureMatrix::from_flat(recording_id, frame_period_ms, frames, dims, data)
        .map_err(|e| Error::load(path, e.to_string()))
}

fn load_raw(sidecar: &Path, raw: &Path) -> Result<FeatureMatrix> {
    let meta: RawSidecar = serde_json::from_str(&read_text(sidecar)?)
        .map_err(|e| Error::load(sidecar, format!("malformed header: {e}")))?;
    let bytes = fs::read(raw).map_err(|source| Error::Io {
        path: raw.to_path_buf(),
        source,
    })?;
    if meta.frames == 0 {
        return Err(Error::load(raw, "no frames"));
    }
    let expected = meta.frames * meta.dims * 4;
    if bytes.len() != expected {
        return Err(Error::load(
            raw,
            format!(
                "dimension mismatch: {} bytes, header declares {} x {} floats ({expected} bytes)",
                bytes.len(),
                meta.frames,
                meta.dims
            ),
        ));
    }
    let mut data = Vec::with_capacity(meta.frames * meta.dims);
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::load(
                raw,
                format!("frame {}: non-finite value", i / meta.dims.max(1)),
            ));
        }
        data.push(v as f64);
    }
    FeatureMatrix::from_flat(meta.recording_id, meta.frame_period_ms, meta.frames, meta.dims, data)
        .map_err(|e| Error::load(raw, e.to_string()))
}

/// Writes features as CSV with a header carrying id and frame period.
pub fn write_features_csv(features: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let mut out = format!(
        "# recording_id={} frame_period_ms={}\n",
        features.recording_id, features.frame_period_ms
    );
    for row in features.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    write_atomic(path.as_ref(), out.as_bytes())
}

/// Writes `<path>.f32` and its `<path>.json` sidecar. Values are narrowed to f32.
pub fn write_features_raw(features: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let raw = path.as_ref().with_extension("f32");
    let sidecar = path.as_ref().with_extension("json");
    let mut bytes = Vec::with_capacity(features.data.len() * 4);
    for v in &features.data {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    write_atomic(&raw, &bytes)?;
    let meta = RawSidecar {
        recording_id: features.recording_id.clone(),
        frames: features.frames,
        dims: features.dims,
        frame_period_ms: features.frame_period_ms,
    };
    let json = serde_json::to_vec_pretty(&meta).map_err(|source| Error::Json {
        path: sidecar.clone(),
        source,
    })?;
    write_atomic(&sidecar, &json)
}

/// Loads an annotation file. When `frames` is given, a VAD track must have
/// exactly that many entries.
pub fn load_annotations(path: impl AsRef<Path>, frames: Option<usize>) -> Result<Annotation> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .and_then(|l| l.trim().strip_prefix('#'))
        .ok_or_else(|| Error::load(path, "missing '# <kind> <recording>' header"))?;
    let mut parts = header.split_whitespace();
    let kind = parts.next().unwrap_or_default();
    let recording_id = parts
        .next()
        .map(str::to_string)
        .unwrap_or_else(|| file_stem(path));
    let body: Vec<&str> = lines.map(str::trim).filter(|l| !l.is_empty()).collect();
    match kind {
        "vad" => {
            let mut voiced = Vec::new();
            for token in body.iter().flat_map(|l| l.split([',', ' ', '\t'])) {
                match token.trim() {
                    "" => {}
                    "1" => voiced.push(true),
                    "0" => voiced.push(false),
                    other => {
                        return Err(Error::load(
                            path,
                            format!("VAD entry {} is '{other}', expected 0 or 1", voiced.len()),
                        ))
                    }
                }
            }
            if let Some(t) = frames {
                if voiced.len() != t {
                    return Err(Error::load(
                        path,
                        format!("VAD length {} does not match {t} frames", voiced.len()),
                    ));
                }
            }
            Ok(Annotation::Vad(VadTrack {
                recording_id,
                voiced,
            }))
        }
        "speaker" => {
            let speaker_id = body
                .first()
                .ok_or_else(|| Error::load(path, "missing speaker id"))?
                .to_string();
            if body.len() > 1 {
                return Err(Error::load(path, "expected exactly one speaker tag"));
            }
            Ok(Annotation::Speaker(SpeakerTag {
                recording_id,
                speaker_id,
            }))
        }
        "transcript" => {
            let mut words = Vec::with_capacity(body.len());
            for (i, line) in body.iter().enumerate() {
                let fields: Vec<&str> = line.split_whitespace().collect();
                let parse = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| Error::load(path, format!("word {i}: bad frame index '{s}'")))
                };
                if fields.len() != 3 {
                    return Err(Error::load(path, format!("word {i}: expected 'word start end'")));
                }
                words.push(ReferenceWord {
                    word: fields[0].to_string(),
                    start_frame: parse(fields[1])?,
                    end_frame: parse(fields[2])?,
                });
            }
            let transcript = ReferenceTranscript {
                recording_id,
                words,
            };
            transcript
                .validate()
                .map_err(|e| Error::load(path, e.to_string()))?;
            Ok(Annotation::Transcript(transcript))
        }
        other => Err(Error::load(path, format!("unknown annotation kind '{other}'"))),
    }
}

pub fn write_vad(track: &VadTrack, path: impl AsRef<Path>) -> Result<()> {
    let body: Vec<&str> = track
        .voiced
        .iter()
        .map(|&v| if v { "1" } else { "0" })
        .collect();
    let text = format!("# vad {}\n{}\n", track.recording_id, body.join(","));
    write_atomic(path.as_ref(), text.as_bytes())
}

pub fn write_speaker(tag: &SpeakerTag, path: impl AsRef<Path>) -> Result<()> {
    let text = format!("# speaker {}\n{}\n", tag.recording_id, tag.speaker_id);
    write_atomic(path.as_ref(), text.as_bytes())
}

pub fn write_transcript(transcript: &ReferenceTranscript, path: impl AsRef<Path>) -> Result<()> {
    let mut text = format!("# transcript {}\n", transcript.recording_id);
    for w in &transcript.words {
        text.push_str(&format!("{} {} {}\n", w.word, w.start_frame, w.end_frame));
    }
    write_atomic(path.as_ref(), text.as_bytes())
}

/// A pipeline artifact serialized as versioned JSON.
pub trait Artifact: Serialize + DeserializeOwned {
    const KIND: &'static str;
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format_version: u32,
    kind: String,
    data: T,
}

#[derive(Deserialize)]
struct EnvelopeHeader {
    format_version: u32,
    kind: String,
}

/// Writes bytes to `path` via a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    let mut tmp = PathBuf::from(path);
    let name = format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact")
    );
    tmp.set_file_name(name);
    {
        let mut file = fs::File::create(&tmp).map_err(io_err)?;
        file.write_all(bytes).map_err(io_err)?;
        file.sync_all().map_err(io_err)?;
    }
    fs::rename(&tmp, path).map_err(io_err)
}

pub fn to_artifact_json<A: Artifact>(artifact: &A) -> Result<Vec<u8>> {
    let envelope = Envelope {
        format_version: FORMAT_VERSION,
        kind: A::KIND.to_string(),
        data: artifact,
    };
    let mut bytes = serde_json::to_vec_pretty(&envelope).map_err(|source| Error::Json {
        path: PathBuf::from(A::KIND),
        source,
    })?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn persist<A: Artifact>(artifact: &A, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_atomic(path, &to_artifact_json(artifact)?)
}

pub fn load_artifact<A: Artifact>(path: impl AsRef<Path>) -> Result<A> {
    let path = path.as_ref();
    let text = read_text(path)?;
    from_artifact_json(&text).map_err(|e| match e {
        Error::Json { source, .. } => Error::Json {
            path: path.to_path_buf(),
            source,
        },
        Error::Invalid(msg) => Error::load(path, msg),
        other => other,
    })
}

pub fn from_artifact_json<A: Artifact>(text: &str) -> Result<A> {
    let json_err = |source| Error::Json {
        path: PathBuf::from(A::KIND),
        source,
    };
    let header: EnvelopeHeader = serde_json::from_str(text).map_err(json_err)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::invalid(format!(
            "unsupported format_version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    if header.kind != A::KIND {
        return Err(Error::invalid(format!(
            "artifact kind '{}' where '{}' was expected",
            header.kind,
            A::KIND
        )));
    }
    let envelope: Envelope<A> = serde_json::from_str(text).map_err(json_err)?;
    Ok(envelope.data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn csv_body_parses() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "rec.csv", "0,0\n1,1\n2,2");
        let m = load_features(&p).unwrap();
        assert_eq!((m.frames(), m.dims()), (3, 2));
        assert_eq!(m.recording_id, "rec");
        assert_eq!(m.row(2), &[2.0, 2.0]);
    }

    #[test]
    fn empty_csv_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "rec.csv", "");
        let err = load_features(&p).unwrap_err().to_string();
        assert!(err.contains("no frames"), "{err}");
    }

    #[test]
    fn nan_names_the_frame() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "rec.csv", "0,0\n1,NaN\n");
        let err = load_features(&p).unwrap_err().to_string();
        assert!(err.contains("frame 1"), "{err}");
    }

    #[test]
    fn ragged_rows_and_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "0,0\n1\n");
        assert!(load_features(&p).unwrap_err().to_string().contains("dimension mismatch"));
        let p = write(dir.path(), "b.csv", "# colour=blue\n0,0\n");
        assert!(load_features(&p).unwrap_err().to_string().contains("malformed header"));
    }

    #[test]
    fn raw_encoding_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m = FeatureMatrix::new("r1", 10.0, vec![vec![0.5, -1.0], vec![2.25, 3.0]]).unwrap();
        write_features_raw(&m, dir.path().join("r1")).unwrap();
        assert_eq!(load_features(dir.path().join("r1.f32")).unwrap(), m);
        assert_eq!(load_features(dir.path().join("r1.json")).unwrap(), m);
    }

    #[test]
    fn raw_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let m = FeatureMatrix::new("r1", 10.0, vec![vec![0.5, -1.0]]).unwrap();
        write_features_raw(&m, dir.path().join("r1")).unwrap();
        fs::write(dir.path().join("r1.f32"), [0u8; 12]).unwrap();
        assert!(load_features(dir.path().join("r1.f32")).is_err());
    }

    #[test]
    fn vad_annotations() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "r.vad", "# vad r\n1,1,0\n");
        match load_annotations(&p, Some(3)).unwrap() {
            Annotation::Vad(v) => assert_eq!(v.voiced, vec![true, true, false]),
            other => panic!("unexpected {other:?}"),
        }
        let p = write(dir.path(), "s.vad", "# vad s\n1,0\n");
        assert!(load_annotations(&p, Some(3)).unwrap_err().to_string().contains("length"));
    }

    #[test]
    fn overlapping_transcript_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "t.txt", "# transcript r\na 0 5\nb 4 9\n");
        let err = load_annotations(&p, None).unwrap_err().to_string();
        assert!(err.contains("overlaps"), "{err}");
        let p = write(dir.path(), "u.txt", "# transcript r\na 0 5\nb 5 9\n");
        assert!(matches!(load_annotations(&p, None).unwrap(), Annotation::Transcript(_)));
    }

    #[test]
    fn speaker_tag() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "r.spk", "# speaker r\nalice\n");
        assert_eq!(
            load_annotations(&p, None).unwrap(),
            Annotation::Speaker(SpeakerTag {
                recording_id: "r".into(),
                speaker_id: "alice".into()
            })
        );
    }
}
