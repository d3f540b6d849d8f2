//! Initial segmentation: merge boundary hypotheses from several sources and
//! pool frame features into one vector per segment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{Artifact, FeatureMatrix};
use crate::numeric::round_half_down;

/// Shortest segment, in frames, that survives merging.
pub const MIN_SEGMENT_FRAMES: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundarySet {
    pub recording_id: String,
    pub boundaries: Vec<usize>,
}

impl Artifact for BoundarySet {
    const KIND: &'static str = "boundary_set";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub recording_id: String,
    pub start_frame: usize,
    pub end_frame: usize,
    pub feature: Vec<f64>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame
    }

    pub fn is_empty(&self) -> bool {
        self.end_frame == self.start_frame
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSet {
    pub segments: Vec<Segment>,
}

impl Artifact for SegmentSet {
    const KIND: &'static str = "segment_set";
}

/// Replaces each group of consecutive boundaries whose gaps are all within
/// `max_gap` by the rounded mean of the group. Groups touching 0 or `frames`
/// are pinned to that end.
fn chain_merge(sorted: &[usize], frames: usize, within: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(sorted.len());
    let mut group: Vec<usize> = Vec::new();
    let flush = |group: &mut Vec<usize>, out: &mut Vec<usize>| {
        if group.is_empty() {
            return;
        }
        let has_start = group.contains(&0);
        let has_end = group.contains(&frames);
        if has_start {
            out.push(0);
        }
        if has_end {
            out.push(frames);
        }
        if !has_start && !has_end {
            let mean = group.iter().sum::<usize>() as f64 / group.len() as f64;
            out.push(round_half_down(mean) as usize);
        }
        group.clear();
    };
    for &b in sorted {
        if let Some(&last) = group.last() {
            if !within(b - last) {
                flush(&mut group, &mut out);
            }
        }
        group.push(b);
    }
    flush(&mut group, &mut out);
    out.dedup();
    out
}

/// Pools boundary hypotheses for one recording into a finalized set
/// containing 0 and `frames`.
pub fn merge_boundaries(
    recording_id: &str,
    sets: &[BoundarySet],
    window_ms: f64,
    frame_period_ms: f64,
    frames: usize,
) -> Result<BoundarySet> {
    if window_ms.is_nan() || window_ms < 0.0 {
        return Err(Error::invalid(format!("merge window must be >= 0, got {window_ms}")));
    }
    if frame_period_ms.is_nan() || frame_period_ms <= 0.0 {
        return Err(Error::invalid(format!("frame period must be > 0, got {frame_period_ms}")));
    }
    let mut pooled = vec![0, frames];
    for set in sets {
        if set.recording_id != recording_id {
            return Err(Error::MixedRecordings(
                recording_id.to_string(),
                set.recording_id.clone(),
            ));
        }
        if let Some(&b) = set.boundaries.iter().find(|&&b| b > frames) {
            return Err(Error::invalid(format!(
                "{recording_id}: boundary {b} lies beyond the last frame ({frames})"
            )));
        }
        pooled.extend_from_slice(&set.boundaries);
    }
    pooled.sort_unstable();

    let window_frames = window_ms / frame_period_ms;
    let mut merged = chain_merge(&pooled, frames, |gap| gap as f64 <= window_frames);
    // Re-merge until no segment is shorter than the minimum.
    loop {
        let short = merged
            .windows(2)
            .any(|w| w[1] - w[0] < MIN_SEGMENT_FRAMES && !(w[0] == 0 && w[1] == frames));
        if !short {
            break;
        }
        merged = chain_merge(&merged, frames, |gap| gap < MIN_SEGMENT_FRAMES);
    }
    Ok(BoundarySet {
        recording_id: recording_id.to_string(),
        boundaries: merged,
    })
}

/// One segment per consecutive boundary pair; its feature is the mean of
/// the frame rows it covers.
pub fn pool_segments(features: &FeatureMatrix, bounds: &BoundarySet) -> Result<Vec<Segment>> {
    let b = &bounds.boundaries;
    let t = features.frames();
    if b.first() != Some(&0) || b.last() != Some(&t) {
        return Err(Error::invalid(format!(
            "{}: boundary set is not finalized (must start at 0 and end at {t})",
            bounds.recording_id
        )));
    }
    if b.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(format!(
            "{}: boundaries are not strictly increasing",
            bounds.recording_id
        )));
    }
    let dims = features.dims();
    Ok(b.windows(2)
        .map(|w| {
            let mut feature = vec![0.0; dims];
            for row in w[0]..w[1] {
                for (acc, v) in feature.iter_mut().zip(features.row(row)) {
                    *acc += v;
                }
            }
            let n = (w[1] - w[0]) as f64;
            feature.iter_mut().for_each(|v| *v /= n);
            Segment {
                recording_id: features.recording_id.clone(),
                start_frame: w[0],
                end_frame: w[1],
                feature,
            }
        })
        .collect())
}
