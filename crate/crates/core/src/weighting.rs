//! Per-unit speechiness weights: the share of a unit's frames that carry
//! voice activity, pooled over every frame of every token of that unit.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asm::PseudoTranscription;
use crate::error::{Error, Result};
use crate::io::{Artifact, FeatureMatrix, VadTrack};
use crate::numeric::percentile;

pub const DEFAULT_VAD_PERCENTILE: f64 = 40.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    /// Weight of unit `u` is `weights[u]`, always in `[0, 1]`.
    pub weights: Vec<f64>,
}

impl WeightTable {
    /// All units weigh 1.
    pub fn uniform(units: usize) -> Self {
        WeightTable {
            weights: vec![1.0; units],
        }
    }

    /// Weight of a unit; ids outside the table weigh 0.
    pub fn get(&self, unit: usize) -> f64 {
        self.weights.get(unit).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

impl Artifact for WeightTable {
    const KIND: &'static str = "weight_table";
}

/// `voiced frames / total frames` per unit over all its tokens. The table
/// covers ids `0..units`; units that never occur weigh 0.
pub fn unit_weights(trans: &[PseudoTranscription], vad: &[VadTrack], units: usize) -> Result<WeightTable> {
    let by_id: BTreeMap<&str, &VadTrack> = vad.iter().map(|v| (v.recording_id.as_str(), v)).collect();
    let partial: Vec<(Vec<usize>, Vec<usize>)> = trans
        .par_iter()
        .map(|t| {
            let track = by_id
                .get(t.recording_id.as_str())
                .ok_or_else(|| Error::invalid(format!("no VAD track for recording '{}'", t.recording_id)))?;
            let frames = t.tokens.last().map_or(0, |k| k.end_frame);
            if track.voiced.len() != frames {
                return Err(Error::LengthMismatch {
                    what: format!("{} VAD frames", t.recording_id),
                    expected: frames,
                    actual: track.voiced.len(),
                });
            }
            let mut voiced = vec![0usize; units];
            let mut total = vec![0usize; units];
            for tok in &t.tokens {
                if tok.unit_id >= units {
                    return Err(Error::invalid(format!(
                        "{}: unit {} outside inventory of {units}",
                        t.recording_id, tok.unit_id
                    )));
                }
                total[tok.unit_id] += tok.len();
                voiced[tok.unit_id] += track.voiced[tok.start_frame..tok.end_frame].iter().filter(|&&v| v).count();
            }
            Ok((voiced, total))
        })
        .collect::<Result<_>>()?;
    let mut voiced = vec![0usize; units];
    let mut total = vec![0usize; units];
    for (v, t) in &partial {
        for u in 0..units {
            voiced[u] += v[u];
            total[u] += t[u];
        }
    }
    let weights = voiced
        .iter()
        .zip(&total)
        .map(|(&v, &t)| if t == 0 { 0.0 } else { v as f64 / t as f64 })
        .collect();
    Ok(WeightTable { weights })
}

/// Energy-threshold voice activity: a frame is voiced when its L2 norm is at
/// least the given percentile of the recording's frame norms.
pub fn energy_vad(features: &FeatureMatrix, pct: f64) -> Result<VadTrack> {
    if !(pct > 0.0 && pct < 100.0) {
        return Err(Error::invalid(format!("VAD percentile {pct} outside (0, 100)")));
    }
    let energy: Vec<f64> = features
        .rows()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let voiced = if energy.is_empty() {
        Vec::new()
    } else {
        let threshold = percentile(&energy, pct);
        energy.iter().map(|&e| e >= threshold).collect()
    };
    Ok(VadTrack {
        recording_id: features.recording_id.clone(),
        voiced,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::Token;

    fn tr(id: &str, spans: &[(usize, usize, usize)]) -> PseudoTranscription {
        PseudoTranscription {
            recording_id: id.into(),
            tokens: spans
                .iter()
                .map(|&(unit_id, start_frame, end_frame)| Token {
                    unit_id,
                    start_frame,
                    end_frame,
                })
                .collect(),
        }
    }

    fn vad(id: &str, bits: &[u8]) -> VadTrack {
        VadTrack {
            recording_id: id.into(),
            voiced: bits.iter().map(|&b| b == 1).collect(),
        }
    }

    #[test]
    fn ratios_per_unit() {
        let t = tr("r", &[(0, 0, 4), (1, 4, 8), (2, 8, 18)]);
        let v = vad("r", &[1, 1, 1, 1, 0, 0, 0, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0]);
        let w = unit_weights(&[t], &[v], 4).unwrap();
        assert_eq!(w.weights, vec![1.0, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn frames_pooled_across_tokens() {
        // Token means 1.0 and 0.25 average to 0.625; pooling gives 5/8.
        let t = tr("r", &[(0, 0, 4), (0, 4, 8)]);
        let v = vad("r", &[1, 1, 1, 1, 1, 0, 0, 0]);
        assert_eq!(unit_weights(&[t], &[v], 1).unwrap().weights, vec![5.0 / 8.0]);
    }

    #[test]
    fn recording_order_irrelevant() {
        let a = tr("a", &[(0, 0, 3), (1, 3, 6)]);
        let b = tr("b", &[(1, 0, 2), (0, 2, 5)]);
        let va = vad("a", &[1, 0, 1, 1, 1, 0]);
        let vb = vad("b", &[0, 0, 1, 1, 0]);
        let w1 = unit_weights(&[a.clone(), b.clone()], &[va.clone(), vb.clone()], 2).unwrap();
        let w2 = unit_weights(&[b, a], &[vb, va], 2).unwrap();
        assert_eq!(w1, w2);
    }

    #[test]
    fn missing_or_short_vad_rejected() {
        let t = tr("r", &[(0, 0, 4)]);
        assert!(unit_weights(&[t.clone()], &[vad("x", &[1, 1, 1, 1])], 1).is_err());
        assert!(unit_weights(&[t], &[vad("r", &[1, 1])], 1).is_err());
    }

    fn fm(values: &[f64]) -> FeatureMatrix {
        FeatureMatrix::new("r", 10.0, values.iter().map(|&v| vec![v]).collect()).unwrap()
    }

    #[test]
    fn constant_energy_all_voiced() {
        let v = energy_vad(&fm(&[2.0; 7]), 50.0).unwrap();
        assert!(v.voiced.iter().all(|&b| b));
    }

    #[test]
    fn increasing_energy_top_half_voiced() {
        let v = energy_vad(&fm(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), 50.0).unwrap();
        assert_eq!(v.voiced, vec![false, false, false, true, true, true]);
    }

    #[test]
    fn single_frame_voiced() {
        assert_eq!(energy_vad(&fm(&[0.3]), 40.0).unwrap().voiced, vec![true]);
    }

    #[test]
    fn percentile_bounds() {
        assert!(energy_vad(&fm(&[1.0]), 0.0).is_err());
        assert!(energy_vad(&fm(&[1.0]), 100.0).is_err());
    }
}
