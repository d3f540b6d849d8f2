use std::collections::BTreeMap;

use proptest::prelude::*;

use termdisc::asm::{self, PseudoTranscription, Token, TrainOptions};
use termdisc::discovery::{self, BagOfSequences, CandidateSequence, DistanceParams};
use termdisc::io::{FeatureMatrix, VadTrack};
use termdisc::pipeline::PipelineConfig;
use termdisc::segmentation::{self, BoundarySet};
use termdisc::topics::{self, SkipGramOptions, TermCounts};
use termdisc::weighting::{self, WeightTable};

const UNITS: usize = 6;

fn seq() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..UNITS, 0..12)
}

fn weights() -> impl Strategy<Value = WeightTable> {
    prop::collection::vec(0.0..=1.0f64, UNITS).prop_map(|weights| WeightTable { weights })
}

fn params(w: Option<WeightTable>, normalized: bool) -> DistanceParams {
    DistanceParams {
        weights: w,
        normalized,
        ..DistanceParams::default()
    }
}

/// Token boundaries tiling `[0, frames)` with units that never repeat back to back.
fn tiling(frames: usize, cuts: &[usize], units: &[usize]) -> Vec<Token> {
    let mut b: Vec<usize> = cuts.iter().map(|c| c % frames).filter(|&c| c > 0).collect();
    b.push(0);
    b.push(frames);
    b.sort_unstable();
    b.dedup();
    let mut prev = usize::MAX;
    b.windows(2)
        .enumerate()
        .map(|(i, w)| {
            let mut u = units[i % units.len()] % UNITS;
            if u == prev {
                u = (u + 1) % UNITS;
            }
            prev = u;
            Token {
                unit_id: u,
                start_frame: w[0],
                end_frame: w[1],
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn distance_is_symmetric(x in seq(), y in seq(), w in weights(), normalized in any::<bool>()) {
        let p = params(Some(w), normalized);
        prop_assert_eq!(discovery::seq_distance(&x, &y, &p), discovery::seq_distance(&y, &x, &p));
    }

    #[test]
    fn distance_to_self_is_zero(x in seq(), w in weights()) {
        prop_assert_eq!(discovery::seq_distance(&x, &x, &params(Some(w), true)), 0.0);
    }

    #[test]
    fn normalized_distance_at_most_one(x in seq(), y in seq(), w in weights()) {
        let d = discovery::seq_distance(&x, &y, &params(Some(w), true));
        prop_assert!((0.0..=1.0).contains(&d), "distance {}", d);
    }

    #[test]
    fn aligned_pair_scores_add_up(a in seq(), b in seq(), w in weights()) {
        for p in discovery::local_align(&a, &b, Some(&w)) {
            let mut score = 0.0;
            for k in 0..p.len {
                let (u, v) = (a[p.a_start + k], b[p.b_start + k]);
                let prod = w.get(u) * w.get(v);
                score += if u == v { prod } else { -prod };
            }
            prop_assert!((score - p.score).abs() < 1e-9, "recomputed {} vs {}", score, p.score);
            prop_assert!(p.score > 0.0);
            prop_assert_eq!(a[p.a_start], b[p.b_start]);
            prop_assert_eq!(a[p.a_start + p.len - 1], b[p.b_start + p.len - 1]);
        }
    }

    #[test]
    fn selection_is_separated_and_maximal(
        entries in prop::collection::vec(prop::collection::vec(0..UNITS, 1..8), 1..25),
        radius in 0.05..0.6f64,
        margin in 1.01..2.5f64,
    ) {
        let bag = BagOfSequences::from_entries(
            entries
                .into_iter()
                .enumerate()
                .map(|(i, units)| CandidateSequence {
                    recording_id: format!("r{}", i % 3),
                    start_frame: i * 10,
                    end_frame: i * 10 + units.len(),
                    units,
                })
                .collect(),
        );
        let p = DistanceParams { radius, margin, ..DistanceParams::default() };
        let (chosen, gaps) = discovery::selection_pass(&bag, &p, &[0]);
        let limit = margin * radius;
        let d = |i: usize, j: usize| discovery::seq_distance(&bag.entries[i].units, &bag.entries[j].units, &p);
        prop_assert!(gaps.iter().all(|&g| g > limit));
        for (k, &i) in chosen.iter().enumerate() {
            for &j in &chosen[k + 1..] {
                prop_assert!(d(i, j) > limit);
            }
        }
        for e in 0..bag.entries.len() {
            prop_assert!(chosen.contains(&e) || chosen.iter().any(|&c| d(e, c) <= limit));
        }
    }

    #[test]
    fn swer_of_identical_is_zero(frames in 1usize..60, cuts in prop::collection::vec(0usize..60, 0..10), units in prop::collection::vec(0usize..UNITS, 1..10)) {
        let t = PseudoTranscription { recording_id: "r".into(), tokens: tiling(frames, &cuts, &units) };
        prop_assert_eq!(asm::swer(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn weights_lie_in_unit_interval(frames in 1usize..60, cuts in prop::collection::vec(0usize..60, 0..10), units in prop::collection::vec(0usize..UNITS, 1..10), bits in prop::collection::vec(any::<bool>(), 60)) {
        let t = PseudoTranscription { recording_id: "r".into(), tokens: tiling(frames, &cuts, &units) };
        let vad = VadTrack { recording_id: "r".into(), voiced: bits[..frames].to_vec() };
        let table = weighting::unit_weights(&[t], &[vad], UNITS).unwrap();
        prop_assert!(table.weights.iter().all(|w| (0.0..=1.0).contains(w)));
    }

    #[test]
    fn merged_boundaries_are_final(frames in 2usize..200, a in prop::collection::vec(0usize..200, 0..20), b in prop::collection::vec(0usize..200, 0..20), window in 0.0..60.0f64) {
        let clip = |v: &[usize]| -> Vec<usize> { let mut v: Vec<usize> = v.iter().map(|x| x % (frames + 1)).collect(); v.sort_unstable(); v };
        let sets = [
            BoundarySet { recording_id: "r".into(), boundaries: clip(&a) },
            BoundarySet { recording_id: "r".into(), boundaries: clip(&b) },
        ];
        let out = segmentation::merge_boundaries("r", &sets, window, 10.0, frames).unwrap().boundaries;
        prop_assert_eq!(out.first(), Some(&0));
        prop_assert_eq!(out.last(), Some(&frames));
        prop_assert!(out.windows(2).all(|w| w[1] - w[0] >= segmentation::MIN_SEGMENT_FRAMES));
    }

    #[test]
    fn retrieval_ignores_column_scale(counts in prop::collection::vec(prop::collection::vec(0usize..4, 8), 3..12), scale in prop::collection::vec(0.1..10.0f64, 12)) {
        let docs: Vec<TermCounts> = counts
            .iter()
            .enumerate()
            .map(|(d, row)| TermCounts {
                document_id: format!("d{d}"),
                recording_id: format!("r{}", d % 2),
                counts: row.iter().enumerate().filter(|(_, &c)| c > 0).map(|(t, &c)| (t, c)).collect::<BTreeMap<_, _>>(),
            })
            .collect();
        let m = topics::tfidf(&docs, None).unwrap();
        prop_assert!(m.scores.iter().flatten().all(|&v| v >= 0.0));
        let mut scaled = m.clone();
        for row in &mut scaled.scores {
            for (v, s) in row.iter_mut().zip(&scale) {
                *v *= s;
            }
        }
        for q in &m.documents {
            let a = topics::retrieve(q, &m, false).unwrap();
            let b = topics::retrieve(q, &scaled, false).unwrap();
            prop_assert_eq!(a.len(), b.len());
            // Equal scores position by position: any reordering is among ties.
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x.1 - y.1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn config_round_trips(seed in any::<u64>(), radius in 0.01..1.0f64, k in 1usize..200, workers in 1usize..9) {
        let mut c = PipelineConfig::new(seed);
        c.discovery.radius = radius;
        c.clustering.k = k;
        c.workers = workers;
        let back = PipelineConfig::from_json(&c.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn decode_tiles_every_frame(seed in any::<u64>(), min_dur in 1usize..4, frames in 12usize..60) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..frames).map(|t| vec![(t / 6) as f64 * 3.0 + rng.random::<f64>(), rng.random()]).collect();
        let f = FeatureMatrix::new("r", 10.0, rows).unwrap();
        let cuts: Vec<usize> = (1..frames / 6).map(|k| k * 6).collect();
        let t = PseudoTranscription { recording_id: "r".into(), tokens: tiling(frames, &cuts, &[0, 1, 2, 3]) };
        let models = asm::train_unit_models(std::slice::from_ref(&f), &[t], &TrainOptions { min_occupancy: 1, ..TrainOptions::default() }).unwrap();
        let out = asm::decode(&f, &models, min_dur).unwrap();
        out.validate(frames, models.inventory).unwrap();
        let least = min_dur.max(models.states_per_unit);
        prop_assert!(out.tokens.iter().all(|k| k.end_frame - k.start_frame >= least));
    }

    #[test]
    fn skipgram_loss_settles(seed in 0u64..1000) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let streams: Vec<Vec<usize>> = (0..10)
            .map(|_| (0..150).map(|i| if i % 5 == 0 { 0 } else { rng.random_range(1..15) }).collect())
            .collect();
        let opts = SkipGramOptions { dim: 16, epochs: 5, seed, ..SkipGramOptions::default() };
        let table = topics::skipgram_train(&streams, &opts).unwrap();
        let l = &table.epoch_losses;
        prop_assert_eq!(l.len(), 5);
        let rises: Vec<f64> = l.windows(2).filter(|w| w[1] > w[0]).map(|w| (w[1] - w[0]) / w[0]).collect();
        prop_assert!(rises.len() <= 1 && rises.iter().all(|&r| r <= 0.02), "losses {:?}", l);
        prop_assert!(l[4] < l[0]);
    }
}
