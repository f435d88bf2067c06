use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{synth_corpus, CorpusConfig};

fn ev(kw: &str, start_s: f64, end_s: f64) -> DetectionEvent {
    DetectionEvent {
        keyword: kw.into(),
        start_s,
        end_s,
        score: 0.9,
    }
}

fn occ(kw: &str, start_s: f64, end_s: f64) -> Occurrence {
    Occurrence {
        keyword: kw.into(),
        start_s,
        end_s,
    }
}

#[test]
fn calibration_examples() {
    let s = [0.9, 0.8, 0.7];
    let c = calibrate_threshold(&s, 2).unwrap();
    assert_eq!((c.threshold, c.false_alarms, c.degenerate), (0.8, 2, false));
    let c = calibrate_threshold(&s, 0).unwrap();
    assert_eq!(c.threshold, 0.9f64.next_up());
    assert_eq!(c.false_alarms, 0);
    let c = calibrate_threshold(&s, 3).unwrap();
    assert_eq!((c.threshold, c.degenerate), (0.7, true));
    // a tie straddling the budget pushes the threshold up
    assert_eq!(
        calibrate_threshold(&[0.9, 0.8, 0.8, 0.7], 2)
            .unwrap()
            .threshold,
        0.9
    );
    assert!(calibrate_threshold(&[], 1).is_err());
    assert!(matches!(
        calibrate_threshold(&[f64::NAN], 0),
        Err(CladError::Domain(_))
    ));
}

/// Every candidate threshold tried in ascending order.
fn brute_threshold(scores: &[f64], budget: usize) -> f64 {
    let mut cands: Vec<f64> = scores.to_vec();
    cands.push(scores.iter().copied().fold(f64::MIN, f64::max).next_up());
    cands.sort_by(f64::total_cmp);
    cands
        .into_iter()
        .find(|&c| scores.iter().filter(|&&s| s >= c).count() <= budget)
        .unwrap()
}

proptest! {
    #[test]
    fn calibration_matches_exhaustive_scan(
        raw in prop::collection::vec(0u8..12, 1..30),
        budget in 0usize..10,
    ) {
        let scores: Vec<f64> = raw.iter().map(|&v| v as f64 / 10.0).collect();
        prop_assume!(budget < scores.len());
        let c = calibrate_threshold(&scores, budget).unwrap();
        prop_assert_eq!(c.threshold, brute_threshold(&scores, budget));
        prop_assert!(c.false_alarms <= budget);
    }

    #[test]
    fn larger_budgets_never_raise_the_threshold(
        raw in prop::collection::vec(-1.0f64..1.0, 1..40),
        b in 0usize..40,
    ) {
        let lo = calibrate_threshold(&raw, b).unwrap().threshold;
        let hi = calibrate_threshold(&raw, b + 1).unwrap().threshold;
        prop_assert!(hi <= lo);
    }
}

#[test]
fn micro_recall_pools_over_keywords() {
    let occs = vec![
        occ("a", 0.0, 1.0),
        occ("a", 3.0, 4.0),
        occ("b", 0.5, 1.5),
        occ("b", 5.0, 6.0),
        occ("c", 2.0, 3.0),
    ];
    let events = vec![ev("a", 0.5, 1.2), ev("a", 3.5, 4.5), ev("b", 1.4, 2.0)];
    assert!((micro_recall(&events, &occs).unwrap() - 0.6).abs() < 1e-15);
    assert_eq!(micro_recall(&[], &occs).unwrap(), 0.0);
    let all = vec![
        ev("a", 0.0, 1.0),
        ev("a", 3.0, 4.0),
        ev("b", 1.0, 2.0),
        ev("b", 5.5, 6.5),
        ev("c", 2.5, 3.5),
    ];
    assert_eq!(micro_recall(&all, &occs).unwrap(), 1.0);
    assert!(micro_recall(&all, &[]).is_err());
    // touching intervals do not overlap
    assert_eq!(
        micro_recall(&[ev("c", 3.0, 4.0)], &[occ("c", 2.0, 3.0)]).unwrap(),
        0.0
    );
}

#[test]
fn one_event_matches_one_occurrence() {
    let occs = vec![occ("a", 0.0, 1.0), occ("a", 0.8, 1.6)];
    assert_eq!(micro_recall(&[ev("a", 0.5, 1.2)], &occs).unwrap(), 0.5);
}

proptest! {
    #[test]
    fn recall_ignores_order_and_foreign_events(
        seed in 0u64..500,
        n_ev in 0usize..12,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kws = ["a", "b"];
        let mut occs = Vec::new();
        for i in 0..6 {
            let s = i as f64 * 2.0;
            occs.push(occ(kws[i % 2], s, s + 1.0));
        }
        let mut events: Vec<DetectionEvent> = (0..n_ev)
            .map(|_| {
                let s = rng.random_range(0.0..12.0);
                ev(kws[rng.random_range(0..2)], s, s + 0.9)
            })
            .collect();
        let base = micro_recall(&events, &occs).unwrap();
        events.reverse();
        prop_assert_eq!(micro_recall(&events, &occs).unwrap(), base);
        events.push(ev("zzz", 0.0, 20.0));
        events.shuffle(&mut rng);
        prop_assert_eq!(micro_recall(&events, &occs).unwrap(), base);
    }
}

fn trials(pairs: &[(f64, bool)]) -> Vec<Trial> {
    pairs.iter().map(|&(s, p)| Trial::new(s, p)).collect()
}

#[test]
fn auc_and_eer_edge_cases() {
    let sep = trials(&[(0.9, true), (0.8, true), (0.2, false), (0.1, false)]);
    assert_eq!(auc(&sep).unwrap(), 1.0);
    assert_eq!(eer(&sep).unwrap(), 0.0);
    let flat = trials(&[
        (0.5, true),
        (0.5, false),
        (0.5, false),
        (0.5, true),
        (0.5, true),
    ]);
    assert_eq!(auc(&flat).unwrap(), 0.5);
    assert!((eer(&flat).unwrap() - 0.5).abs() < 1e-15);
    let mixed = trials(&[(0.9, true), (0.6, false), (0.4, true), (0.1, false)]);
    assert_eq!(eer(&mixed).unwrap(), 0.5);
    assert_eq!(auc(&mixed).unwrap(), 0.75);
    let inverted = trials(&[(0.1, true), (0.9, false)]);
    assert_eq!(auc(&inverted).unwrap(), 0.0);
    assert_eq!(eer(&inverted).unwrap(), 1.0);
    assert!(matches!(
        auc(&trials(&[(0.3, true)])),
        Err(CladError::Domain(_))
    ));
    assert!(matches!(
        eer(&trials(&[(0.3, false)])),
        Err(CladError::Domain(_))
    ));
    let csv = roc_csv(&roc(&sep).unwrap());
    assert!(csv.starts_with("threshold,far,tpr\ninf,0,0\n"));
}

/// Fraction of (positive, negative) pairs ranked correctly, ties half.
fn pairwise_auc(t: &[Trial]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for p in t.iter().filter(|t| t.positive) {
        for n in t.iter().filter(|t| !t.positive) {
            den += 1.0;
            num += if p.score > n.score {
                1.0
            } else if p.score == n.score {
                0.5
            } else {
                0.0
            };
        }
    }
    num / den
}

#[test]
fn trapezoid_auc_equals_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut done = 0;
    while done < 100 {
        let set: Vec<Trial> = (0..20)
            .map(|_| Trial::new(rng.random_range(0..8) as f64 / 7.0, rng.random_bool(0.4)))
            .collect();
        if set.iter().all(|t| t.positive) || set.iter().all(|t| !t.positive) {
            continue;
        }
        assert!((auc(&set).unwrap() - pairwise_auc(&set)).abs() < 1e-10);
        done += 1;
    }
}

#[test]
fn rsa_cases() {
    assert_eq!(rsa(3.7, 3.7).unwrap(), 1.0);
    assert_eq!(rsa(10.0, 2.0).unwrap(), 5.0);
    assert!(matches!(rsa(0.0, 1.0), Err(CladError::Domain(_))));
    assert!(matches!(rsa(1.0, -1.0), Err(CladError::Domain(_))));
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    assert_eq!(std_dev(&[2.0, 2.0]), 0.0);
}

fn kw(word: &str, window_frames: usize) -> KeywordSpec {
    KeywordSpec {
        word: word.into(),
        phoneme_ids: vec![0],
        n_phns: 1,
        window_frames,
    }
}

#[test]
fn detector_calibration_counts_real_events() {
    let keywords = vec![kw("a", 10), kw("b", 10)];
    let stream = StreamConfig::new(0.0, 100.0);
    // track 0: keyword a has windows 0.5 s apart; b has one high window
    let w = |s: usize| Segment::new(s, s + 10);
    let fa: ScoredSet = vec![
        vec![
            vec![(w(0), 0.7), (w(50), 0.9), (w(100), 0.3), (w(300), 0.6)],
            vec![(w(0), 0.8)],
        ],
        vec![vec![(w(0), 0.2)], vec![(w(0), 0.1), (w(200), 0.5)]],
    ];
    for budget in 0..6 {
        let c = calibrate_detector(&fa, &keywords, &[0, 1], budget, &stream).unwrap();
        let n: usize = events_at(&fa, &keywords, &[0, 1], c.threshold, &stream)
            .iter()
            .map(Vec::len)
            .sum();
        assert_eq!(n, c.false_alarms);
        assert!(
            n <= budget || c.degenerate,
            "budget {budget}: {n} events at {}",
            c.threshold
        );
    }
    let c = calibrate_detector(&fa, &keywords, &[0, 1], 2, &stream).unwrap();
    assert_eq!((c.threshold, c.false_alarms), (0.7, 2));
    // The 0.7 event of keyword a hides its 0.9 window. Raising the threshold
    // to 0.8 uncovers it, so a second pass is needed.
    let c = calibrate_detector(&fa, &keywords, &[0, 1], 1, &stream).unwrap();
    assert_eq!((c.threshold, c.false_alarms), (0.9, 1));
    let only_b = calibrate_detector(&fa, &keywords, &[1], 0, &stream).unwrap();
    assert_eq!(only_b.threshold, 0.8f64.next_up());
}

#[test]
fn trial_construction() {
    let corpus = synth_corpus(
        &CorpusConfig {
            num_utterances: 60,
            ..CorpusConfig::default()
        },
        4,
    )
    .unwrap();
    let window = WindowConfig::default();
    let labels = SegmentLabelConfig::default();
    let cfg = TrialConfig::default();
    let specs = build_trials(
        &corpus.records,
        &corpus.meta.lexicon,
        &window,
        &labels,
        &cfg,
    )
    .unwrap();
    let count = |k| specs.iter().filter(|s| s.kind == k).count();
    assert!(count(TrialKind::Positive) > 20);
    assert!(count(TrialKind::Easy) > 20);
    assert!(
        count(TrialKind::Hard) > 5,
        "hard {}",
        count(TrialKind::Hard)
    );
    for s in &specs {
        let r = &corpus.records[s.record];
        let ph = corpus.meta.lexicon.get(&s.keyword).unwrap();
        assert!(ph.len() >= cfg.min_phonemes);
        assert!(s.segment.end <= r.num_frames() && !s.segment.is_empty());
        let present = r.words.iter().any(|w| w.word == s.keyword);
        match s.kind {
            TrialKind::Positive => {
                assert!(present);
                assert!(s.segment.len() == estimate(ph.len()) || s.segment.len() == r.num_frames());
            }
            TrialKind::Easy => assert!(present),
            TrialKind::Hard => {
                assert!(!present);
                assert!(r
                    .words
                    .iter()
                    .any(|w| shared_prefix(&w.phonemes, ph) >= 2 && w.word != s.keyword));
            }
        }
    }
    // positives cover their occurrence
    for s in specs.iter().filter(|s| s.kind == TrialKind::Positive) {
        let r = &corpus.records[s.record];
        assert!(r.words.iter().any(|w| w.word == s.keyword
            && crate::windowing::overlap_ratio(&s.segment, &Segment::new(w.start, w.end))
                .unwrap()
                == 1.0));
    }
    // easy negatives are below the negative overlap bound for every occurrence
    for s in specs.iter().filter(|s| s.kind == TrialKind::Easy) {
        let r = &corpus.records[s.record];
        let best = r
            .words
            .iter()
            .filter(|w| w.word == s.keyword)
            .map(|w| {
                crate::windowing::overlap_ratio(&s.segment, &Segment::new(w.start, w.end)).unwrap()
            })
            .fold(0.0, f64::max);
        assert!(best <= labels.neg_overlap_max);
    }
}

fn estimate(n: usize) -> usize {
    crate::windowing::estimate_window(n, &WindowConfig::default())
}

#[test]
fn ablation_needs_three_seeds() {
    let corpus = synth_corpus(
        &CorpusConfig {
            num_utterances: 4,
            ..CorpusConfig::default()
        },
        1,
    )
    .unwrap();
    let cfg = ModelConfig {
        am: crate::encoders::AmConfig {
            feature_dim: corpus.meta.feature_dim,
            num_phonemes: corpus.meta.inventory.len(),
            ..Default::default()
        },
        ..ModelConfig::default()
    };
    let am = AcousticModel::new(&cfg.am, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let setup = AblationSetup {
        model: &cfg,
        am: &am,
        train: &corpus.records,
        valid: &corpus.records,
        trial_records: &corpus.records,
        trials: &[],
        lexicon: &corpus.meta.lexicon,
        train_cfg: &TrainConfig::default(),
        loss: &LossConfig::default(),
        batching: &BatchConfig::default(),
    };
    assert!(matches!(
        run_ablation(&setup, &[1, 2], 0.15),
        Err(CladError::Config(_))
    ));
}
