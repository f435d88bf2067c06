use clad_core::corpus::{synth_corpus, CorpusConfig, UtteranceRecord};
use clad_core::encoders::{
    am_pretrain, AcousticModel, AmTrainConfig, CladModel, EncoderConfig, ModelConfig,
};
use clad_core::loss::LossConfig;
use clad_core::stream::{
    detect, enroll_keyword, sort_events, Enrolled, StreamConfig, StreamDetector,
};
use clad_core::trainer::{split_validation, train_clad, Checkpoint, TrainConfig};
use clad_core::windowing::BatchConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Trained {
    model: CladModel,
    valid_before: f64,
    valid_best: f64,
    keywords: Vec<Enrolled>,
    tracks: Vec<UtteranceRecord>,
}

fn small_shapes(feature_dim: usize, num_phonemes: usize) -> ModelConfig {
    let enc = EncoderConfig {
        layers: 1,
        hidden: 12,
        projection: 6,
        embedding_dim: 12,
    };
    let mut cfg = ModelConfig {
        audio: enc.clone(),
        text: enc,
        phoneme_embedding_dim: 8,
        ..ModelConfig::default()
    };
    cfg.am.feature_dim = feature_dim;
    cfg.am.num_phonemes = num_phonemes;
    cfg.am.layers = 2;
    cfg.am.hidden = 32;
    cfg.am.projection = 16;
    cfg
}

fn train_small(seed: u64) -> Trained {
    let mut corpus_cfg = CorpusConfig {
        num_utterances: 80,
        ..CorpusConfig::default()
    };
    corpus_cfg.lexicon.num_words = 16;
    let corpus = synth_corpus(&corpus_cfg, seed).unwrap();
    let cfg = small_shapes(corpus.meta.feature_dim, corpus.meta.inventory.len());
    let (train, valid) = split_validation(&corpus.records, 0.2);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut am = AcousticModel::new(&cfg.am, &mut rng).unwrap();
    let am_cfg = AmTrainConfig {
        epochs: 3,
        ..AmTrainConfig::default()
    };
    am_pretrain(&mut am, &train, &valid, &am_cfg, &mut rng).unwrap();
    assert!(am.is_frozen());

    let mut model = CladModel::with_acoustic_model(&cfg, am, &mut rng).unwrap();
    let train_cfg = TrainConfig {
        initial_lr: 0.5,
        max_epochs: 3,
        seed,
        clip_norm: Some(1.0),
        ..TrainConfig::default()
    };
    let mut seen = 0;
    let report = train_clad(
        &mut model,
        &train,
        &valid,
        &train_cfg,
        &LossConfig::default(),
        &BatchConfig::default(),
        |_, _| {
            seen += 1;
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(seen, report.epochs.len());
    let valid_best = report.epochs[report.best_epoch - 1].valid_loss;

    let window = BatchConfig::default().window;
    let keywords = corpus
        .meta
        .lexicon
        .entries
        .iter()
        .take(4)
        .map(|(w, p)| enroll_keyword(&model, w, p, &window).unwrap())
        .collect();
    Trained {
        model,
        valid_before: report.initial_valid_loss,
        valid_best,
        keywords,
        tracks: valid.into_iter().take(3).collect(),
    }
}

#[test]
fn library_pipeline_trains_detects_and_round_trips() {
    let t = train_small(11);
    assert!(
        t.valid_best < t.valid_before,
        "validation loss {} did not improve on {}",
        t.valid_best,
        t.valid_before
    );

    let cfg = StreamConfig::new(0.2, 100.0);
    let bytes = Checkpoint::from_model(&t.model, serde_json::json!({"seed": 11}))
        .to_bytes()
        .unwrap();
    let restored = Checkpoint::from_bytes(&bytes, "mem")
        .unwrap()
        .into_model()
        .unwrap();

    for track in &t.tracks {
        let whole = detect(&t.model, &t.keywords, &track.features, &cfg).unwrap();
        assert_eq!(
            whole,
            detect(&restored, &t.keywords, &track.features, &cfg).unwrap()
        );

        let mut streamer = StreamDetector::new(&t.model, cfg.clone()).unwrap();
        for k in &t.keywords {
            streamer.enroll(k.clone()).unwrap();
        }
        let mut streamed = Vec::new();
        for f in 0..track.features.frames() {
            streamed.extend(streamer.push_frame(track.features.frame(f)).unwrap());
        }
        streamed.extend(streamer.finish().unwrap());
        sort_events(&mut streamed);
        assert_eq!(streamed.len(), whole.len());
        for (a, b) in streamed.iter().zip(&whole) {
            assert_eq!(a.keyword, b.keyword);
            assert_eq!((a.start_s, a.end_s), (b.start_s, b.end_s));
            assert!((a.score - b.score).abs() < 1e-9);
        }
    }
}
