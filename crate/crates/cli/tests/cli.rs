use std::fs;
use std::path::Path;
use std::process::Command;

use clad_cli::config::RunConfig;
use clad_cli::run_from_args;

fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.corpus.num_utterances = 60;
    c.corpus.lexicon.num_words = 20;
    c.am_train.epochs = 2;
    c.shapes.am_layers = 1;
    c.shapes.am_hidden = 16;
    c.shapes.am_projection = 8;
    c.shapes.audio.layers = 1;
    c.shapes.audio.hidden = 8;
    c.shapes.audio.projection = 4;
    c.shapes.audio.embedding_dim = 8;
    c.shapes.text.layers = 1;
    c.shapes.text.hidden = 8;
    c.shapes.text.projection = 4;
    c.shapes.text.embedding_dim = 8;
    c.shapes.phoneme_embedding_dim = 4;
    c.labels.n_pos = 1;
    c.labels.m_neg = 2;
    c.train.max_epochs = 1;
    c.train.initial_lr = 0.5;
    c.train.batch_frame_budget = 2048;
    c.eval.data.num_keywords = 3;
    c.eval.data.test_utterances = 6;
    c.eval.data.fa_utterances = 6;
    c.eval.data.trial_utterances = 8;
    c.eval.buckets = vec![2, 3];
    c.bench.repetitions = 2;
    c.bench.tracks = 2;
    c
}

fn write_config(dir: &Path, cfg: &RunConfig) -> String {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn clad(config: &str, out: &Path, rest: &[&str]) -> Result<String, clad_cli::CliError> {
    let mut args = vec!["clad", "--config", config, "--out", out.to_str().unwrap()];
    args.extend_from_slice(rest);
    run_from_args(args)
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny_config());
    let out = dir.path().join("run");
    let synth: serde_json::Value =
        serde_json::from_str(&clad(&config, &out, &["synth"]).unwrap()).unwrap();
    assert_eq!(synth["utterances"], 60);
    clad(&config, &out, &["pretrain"]).unwrap();
    clad(&config, &out, &["train"]).unwrap();
    for f in [
        "am.ckpt",
        "clad.ckpt",
        "train_report.json",
        "pretrain_report.json",
        "timing.json",
        "resolved_train.json",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let resolved = read_json(&out.join("resolved_train.json"));
    assert_eq!(resolved["command"], "train");
    assert_eq!(resolved["config"]["corpus"]["num_utterances"], 60);

    let eval: serde_json::Value =
        serde_json::from_str(&clad(&config, &out, &["eval"]).unwrap()).unwrap();
    assert_eq!(eval["recall"].as_array().unwrap().len(), 2);
    let report = read_json(&out.join("eval_report.json"));
    assert_eq!(report["fa_budget"], 2);
    let roc = fs::read_to_string(out.join("roc.csv")).unwrap();
    assert!(roc.starts_with("threshold,far,tpr\n"));

    // detection on a corpus track, with a threshold and with calibration
    let keywords: Vec<String> = report["keywords"]
        .as_array()
        .unwrap()
        .iter()
        .map(|k| k.as_str().unwrap().to_string())
        .collect();
    let track = fs::read_dir(out.join("corpus/feats"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let kw = keywords.join(",");
    let track_s = track.to_str().unwrap();
    let low = clad(
        &config,
        &out,
        &[
            "detect",
            "--keywords",
            &kw,
            "--track",
            track_s,
            "--threshold",
            "-1",
        ],
    )
    .unwrap();
    let lines: Vec<serde_json::Value> = low
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!lines.is_empty(), "threshold -1 fires on every keyword");
    for e in &lines {
        assert!(keywords.contains(&e["keyword"].as_str().unwrap().to_string()));
        assert!(e["end_s"].as_f64().unwrap() > e["start_s"].as_f64().unwrap());
    }
    let none = clad(
        &config,
        &out,
        &[
            "detect",
            "--keywords",
            &kw,
            "--track",
            track_s,
            "--threshold",
            "1.5",
        ],
    )
    .unwrap();
    assert!(none.is_empty());
    clad(
        &config,
        &out,
        &["detect", "--keywords", &kw, "--track", track_s],
    )
    .unwrap();

    let bench: serde_json::Value =
        serde_json::from_str(&clad(&config, &out, &["bench"]).unwrap()).unwrap();
    assert!(bench["median_rsa"].as_f64().unwrap() > 0.0);
    let table = read_json(&out.join("rsa.json"));
    assert_eq!(table["repetitions"], 2);
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny_config());
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        for cmd in ["synth", "pretrain", "train"] {
            clad(&config, &out, &["--seed", seed, cmd]).unwrap();
        }
        out
    };
    let a = run("a", "7");
    let b = run("b", "7");
    let c = run("c", "8");
    for f in [
        "am.ckpt",
        "clad.ckpt",
        "pretrain_report.json",
        "corpus/manifest.jsonl",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    assert_ne!(
        fs::read(a.join("clad.ckpt")).unwrap(),
        fs::read(c.join("clad.ckpt")).unwrap()
    );
    // wall clock lives in timing.json so reports stay comparable
    let strip = |p: &Path| {
        let mut v = read_json(&p.join("train_report.json"));
        v.as_object_mut().unwrap().remove("wall_clock_s");
        v
    };
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny_config());
    let out = dir.path().join("run");
    clad(&config, &out, &["synth"]).unwrap();

    let e = clad(
        &config,
        &out,
        &[
            "detect",
            "--keywords",
            "",
            "--track",
            "x.feat",
            "--threshold",
            "0.5",
        ],
    )
    .unwrap_err();
    assert_eq!((e.kind.as_str(), e.exit_code), ("usage", 2));
    assert!(e.message.contains("no keywords"));

    let e = clad(
        &config,
        &out,
        &["detect", "--keywords", "notaword", "--track", "x.feat"],
    )
    .unwrap_err();
    assert_eq!(e.exit_code, 2);

    let e = clad(&config, &out, &["train"]).unwrap_err();
    assert_eq!(e.exit_code, 2, "{}", e.message);
    assert!(e.hint.as_deref().unwrap_or("").contains("pretrain"));

    let e = run_from_args(["clad", "synth", "--bogus"]).unwrap_err();
    assert_eq!(e.exit_code, 2);

    let e = run_from_args(["clad", "--config", "/nonexistent/c.json", "synth"]).unwrap_err();
    assert_eq!(e.exit_code, 2);

    let e = run_from_args(["clad", "--help"]).unwrap_err();
    assert_eq!(e.exit_code, 0);
    assert!(e.message.contains("detect"));
}

#[test]
fn schema_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut raw = serde_json::to_value(tiny_config()).unwrap();
    raw["corpus"]["surprise"] = 1.into();
    let path = dir.path().join("bad.json");
    fs::write(&path, raw.to_string()).unwrap();
    let e = clad(path.to_str().unwrap(), &out, &["synth"]).unwrap_err();
    assert_eq!((e.kind.as_str(), e.exit_code), ("schema", 2));
    assert!(e.message.contains("surprise"), "{}", e.message);

    let mut raw = serde_json::to_value(tiny_config()).unwrap();
    raw["version"] = 99.into();
    fs::write(&path, raw.to_string()).unwrap();
    let e = clad(path.to_str().unwrap(), &out, &["synth"]).unwrap_err();
    assert!(e.message.contains("version 99"));

    let mut cfg = tiny_config();
    cfg.window.frame_rate_hz = 50.0;
    let e = clad(&write_config(dir.path(), &cfg), &out, &["synth"]).unwrap_err();
    assert_eq!(e.kind, "schema");
}

#[test]
fn binary_reports_errors_as_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_clad"))
        .args([
            "--out",
            dir.path().to_str().unwrap(),
            "detect",
            "--track",
            "x.feat",
            "--threshold",
            "0.5",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "usage");
    assert!(err["error"]["hint"].is_string());
}

#[test]
fn bundled_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {}", path.display(), e.message));
        n += 1;
    }
    assert!(n >= 2);
}
