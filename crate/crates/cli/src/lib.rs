//! The `clad` command line: corpus synthesis, acoustic-model pretraining,
//! contrastive training, detection, evaluation and benchmarking.

pub mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clad_core::corpus::{
    read_features, read_manifest, synth_corpus, write_manifest, CorpusMeta, UtteranceRecord,
};
use clad_core::encoders::{am_pretrain, AcousticModel, CladModel};
use clad_core::eval::{
    baseline_scores, build_trials, calibrate_detector, clad_scores, eval_data, evaluate, roc_csv,
    run_ablation, run_bench, AblationSetup, EvalData,
};
use clad_core::stream::{enroll_keyword, DetectionEvent, Enrolled, StreamConfig, StreamDetector};
use clad_core::trainer::{
    load_checkpoint, save_checkpoint, split_validation, train_clad, Checkpoint,
};
use clad_core::windowing::KeywordSpec;
use clad_core::CladError;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use config::{RunConfig, CONFIG_VERSION};

const AM_SALT: u64 = 0xa3;
const INIT_SALT: u64 = 0x1417;

/// Failure reported to the user as a JSON object on stderr.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliError {
    pub kind: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hint: Option<String>,
    #[serde(skip)]
    pub exit_code: i32,
}

impl CliError {
    pub fn usage(message: impl Into<String>, hint: impl Into<String>) -> Self {
        CliError {
            kind: "usage".into(),
            message: message.into(),
            hint: Some(hint.into()),
            exit_code: 2,
        }
    }

    pub fn schema(message: impl Into<String>) -> Self {
        CliError {
            kind: "schema".into(),
            message: message.into(),
            hint: Some(
                "compare against crates/cli/configs/small.json; unknown fields are rejected".into(),
            ),
            exit_code: 2,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl From<CladError> for CliError {
    fn from(e: CladError) -> Self {
        let (kind, hint) = match &e {
            CladError::Config(_) => ("config", Some("check the values in --config")),
            CladError::Contract(_) => ("contract", None),
            CladError::Domain(_) => ("domain", None),
            CladError::Numeric(_) => ("numeric", None),
            CladError::Parse { .. } => (
                "parse",
                Some("the file is damaged or was not written by clad"),
            ),
            CladError::Version { .. } => (
                "version",
                Some("regenerate the file with this version of clad"),
            ),
            CladError::Training { .. } => ("training", Some("lower train.initial_lr")),
            CladError::Io { .. } => (
                "io",
                Some("run the earlier pipeline steps with the same --out first"),
            ),
        };
        CliError {
            kind: kind.into(),
            message: e.to_string(),
            hint: hint.map(String::from),
            exit_code: 1,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "clad",
    version,
    about = "Contrastive keyword spotting pipeline"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Run configuration (JSON). Built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; created if absent.
    #[arg(long, global = true, default_value = "clad-out")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Default)]
pub struct OperatingPoint {
    /// Fixed detection threshold.
    #[arg(long, conflicts_with = "fa_budget", allow_negative_numbers = true)]
    pub threshold: Option<f64>,
    /// Calibrate the threshold to at most this many false alarms.
    #[arg(long)]
    pub fa_budget: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic corpus into <out>/corpus.
    Synth,
    /// Pretrain and freeze the acoustic model.
    Pretrain,
    /// Train the audio and text encoders.
    Train {
        /// Acoustic-model checkpoint (default <out>/am.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Detect keywords in a feature track; prints JSON lines.
    Detect {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated words from the corpus lexicon.
        #[arg(long, default_value = "")]
        keywords: String,
        /// Feature file (CLADFEAT format).
        #[arg(long)]
        track: PathBuf,
        #[command(flatten)]
        op: OperatingPoint,
    },
    /// Recall at a fixed false-alarm count, EER and AUC.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        fa_budget: Option<usize>,
        /// Also run the audio-text-only ablation.
        #[arg(long)]
        ablation: bool,
    },
    /// Speed of the contrastive detector relative to the posterior baseline.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        fa_budget: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Pretrain => "pretrain",
            Command::Train { .. } => "train",
            Command::Detect { .. } => "detect",
            Command::Eval { .. } => "eval",
            Command::Bench { .. } => "bench",
        }
    }
}

fn keyword_list(list: &str) -> CliResult<Vec<&str>> {
    let words: Vec<&str> = list
        .split(',')
        .map(str::trim)
        .filter(|w| !w.is_empty())
        .collect();
    if words.is_empty() {
        return Err(CliError::usage(
            "no keywords enrolled",
            "pass --keywords with comma-separated words from the corpus lexicon",
        ));
    }
    Ok(words)
}

/// Parses `args` (including the program name) and runs the command.
/// Returns what should go to stdout.
pub fn run_from_args<I, T>(args: I) -> CliResult<String>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| {
        use clap::error::ErrorKind;
        match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => CliError {
                kind: "help".into(),
                message: e.to_string(),
                hint: None,
                exit_code: 0,
            },
            _ => CliError::usage(e.kind().to_string(), e.render().to_string()),
        }
    })?;
    run(cli)
}

pub fn run(cli: Cli) -> CliResult<String> {
    let cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .with_seed(cli.global.seed);
    cfg.validate()?;
    let out = cli.global.out.clone();
    fs::create_dir_all(&out).map_err(|e| CladError::io(&out, e))?;
    write_json(
        &out.join(format!("resolved_{}.json", cli.command.name())),
        &serde_json::json!({ "command": cli.command.name(), "config": cfg }),
    )?;
    let ctx = Ctx { cfg, out };
    match cli.command {
        Command::Synth => ctx.synth(),
        Command::Pretrain => ctx.pretrain(),
        Command::Train { checkpoint } => ctx.train(checkpoint),
        Command::Detect {
            checkpoint,
            keywords,
            track,
            op,
        } => ctx.detect(checkpoint, &keywords, &track, &op),
        Command::Eval {
            checkpoint,
            fa_budget,
            ablation,
        } => ctx.eval(checkpoint, fa_budget, ablation),
        Command::Bench {
            checkpoint,
            fa_budget,
        } => ctx.bench(checkpoint, fa_budget),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CladError::config(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CladError::io(path, e).into())
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn corpus_dir(&self) -> PathBuf {
        self.out.join("corpus")
    }

    fn load_corpus(&self) -> CliResult<(CorpusMeta, Vec<UtteranceRecord>)> {
        let (manifest, records) = read_manifest(&self.corpus_dir())?;
        if manifest.meta.frame_rate_hz != self.cfg.corpus.frame_rate_hz
            || manifest.meta.feature_dim != self.cfg.corpus.inventory.feature_dim
        {
            return Err(CliError::usage(
                "corpus on disk does not match the configuration",
                "rerun `clad synth` with this --config and --out",
            ));
        }
        Ok((manifest.meta, records))
    }

    fn load_model(&self, checkpoint: Option<PathBuf>) -> CliResult<CladModel> {
        let path = checkpoint.unwrap_or_else(|| self.out.join("clad.ckpt"));
        if !path.exists() {
            return Err(CliError::usage(
                format!("checkpoint {} does not exist", path.display()),
                "run `clad train` first or pass --checkpoint",
            ));
        }
        Ok(load_checkpoint(&path)?.into_model()?)
    }

    fn run_record(&self) -> serde_json::Value {
        serde_json::to_value(&self.cfg).expect("config serializes")
    }

    fn eval_data(&self, meta: &CorpusMeta) -> CliResult<EvalData> {
        Ok(eval_data(
            meta,
            &self.cfg.corpus,
            &self.cfg.eval.data,
            &self.cfg.window,
            self.cfg.seed,
        )?)
    }

    fn synth(&self) -> CliResult<String> {
        let corpus = synth_corpus(&self.cfg.corpus, self.cfg.seed)?;
        write_manifest(&corpus.meta, &corpus.records, &self.corpus_dir())?;
        let summary = serde_json::json!({
            "utterances": corpus.records.len(),
            "frames": corpus.records.iter().map(|r| r.num_frames()).sum::<usize>(),
            "phonemes": corpus.meta.inventory.len(),
            "words": corpus.meta.lexicon.len(),
            "corpus_dir": self.corpus_dir(),
        });
        write_json(&self.out.join("synth_report.json"), &summary)?;
        Ok(format!("{summary}\n"))
    }

    fn pretrain(&self) -> CliResult<String> {
        let (meta, records) = self.load_corpus()?;
        let (train, valid) = split_validation(&records, self.cfg.train.validation_fraction);
        let model_cfg = self.cfg.model(meta.feature_dim, meta.inventory.len());
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ AM_SALT);
        let mut am = AcousticModel::new(&model_cfg.am, &mut rng)?;
        let report = am_pretrain(&mut am, &train, &valid, &self.cfg.am_train, &mut rng)?;
        save_checkpoint(
            &self.out.join("am.ckpt"),
            &Checkpoint::acoustic_only(&model_cfg, &am, self.run_record()),
        )?;
        write_json(&self.out.join("pretrain_report.json"), &report)?;
        let last = report
            .epochs
            .last()
            .expect("untrained entry always present");
        Ok(format!(
            "{}\n",
            serde_json::json!({ "valid_ce": last.valid_ce, "valid_accuracy": last.valid_accuracy })
        ))
    }

    fn train(&self, checkpoint: Option<PathBuf>) -> CliResult<String> {
        let (meta, records) = self.load_corpus()?;
        let path = checkpoint.unwrap_or_else(|| self.out.join("am.ckpt"));
        if !path.exists() {
            return Err(CliError::usage(
                format!(
                    "acoustic model checkpoint {} does not exist",
                    path.display()
                ),
                "run `clad pretrain` first or pass --checkpoint",
            ));
        }
        let ck = load_checkpoint(&path)?;
        let model_cfg = self.cfg.model(meta.feature_dim, meta.inventory.len());
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ INIT_SALT);
        let mut model = CladModel::with_acoustic_model(&model_cfg, ck.am, &mut rng)?;
        let (train, valid) = split_validation(&records, self.cfg.train.validation_fraction);
        let report = train_clad(
            &mut model,
            &train,
            &valid,
            &self.cfg.train,
            &self.cfg.loss,
            &self.cfg.batching(),
            |_, rec| {
                eprintln!(
                    "epoch {:>3}  train {:.5}  valid {:.5}  lr {:.3e}{}",
                    rec.epoch,
                    rec.train_loss,
                    rec.valid_loss,
                    rec.lr,
                    if rec.halved { "  (halved)" } else { "" }
                );
                Ok(())
            },
        )?;
        save_checkpoint(
            &self.out.join("clad.ckpt"),
            &Checkpoint::from_model(&model, self.run_record()),
        )?;
        write_json(&self.out.join("train_report.json"), &report)?;
        write_json(
            &self.out.join("timing.json"),
            &serde_json::json!({ "train_wall_clock_s": report.wall_clock_s }),
        )?;
        Ok(format!(
            "{}\n",
            serde_json::json!({
                "best_epoch": report.best_epoch,
                "epochs": report.epochs.len(),
                "initial_valid_loss": report.initial_valid_loss,
                "best_valid_loss": report.epochs.iter().map(|e| e.valid_loss).fold(report.initial_valid_loss, f64::min),
            })
        ))
    }

    fn resolve_keywords(&self, meta: &CorpusMeta, list: &str) -> CliResult<Vec<KeywordSpec>> {
        keyword_list(list)?
            .iter()
            .map(|w| {
                let ids = meta.lexicon.get(w).ok_or_else(|| {
                    CliError::usage(
                        format!("keyword {w} is not in the corpus lexicon"),
                        "see the lexicon entries in <out>/corpus/manifest.jsonl",
                    )
                })?;
                Ok(KeywordSpec::new(*w, ids.to_vec(), &self.cfg.window)?)
            })
            .collect()
    }

    fn stream_config(&self, threshold: f64) -> StreamConfig {
        StreamConfig {
            threshold,
            cooldown_s: self.cfg.eval.cooldown_s,
            frame_rate_hz: self.cfg.corpus.frame_rate_hz,
        }
    }

    fn detect(
        &self,
        checkpoint: Option<PathBuf>,
        keywords: &str,
        track: &Path,
        op: &OperatingPoint,
    ) -> CliResult<String> {
        keyword_list(keywords)?;
        let (meta, _) = self.load_corpus()?;
        let specs = self.resolve_keywords(&meta, keywords)?;
        let model = self.load_model(checkpoint)?;
        if !track.exists() {
            return Err(CliError::usage(
                format!("track {} does not exist", track.display()),
                "pass a feature file, e.g. one of <out>/corpus/feats/*.feat",
            ));
        }
        let features = read_features(track)?;
        let enrolled: Vec<Enrolled> = specs
            .iter()
            .map(|k| enroll_keyword(&model, &k.word, &k.phoneme_ids, &self.cfg.window))
            .collect::<clad_core::Result<_>>()?;
        let threshold = match op.threshold {
            Some(t) => t,
            None => {
                let budget = op.fa_budget.unwrap_or(self.cfg.eval.fa_budget);
                let data = self.eval_data(&meta)?;
                let fa = clad_scores(&model, &enrolled, &data.fa)?;
                let all: Vec<usize> = (0..specs.len()).collect();
                calibrate_detector(&fa, &specs, &all, budget, &self.stream_config(0.0))?.threshold
            }
        };
        let mut det = StreamDetector::new(&model, self.stream_config(threshold))?;
        for k in enrolled {
            det.enroll(k)?;
        }
        let mut events: Vec<DetectionEvent> = Vec::new();
        // Feed in 100 ms chunks, as a live source would.
        let chunk = (self.cfg.corpus.frame_rate_hz / 10.0).max(1.0) as usize;
        let mut t = 0;
        while t < features.frames() {
            let end = (t + chunk).min(features.frames());
            events.extend(det.push(&features.rows(t, end))?);
            t = end;
        }
        events.extend(det.finish()?);
        let mut out = String::new();
        for e in &events {
            out.push_str(&e.to_json_line());
            out.push('\n');
        }
        Ok(out)
    }

    fn eval(
        &self,
        checkpoint: Option<PathBuf>,
        fa_budget: Option<usize>,
        ablation: bool,
    ) -> CliResult<String> {
        let (meta, records) = self.load_corpus()?;
        let model = self.load_model(checkpoint)?;
        let data = self.eval_data(&meta)?;
        let mut eval_cfg = self.cfg.eval.clone();
        if let Some(b) = fa_budget {
            eval_cfg.fa_budget = b;
        }
        let (report, roc) = evaluate(
            &model,
            &meta,
            &data,
            &self.cfg.window,
            &self.cfg.labels,
            &eval_cfg,
        )?;
        write_json(&self.out.join("eval_report.json"), &report)?;
        fs::write(self.out.join("roc.csv"), roc_csv(&roc))
            .map_err(|e| CladError::io(self.out.join("roc.csv"), e))?;
        let mut summary = serde_json::json!({
            "recall": report.clad.recall.iter().map(|b| serde_json::json!({
                "keywords": b.keywords, "micro_recall": b.micro_recall, "false_alarms": b.false_alarms,
            })).collect::<Vec<_>>(),
            "auc": report.clad.trials.auc,
            "eer": report.clad.trials.eer,
            "hard_auc": report.clad.trials.hard_auc,
            "baseline_auc": report.baseline.trials.auc,
        });
        if ablation {
            let (train, valid) = split_validation(&records, self.cfg.train.validation_fraction);
            let trials = build_trials(
                &data.trials,
                &meta.lexicon,
                &self.cfg.window,
                &self.cfg.labels,
                &eval_cfg.trials,
            )?;
            let mut train_cfg = self.cfg.train.clone();
            if let Some(n) = self.cfg.ablation.max_epochs {
                train_cfg.max_epochs = n;
            }
            let setup = AblationSetup {
                model: &model.config,
                am: &model.am,
                train: &train,
                valid: &valid,
                trial_records: &data.trials,
                trials: &trials,
                lexicon: &meta.lexicon,
                train_cfg: &train_cfg,
                loss: &self.cfg.loss,
                batching: &self.cfg.batching(),
            };
            let abl = run_ablation(&setup, &self.cfg.ablation.seeds, self.cfg.ablation.alpha)?;
            write_json(&self.out.join("ablation.json"), &abl)?;
            summary["ablation_median_hard_auc_delta"] = abl.median_hard_auc_delta.into();
        }
        Ok(format!("{summary}\n"))
    }

    fn bench(&self, checkpoint: Option<PathBuf>, fa_budget: Option<usize>) -> CliResult<String> {
        let (meta, _) = self.load_corpus()?;
        let model = self.load_model(checkpoint)?;
        let data = self.eval_data(&meta)?;
        let budget = fa_budget.unwrap_or(self.cfg.eval.fa_budget);
        let stream = self.stream_config(0.0);
        let all: Vec<usize> = (0..data.keywords.len()).collect();
        let enrolled: Vec<Enrolled> = data
            .keywords
            .iter()
            .map(|k| enroll_keyword(&model, &k.word, &k.phoneme_ids, &self.cfg.window))
            .collect::<clad_core::Result<_>>()?;
        let clad_t = calibrate_detector(
            &clad_scores(&model, &enrolled, &data.fa)?,
            &data.keywords,
            &all,
            budget,
            &stream,
        )?;
        let base_t = calibrate_detector(
            &baseline_scores(&model.am, &data.keywords, &data.fa, &self.cfg.eval.baseline)?,
            &data.keywords,
            &all,
            budget,
            &stream,
        )?;
        let n = self.cfg.bench.tracks.min(data.test.len());
        let table = run_bench(
            &model,
            &data.keywords,
            &data.test[..n],
            &self.cfg.window,
            &self.cfg.eval.baseline,
            clad_t.threshold,
            base_t.threshold,
            &stream,
            &self.cfg.bench,
        )?;
        write_json(&self.out.join("rsa.json"), &table)?;
        Ok(format!(
            "{}\n",
            serde_json::json!({ "median_rsa": table.median_rsa, "rsa_spread": table.rsa_spread })
        ))
    }
}
