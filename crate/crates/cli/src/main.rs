//! `ehtl` — batch driver for corpus generation, ASR pretraining, downstream
//! depression training, evaluation and the arm-comparison experiment.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure (including a failed gradient check). Data goes to stdout, diagnostics to stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ehtl::corpus::{render_stats, Manifest, Split, SyntheticCorpus, ALPHABET};
use ehtl::dsp::{write_features, write_wav, FeatureConfig};
use ehtl::eval::{render_side_by_side, MetricsReport};
use ehtl::model::{Architecture, DepressionModel, ModelConfig, TaskKind};
use ehtl::tensor::Rng;
use ehtl::trainer::{
    arm_model_architecture, asr_examples, evaluate_sessions, pretrain_asr, run_experiment, session_scores,
    sessions_from_manifest, sessions_from_synthetic, train_downstream, Arm, ExperimentConfig, SessionData,
};
use ehtl::transfer::{Checkpoint, CheckpointMeta, FreezePolicy};
use ehtl::{Error, ErrorKind};

#[derive(Parser, Debug)]
#[command(name = "ehtl", version, about = "Speech depression screening with ASR encoder transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed (corpus, pretraining and downstream training).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true)]
    task: Option<TaskKind>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus: WAVs, manifest.jsonl and stats.csv.
    GenCorpus,
    /// Featurize the corpus, list every kept segment and, with --out, cache
    /// the feature matrices.
    Featurize,
    /// Hybrid CTC/attention pretraining on transcribed train segments.
    Pretrain {
        #[arg(long, value_parser = parse_pretrain_policy)]
        freeze_policy: Option<FreezePolicy>,
    },
    /// Train a downstream model and keep the best-dev parameters.
    Train {
        #[arg(long)]
        arm: Option<Arm>,
    },
    /// Session-level metrics for one split.
    Evaluate {
        #[arg(long, default_value = "dev")]
        split: Split,
        /// Allow reading test labels.
        #[arg(long = "final")]
        final_eval: bool,
    },
    /// Per-session predictions for one split (labels are not read).
    Predict {
        #[arg(long, default_value = "dev")]
        split: Split,
    },
    /// Every arm for every seed, with pairwise DeLong tests.
    Experiment,
    /// Finite-difference gradient checks.
    Gradcheck,
}

fn parse_pretrain_policy(s: &str) -> Result<FreezePolicy, String> {
    match s {
        "tl1" => Ok(FreezePolicy::Tl1),
        "tl2" => Ok(FreezePolicy::Tl2),
        other => Err(format!("expected tl1 or tl2, got '{other}'")),
    }
}

/// Effective configuration. Everything in here is echoed into artifacts.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    /// Applied to the corpus and both training stages when set.
    seed: Option<u64>,
    /// Corpus root holding manifest.jsonl; the experiment synthesizes in
    /// memory when absent.
    corpus_dir: Option<PathBuf>,
    /// Pretrained ASR checkpoint for the TL arms of `train`.
    encoder_checkpoint: Option<PathBuf>,
    /// Downstream checkpoint for `evaluate` and `predict`.
    model_checkpoint: Option<PathBuf>,
    arm: Arm,
    experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            corpus_dir: None,
            encoder_checkpoint: None,
            model_checkpoint: None,
            arm: Arm::Tl1,
            experiment: ExperimentConfig::default(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Error>;

impl RunConfig {
    fn load(cli: &Cli) -> CliResult<Self> {
        let mut cfg = match &cli.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.seed = Some(s);
        }
        if let Some(s) = cfg.seed {
            cfg.experiment.corpus.seed = s;
            cfg.experiment.pretrain.seed = s;
            cfg.experiment.downstream.seed = s;
        }
        if let Some(t) = cli.task {
            cfg.experiment.downstream.task = t;
        }
        match &cli.command {
            Command::Pretrain { freeze_policy: Some(p) } => cfg.experiment.pretrain.freeze_policy = *p,
            Command::Train { arm: Some(a) } => cfg.arm = *a,
            _ => {}
        }
        cfg.experiment.validate()?;
        Ok(cfg)
    }

    fn corpus_dir(&self) -> CliResult<&Path> {
        self.corpus_dir
            .as_deref()
            .ok_or_else(|| Error::Config("corpus_dir is not set".into()))
    }

    fn json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// First line of every CSV artifact.
fn provenance(cfg: &RunConfig, command: &str) -> String {
    format!(
        "# ehtl {command} seed={} config={}\n",
        cfg.seed.map_or("none".into(), |s| s.to_string()),
        serde_json::to_string(&cfg.json()).expect("config serializes")
    )
}

fn prepare_out(out: &Path, force: bool) -> CliResult<()> {
    let occupied = out.exists()
        && fs::read_dir(out)
            .map_err(|e| Error::Config(format!("{}: {e}", out.display())))?
            .next()
            .is_some();
    if occupied {
        if !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                out.display()
            )));
        }
        fs::remove_dir_all(out).map_err(|e| io_err(out, e))?;
    }
    fs::create_dir_all(out).map_err(|e| io_err(out, e))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn out_dir(cli: &Cli) -> CliResult<&Path> {
    cli.out.as_deref().ok_or_else(|| Error::Config("--out is required".into()))
}

/// Loads and featurizes the manifest sessions of the given splits; labels of
/// `withhold` splits are dropped before anything else sees them.
fn load_sessions(cfg: &RunConfig, splits: &[Split], withhold: &[Split]) -> CliResult<Vec<SessionData>> {
    let root = cfg.corpus_dir()?;
    let mut manifest = Manifest::load(&root.join("manifest.jsonl"))?;
    for &s in withhold {
        manifest = manifest.withhold(s);
    }
    let kept = manifest
        .sessions
        .into_iter()
        .filter(|s| splits.contains(&s.split))
        .collect();
    sessions_from_manifest(&Manifest::new(kept)?, root, &cfg.experiment.features)
}

fn gen_corpus(cli: &Cli, cfg: &RunConfig) -> CliResult<()> {
    let out = out_dir(cli)?;
    let corpus = SyntheticCorpus::generate(&cfg.experiment.corpus)?;
    prepare_out(out, cli.force)?;
    let audio = out.join("audio");
    fs::create_dir_all(&audio).map_err(|e| io_err(&audio, e))?;
    for (i, rec) in corpus.manifest.sessions.iter().enumerate() {
        for (r, resp) in rec.responses.iter().enumerate() {
            write_wav(out.join(&resp.wav_path), &corpus.render(i, r)?)?;
        }
    }
    corpus.manifest.save(&out.join("manifest.jsonl"))?;
    let stats = render_stats(&corpus.manifest);
    write(&out.join("stats.csv"), format!("{}{stats}", provenance(cfg, "gen-corpus")))?;
    write(&out.join("corpus.json"), serde_json::to_string_pretty(&cfg.experiment.corpus)?)?;
    print!("{stats}");
    eprintln!("wrote {} sessions to {}", corpus.manifest.sessions.len(), out.display());
    Ok(())
}

fn featurize(cli: &Cli, cfg: &RunConfig) -> CliResult<()> {
    let sessions = load_sessions(cfg, &Split::ALL, &[])?;
    let mut csv = String::from("session_id,split,segment,frames,n_mels,transcribed\n");
    for s in &sessions {
        for (j, seg) in s.segments.iter().enumerate() {
            csv.push_str(&format!(
                "{},{},{j},{},{},{}\n",
                s.session_id,
                s.split,
                seg.features.frames(),
                seg.features.n_mels(),
                seg.transcript.is_some()
            ));
        }
    }
    if let Some(out) = &cli.out {
        prepare_out(out, cli.force)?;
        let dir = out.join("features");
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        for s in &sessions {
            for (j, seg) in s.segments.iter().enumerate() {
                write_features(dir.join(format!("{}_{j}.ehfb", s.session_id)), &seg.features)?;
            }
        }
        write(&out.join("segments.csv"), format!("{}{csv}", provenance(cfg, "featurize")))?;
    }
    print!("{csv}");
    Ok(())
}

fn pretrain(cli: &Cli, cfg: &RunConfig) -> CliResult<()> {
    let out = out_dir(cli)?;
    let sessions = load_sessions(cfg, &[Split::Train, Split::Dev], &[])?;
    let (train, dev): (Vec<_>, Vec<_>) = sessions.into_iter().partition(|s| s.split == Split::Train);
    let a = asr_examples(&train, Split::Train)?;
    let d = asr_examples(&dev, Split::Dev)?;
    let pcfg = &cfg.experiment.pretrain;
    let mut outcome = pretrain_asr(&a, &d, ALPHABET.len(), &cfg.experiment.model, pcfg)?;
    outcome.checkpoint.meta.config = cfg.json();
    prepare_out(out, cli.force)?;
    outcome.checkpoint.save(&out.join("asr.ehck"))?;
    let log = outcome.render_log();
    write(&out.join("pretrain_log.csv"), format!("{}{log}", provenance(cfg, "pretrain")))?;
    print!("{log}");
    eprintln!(
        "policy {} best epoch {} dev CER {:.4}",
        pcfg.freeze_policy.as_str(),
        outcome.best_epoch,
        outcome.best_dev_cer
    );
    Ok(())
}

fn train(cli: &Cli, cfg: &RunConfig) -> CliResult<()> {
    let out = out_dir(cli)?;
    let arm = cfg.arm;
    let encoder = match (arm.pretrain_policy(), &cfg.encoder_checkpoint) {
        (Some(_), Some(p)) => Some(Checkpoint::load(p)?),
        (Some(_), None) => {
            return Err(Error::Config(format!("arm {} needs encoder_checkpoint", arm.as_str())));
        }
        (None, _) => None,
    };
    let sessions = load_sessions(cfg, &[Split::Train, Split::Dev], &[])?;
    let (train, dev): (Vec<_>, Vec<_>) = sessions.into_iter().partition(|s| s.split == Split::Train);
    let dcfg = &cfg.experiment.downstream;
    let arch = arm_model_architecture(arm);
    let outcome = train_downstream(&train, &dev, &cfg.experiment.model, arch, encoder.as_ref(), dcfg)?;
    let (report, _) = evaluate_sessions(&outcome.model, &dev, arm.as_str(), "dev")?;

    let meta = CheckpointMeta {
        model_kind: "depression".into(),
        seed: dcfg.seed,
        step: 0,
        freeze_policy: Some(dcfg.freeze_policy),
        config: cfg.json(),
        extra: [
            ("architecture".to_string(), serde_json::json!(arch)),
            ("task".to_string(), serde_json::json!(dcfg.task)),
            ("arm".to_string(), serde_json::json!(arm)),
            ("model".to_string(), serde_json::json!(cfg.experiment.model)),
            ("features".to_string(), serde_json::json!(cfg.experiment.features)),
            ("best_segment_epoch".to_string(), serde_json::json!(outcome.best_segment_epoch)),
            ("best_fusion_epoch".to_string(), serde_json::json!(outcome.best_fusion_epoch)),
        ]
        .into_iter()
        .collect(),
    };
    prepare_out(out, cli.force)?;
    Checkpoint::from_store(&outcome.model.store, meta).save(&out.join("model.ehck"))?;
    let head = provenance(cfg, "train");
    write(&out.join("train_log.csv"), format!("{head}{}", outcome.render_log()))?;
    let csv = report_csv(&report);
    write(&out.join("dev_report.csv"), format!("{head}{csv}"))?;
    print!("{csv}");
    Ok(())
}

fn report_csv(r: &MetricsReport) -> String {
    let mut s = String::from("arm,split,task,sessions,metric,value\n");
    for (k, v) in &r.metrics {
        s.push_str(&format!("{},{},{},{},{k},{v:?}\n", r.arm, r.split, r.task.as_str(), r.sessions));
    }
    s
}

/// Rebuilds a downstream model from a checkpoint written by `train`.
fn load_model(cfg: &RunConfig) -> CliResult<(DepressionModel, FeatureConfig)> {
    let path = cfg
        .model_checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("model_checkpoint is not set".into()))?;
    let ck = Checkpoint::load(path)?;
    let field = |k: &str| {
        ck.meta
            .extra
            .get(k)
            .cloned()
            .ok_or_else(|| Error::Data(format!("{}: checkpoint lacks `{k}`", path.display())))
    };
    if ck.meta.model_kind != "depression" {
        return Err(Error::Data(format!("{}: not a downstream checkpoint", path.display())));
    }
    let arch: Architecture = serde_json::from_value(field("architecture")?)?;
    let task: TaskKind = serde_json::from_value(field("task")?)?;
    let model_cfg: ModelConfig = serde_json::from_value(field("model")?)?;
    let features: FeatureConfig = serde_json::from_value(field("features")?)?;
    let mut model = DepressionModel::new(&model_cfg, arch, task, &mut Rng::new(0))?;
    ck.restore_into(&mut model.store)?;
    Ok((model, features))
}

fn evaluate(cli: &Cli, cfg: &RunConfig, split: Split, final_eval: bool) -> CliResult<()> {
    if split == Split::Test && !final_eval {
        return Err(Error::LabelsWithheld(
            "test (pass --final for the one-time final evaluation)".into(),
        ));
    }
    let (model, features) = load_model(cfg)?;
    let cfg_feat = RunConfig {
        experiment: ExperimentConfig {
            features,
            ..cfg.experiment.clone()
        },
        ..cfg.clone()
    };
    let sessions = load_sessions(&cfg_feat, &[split], &[])?;
    let (report, _) = evaluate_sessions(&model, &sessions, cfg.arm.as_str(), split.as_str())?;
    let csv = report_csv(&report);
    if let Some(out) = &cli.out {
        write(&out.join(format!("{split}_report.csv")), format!("{}{csv}", provenance(cfg, "evaluate")))?;
    }
    print!("{csv}");
    Ok(())
}

fn predict(cli: &Cli, cfg: &RunConfig, split: Split) -> CliResult<()> {
    let (model, features) = load_model(cfg)?;
    let cfg_feat = RunConfig {
        experiment: ExperimentConfig {
            features,
            ..cfg.experiment.clone()
        },
        ..cfg.clone()
    };
    let sessions = load_sessions(&cfg_feat, &[split], &[split])?;
    let scores = session_scores(&model, &sessions)?;
    let (col, threshold) = match model.task {
        TaskKind::Classification => ("probability", 0.5),
        TaskKind::Regression => ("phq8", ehtl::corpus::PHQ8_THRESHOLD as f64),
    };
    let mut csv = format!("session_id,{col},positive\n");
    for (s, v) in sessions.iter().zip(&scores) {
        csv.push_str(&format!("{},{v:?},{}\n", s.session_id, u8::from(*v >= threshold)));
    }
    if let Some(out) = &cli.out {
        write(&out.join(format!("{split}_predictions.csv")), format!("{}{csv}", provenance(cfg, "predict")))?;
    }
    print!("{csv}");
    Ok(())
}

fn experiment(cli: &Cli, cfg: &RunConfig) -> CliResult<()> {
    let out = out_dir(cli)?;
    let sessions = match &cfg.corpus_dir {
        Some(_) => load_sessions(cfg, &Split::ALL, &[])?,
        None => {
            let corpus = SyntheticCorpus::generate(&cfg.experiment.corpus)?;
            sessions_from_synthetic(&corpus, &cfg.experiment.features)?
        }
    };
    let report = run_experiment(&cfg.experiment, &sessions)?;
    prepare_out(out, cli.force)?;
    let head = provenance(cfg, "experiment");
    let table = report.render_table();
    write(&out.join("table.csv"), format!("{head}{table}"))?;
    write(&out.join("runs.csv"), format!("{head}{}", report.render_runs()))?;
    write(&out.join("comparisons.csv"), format!("{head}{}", report.render_comparisons()))?;
    write(&out.join("report.json"), report.to_json()?)?;
    for r in &report.runs {
        let dir = out.join("runs").join(format!("{}-seed{}", r.arm.as_str(), r.seed));
        write(&dir.join("metrics.csv"), format!("{head}{}", render_side_by_side(&[(&r.dev, &r.test)])))?;
        if !r.pretrain_log.is_empty() {
            let mut log = String::from("epoch,train_loss,dev_loss,dev_cer\n");
            for e in &r.pretrain_log {
                log.push_str(&format!("{},{:?},{:?},{:?}\n", e.epoch, e.train_loss, e.dev_loss, e.dev_cer));
            }
            write(&dir.join("pretrain_log.csv"), format!("{head}{log}"))?;
        }
    }
    print!("{table}");
    Ok(())
}

fn gradcheck() -> CliResult<bool> {
    let results = ehtl::diagnostics::run_gradcheck_suite()?;
    println!("check,parameters,max_rel_error,passed");
    for r in &results {
        println!("{},{},{:e},{}", r.name, r.parameters, r.max_rel_error, r.passed());
    }
    let ok = results.iter().all(|r| r.passed());
    eprintln!(
        "{}/{} checks below {:e}",
        results.iter().filter(|r| r.passed()).count(),
        results.len(),
        ehtl::diagnostics::GRADCHECK_TOLERANCE
    );
    Ok(ok)
}

fn run(cli: &Cli) -> CliResult<bool> {
    if let Ok(n) = std::env::var("EH_NUM_THREADS") {
        let n: usize = n
            .parse()
            .map_err(|_| Error::Config(format!("EH_NUM_THREADS must be a positive integer, got '{n}'")))?;
        // Ignore the error if a pool already exists (e.g. repeated calls in tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    if let Command::Gradcheck = cli.command {
        return gradcheck();
    }
    let cfg = RunConfig::load(cli)?;
    match &cli.command {
        Command::GenCorpus => gen_corpus(cli, &cfg)?,
        Command::Featurize => featurize(cli, &cfg)?,
        Command::Pretrain { .. } => pretrain(cli, &cfg)?,
        Command::Train { .. } => train(cli, &cfg)?,
        Command::Evaluate { split, final_eval } => evaluate(cli, &cfg, *split, *final_eval)?,
        Command::Predict { split } => predict(cli, &cfg, *split)?,
        Command::Experiment => experiment(cli, &cfg)?,
        Command::Gradcheck => unreachable!(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            })
        }
    }
}
