use rayon::prelude::*;

use super::{asr_examples, pretrain_asr, train_downstream, evaluate_sessions, PretrainEpoch, SessionData, TrainConfig};
use crate::corpus::{Split, SyntheticCorpusConfig, ALPHABET};
use crate::dsp::FeatureConfig;
use crate::error::{Error, Result};
use crate::eval::{delong_test, DeLongResult, MetricsReport};
use crate::model::{Architecture, ModelConfig, TaskKind};
use crate::transfer::FreezePolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Encoder trained from random initialization.
    Scratch,
    /// Encoder from pretraining with every weight updated.
    Tl1,
    /// Encoder from pretraining with decoder and CTC head frozen.
    Tl2,
    LstmBaseline,
}

impl Arm {
    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Scratch => "scratch",
            Arm::Tl1 => "tl1",
            Arm::Tl2 => "tl2",
            Arm::LstmBaseline => "lstm_baseline",
        }
    }

    /// Row label in comparison tables.
    pub fn display(self) -> &'static str {
        match self {
            Arm::Scratch => "EH-AC",
            Arm::Tl1 => "EH-AC+TL-1",
            Arm::Tl2 => "EH-AC+TL-2",
            Arm::LstmBaseline => "LSTM",
        }
    }

    pub fn pretrain_policy(self) -> Option<FreezePolicy> {
        match self {
            Arm::Tl1 => Some(FreezePolicy::Tl1),
            Arm::Tl2 => Some(FreezePolicy::Tl2),
            Arm::Scratch | Arm::LstmBaseline => None,
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(Arm::Scratch),
            "tl1" => Ok(Arm::Tl1),
            "tl2" => Ok(Arm::Tl2),
            "lstm_baseline" => Ok(Arm::LstmBaseline),
            other => Err(Error::Config(format!("unknown arm '{other}'"))),
        }
    }
}

pub fn arm_model_architecture(arm: Arm) -> Architecture {
    match arm {
        Arm::LstmBaseline => Architecture::Lstm,
        _ => Architecture::Ehac,
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub corpus: SyntheticCorpusConfig,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub downstream: TrainConfig,
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        use crate::model::{DecoderConfig, EncoderConfig, FusionConfig, LstmBaselineConfig, RcnnConfig};
        let n_mels = 24;
        Self {
            corpus: SyntheticCorpusConfig::default(),
            features: FeatureConfig {
                n_mels,
                ..FeatureConfig::default()
            },
            model: ModelConfig {
                encoder: EncoderConfig {
                    n_mels,
                    conv_channels: vec![8, 8],
                    kernel: (3, 3),
                    stride: (2, 2),
                    padding: (1, 1),
                    lstm_layers: 1,
                    hidden: 32,
                },
                decoder: DecoderConfig {
                    embed: 8,
                    hidden: 32,
                    attention: 16,
                },
                head: RcnnConfig {
                    context: 16,
                    projection: 32,
                    embedding: 16,
                },
                fusion: FusionConfig { hidden: 16 },
                baseline: LstmBaselineConfig {
                    frame_stack: 4,
                    hidden: 32,
                    embedding: 16,
                },
            },
            pretrain: TrainConfig {
                max_epochs: 30,
                patience: 4,
                lr: 3e-3,
                freeze_policy: FreezePolicy::Tl1,
                ..TrainConfig::default()
            },
            downstream: TrainConfig {
                max_epochs: 6,
                patience: 3,
                lr: 5e-4,
                freeze_policy: FreezePolicy::FinetuneEncoder,
                ..TrainConfig::default()
            },
            arms: vec![Arm::Scratch, Arm::Tl1, Arm::Tl2],
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.features.validate()?;
        self.model.encoder.validate()?;
        self.pretrain.validate()?;
        self.downstream.validate()?;
        if self.features.n_mels != self.model.encoder.n_mels {
            return Err(Error::Config("features.n_mels must equal model.encoder.n_mels".into()));
        }
        if self.arms.len() < 2 {
            return Err(Error::Config("an experiment needs at least 2 arms".into()));
        }
        if self.seeds.len() < 3 {
            return Err(Error::Config("an experiment needs at least 3 seeds".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ArmRun {
    pub arm: Arm,
    pub seed: u64,
    pub dev: MetricsReport,
    pub test: MetricsReport,
    pub test_scores: Vec<f64>,
    /// Best-checkpoint dev CER of the arm's pretraining, if any.
    pub pretrain_cer: Option<f64>,
    pub pretrain_log: Vec<PretrainEpoch>,
    pub best_segment_epoch: usize,
    pub best_fusion_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Comparison {
    pub seed: u64,
    pub arm_a: Arm,
    pub arm_b: Arm,
    pub delong: DeLongResult,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub test_sessions: Vec<String>,
    pub runs: Vec<ArmRun>,
    pub comparisons: Vec<Comparison>,
}

impl ExperimentReport {
    pub fn run(&self, arm: Arm, seed: u64) -> Option<&ArmRun> {
        self.runs.iter().find(|r| r.arm == arm && r.seed == seed)
    }

    pub fn comparison(&self, a: Arm, b: Arm, seed: u64) -> Option<&Comparison> {
        self.comparisons
            .iter()
            .find(|c| c.seed == seed && c.arm_a == a && c.arm_b == b)
    }

    /// Mean of a metric over seeds for one arm and split.
    pub fn mean_metric(&self, arm: Arm, split: Split, metric: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.arm == arm)
            .filter_map(|r| {
                let rep = if split == Split::Test { &r.test } else { &r.dev };
                rep.metrics.get(metric).copied()
            })
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// One row per (arm, split), metrics averaged over seeds, two decimals.
    pub fn render_table(&self) -> String {
        let metrics: &[&str] = match self.config.downstream.task {
            TaskKind::Classification => &["auc", "specificity", "sensitivity"],
            TaskKind::Regression => &["rmse", "mae", "pcc"],
        };
        let mut out = format!("model,{},pretrain_cer\n", metrics.join(","));
        for &arm in &self.config.arms {
            for split in [Split::Dev, Split::Test] {
                let cols: Vec<String> = metrics
                    .iter()
                    .map(|m| self.mean_metric(arm, split, m).map_or("NA".into(), |v| format!("{v:.2}")))
                    .collect();
                let cers: Vec<f64> = self.runs.iter().filter(|r| r.arm == arm).filter_map(|r| r.pretrain_cer).collect();
                let cer = if cers.is_empty() {
                    "NA".to_string()
                } else {
                    format!("{:.2}", cers.iter().sum::<f64>() / cers.len() as f64)
                };
                out.push_str(&format!("{}/{},{},{}\n", arm.display(), split, cols.join(","), cer));
            }
        }
        out
    }

    /// Per-seed, per-arm dev and test metrics at full precision.
    pub fn render_runs(&self) -> String {
        let mut out = String::from("seed,arm,split,metric,value\n");
        for r in &self.runs {
            for rep in [&r.dev, &r.test] {
                for (k, v) in &rep.metrics {
                    out.push_str(&format!("{},{},{},{k},{v:?}\n", r.seed, r.arm.as_str(), rep.split));
                }
            }
            if let Some(c) = r.pretrain_cer {
                out.push_str(&format!("{},{},dev,pretrain_cer,{c:?}\n", r.seed, r.arm.as_str()));
            }
        }
        out
    }

    pub fn render_comparisons(&self) -> String {
        let mut out = String::from("seed,arm_a,arm_b,auc_a,auc_b,z,p_value,degenerate\n");
        for c in &self.comparisons {
            out.push_str(&format!(
                "{},{},{},{:?},{:?},{:?},{:?},{}\n",
                c.seed,
                c.arm_a.as_str(),
                c.arm_b.as_str(),
                c.delong.auc_a,
                c.delong.auc_b,
                c.delong.z,
                c.delong.p_value,
                c.delong.degenerate
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn run_arm(cfg: &ExperimentConfig, arm: Arm, seed: u64, train: &[SessionData], dev: &[SessionData], test: &[SessionData]) -> Result<ArmRun> {
    let (checkpoint, pretrain_cer, pretrain_log) = match arm.pretrain_policy() {
        Some(policy) => {
            let asr_train = asr_examples(train, Split::Train)?;
            let asr_dev = asr_examples(dev, Split::Dev)?;
            let pcfg = TrainConfig {
                seed,
                freeze_policy: policy,
                ..cfg.pretrain.clone()
            };
            let out = pretrain_asr(&asr_train, &asr_dev, ALPHABET.len(), &cfg.model, &pcfg)?;
            (Some(out.checkpoint), Some(out.best_dev_cer), out.log)
        }
        None => (None, None, Vec::new()),
    };
    let dcfg = TrainConfig {
        seed,
        ..cfg.downstream.clone()
    };
    let out = train_downstream(train, dev, &cfg.model, arm_model_architecture(arm), checkpoint.as_ref(), &dcfg)?;
    let (dev_report, _) = evaluate_sessions(&out.model, dev, arm.as_str(), "dev")?;
    let (test_report, test_scores) = evaluate_sessions(&out.model, test, arm.as_str(), "test")?;
    Ok(ArmRun {
        arm,
        seed,
        dev: dev_report,
        test: test_report,
        test_scores,
        pretrain_cer,
        pretrain_log,
        best_segment_epoch: out.best_segment_epoch,
        best_fusion_epoch: out.best_fusion_epoch,
    })
}

/// Trains every arm for every seed and compares arms pairwise with
/// DeLong's test on the shared test split.
///
/// Training sees train and dev sessions only; test labels are read solely
/// by the final evaluation.
pub fn run_experiment(cfg: &ExperimentConfig, sessions: &[SessionData]) -> Result<ExperimentReport> {
    cfg.validate()?;
    let pick = |split| sessions.iter().filter(|s| s.split == split).cloned().collect::<Vec<_>>();
    let (train, dev, test) = (pick(Split::Train), pick(Split::Dev), pick(Split::Test));
    if test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let jobs: Vec<(u64, Arm)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| cfg.arms.iter().map(move |&a| (s, a)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(seed, arm)| run_arm(cfg, arm, seed, &train, &dev, &test))
        .collect::<Result<Vec<_>>>()?;

    let test_sessions: Vec<String> = test.iter().map(|s| s.session_id.clone()).collect();
    let mut comparisons = Vec::new();
    if cfg.downstream.task == TaskKind::Classification {
        let labels = test
            .iter()
            .map(|s| s.target(TaskKind::Classification).map(|t| t > 0.5))
            .collect::<Result<Vec<_>>>()?;
        for &seed in &cfg.seeds {
            for (i, &a) in cfg.arms.iter().enumerate() {
                for &b in &cfg.arms[i..] {
                    let ra = runs.iter().find(|r| r.arm == a && r.seed == seed).expect("run exists");
                    let rb = runs.iter().find(|r| r.arm == b && r.seed == seed).expect("run exists");
                    if ra.test_scores.len() != test_sessions.len() || rb.test_scores.len() != test_sessions.len() {
                        return Err(Error::Data("arms were evaluated on different test sets".into()));
                    }
                    comparisons.push(Comparison {
                        seed,
                        arm_a: a,
                        arm_b: b,
                        delong: delong_test(&ra.test_scores, &rb.test_scores, &labels)?,
                    });
                }
            }
        }
    }
    Ok(ExperimentReport {
        config: cfg.clone(),
        test_sessions,
        runs,
        comparisons,
    })
}
