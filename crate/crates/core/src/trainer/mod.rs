//! Training loops: hybrid-loss ASR pretraining, two-stage downstream
//! training, and the multi-arm experiment harness.

mod downstream;
mod experiment;
mod pretrain;

use std::path::Path;

pub use downstream::{
    evaluate_sessions, session_scores, train_downstream, DownstreamEpoch, DownstreamOutcome, Stage,
};
pub use experiment::{
    arm_model_architecture, run_experiment, Arm, ArmRun, Comparison, ExperimentConfig, ExperimentReport,
};
pub use pretrain::{asr_examples, pretrain_asr, AsrExample, PretrainEpoch, PretrainOutcome};

use crate::corpus::{encode_transcript, segment_response, Manifest, SessionRecord, Split, SyntheticCorpus};
use crate::dsp::{load_wav, log_mel, per_utterance_normalize, AudioBuffer, FeatureConfig, FeatureMatrix};
use crate::error::{Error, Result};
use crate::model::TaskKind;
use crate::tensor::{AdamConfig, AdamState, ParamStore};
use crate::transfer::FreezePolicy;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub lr: f64,
    pub seed: u64,
    pub freeze_policy: FreezePolicy,
    pub task: TaskKind,
    /// Hybrid CTC weight.
    pub lambda: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Stage-2 (fusion) epoch budget; shares `patience`.
    pub fusion_epochs: usize,
    pub fusion_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            max_epochs: 20,
            patience: 3,
            lr: 2e-3,
            seed: 0,
            freeze_policy: FreezePolicy::Tl1,
            task: TaskKind::Classification,
            lambda: 0.5,
            grad_clip: 5.0,
            fusion_epochs: 40,
            fusion_lr: 5e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size and patience must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.fusion_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0,1]", self.lambda)));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::Config("grad_clip must be >= 0".into()));
        }
        Ok(())
    }

    pub(crate) fn adam(&self, lr: f64) -> AdamState {
        AdamState::new(AdamConfig {
            lr,
            ..AdamConfig::default()
        })
    }
}

/// One model input: a featurized segment plus its transcript when the
/// segment covers a whole transcribed response.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentData {
    pub features: FeatureMatrix,
    pub transcript: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionData {
    pub session_id: String,
    pub speaker_id: String,
    pub split: Split,
    pub phq8: Option<i64>,
    pub segments: Vec<SegmentData>,
}

impl SessionData {
    /// Label as a regression or classification target.
    pub fn target(&self, task: TaskKind) -> Result<f64> {
        let score = self
            .phq8
            .ok_or_else(|| Error::LabelsWithheld(format!("session {} has no label", self.session_id)))?;
        Ok(match task {
            TaskKind::Classification => f64::from(u8::from(crate::corpus::phq8_to_binary(score)?)),
            TaskKind::Regression => score as f64,
        })
    }

    pub fn withheld(&self) -> Self {
        Self {
            phq8: None,
            ..self.clone()
        }
    }
}

/// Segments and featurizes one response.
pub fn featurize_response(audio: &AudioBuffer, transcript: Option<&str>, cfg: &FeatureConfig) -> Result<Vec<SegmentData>> {
    let segs = segment_response(audio.samples().len(), audio.sample_rate(), 0)?;
    let transcript = match transcript {
        Some(t) if segs.len() == 1 => Some(encode_transcript(t)?),
        _ => None,
    };
    segs.iter()
        .map(|s| {
            let f = log_mel(&audio.slice(s.start..s.end)?, cfg)?;
            Ok(SegmentData {
                features: per_utterance_normalize(&f),
                transcript: transcript.clone(),
            })
        })
        .collect()
}

fn session_data(rec: &SessionRecord, segments: Vec<SegmentData>) -> Result<SessionData> {
    if segments.is_empty() {
        return Err(Error::Data(format!("session {} has no usable segments", rec.session_id)));
    }
    Ok(SessionData {
        session_id: rec.session_id.clone(),
        speaker_id: rec.speaker_id.clone(),
        split: rec.split,
        phq8: rec.phq8,
        segments,
    })
}

/// Renders and featurizes a synthetic corpus in memory.
pub fn sessions_from_synthetic(corpus: &SyntheticCorpus, cfg: &FeatureConfig) -> Result<Vec<SessionData>> {
    use rayon::prelude::*;
    cfg.validate()?;
    if cfg.sample_rate != corpus.config.sample_rate {
        return Err(Error::Config(format!(
            "feature sample rate {} differs from corpus rate {}",
            cfg.sample_rate, corpus.config.sample_rate
        )));
    }
    corpus
        .manifest
        .sessions
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let mut segs = Vec::new();
            for (r, resp) in rec.responses.iter().enumerate() {
                let audio = corpus.render(i, r)?;
                segs.extend(featurize_response(&audio, resp.transcript.as_deref(), cfg)?);
            }
            session_data(rec, segs)
        })
        .collect()
}

/// Loads and featurizes every session of a manifest whose WAV paths are
/// relative to `root`.
pub fn sessions_from_manifest(manifest: &Manifest, root: &Path, cfg: &FeatureConfig) -> Result<Vec<SessionData>> {
    use rayon::prelude::*;
    cfg.validate()?;
    manifest
        .sessions
        .par_iter()
        .map(|rec| {
            let mut segs = Vec::new();
            for resp in &rec.responses {
                let audio = load_wav(root.join(&resp.wav_path))?;
                if audio.sample_rate() != cfg.sample_rate {
                    return Err(Error::Data(format!(
                        "{}: sample rate {} but features expect {}",
                        resp.wav_path,
                        audio.sample_rate(),
                        cfg.sample_rate
                    )));
                }
                segs.extend(featurize_response(&audio, resp.transcript.as_deref(), cfg)?);
            }
            session_data(rec, segs)
        })
        .collect()
}

/// Zero-fills gradients of trainable parameters the graph never reached,
/// clips, applies one Adam update and clears the gradients.
pub(crate) fn apply_update(store: &mut ParamStore, adam: &mut AdamState, clip: f64) -> Result<()> {
    for p in store.iter_mut() {
        if p.trainable && p.grad.is_none() {
            p.grad = Some(vec![0.0; p.tensor.len()]);
        }
    }
    let norm = store.grad_norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    if clip > 0.0 && norm > clip {
        store.scale_grads(clip / norm);
    }
    adam.step(store)?;
    store.zero_grads();
    Ok(())
}
