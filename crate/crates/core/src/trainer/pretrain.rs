use super::{apply_update, SessionData, TrainConfig};
use crate::corpus::Split;
use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};
use crate::eval::edit_distance;
use crate::model::{AsrModel, ModelConfig};
use crate::tensor::{Graph, Rng};
use crate::transfer::{apply_freeze, Checkpoint, CheckpointMeta, FreezePolicy};

#[derive(Debug, Clone, Copy)]
pub struct AsrExample<'a> {
    pub id: &'a str,
    pub features: &'a FeatureMatrix,
    pub transcript: &'a [usize],
}

/// Transcribed segments of the sessions in `split`.
///
/// A session whose segments all lack transcripts is reported by id.
pub fn asr_examples(sessions: &[SessionData], split: Split) -> Result<Vec<AsrExample<'_>>> {
    let mut out = Vec::new();
    for s in sessions.iter().filter(|s| s.split == split) {
        let before = out.len();
        for seg in &s.segments {
            if let Some(t) = &seg.transcript {
                out.push(AsrExample {
                    id: &s.session_id,
                    features: &seg.features,
                    transcript: t,
                });
            }
        }
        if out.len() == before {
            return Err(Error::Data(format!("session {} has no transcribed segment", s.session_id)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    /// Corpus-level greedy-CTC character error rate on dev.
    pub dev_cer: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: AsrModel,
    pub checkpoint: Checkpoint,
    pub log: Vec<PretrainEpoch>,
    /// 0 means the initialization was kept.
    pub best_epoch: usize,
    pub best_dev_cer: f64,
}

impl PretrainOutcome {
    pub fn render_log(&self) -> String {
        let mut out = String::from("epoch,train_loss,dev_loss,dev_cer\n");
        for e in &self.log {
            out.push_str(&format!("{},{:?},{:?},{:?}\n", e.epoch, e.train_loss, e.dev_loss, e.dev_cer));
        }
        out
    }
}

fn dev_pass(model: &AsrModel, dev: &[AsrExample], lambda: f64) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let (mut edits, mut total) = (0usize, 0usize);
    for ex in dev {
        let mut g = Graph::inference();
        let l = model.loss(&mut g, ex.features, ex.transcript, lambda)?;
        loss += g.value(l.loss).item();
        let hyp = model.transcribe(ex.features)?;
        edits += edit_distance(ex.transcript, &hyp);
        total += ex.transcript.len();
    }
    Ok((loss / dev.len() as f64, edits as f64 / total.max(1) as f64))
}

/// Hybrid CTC/attention training under `cfg.freeze_policy` (TL-1 or TL-2),
/// keeping the parameters with the best dev loss.
pub fn pretrain_asr(
    train: &[AsrExample],
    dev: &[AsrExample],
    alphabet: usize,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if !matches!(cfg.freeze_policy, FreezePolicy::Tl1 | FreezePolicy::Tl2) {
        return Err(Error::Config(format!(
            "pretraining needs policy tl1 or tl2, got {}",
            cfg.freeze_policy.as_str()
        )));
    }
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Data("pretraining needs non-empty train and dev sets".into()));
    }
    let root = Rng::new(cfg.seed);
    let mut model = AsrModel::new(model_cfg, alphabet, &mut root.derive(1))?;
    apply_freeze(&mut model.store, cfg.freeze_policy)?;
    let mut adam = cfg.adam(cfg.lr);
    let mut order_rng = root.derive(2);

    let (init_loss, init_cer) = dev_pass(&model, dev, cfg.lambda)?;
    let mut best = (init_loss, init_cer, 0usize, model.store.clone());
    let mut log = Vec::new();
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order_rng.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            for &i in batch {
                let ex = &train[i];
                let mut g = Graph::new();
                let l = model.loss(&mut g, ex.features, ex.transcript, cfg.lambda).map_err(|e| match e {
                    Error::InfeasibleAlignment { .. } => Error::Data(format!("session {}: {e}", ex.id)),
                    other => other,
                })?;
                total += g.value(l.loss).item();
                let scaled = g.scale(l.loss, 1.0 / batch.len() as f64);
                g.backward(scaled)?;
                g.accumulate_param_grads(&mut model.store);
            }
            apply_update(&mut model.store, &mut adam, cfg.grad_clip)?;
        }
        let (dev_loss, dev_cer) = dev_pass(&model, dev, cfg.lambda)?;
        log.push(PretrainEpoch {
            epoch,
            train_loss: total / train.len() as f64,
            dev_loss,
            dev_cer,
        });
        if dev_loss < best.0 {
            best = (dev_loss, dev_cer, epoch, model.store.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_dev_cer, best_epoch, store) = best;
    model.store = store;
    let meta = CheckpointMeta {
        model_kind: "asr".into(),
        seed: cfg.seed,
        step: adam.steps(),
        freeze_policy: Some(cfg.freeze_policy),
        config: serde_json::json!({ "model": model_cfg, "train": cfg, "alphabet": alphabet }),
        extra: [
            ("best_epoch".to_string(), serde_json::json!(best_epoch)),
            ("best_dev_cer".to_string(), serde_json::json!(best_dev_cer)),
        ]
        .into_iter()
        .collect(),
    };
    let checkpoint = Checkpoint::from_store(&model.store, meta);
    Ok(PretrainOutcome {
        model,
        checkpoint,
        log,
        best_epoch,
        best_dev_cer,
    })
}
