use super::{apply_update, SessionData, TrainConfig};
use crate::corpus::Split;
use crate::error::{Error, Result};
use crate::eval::{auc, classification_report, regression_report, MetricsReport};
use crate::losses::downstream_loss;
use crate::model::{Architecture, DepressionModel, ModelConfig, TaskKind};
use crate::tensor::{Graph, ParamStore, Rng};
use crate::transfer::{apply_freeze, transfer_encoder, Checkpoint, FreezePolicy, TransferReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Segment,
    Fusion,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct DownstreamEpoch {
    pub stage: Stage,
    pub epoch: usize,
    pub train_loss: f64,
    /// Dev AUC (classification) or RMSE (regression).
    pub dev_metric: f64,
}

#[derive(Debug, Clone)]
pub struct DownstreamOutcome {
    pub model: DepressionModel,
    pub log: Vec<DownstreamEpoch>,
    pub transfer: Option<TransferReport>,
    pub best_segment_epoch: usize,
    pub best_fusion_epoch: usize,
    /// Dev metric of the returned model.
    pub dev_metric: f64,
}

impl DownstreamOutcome {
    pub fn render_log(&self) -> String {
        let mut out = String::from("stage,epoch,train_loss,dev_metric\n");
        for e in &self.log {
            let stage = match e.stage {
                Stage::Segment => "segment",
                Stage::Fusion => "fusion",
            };
            out.push_str(&format!("{stage},{},{:?},{:?}\n", e.epoch, e.train_loss, e.dev_metric));
        }
        out
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Higher is better: AUC, or negated RMSE.
fn dev_objective(task: TaskKind, scores: &[f64], sessions: &[SessionData]) -> Result<(f64, f64)> {
    let targets = sessions.iter().map(|s| s.target(task)).collect::<Result<Vec<_>>>()?;
    match task {
        TaskKind::Classification => {
            let labels: Vec<bool> = targets.iter().map(|&t| t > 0.5).collect();
            let a = auc(scores, &labels)?;
            Ok((a, a))
        }
        TaskKind::Regression => {
            let mse = scores.iter().zip(&targets).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / scores.len() as f64;
            Ok((-mse.sqrt(), mse.sqrt()))
        }
    }
}

fn check_split(sessions: &[SessionData], split: Split, task: TaskKind) -> Result<()> {
    if sessions.is_empty() {
        return Err(Error::Data(format!("{split} split is empty")));
    }
    for s in sessions {
        if s.split != split {
            return Err(Error::Data(format!("session {} is {} but was passed as {split}", s.session_id, s.split)));
        }
        if s.segments.is_empty() {
            return Err(Error::Data(format!("session {} has zero kept segments", s.session_id)));
        }
        s.target(task)?;
    }
    Ok(())
}

fn prior(task: TaskKind, sessions: &[SessionData]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0.0;
    for s in sessions {
        let w = s.segments.len() as f64;
        sum += w * s.target(task)?;
        n += w;
    }
    let mean = sum / n;
    Ok(match task {
        TaskKind::Classification => {
            let p = mean.clamp(1e-3, 1.0 - 1e-3);
            (p / (1.0 - p)).ln()
        }
        TaskKind::Regression => mean,
    })
}

fn embed_all(model: &DepressionModel, sessions: &[SessionData]) -> Result<Vec<(Vec<Vec<f64>>, f64)>> {
    sessions
        .iter()
        .map(|s| {
            let mut embs = Vec::with_capacity(s.segments.len());
            let mut mean = 0.0;
            for seg in &s.segments {
                let (e, p) = model.embed(&seg.features)?;
                embs.push(e);
                mean += p;
            }
            Ok((embs, mean / s.segments.len() as f64))
        })
        .collect()
}

/// Session outputs: probability of +dep, or predicted PHQ-8.
pub fn session_scores(model: &DepressionModel, sessions: &[SessionData]) -> Result<Vec<f64>> {
    embed_all(model, sessions)?
        .iter()
        .map(|(embs, _)| {
            let v = model.fuse_value(embs)?;
            Ok(match model.task {
                TaskKind::Classification => sigmoid(v),
                TaskKind::Regression => v,
            })
        })
        .collect()
}

/// Session-level metrics; every session must carry its label.
pub fn evaluate_sessions(model: &DepressionModel, sessions: &[SessionData], arm: &str, split: &str) -> Result<(MetricsReport, Vec<f64>)> {
    let scores = session_scores(model, sessions)?;
    let targets = sessions.iter().map(|s| s.target(model.task)).collect::<Result<Vec<_>>>()?;
    let report = match model.task {
        TaskKind::Classification => {
            let labels: Vec<bool> = targets.iter().map(|&t| t > 0.5).collect();
            classification_report(arm, split, &scores, &labels)?
        }
        TaskKind::Regression => regression_report(arm, split, &scores, &targets)?,
    };
    Ok((report, scores))
}

fn snapshot_if_better(best: &mut (f64, usize, ParamStore), objective: f64, epoch: usize, store: &ParamStore) -> bool {
    if objective > best.0 {
        *best = (objective, epoch, store.clone());
        true
    } else {
        false
    }
}

/// Stage 1 trains the segment network with every segment inheriting its
/// session label; stage 2 trains the fusion MLP on frozen embeddings.
/// Both stages early-stop on the dev session metric.
///
/// Only train and dev sessions are accepted, so test labels are never seen.
pub fn train_downstream(
    train: &[SessionData],
    dev: &[SessionData],
    model_cfg: &ModelConfig,
    architecture: Architecture,
    encoder: Option<&Checkpoint>,
    cfg: &TrainConfig,
) -> Result<DownstreamOutcome> {
    cfg.validate()?;
    if !matches!(cfg.freeze_policy, FreezePolicy::FinetuneEncoder | FreezePolicy::FreezeEncoder) {
        return Err(Error::Config(format!(
            "downstream training needs finetune_encoder or freeze_encoder, got {}",
            cfg.freeze_policy.as_str()
        )));
    }
    let task = cfg.task;
    check_split(train, Split::Train, task)?;
    check_split(dev, Split::Dev, task)?;

    let root = Rng::new(cfg.seed);
    let mut model = DepressionModel::new(model_cfg, architecture, task, &mut root.derive(11))?;
    let transfer = match encoder {
        Some(ck) => Some(transfer_encoder(ck, &mut model.store)?),
        None => None,
    };
    let p0 = prior(task, train)?;
    *model.segment_output_bias_mut() = p0;
    *model.fusion_output_bias_mut() = p0;

    // Stage 1.
    apply_freeze(&mut model.store, cfg.freeze_policy)?;
    model.store.set_trainable_prefix("fusion.", false);
    let mut items: Vec<(usize, usize)> = train
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.segments.len()).map(move |j| (i, j)))
        .collect();
    let targets = train.iter().map(|s| s.target(task)).collect::<Result<Vec<_>>>()?;
    let mut adam = cfg.adam(cfg.lr);
    let mut order_rng = root.derive(12);
    let mut log = Vec::new();

    let seg_dev = |m: &DepressionModel| -> Result<(f64, f64)> {
        let means: Vec<f64> = embed_all(m, dev)?.into_iter().map(|(_, p)| p).collect();
        dev_objective(task, &means, dev)
    };
    let (obj0, _) = seg_dev(&model)?;
    let mut best = (obj0, 0usize, model.store.clone());
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        order_rng.shuffle(&mut items);
        let mut total = 0.0;
        for batch in items.chunks(cfg.batch_size) {
            for &(i, j) in batch {
                let mut g = Graph::new();
                let out = model.segment(&mut g, &train[i].segments[j].features)?;
                let loss = downstream_loss(&mut g, out.prediction, targets[i], task)?;
                total += g.value(loss).item();
                let scaled = g.scale(loss, 1.0 / batch.len() as f64);
                g.backward(scaled)?;
                g.accumulate_param_grads(&mut model.store);
            }
            apply_update(&mut model.store, &mut adam, cfg.grad_clip)?;
        }
        let (obj, metric) = seg_dev(&model)?;
        log.push(DownstreamEpoch {
            stage: Stage::Segment,
            epoch,
            train_loss: total / items.len() as f64,
            dev_metric: metric,
        });
        if snapshot_if_better(&mut best, obj, epoch, &model.store) {
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let best_segment_epoch = best.1;
    model.store = best.2;

    // Stage 2.
    model.store.set_trainable_prefix("", false);
    model.store.set_trainable_prefix("fusion.", true);
    let train_emb = embed_all(&model, train)?;
    let dev_emb = embed_all(&model, dev)?;
    let fuse_dev = |m: &DepressionModel| -> Result<(f64, f64)> {
        let outs = dev_emb.iter().map(|(e, _)| m.fuse_value(e)).collect::<Result<Vec<_>>>()?;
        dev_objective(task, &outs, dev)
    };
    let mut adam = cfg.adam(cfg.fusion_lr);
    let (obj0, _) = fuse_dev(&model)?;
    let mut best = (obj0, 0usize, model.store.clone());
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.fusion_epochs {
        order_rng.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            for &i in batch {
                let mut g = Graph::new();
                let out = model.fuse(&mut g, &train_emb[i].0)?;
                let loss = downstream_loss(&mut g, out, targets[i], task)?;
                total += g.value(loss).item();
                let scaled = g.scale(loss, 1.0 / batch.len() as f64);
                g.backward(scaled)?;
                g.accumulate_param_grads(&mut model.store);
            }
            apply_update(&mut model.store, &mut adam, cfg.grad_clip)?;
        }
        let (obj, metric) = fuse_dev(&model)?;
        log.push(DownstreamEpoch {
            stage: Stage::Fusion,
            epoch,
            train_loss: total / train.len() as f64,
            dev_metric: metric,
        });
        if snapshot_if_better(&mut best, obj, epoch, &model.store) {
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let best_fusion_epoch = best.1;
    model.store = best.2;
    model.store.set_trainable_prefix("", true);
    let dev_metric = match task {
        TaskKind::Classification => best.0,
        TaskKind::Regression => -best.0,
    };
    Ok(DownstreamOutcome {
        model,
        log,
        transfer,
        best_segment_epoch,
        best_fusion_epoch,
        dev_metric,
    })
}
