//! Finite-difference gradient checks over every layer type and the composed
//! models, at micro sizes.

use crate::dsp::FeatureMatrix;
use crate::error::Result;
use crate::losses::downstream_loss;
use crate::model::layers::{Conv, Linear, Lstm, Rnn};
use crate::model::{
    Architecture, AsrModel, DecoderConfig, DepressionModel, EncoderConfig, FusionConfig, LstmBaselineConfig,
    ModelConfig, RcnnConfig, RcnnHead, TaskKind,
};
use crate::tensor::{grad_check_params, Graph, ParamStore, Rng, Tensor, Var};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GradCheckResult {
    pub name: &'static str,
    pub parameters: usize,
    pub max_rel_error: f64,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

fn randomize(store: &mut ParamStore, rng: &mut Rng) {
    for p in store.iter_mut() {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = rng.normal(0.0, 0.5));
    }
}

fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal(0.0, 1.0)).collect()).expect("valid shape")
}

fn features(frames: usize, n_mels: usize, rng: &mut Rng) -> FeatureMatrix {
    FeatureMatrix::new(frames, n_mels, random_tensor(&[frames, n_mels], rng).into_data(), String::new())
        .expect("valid features")
}

/// Weighted sum of all entries so every output coordinate matters.
fn probe(g: &mut Graph, y: Var, rng_seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = random_tensor(&shape, &mut Rng::new(rng_seed));
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

fn micro_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            n_mels: 6,
            conv_channels: vec![2, 2],
            kernel: (3, 3),
            stride: (2, 2),
            padding: (1, 1),
            lstm_layers: 2,
            hidden: 3,
        },
        decoder: DecoderConfig {
            embed: 2,
            hidden: 3,
            attention: 2,
        },
        head: RcnnConfig {
            context: 2,
            projection: 3,
            embedding: 2,
        },
        fusion: FusionConfig { hidden: 2 },
        baseline: LstmBaselineConfig {
            frame_stack: 2,
            hidden: 3,
            embedding: 2,
        },
    }
}

fn check<F>(name: &'static str, store: &ParamStore, f: F) -> Result<GradCheckResult>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    Ok(GradCheckResult {
        name,
        parameters: store.numel(),
        max_rel_error: grad_check_params(f, store, STEP)?,
    })
}

/// Runs every check; errors only on construction failures, never on a
/// tolerance miss (inspect [`GradCheckResult::passed`]).
pub fn run_gradcheck_suite() -> Result<Vec<GradCheckResult>> {
    let mut rng = Rng::new(0x6c);
    let mut out = Vec::new();

    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, "lin", 4, 3, &mut rng)?;
    randomize(&mut s, &mut rng);
    let x = random_tensor(&[5, 4], &mut rng);
    out.push(check("linear", &s, |g, st| {
        let xv = g.constant(x.clone());
        let y = lin.forward(g, st, xv)?;
        let y = g.tanh(y);
        probe(g, y, 1)
    })?);

    let mut s = ParamStore::new();
    let lstm = Lstm::new(&mut s, "lstm", 3, 4, &mut rng)?;
    randomize(&mut s, &mut rng);
    let x = random_tensor(&[6, 3], &mut rng);
    out.push(check("lstm", &s, |g, st| {
        let xv = g.constant(x.clone());
        let y = lstm.forward(g, st, xv)?;
        probe(g, y, 2)
    })?);

    let mut s = ParamStore::new();
    let rnn = Rnn::new(&mut s, "rnn", 3, 2, &mut rng)?;
    randomize(&mut s, &mut rng);
    let x = random_tensor(&[5, 3], &mut rng);
    out.push(check("rnn_context", &s, |g, st| {
        let xv = g.constant(x.clone());
        let l = rnn.context(g, st, xv, false)?;
        let r = rnn.context(g, st, xv, true)?;
        let y = g.concat_cols(&[l, r])?;
        probe(g, y, 3)
    })?);

    let mut s = ParamStore::new();
    let conv = Conv::new(&mut s, "conv", 2, 3, (3, 2), (2, 1), (1, 1), &mut rng)?;
    randomize(&mut s, &mut rng);
    let x = random_tensor(&[2, 7, 5], &mut rng);
    out.push(check("conv", &s, |g, st| {
        let xv = g.constant(x.clone());
        let y = conv.forward(g, st, xv)?;
        probe(g, y, 4)
    })?);

    let cfg = micro_config();
    let mut s = ParamStore::new();
    let enc = crate::model::Encoder::new(&mut s, &cfg.encoder, &mut rng)?;
    randomize(&mut s, &mut rng);
    let f1 = features(11, 6, &mut rng);
    out.push(check("encoder", &s, |g, st| {
        let y = enc.forward(g, st, &f1)?;
        probe(g, y, 5)
    })?);

    let mut s = ParamStore::new();
    let head = RcnnHead::new(&mut s, 3, &cfg.head, &mut rng)?;
    randomize(&mut s, &mut rng);
    let x = random_tensor(&[5, 3], &mut rng);
    out.push(check("rcnn_head", &s, |g, st| {
        let xv = g.constant(x.clone());
        let o = head.forward(g, st, xv)?;
        let a = probe(g, o.embedding, 6)?;
        let b = g.sum(o.prediction);
        g.add(a, b)
    })?);

    let mut s = ParamStore::new();
    let fusion = crate::model::FusionMlp::new(&mut s, 3, &cfg.fusion, &mut rng)?;
    randomize(&mut s, &mut rng);
    let embs: Vec<Tensor> = (0..3).map(|_| random_tensor(&[1, 3], &mut rng)).collect();
    out.push(check("fusion", &s, |g, st| {
        let vars: Vec<Var> = embs.iter().map(|e| g.constant(e.clone())).collect();
        let y = fusion.forward(g, st, &vars)?;
        downstream_loss(g, y, 1.0, TaskKind::Classification)
    })?);

    let mut asr = AsrModel::new(&cfg, 3, &mut rng)?;
    randomize(&mut asr.store, &mut rng);
    let f_asr = features(13, 6, &mut rng);
    out.push(check("asr_hybrid_loss", &asr.store, |g, st| {
        Ok(asr.loss_in(g, st, &f_asr, &[0, 2, 2], 0.5)?.loss)
    })?);

    for (name, arch, task, target) in [
        ("model_classification", Architecture::Ehac, TaskKind::Classification, 1.0),
        ("model_regression", Architecture::Ehac, TaskKind::Regression, 3.0),
        ("lstm_baseline", Architecture::Lstm, TaskKind::Classification, 0.0),
    ] {
        let mut m = DepressionModel::new(&cfg, arch, task, &mut rng)?;
        randomize(&mut m.store, &mut rng);
        let segs = [features(11, 6, &mut rng), features(9, 6, &mut rng)];
        out.push(check(name, &m.store, |g, st| {
            let mut embs = Vec::new();
            let mut seg_loss = Vec::new();
            for f in &segs {
                let o = m.segment_in(g, st, f)?;
                embs.push(o.embedding);
                seg_loss.push(downstream_loss(g, o.prediction, target, task)?);
            }
            let fused = m.fusion.forward(g, st, &embs)?;
            let mut total = downstream_loss(g, fused, target, task)?;
            for l in seg_loss {
                total = g.add(total, l)?;
            }
            Ok(total)
        })?);
    }
    Ok(out)
}

/// A deliberately broken check: the analytic pass sees the loss with its
/// sign flipped, as a backward rule with a sign error would. The suite must
/// flag it.
pub fn sign_flip_fixture() -> Result<GradCheckResult> {
    let mut rng = Rng::new(0x5f);
    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, "lin", 3, 2, &mut rng)?;
    randomize(&mut s, &mut rng);
    let x = random_tensor(&[4, 3], &mut rng);
    check("sign_flip_fixture", &s, |g, st| {
        let xv = g.constant(x.clone());
        let y = lin.forward(g, st, xv)?;
        let y = g.tanh(y);
        let l = probe(g, y, 7)?;
        Ok(if g.records_grads() { g.scale(l, -1.0) } else { l })
    })
}
