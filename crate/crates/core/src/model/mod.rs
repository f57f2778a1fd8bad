//! Network definitions: the conv+LSTM encoder, the ASR branch used only for
//! pretraining, the RCNN segment head, session fusion and an LSTM baseline.

mod baseline;
mod decoder;
mod encoder;
mod fusion;
pub mod layers;
mod rcnn;

use std::collections::BTreeMap;

pub use baseline::{LstmBaseline, LstmBaselineConfig};
pub use decoder::{greedy_ctc_decode, AsrDecoder, AsrOutput, DecoderConfig};
pub use encoder::{Encoder, EncoderConfig};
pub use fusion::{FusionConfig, FusionMlp};
pub use rcnn::{RcnnConfig, RcnnHead, SegmentOutput};

use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Rng, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum TaskKind {
    #[serde(rename = "cls")]
    Classification,
    #[serde(rename = "reg")]
    Regression,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Classification => "cls",
            TaskKind::Regression => "reg",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(TaskKind::Classification),
            "reg" => Ok(TaskKind::Regression),
            other => Err(Error::Config(format!("unknown task '{other}' (expected cls or reg)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Conv+LSTM encoder with the RCNN head.
    Ehac,
    /// Frame-stacked LSTM baseline.
    Lstm,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub head: RcnnConfig,
    pub fusion: FusionConfig,
    pub baseline: LstmBaselineConfig,
}


/// Parameter counts grouped by top-level name prefix, plus `total`.
pub fn parameter_census(store: &ParamStore) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    let mut total = 0;
    for (_, p) in store.iter() {
        let group = p.name.split('.').next().unwrap_or("").to_string();
        let n = p.tensor.len();
        *out.entry(group).or_insert(0) += n;
        total += n;
    }
    out.insert("total".into(), total);
    out
}

/// Hybrid CTC/attention recognizer used for pretraining.
#[derive(Debug, Clone)]
pub struct AsrModel {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: AsrDecoder,
}

/// Scalar parts of one hybrid-loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct AsrLoss {
    pub loss: Var,
    pub ctc: f64,
    pub attention: f64,
}

impl AsrModel {
    pub fn new(cfg: &ModelConfig, alphabet: usize, rng: &mut Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &cfg.encoder, rng)?;
        let decoder = AsrDecoder::new(&mut store, encoder.hidden(), alphabet, &cfg.decoder, rng)?;
        Ok(Self {
            store,
            encoder,
            decoder,
        })
    }

    pub fn loss(&self, g: &mut Graph, features: &FeatureMatrix, transcript: &[usize], lambda: f64) -> Result<AsrLoss> {
        self.loss_in(g, &self.store, features, transcript, lambda)
    }

    /// Hybrid loss with parameters read from `store` (same layout as `self.store`).
    pub fn loss_in(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: &FeatureMatrix,
        transcript: &[usize],
        lambda: f64,
    ) -> Result<AsrLoss> {
        let enc = self.encoder.forward(g, store, features)?;
        let out = self.decoder.forward(g, store, enc, transcript)?;
        let lp = g.log_softmax_rows(out.ctc_logits)?;
        let ctc = crate::losses::ctc_loss(g, lp, transcript, self.decoder.blank())?;
        let att = crate::losses::attention_ce(g, out.attention_logits, transcript)?;
        let loss = crate::losses::hybrid_loss(g, ctc, att, lambda)?;
        Ok(AsrLoss {
            loss,
            ctc: g.value(ctc).item(),
            attention: g.value(att).item(),
        })
    }

    /// Greedy CTC transcription.
    pub fn transcribe(&self, features: &FeatureMatrix) -> Result<Vec<usize>> {
        let mut g = Graph::inference();
        let enc = self.encoder.forward(&mut g, &self.store, features)?;
        let logits = self.decoder.ctc_logits(&mut g, &self.store, enc)?;
        Ok(greedy_ctc_decode(g.value(logits), self.decoder.blank()))
    }
}

#[derive(Debug, Clone)]
pub enum SegmentNet {
    Ehac { encoder: Encoder, head: RcnnHead },
    Lstm(LstmBaseline),
}

/// Segment-level network plus the session fusion MLP.
#[derive(Debug, Clone)]
pub struct DepressionModel {
    pub store: ParamStore,
    pub task: TaskKind,
    pub architecture: Architecture,
    pub net: SegmentNet,
    pub fusion: FusionMlp,
}

impl DepressionModel {
    pub fn new(cfg: &ModelConfig, architecture: Architecture, task: TaskKind, rng: &mut Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let (net, emb) = match architecture {
            Architecture::Ehac => {
                let encoder = Encoder::new(&mut store, &cfg.encoder, rng)?;
                let head = RcnnHead::new(&mut store, encoder.hidden(), &cfg.head, rng)?;
                let e = head.embedding_dim();
                (SegmentNet::Ehac { encoder, head }, e)
            }
            Architecture::Lstm => {
                let b = LstmBaseline::new(&mut store, cfg.encoder.n_mels, &cfg.baseline, rng)?;
                let e = b.embedding_dim();
                (SegmentNet::Lstm(b), e)
            }
        };
        let fusion = FusionMlp::new(&mut store, emb, &cfg.fusion, rng)?;
        Ok(Self {
            store,
            task,
            architecture,
            net,
            fusion,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.fusion.in_dim
    }

    /// Fewest feature frames a segment may have.
    pub fn min_frames(&self) -> usize {
        match &self.net {
            SegmentNet::Ehac { encoder, .. } => encoder.config.min_frames(),
            SegmentNet::Lstm(b) => b.config.frame_stack,
        }
    }

    pub fn segment(&self, g: &mut Graph, features: &FeatureMatrix) -> Result<SegmentOutput> {
        self.segment_in(g, &self.store, features)
    }

    /// Segment forward pass with parameters read from `store`.
    pub fn segment_in(&self, g: &mut Graph, store: &ParamStore, features: &FeatureMatrix) -> Result<SegmentOutput> {
        match &self.net {
            SegmentNet::Ehac { encoder, head } => {
                let h = encoder.forward(g, store, features)?;
                head.forward(g, store, h)
            }
            SegmentNet::Lstm(b) => b.forward(g, store, features),
        }
    }

    /// Inference-only segment embedding and prediction.
    pub fn embed(&self, features: &FeatureMatrix) -> Result<(Vec<f64>, f64)> {
        let mut g = Graph::inference();
        let out = self.segment(&mut g, features)?;
        Ok((g.value(out.embedding).data().to_vec(), g.value(out.prediction).item()))
    }

    pub fn fuse(&self, g: &mut Graph, embeddings: &[Vec<f64>]) -> Result<Var> {
        let vars = embeddings
            .iter()
            .map(|e| Tensor::new(vec![1, e.len()], e.clone()).map(|t| g.constant(t)))
            .collect::<Result<Vec<_>>>()?;
        self.fusion.forward(g, &self.store, &vars)
    }

    /// Session output from precomputed segment embeddings.
    pub fn fuse_value(&self, embeddings: &[Vec<f64>]) -> Result<f64> {
        let mut g = Graph::inference();
        let v = self.fuse(&mut g, embeddings)?;
        Ok(g.value(v).item())
    }

    pub fn segment_output_bias_mut(&mut self) -> &mut f64 {
        match &self.net {
            SegmentNet::Ehac { head, .. } => head.output_bias_mut(&mut self.store),
            SegmentNet::Lstm(b) => b.output_bias_mut(&mut self.store),
        }
    }

    pub fn fusion_output_bias_mut(&mut self) -> &mut f64 {
        self.fusion.output_bias_mut(&mut self.store)
    }
}
