use super::layers::{Linear, Rnn};
use crate::error::Result;
use crate::tensor::{Graph, ParamStore, Rng, Var};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RcnnConfig {
    /// Width of the left and right context recurrences.
    pub context: usize,
    /// Width of the per-step latent projection that gets max-pooled.
    pub projection: usize,
    /// Width of the last hidden layer, i.e. the segment embedding.
    pub embedding: usize,
}

impl Default for RcnnConfig {
    fn default() -> Self {
        Self {
            context: 32,
            projection: 64,
            embedding: 32,
        }
    }
}

/// Recurrent-convolutional prediction head over encoder frames.
///
/// Each step is represented as `[left context; frame; right context]`,
/// projected through `tanh`, max-pooled over time, and passed through a
/// dense layer whose activations are the segment embedding.
#[derive(Debug, Clone)]
pub struct RcnnHead {
    pub config: RcnnConfig,
    left: Rnn,
    right: Rnn,
    proj: Linear,
    dense: Linear,
    out: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct SegmentOutput {
    /// `[1 x 1]` logit or regression value.
    pub prediction: Var,
    /// `[1 x embedding]`.
    pub embedding: Var,
}

impl RcnnHead {
    pub fn new(store: &mut ParamStore, in_dim: usize, cfg: &RcnnConfig, rng: &mut Rng) -> Result<Self> {
        let left = Rnn::new(store, "head.left", in_dim, cfg.context, rng)?;
        let right = Rnn::new(store, "head.right", in_dim, cfg.context, rng)?;
        let proj = Linear::new(store, "head.proj", 2 * cfg.context + in_dim, cfg.projection, rng)?;
        let dense = Linear::new(store, "head.dense", cfg.projection, cfg.embedding, rng)?;
        let out = Linear::new(store, "head.out", cfg.embedding, 1, rng)?;
        Ok(Self {
            config: cfg.clone(),
            left,
            right,
            proj,
            dense,
            out,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding
    }

    /// Pooled latent vector `[1 x projection]` before the dense layer.
    pub fn pooled(&self, g: &mut Graph, store: &ParamStore, hidden: Var) -> Result<Var> {
        let cl = self.left.context(g, store, hidden, false)?;
        let cr = self.right.context(g, store, hidden, true)?;
        let rep = g.concat_cols(&[cl, hidden, cr])?;
        let y = self.proj.forward(g, store, rep)?;
        let y = g.tanh(y);
        let pooled = g.max_axis(y, 0)?;
        g.reshape(pooled, &[1, self.config.projection])
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, hidden: Var) -> Result<SegmentOutput> {
        let pooled = self.pooled(g, store, hidden)?;
        let emb = self.dense.forward(g, store, pooled)?;
        let embedding = g.tanh(emb);
        let prediction = self.out.forward(g, store, embedding)?;
        Ok(SegmentOutput {
            prediction,
            embedding,
        })
    }

    /// Final affine applied to an embedding on its own.
    pub fn predict_from_embedding(&self, g: &mut Graph, store: &ParamStore, embedding: Var) -> Result<Var> {
        self.out.forward(g, store, embedding)
    }

    pub fn output_bias_mut<'a>(&self, store: &'a mut ParamStore) -> &'a mut f64 {
        &mut store.get_mut(self.out.bias).tensor.data_mut()[0]
    }
}
