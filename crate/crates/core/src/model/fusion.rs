use super::layers::Linear;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Rng, Var};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub hidden: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { hidden: 32 }
    }
}

/// Session-level MLP over the elementwise max of segment embeddings.
#[derive(Debug, Clone)]
pub struct FusionMlp {
    pub in_dim: usize,
    hidden: Linear,
    out: Linear,
}

impl FusionMlp {
    pub fn new(store: &mut ParamStore, in_dim: usize, cfg: &FusionConfig, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            in_dim,
            hidden: Linear::new(store, "fusion.hidden", in_dim, cfg.hidden, rng)?,
            out: Linear::new(store, "fusion.out", cfg.hidden, 1, rng)?,
        })
    }

    /// `embeddings` are `[1 x in_dim]` each; returns a `[1 x 1]` output.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, embeddings: &[Var]) -> Result<Var> {
        if embeddings.is_empty() {
            return Err(Error::InvalidArgument("fusion over zero segments".into()));
        }
        let stacked = g.stack_rows(embeddings)?;
        if g.shape(stacked)[1] != self.in_dim {
            return Err(Error::Dimension(format!(
                "fusion expects {}-dim embeddings, got {}",
                self.in_dim,
                g.shape(stacked)[1]
            )));
        }
        let pooled = g.max_axis(stacked, 0)?;
        let pooled = g.reshape(pooled, &[1, self.in_dim])?;
        let h = self.hidden.forward(g, store, pooled)?;
        let h = g.tanh(h);
        self.out.forward(g, store, h)
    }

    pub fn output_bias_mut<'a>(&self, store: &'a mut ParamStore) -> &'a mut f64 {
        &mut store.get_mut(self.out.bias).tensor.data_mut()[0]
    }
}
