use super::layers::{Linear, Lstm};
use super::rcnn::SegmentOutput;
use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Rng, Var};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LstmBaselineConfig {
    /// Consecutive frames concatenated into one LSTM input step.
    pub frame_stack: usize,
    pub hidden: usize,
    pub embedding: usize,
}

impl Default for LstmBaselineConfig {
    fn default() -> Self {
        Self {
            frame_stack: 4,
            hidden: 32,
            embedding: 32,
        }
    }
}

/// Two LSTM layers over stacked frames, max-pooled, then two dense layers.
#[derive(Debug, Clone)]
pub struct LstmBaseline {
    pub config: LstmBaselineConfig,
    n_mels: usize,
    lstms: [Lstm; 2],
    dense: Linear,
    out: Linear,
}

impl LstmBaseline {
    pub fn new(store: &mut ParamStore, n_mels: usize, cfg: &LstmBaselineConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.frame_stack == 0 {
            return Err(Error::Config("frame_stack must be positive".into()));
        }
        let d = n_mels * cfg.frame_stack;
        let l0 = Lstm::new(store, "encoder.lstm.0", d, cfg.hidden, rng)?;
        let l1 = Lstm::new(store, "encoder.lstm.1", cfg.hidden, cfg.hidden, rng)?;
        Ok(Self {
            config: cfg.clone(),
            n_mels,
            lstms: [l0, l1],
            dense: Linear::new(store, "head.dense", cfg.hidden, cfg.embedding, rng)?,
            out: Linear::new(store, "head.out", cfg.embedding, 1, rng)?,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: &FeatureMatrix) -> Result<SegmentOutput> {
        let k = self.config.frame_stack;
        let steps = features.frames() / k;
        if steps == 0 || features.n_mels() != self.n_mels {
            return Err(Error::Dimension(format!(
                "baseline needs >= {k} frames of {} mels, got {}x{}",
                self.n_mels,
                features.frames(),
                features.n_mels()
            )));
        }
        let used = features.data()[..steps * k * self.n_mels].to_vec();
        let x = g.constant(crate::tensor::Tensor::new(vec![steps, k * self.n_mels], used)?);
        let mut h: Var = x;
        for l in &self.lstms {
            h = l.forward(g, store, h)?;
        }
        let pooled = g.max_axis(h, 0)?;
        let pooled = g.reshape(pooled, &[1, self.config.hidden])?;
        let e = self.dense.forward(g, store, pooled)?;
        let embedding = g.tanh(e);
        let prediction = self.out.forward(g, store, embedding)?;
        Ok(SegmentOutput {
            prediction,
            embedding,
        })
    }

    pub fn output_bias_mut<'a>(&self, store: &'a mut ParamStore) -> &'a mut f64 {
        &mut store.get_mut(self.out.bias).tensor.data_mut()[0]
    }
}
