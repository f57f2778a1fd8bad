use super::layers::{Linear, Lstm};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub embed: usize,
    pub hidden: usize,
    pub attention: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            embed: 16,
            hidden: 64,
            attention: 32,
        }
    }
}

/// Pretraining-only ASR branch: a linear CTC projection (`ctc_head.`) and
/// an attention LSTM decoder (`decoder.`).
///
/// Symbols are `0..alphabet`; index `alphabet` is the CTC blank and doubles
/// as the decoder's start-of-sequence input.
#[derive(Debug, Clone)]
pub struct AsrDecoder {
    pub alphabet: usize,
    ctc_head: Linear,
    embed: ParamId,
    lstm: Lstm,
    att_enc: ParamId,
    att_dec: ParamId,
    att_bias: ParamId,
    att_v: ParamId,
    out: Linear,
}

#[derive(Debug, Clone)]
pub struct AsrOutput {
    /// `[T' x (alphabet + 1)]`, blank last.
    pub ctc_logits: Var,
    /// `[L x alphabet]`, one teacher-forced step per label.
    pub attention_logits: Var,
    /// Attention weights over encoder steps, one row per decode step.
    pub attention: Vec<Vec<f64>>,
}

impl AsrDecoder {
    pub fn new(store: &mut ParamStore, enc_dim: usize, alphabet: usize, cfg: &DecoderConfig, rng: &mut Rng) -> Result<Self> {
        let ctc_head = Linear::new(store, "ctc_head.proj", enc_dim, alphabet + 1, rng)?;
        let embed = store.add_xavier("decoder.embed", &[alphabet + 1, cfg.embed], alphabet + 1, cfg.embed, rng)?;
        let lstm = Lstm::new(store, "decoder.lstm", cfg.embed + enc_dim, cfg.hidden, rng)?;
        let att_enc = store.add_xavier("decoder.att.enc", &[enc_dim, cfg.attention], enc_dim, cfg.attention, rng)?;
        let att_dec = store.add_xavier("decoder.att.dec", &[cfg.hidden, cfg.attention], cfg.hidden, cfg.attention, rng)?;
        let att_bias = store.add_constant("decoder.att.bias", &[cfg.attention], 0.0)?;
        let att_v = store.add_xavier("decoder.att.v", &[cfg.attention, 1], cfg.attention, 1, rng)?;
        let out = Linear::new(store, "decoder.out", cfg.hidden + enc_dim, alphabet, rng)?;
        Ok(Self {
            alphabet,
            ctc_head,
            embed,
            lstm,
            att_enc,
            att_dec,
            att_bias,
            att_v,
            out,
        })
    }

    pub fn blank(&self) -> usize {
        self.alphabet
    }

    pub fn ctc_logits(&self, g: &mut Graph, store: &ParamStore, enc: Var) -> Result<Var> {
        self.ctc_head.forward(g, store, enc)
    }

    /// CTC projection plus teacher-forced additive-attention decoding of
    /// `transcript` over encoder states `enc [T' x d]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, enc: Var, transcript: &[usize]) -> Result<AsrOutput> {
        if transcript.is_empty() {
            return Err(Error::InvalidArgument("transcript must have at least one symbol".into()));
        }
        if let Some(&bad) = transcript.iter().find(|&&s| s >= self.alphabet) {
            return Err(Error::SymbolOutOfAlphabet {
                symbol: bad,
                alphabet: self.alphabet,
            });
        }
        let ctc_logits = self.ctc_logits(g, store, enc)?;

        let (t_len, enc_dim) = (g.shape(enc)[0], g.shape(enc)[1]);
        let embed = g.param(store, self.embed);
        let att_enc = g.param(store, self.att_enc);
        let att_dec = g.param(store, self.att_dec);
        let att_bias = g.param(store, self.att_bias);
        let att_v = g.param(store, self.att_v);
        let keys = g.matmul(enc, att_enc)?;
        let keys = g.add_row(keys, att_bias)?;

        let (mut h, mut c) = self.lstm.zero_state(g);
        let mut context = g.constant(Tensor::zeros(&[1, enc_dim]));
        let mut prev = self.blank();
        let mut step_logits = Vec::with_capacity(transcript.len());
        let mut attention = Vec::with_capacity(transcript.len());
        for &label in transcript {
            let e = g.slice_rows(embed, prev, 1)?;
            let x = g.concat_cols(&[e, context])?;
            (h, c) = self.lstm.step(g, store, x, h, c)?;
            let q = g.matmul(h, att_dec)?;
            let att_dim = g.shape(q)[1];
            let q = g.reshape(q, &[att_dim])?;
            let scores = g.add_row(keys, q)?;
            let scores = g.tanh(scores);
            let scores = g.matmul(scores, att_v)?;
            let scores = g.reshape(scores, &[1, t_len])?;
            let weights = g.softmax_rows(scores)?;
            attention.push(g.value(weights).data().to_vec());
            context = g.matmul(weights, enc)?;
            let feat = g.concat_cols(&[h, context])?;
            step_logits.push(self.out.forward(g, store, feat)?);
            prev = label;
        }
        let attention_logits = g.stack_rows(&step_logits)?;
        Ok(AsrOutput {
            ctc_logits,
            attention_logits,
            attention,
        })
    }
}

/// Per-frame argmax, collapse repeats, drop blanks.
pub fn greedy_ctc_decode(logits: &Tensor, blank: usize) -> Vec<usize> {
    let k = logits.shape()[1];
    let mut out = Vec::new();
    let mut last = None;
    for row in logits.data().chunks_exact(k) {
        let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        if Some(best) != last && best != blank {
            out.push(best);
        }
        last = Some(best);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot_rows(ids: &[usize], k: usize) -> Tensor {
        let mut t = Tensor::zeros(&[ids.len(), k]);
        for (r, &i) in ids.iter().enumerate() {
            t.data_mut()[r * k + i] = 1.0;
        }
        t
    }

    #[test]
    fn greedy_collapse_rules() {
        // alphabet {a=0, b=1}, blank = 2
        assert_eq!(greedy_ctc_decode(&one_hot_rows(&[0, 0, 2, 1], 3), 2), vec![0, 1]);
        assert!(greedy_ctc_decode(&one_hot_rows(&[2, 2, 2], 3), 2).is_empty());
        assert_eq!(greedy_ctc_decode(&one_hot_rows(&[0, 2, 0], 3), 2), vec![0, 0]);
    }

    fn setup(t_len: usize, uniform: bool) -> (ParamStore, AsrDecoder, Tensor) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(5);
        let dec = AsrDecoder::new(
            &mut store,
            4,
            3,
            &DecoderConfig {
                embed: 3,
                hidden: 5,
                attention: 4,
            },
            &mut rng,
        )
        .unwrap();
        let row: Vec<f64> = (0..4).map(|_| rng.normal(0.0, 1.0)).collect();
        let data = (0..t_len)
            .flat_map(|_| {
                if uniform {
                    row.clone()
                } else {
                    (0..4).map(|_| rng.normal(0.0, 1.0)).collect()
                }
            })
            .collect();
        (store, dec, Tensor::new(vec![t_len, 4], data).unwrap())
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (store, dec, enc) = setup(7, false);
        let mut g = Graph::inference();
        let e = g.constant(enc);
        let out = dec.forward(&mut g, &store, e, &[0, 2, 1, 1]).unwrap();
        assert_eq!(out.attention.len(), 4);
        assert_eq!(g.shape(out.attention_logits), &[4, 3]);
        assert_eq!(g.shape(out.ctc_logits), &[7, 4]);
        for row in &out.attention {
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_label_single_step() {
        let (store, dec, enc) = setup(5, false);
        let mut g = Graph::inference();
        let e = g.constant(enc);
        let out = dec.forward(&mut g, &store, e, &[2]).unwrap();
        assert_eq!(out.attention.len(), 1);
    }

    #[test]
    fn uniform_states_uniform_attention() {
        let (store, dec, enc) = setup(6, true);
        let mut g = Graph::inference();
        let e = g.constant(enc);
        let out = dec.forward(&mut g, &store, e, &[0, 1, 2]).unwrap();
        for row in &out.attention {
            for &w in row {
                assert!((w - 1.0 / 6.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn out_of_alphabet_rejected() {
        let (store, dec, enc) = setup(5, false);
        let mut g = Graph::inference();
        let e = g.constant(enc);
        assert!(matches!(
            dec.forward(&mut g, &store, e, &[0, 3]),
            Err(Error::SymbolOutOfAlphabet { symbol: 3, .. })
        ));
    }
}
