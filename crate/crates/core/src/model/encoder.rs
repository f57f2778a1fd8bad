use super::layers::{Conv, Lstm};
use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Rng, Var};

/// Conv stack over (time x mel) followed by stacked LSTMs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub n_mels: usize,
    pub conv_channels: Vec<usize>,
    pub kernel: (usize, usize),
    /// (time, frequency) stride of every conv layer.
    pub stride: (usize, usize),
    /// (time, frequency) zero padding of every conv layer.
    pub padding: (usize, usize),
    pub lstm_layers: usize,
    pub hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_mels: 40,
            conv_channels: vec![16, 32],
            kernel: (3, 3),
            stride: (2, 2),
            padding: (1, 1),
            lstm_layers: 2,
            hidden: 64,
        }
    }
}

impl EncoderConfig {
    /// Output length after the conv stack, or `None` if some layer would
    /// see an input shorter than its kernel.
    pub fn output_frames(&self, frames: usize) -> Option<usize> {
        self.conv_channels.iter().try_fold(frames, |t, _| {
            Conv::out_len(t, self.kernel.0, self.stride.0, self.padding.0)
        })
    }

    fn output_bins(&self) -> Option<usize> {
        self.conv_channels.iter().try_fold(self.n_mels, |f, _| {
            Conv::out_len(f, self.kernel.1, self.stride.1, self.padding.1)
        })
    }

    /// Smallest frame count the conv stack accepts.
    pub fn min_frames(&self) -> usize {
        (1..).find(|&t| self.output_frames(t).is_some()).expect("some length fits")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 || self.hidden == 0 || self.lstm_layers == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::Config("encoder strides must be positive".into()));
        }
        if self.output_bins().is_none() {
            return Err(Error::Config(format!(
                "{} mel bins do not survive the conv stack",
                self.n_mels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    convs: Vec<Conv>,
    lstms: Vec<Lstm>,
    conv_out_dim: usize,
}

impl Encoder {
    /// Registers all weights under `encoder.`.
    pub fn new(store: &mut ParamStore, config: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::new();
        let mut cin = 1;
        for (i, &cout) in config.conv_channels.iter().enumerate() {
            convs.push(Conv::new(
                store,
                &format!("encoder.conv.{i}"),
                cin,
                cout,
                config.kernel,
                config.stride,
                config.padding,
                rng,
            )?);
            cin = cout;
        }
        let conv_out_dim = cin * config.output_bins().expect("validated");
        let mut lstms = Vec::new();
        let mut d = conv_out_dim;
        for i in 0..config.lstm_layers {
            lstms.push(Lstm::new(store, &format!("encoder.lstm.{i}"), d, config.hidden, rng)?);
            d = config.hidden;
        }
        Ok(Self {
            config: config.clone(),
            convs,
            lstms,
            conv_out_dim,
        })
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    /// Feature dimension fed to the first LSTM.
    pub fn conv_out_dim(&self) -> usize {
        self.conv_out_dim
    }

    /// Maps `frames x n_mels` features to a `T' x hidden` state sequence.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: &FeatureMatrix) -> Result<Var> {
        if features.n_mels() != self.config.n_mels {
            return Err(Error::Dimension(format!(
                "encoder expects {} mel bins, got {}",
                self.config.n_mels,
                features.n_mels()
            )));
        }
        if self.config.output_frames(features.frames()).is_none() {
            return Err(Error::Dimension(format!(
                "segment of {} frames is shorter than the encoder minimum of {}",
                features.frames(),
                self.config.min_frames()
            )));
        }
        let x = g.constant(features.to_tensor().reshape(vec![1, features.frames(), features.n_mels()])?);
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, store, h)?;
        }
        let t = g.shape(h)[1];
        let h = g.swap_axes01(h)?;
        let mut h = g.reshape(h, &[t, self.conv_out_dim])?;
        for lstm in &self.lstms {
            h = lstm.forward(g, store, h)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(frames: usize, n_mels: usize, rng: &mut Rng) -> FeatureMatrix {
        FeatureMatrix::new(frames, n_mels, (0..frames * n_mels).map(|_| rng.normal(0.0, 1.0)).collect(), String::new())
            .unwrap()
    }

    fn small() -> EncoderConfig {
        EncoderConfig {
            n_mels: 8,
            conv_channels: vec![2, 3],
            hidden: 5,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn ninety_eight_frames_shape() {
        // Padded stride-2 conv: floor((T + 2 - 3) / 2) + 1, applied twice.
        let conv = |t: usize| (t + 2 - 3) / 2 + 1;
        let expect = conv(conv(98));
        assert_eq!(expect, 25);
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let enc = Encoder::new(&mut store, &small(), &mut rng).unwrap();
        let mut g = Graph::inference();
        let h = enc.forward(&mut g, &store, &features(98, 8, &mut rng)).unwrap();
        assert_eq!(g.shape(h), &[expect, 5]);
        assert_eq!(enc.config.output_frames(98), Some(expect));
    }

    #[test]
    fn zero_weights_zero_output() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let enc = Encoder::new(&mut store, &small(), &mut rng).unwrap();
        store.iter_mut().for_each(|p| p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let mut g = Graph::inference();
        let h = enc.forward(&mut g, &store, &features(30, 8, &mut rng)).unwrap();
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_for_identical_inputs() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(2);
        let enc = Encoder::new(&mut store, &small(), &mut rng).unwrap();
        let f = features(40, 8, &mut rng);
        let run = || {
            let mut g = Graph::inference();
            let h = enc.forward(&mut g, &store, &f).unwrap();
            g.value(h).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn too_short_and_unpadded_minimum() {
        let cfg = EncoderConfig {
            padding: (0, 1),
            ..small()
        };
        // Unpadded: 3 -> 1 -> needs >= 3 again, so the minimum is 7.
        assert_eq!(cfg.min_frames(), 7);
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        let enc = Encoder::new(&mut store, &cfg, &mut rng).unwrap();
        let mut g = Graph::inference();
        let err = enc.forward(&mut g, &store, &features(6, 8, &mut rng)).unwrap_err();
        assert!(err.to_string().contains("minimum of 7"));
    }

    #[test]
    fn parameters_live_under_encoder_prefix() {
        let mut store = ParamStore::new();
        Encoder::new(&mut store, &EncoderConfig::default(), &mut Rng::new(0)).unwrap();
        assert!(store.iter().all(|(_, p)| p.name.starts_with("encoder.")));
    }
}
