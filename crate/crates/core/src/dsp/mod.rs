//! Audio front end: WAV ingestion and log-mel filter-bank features with a
//! 25 ms analysis window and 10 ms hop.

mod cache;
pub mod fft;
mod wav;

pub use cache::{decode_features, encode_features, read_features, write_features};
pub use wav::{encode_wav, load_wav, parse_wav, quantize_pcm16, write_wav};

use crate::error::{Error, Result};

/// Mono audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    /// Samples outside `[-1, 1]` are clamped.
    pub fn new(mut samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("audio buffer is empty".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        for s in &mut samples {
            if !s.is_finite() {
                return Err(Error::NonFinite("audio sample".into()));
            }
            *s = s.clamp(-1.0, 1.0);
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Copy of samples `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        Self::new(self.samples[range].to_vec(), self.sample_rate)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
    /// Pre-emphasis coefficient; `None` disables it.
    pub pre_emphasis: Option<f64>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            window_ms: 25.0,
            hop_ms: 10.0,
            n_fft: 512,
            n_mels: 40,
            f_min: 20.0,
            f_max: 8000.0,
            log_floor: 1e-10,
            pre_emphasis: None,
        }
    }
}

impl FeatureConfig {
    pub fn window_samples(&self) -> usize {
        (self.window_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        if !(self.hop_ms > 0.0 && self.hop_ms <= self.window_ms) {
            return bad(format!("need 0 < hop_ms <= window_ms, got {} / {}", self.hop_ms, self.window_ms));
        }
        if !self.n_fft.is_power_of_two() || self.n_fft < self.window_samples() {
            return bad(format!(
                "n_fft {} must be a power of two >= window of {} samples",
                self.n_fft,
                self.window_samples()
            ));
        }
        if self.n_mels == 0 {
            return bad("n_mels must be positive".into());
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= self.sample_rate as f64 / 2.0) {
            return bad(format!("need 0 <= f_min < f_max <= nyquist, got {}..{}", self.f_min, self.f_max));
        }
        if self.log_floor.is_nan() || self.log_floor <= 0.0 {
            return bad("log_floor must be positive".into());
        }
        Ok(())
    }

    /// Stable textual identity of the configuration.
    pub fn fingerprint(&self) -> String {
        format!(
            "sr{}-w{}-h{}-fft{}-mel{}-f{}-{}-floor{:e}-pe{}",
            self.sample_rate,
            self.window_ms,
            self.hop_ms,
            self.n_fft,
            self.n_mels,
            self.f_min,
            self.f_max,
            self.log_floor,
            self.pre_emphasis.map_or("off".to_string(), |c| c.to_string())
        )
    }
}

/// Frames x mel-bins matrix of log energies.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    n_mels: usize,
    data: Vec<f64>,
    fingerprint: String,
}

impl FeatureMatrix {
    pub fn new(frames: usize, n_mels: usize, data: Vec<f64>, fingerprint: String) -> Result<Self> {
        if frames == 0 || n_mels == 0 || data.len() != frames * n_mels {
            return Err(Error::Dimension(format!(
                "feature matrix {frames}x{n_mels} with {} values",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            n_mels,
            data,
            fingerprint,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn to_tensor(&self) -> crate::tensor::Tensor {
        crate::tensor::Tensor::new(vec![self.frames, self.n_mels], self.data.clone())
            .expect("feature matrix shape is valid by construction")
    }
}

/// Number of complete analysis windows in `n_samples`.
pub fn frames_count(n_samples: usize, config: &FeatureConfig) -> Result<usize> {
    let win = config.window_samples();
    let hop = config.hop_samples();
    if n_samples < win {
        return Err(Error::EmptyFeatures {
            samples: n_samples,
            needed: win,
        });
    }
    Ok((n_samples - win) / hop + 1)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale filters with unit peak, sampled at FFT bin
/// frequencies.
#[derive(Debug, Clone)]
pub struct MelFilterBank {
    /// Center frequency of each filter in Hz.
    pub centers: Vec<f64>,
    /// `n_mels` rows of `n_fft/2 + 1` weights.
    weights: Vec<Vec<f64>>,
}

impl MelFilterBank {
    pub fn new(config: &FeatureConfig) -> Self {
        let n_bins = config.n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(config.f_min), hz_to_mel(config.f_max));
        let pts: Vec<f64> = (0..config.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (config.n_mels + 1) as f64))
            .collect();
        let bin_hz = config.sample_rate as f64 / config.n_fft as f64;
        let weights = (0..config.n_mels)
            .map(|m| {
                let (l, c, r) = (pts[m], pts[m + 1], pts[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f <= l || f >= r {
                            0.0
                        } else if f <= c {
                            (f - l) / (c - l)
                        } else {
                            (r - f) / (r - c)
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            centers: pts[1..=config.n_mels].to_vec(),
            weights,
        }
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(power).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Symmetric Hamming window.
pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Log-mel filter-bank energies of `audio`.
pub fn log_mel(audio: &AudioBuffer, config: &FeatureConfig) -> Result<FeatureMatrix> {
    config.validate()?;
    if audio.sample_rate() != config.sample_rate {
        return Err(Error::InvalidArgument(format!(
            "audio at {} Hz, features configured for {} Hz",
            audio.sample_rate(),
            config.sample_rate
        )));
    }
    let frames = frames_count(audio.samples().len(), config)?;
    let win = config.window_samples();
    let hop = config.hop_samples();
    let window = hamming(win);
    let bank = MelFilterBank::new(config);
    let floor_log = config.log_floor.ln();

    let emphasized;
    let samples = match config.pre_emphasis {
        Some(c) => {
            let s = audio.samples();
            emphasized = std::iter::once(s[0])
                .chain(s.windows(2).map(|w| w[1] - c * w[0]))
                .collect::<Vec<_>>();
            &emphasized[..]
        }
        None => audio.samples(),
    };

    let mut data = Vec::with_capacity(frames * config.n_mels);
    let mut frame = vec![0.0; win];
    let mut spectrum = fft::PowerSpectrum::new(config.n_fft);
    for t in 0..frames {
        let start = t * hop;
        for (i, f) in frame.iter_mut().enumerate() {
            *f = samples[start + i] * window[i];
        }
        let power = spectrum.compute(&frame);
        for e in bank.apply(&power) {
            data.push(if e > config.log_floor { e.ln() } else { floor_log });
        }
    }
    FeatureMatrix::new(frames, config.n_mels, data, config.fingerprint())
}

/// Subtracts each mel bin's mean over the utterance.
pub fn per_utterance_normalize(features: &FeatureMatrix) -> FeatureMatrix {
    let (t, m) = (features.frames, features.n_mels);
    let mut means = vec![0.0; m];
    for r in 0..t {
        for (mu, v) in means.iter_mut().zip(features.row(r)) {
            *mu += v;
        }
    }
    means.iter_mut().for_each(|mu| *mu /= t as f64);
    let data = features
        .data
        .iter()
        .enumerate()
        .map(|(i, v)| v - means[i % m])
        .collect();
    FeatureMatrix {
        frames: t,
        n_mels: m,
        data,
        fingerprint: format!("{}+cmn", features.fingerprint.trim_end_matches("+cmn")),
    }
}
