//! Deterministic synthetic corpus: tone-chord "speech" whose timing,
//! spectral tilt and token statistics depend on a latent severity.

use std::f64::consts::PI;

use super::{split_by_speaker, Manifest, ResponseRecord, SessionRecord, ALPHABET, PHQ8_MAX};
use crate::dsp::{quantize_pcm16, AudioBuffer};
use crate::error::{Error, Result};
use crate::tensor::Rng;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpusConfig {
    pub n_speakers: usize,
    /// Inclusive range, drawn uniformly per speaker.
    pub sessions_per_speaker: (usize, usize),
    pub responses_per_session: (usize, usize),
    /// Target response length in seconds (the last token may overrun).
    pub response_seconds: (f64, f64),
    pub sample_rate: u32,
    pub seed: u64,
    /// Target fraction of speakers whose latent severity is +dep.
    pub prevalence: f64,
    /// Std of the session-level PHQ-8 noise around the speaker severity.
    pub label_noise: f64,
    /// 0..=1: how strongly token duration tracks severity.
    pub rate_coupling: f64,
    /// Extra spectral roll-off exponent at maximal severity.
    pub tilt_coupling: f64,
    /// Log-odds shift towards odd-indexed tokens at maximal severity.
    pub lexical_coupling: f64,
    /// Relative per-speaker pitch spread.
    pub pitch_jitter: f64,
    /// Per-speaker background noise std range.
    pub noise: (f64, f64),
    /// Per-speaker gain range.
    pub gain: (f64, f64),
    pub split_ratios: [f64; 3],
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        Self {
            n_speakers: 200,
            sessions_per_speaker: (1, 3),
            responses_per_session: (2, 3),
            response_seconds: (2.0, 3.5),
            sample_rate: 16000,
            seed: 20190915,
            prevalence: 0.25,
            label_noise: 2.0,
            rate_coupling: 0.03,
            tilt_coupling: 0.05,
            lexical_coupling: 3.0,
            pitch_jitter: 0.06,
            noise: (0.002, 0.02),
            gain: (0.2, 0.6),
            split_ratios: [0.4, 0.2, 0.4],
        }
    }
}

impl SyntheticCorpusConfig {
    /// Maximum latent severity so that `P(s >= 9.5) = prevalence` under
    /// `s = scale * u^2`.
    pub fn severity_scale(&self) -> Result<f64> {
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return Err(Error::Unsatisfiable(format!(
                "prevalence target {} must lie in (0,1)",
                self.prevalence
            )));
        }
        let scale = 9.5 / (1.0 - self.prevalence).powi(2);
        if scale > PHQ8_MAX as f64 {
            return Err(Error::Unsatisfiable(format!(
                "prevalence target {} needs severities up to {scale:.1} > 24",
                self.prevalence
            )));
        }
        Ok(scale)
    }

    pub fn validate(&self) -> Result<()> {
        self.severity_scale()?;
        let bad = |what: &str| Err(Error::Config(format!("corpus config: {what}")));
        if self.n_speakers < 3 {
            return bad("need at least 3 speakers");
        }
        let (a, b) = self.sessions_per_speaker;
        if a == 0 || a > b {
            return bad("sessions_per_speaker must be a non-empty positive range");
        }
        let (a, b) = self.responses_per_session;
        if a == 0 || a > b {
            return bad("responses_per_session must be a non-empty positive range");
        }
        let (a, b) = self.response_seconds;
        if !(a >= super::MIN_SEGMENT_SECS && a <= b && b.is_finite()) {
            return bad("response_seconds must satisfy 1 <= min <= max");
        }
        if self.sample_rate < 8000 {
            return bad("sample_rate must be at least 8000");
        }
        if !(0.0..=1.0).contains(&self.rate_coupling) {
            return bad("rate_coupling must be in [0,1]");
        }
        if self.label_noise < 0.0 || self.tilt_coupling < 0.0 || self.pitch_jitter < 0.0 || self.pitch_jitter >= 0.1 {
            return bad("label_noise and tilt_coupling must be >= 0, pitch_jitter in [0, 0.1)");
        }
        if self.noise.0 < 0.0 || self.noise.0 > self.noise.1 || self.gain.0 <= 0.0 || self.gain.0 > self.gain.1 {
            return bad("noise/gain ranges malformed");
        }
        Ok(())
    }

    /// Same corpus with every severity coupling removed.
    pub fn null(&self) -> Self {
        Self {
            rate_coupling: 0.0,
            tilt_coupling: 0.0,
            lexical_coupling: 0.0,
            ..self.clone()
        }
    }
}

/// Speaker-level nuisance parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeakerVoice {
    pub pitch: f64,
    pub gain: f64,
    pub tilt: f64,
    pub noise: f64,
}

/// Everything needed to render one response.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseSpec {
    pub tokens: Vec<usize>,
    /// Per-token voiced length in samples.
    pub durations: Vec<usize>,
    /// Silence after each token in samples.
    pub gaps: Vec<usize>,
    pub voice: SpeakerVoice,
    /// Severity normalized to [0,1].
    pub severity: f64,
    pub noise_seed: u64,
}

impl ResponseSpec {
    pub fn samples(&self) -> usize {
        self.durations.iter().sum::<usize>() + self.gaps.iter().sum::<usize>()
    }

    pub fn transcript(&self) -> String {
        super::decode_transcript(&self.tokens)
    }

    pub fn tokens_per_second(&self, sample_rate: u32) -> f64 {
        self.tokens.len() as f64 * sample_rate as f64 / self.samples() as f64
    }
}

const TOKEN_BASE_HZ: f64 = 180.0;
const TOKEN_RATIO: f64 = 1.26;
const MIN_TOKEN_MS: f64 = 150.0;
const MAX_TOKEN_MS: f64 = 400.0;
const RAMP_MS: f64 = 10.0;

/// Fundamental of token `k` before the speaker's pitch factor.
pub fn token_frequency(k: usize) -> f64 {
    TOKEN_BASE_HZ * TOKEN_RATIO.powi(k as i32)
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub config: SyntheticCorpusConfig,
    pub manifest: Manifest,
    /// Latent severity per session, in PHQ-8 units.
    pub severities: Vec<f64>,
    /// `specs[session][response]`.
    pub specs: Vec<Vec<ResponseSpec>>,
}

impl SyntheticCorpus {
    pub fn generate(config: &SyntheticCorpusConfig) -> Result<Self> {
        config.validate()?;
        let scale = config.severity_scale()?;
        let root = Rng::new(config.seed);
        let speakers: Vec<String> = (0..config.n_speakers).map(|i| format!("spk{i:04}")).collect();
        let splits = split_by_speaker(&speakers, config.split_ratios, config.seed)?;
        let n_tok = ALPHABET.len();
        let sr = config.sample_rate as f64;

        let mut sessions = Vec::new();
        let mut severities = Vec::new();
        let mut specs = Vec::new();
        for (si, spk) in speakers.iter().enumerate() {
            let mut rng = root.derive(si as u64);
            let u = rng.uniform();
            let severity = scale * u * u;
            let z = severity / PHQ8_MAX as f64;
            let voice = SpeakerVoice {
                pitch: 1.0 + rng.uniform_range(-config.pitch_jitter, config.pitch_jitter),
                gain: rng.uniform_range(config.gain.0, config.gain.1),
                tilt: rng.uniform_range(0.0, 1.0),
                noise: rng.uniform_range(config.noise.0, config.noise.1),
            };
            // Token preferences: odd tokens gain log-odds with severity. Interleaving
            // the two classes keeps the cue out of the coarse spectral envelope.
            let logits: Vec<f64> = (0..n_tok)
                .map(|k| {
                    let side = if k % 2 == 1 { 1.0 } else { -1.0 };
                    config.lexical_coupling * (z - 0.25) * side / 2.0
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let total: f64 = weights.iter().sum();

            let n_sess = rng.int_range(config.sessions_per_speaker.0, config.sessions_per_speaker.1);
            for j in 0..n_sess {
                let session_id = format!("{spk}-s{j}");
                let noisy = severity + rng.normal(0.0, config.label_noise);
                let phq8 = (noisy.round() as i64).clamp(0, PHQ8_MAX);
                let n_resp = rng.int_range(config.responses_per_session.0, config.responses_per_session.1);
                let mut records = Vec::new();
                let mut sess_specs = Vec::new();
                for r in 0..n_resp {
                    let target = rng.uniform_range(config.response_seconds.0, config.response_seconds.1) * sr;
                    let (mut tokens, mut durations, mut gaps) = (Vec::new(), Vec::new(), Vec::new());
                    let mut len = 0.0;
                    while len < target {
                        let mut pick = rng.uniform() * total;
                        let mut k = 0;
                        while k + 1 < n_tok && pick >= weights[k] {
                            pick -= weights[k];
                            k += 1;
                        }
                        let mix = (1.0 - config.rate_coupling) * rng.uniform() + config.rate_coupling * z;
                        let ms = MIN_TOKEN_MS + (MAX_TOKEN_MS - MIN_TOKEN_MS) * mix.clamp(0.0, 1.0);
                        let d = (ms / 1000.0 * sr).round() as usize;
                        let gap_ms = rng.uniform_range(0.0, 40.0) + 60.0 * config.rate_coupling * z;
                        let gap = (gap_ms / 1000.0 * sr).round() as usize;
                        tokens.push(k);
                        durations.push(d);
                        gaps.push(gap);
                        len += (d + gap) as f64;
                    }
                    let spec = ResponseSpec {
                        tokens,
                        durations,
                        gaps,
                        voice,
                        severity: z,
                        noise_seed: rng.next_u64(),
                    };
                    records.push(ResponseRecord {
                        wav_path: format!("audio/{session_id}_r{r}.wav"),
                        transcript: Some(spec.transcript()),
                    });
                    sess_specs.push(spec);
                }
                sessions.push(SessionRecord {
                    speaker_id: spk.clone(),
                    session_id,
                    split: splits[spk],
                    phq8: Some(phq8),
                    responses: records,
                });
                severities.push(severity);
                specs.push(sess_specs);
            }
        }
        Ok(Self {
            config: config.clone(),
            manifest: Manifest::new(sessions)?,
            severities,
            specs,
        })
    }

    /// PCM16-exact waveform of one response.
    pub fn render(&self, session: usize, response: usize) -> Result<AudioBuffer> {
        let spec = self
            .specs
            .get(session)
            .and_then(|s| s.get(response))
            .ok_or_else(|| Error::InvalidArgument(format!("no response {session}/{response}")))?;
        render_response(spec, &self.config)
    }
}

pub fn render_response(spec: &ResponseSpec, config: &SyntheticCorpusConfig) -> Result<AudioBuffer> {
    let sr = config.sample_rate as f64;
    let v = spec.voice;
    let exponent = v.tilt + config.tilt_coupling * spec.severity;
    let amps: Vec<f64> = (1..=3).map(|h| (h as f64).powf(-exponent)).collect();
    let norm: f64 = amps.iter().sum();
    let ramp = (RAMP_MS / 1000.0 * sr) as usize;
    let mut rng = Rng::new(spec.noise_seed);
    let mut out = Vec::with_capacity(spec.samples());
    for ((&k, &d), &gap) in spec.tokens.iter().zip(&spec.durations).zip(&spec.gaps) {
        let f0 = token_frequency(k) * v.pitch;
        let phase = rng.uniform() * 2.0 * PI;
        for n in 0..d {
            let t = n as f64 / sr;
            let env = if n < ramp {
                0.5 - 0.5 * (PI * n as f64 / ramp as f64).cos()
            } else if d - n <= ramp {
                0.5 - 0.5 * (PI * (d - n) as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            let s: f64 = amps
                .iter()
                .enumerate()
                .map(|(h, a)| a * (2.0 * PI * (h + 1) as f64 * f0 * t + phase).sin())
                .sum();
            out.push(v.gain * env * s / norm);
        }
        out.extend(std::iter::repeat_n(0.0, gap));
    }
    for x in out.iter_mut() {
        *x += rng.normal(0.0, v.noise);
    }
    let pcm = out.iter().map(|&x| quantize_pcm16(x) as f64 / 32768.0).collect();
    AudioBuffer::new(pcm, config.sample_rate)
}
