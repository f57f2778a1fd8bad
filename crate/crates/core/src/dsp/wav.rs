//! Minimal RIFF/WAVE reader and writer for 16-bit PCM mono audio.

use std::fs;
use std::path::Path;

use super::AudioBuffer;
use crate::error::{Error, Result};

fn fmt_err(field: &'static str, detail: impl Into<String>) -> Error {
    Error::WavFormat {
        field,
        detail: detail.into(),
    }
}

fn u16_at(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes)
}

/// Parses an in-memory WAV file. Samples are scaled by `1/32768`.
pub fn parse_wav(bytes: &[u8]) -> Result<AudioBuffer> {
    if bytes.len() < 12 {
        return Err(fmt_err("riff", "file shorter than the RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(fmt_err("riff", "missing RIFF tag"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(fmt_err("wave", "missing WAVE tag"));
    }
    let mut off = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while off + 8 <= bytes.len() {
        let id = &bytes[off..off + 4];
        let size = u32_at(bytes, off + 4) as usize;
        let body = off + 8;
        if body + size > bytes.len() {
            return Err(fmt_err("chunk_size", format!(
                "chunk {:?} claims {size} bytes past end of file",
                String::from_utf8_lossy(id)
            )));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(fmt_err("fmt", "fmt chunk shorter than 16 bytes"));
                }
                format = Some((
                    u16_at(bytes, body),
                    u16_at(bytes, body + 2),
                    u32_at(bytes, body + 4),
                    u16_at(bytes, body + 14),
                ));
            }
            b"data" => data = Some(&bytes[body..body + size]),
            _ => {}
        }
        off = body + size + (size & 1);
    }
    let (audio_format, channels, sample_rate, bits) =
        format.ok_or_else(|| fmt_err("fmt", "no fmt chunk"))?;
    if audio_format != 1 {
        return Err(fmt_err("audio_format", format!("{audio_format} is not PCM (1)")));
    }
    if channels != 1 {
        return Err(fmt_err("num_channels", format!("{channels} channels, expected mono")));
    }
    if bits != 16 {
        return Err(fmt_err("bits_per_sample", format!("{bits}, expected 16")));
    }
    if sample_rate == 0 {
        return Err(fmt_err("sample_rate", "zero"));
    }
    let data = data.ok_or_else(|| fmt_err("data", "no data chunk"))?;
    if data.len() % 2 != 0 {
        return Err(fmt_err("data", "odd byte count for 16-bit samples"));
    }
    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    AudioBuffer::new(samples, sample_rate)
}

/// Quantizes a sample to the nearest representable 16-bit PCM level.
pub fn quantize_pcm16(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn encode_wav(audio: &AudioBuffer) -> Vec<u8> {
    let n = audio.samples().len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&audio.sample_rate().to_le_bytes());
    out.extend_from_slice(&(audio.sample_rate() * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in audio.samples() {
        out.extend_from_slice(&quantize_pcm16(s).to_le_bytes());
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_wav(audio)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_roundtrip() {
        let a = AudioBuffer::new(vec![0.0; 16000], 16000).unwrap();
        let b = parse_wav(&encode_wav(&a)).unwrap();
        assert_eq!(b.samples().len(), 16000);
        assert!(b.samples().iter().all(|&s| s == 0.0));
        assert_eq!(b.sample_rate(), 16000);
    }

    #[test]
    fn stereo_rejected_naming_field() {
        let a = AudioBuffer::new(vec![0.0; 10], 16000).unwrap();
        let mut bytes = encode_wav(&a);
        bytes[22] = 2;
        match parse_wav(&bytes) {
            Err(Error::WavFormat { field, .. }) => assert_eq!(field, "num_channels"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn compressed_and_malformed_rejected() {
        let a = AudioBuffer::new(vec![0.0; 10], 16000).unwrap();
        let mut bytes = encode_wav(&a);
        bytes[20] = 3;
        assert!(matches!(parse_wav(&bytes), Err(Error::WavFormat { field: "audio_format", .. })));
        assert!(matches!(parse_wav(b"RIFX0000WAVE"), Err(Error::WavFormat { field: "riff", .. })));
        let good = encode_wav(&a);
        assert!(parse_wav(&good[..good.len() - 3]).is_err());
    }

    #[test]
    fn quantized_sine_roundtrips_bit_exactly() {
        let samples: Vec<f64> = (0..1600)
            .map(|i| {
                let x = 0.5 * (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / 16000.0).sin();
                quantize_pcm16(x) as f64 / 32768.0
            })
            .collect();
        let a = AudioBuffer::new(samples, 16000).unwrap();
        let b = parse_wav(&encode_wav(&a)).unwrap();
        for (x, y) in a.samples().iter().zip(b.samples()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
