//! Sessions, labels, speaker-disjoint splits, segmentation and manifests.

mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

pub use synth::{ResponseSpec, SpeakerVoice, SyntheticCorpus, SyntheticCorpusConfig};

use crate::error::{Error, Result};

/// Toy transcript alphabet; symbol `i` is the `i`-th character.
pub const ALPHABET: &str = "abcdefghij";
pub const MAX_SEGMENT_SECS: f64 = 25.0;
pub const MIN_SEGMENT_SECS: f64 = 1.0;
pub const PHQ8_MAX: i64 = 24;
pub const PHQ8_THRESHOLD: i64 = 10;

/// `true` is +dep.
pub fn phq8_to_binary(score: i64) -> Result<bool> {
    if !(0..=PHQ8_MAX).contains(&score) {
        return Err(Error::ScoreOutOfRange(score));
    }
    Ok(score >= PHQ8_THRESHOLD)
}

pub fn encode_transcript(text: &str) -> Result<Vec<usize>> {
    let n = ALPHABET.len();
    text.chars()
        .map(|c| {
            ALPHABET.find(c).ok_or(Error::SymbolOutOfAlphabet {
                symbol: c as usize,
                alphabet: n,
            })
        })
        .collect()
}

pub fn decode_transcript(symbols: &[usize]) -> String {
    symbols
        .iter()
        .map(|&s| ALPHABET.as_bytes().get(s).map_or('?', |&b| b as char))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseRecord {
    pub wav_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRecord {
    pub speaker_id: String,
    pub session_id: String,
    pub split: Split,
    /// `None` when labels are withheld from the reader.
    pub phq8: Option<i64>,
    pub responses: Vec<ResponseRecord>,
}

impl SessionRecord {
    pub fn label(&self) -> Result<Option<bool>> {
        self.phq8.map(phq8_to_binary).transpose()
    }

    fn validate(&self) -> Result<()> {
        if self.responses.is_empty() {
            return Err(Error::Data(format!("session {} has no responses", self.session_id)));
        }
        if let Some(s) = self.phq8 {
            phq8_to_binary(s).map_err(|_| Error::Data(format!("session {}: phq8 {s} outside 0..=24", self.session_id)))?;
        }
        for r in &self.responses {
            if let Some(t) = &r.transcript {
                encode_transcript(t).map_err(|_| {
                    Error::Data(format!("session {}: transcript '{t}' outside the alphabet", self.session_id))
                })?;
            }
        }
        Ok(())
    }
}

/// Ordered list of sessions; one JSON object per line on disk.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub sessions: Vec<SessionRecord>,
}

impl Manifest {
    pub fn new(sessions: Vec<SessionRecord>) -> Result<Self> {
        let m = Self { sessions };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        let mut speaker_split: BTreeMap<&str, Split> = BTreeMap::new();
        for s in &self.sessions {
            s.validate()?;
            if !ids.insert(&s.session_id) {
                return Err(Error::Data(format!("duplicate session id {}", s.session_id)));
            }
            if let Some(prev) = speaker_split.insert(&s.speaker_id, s.split) {
                if prev != s.split {
                    return Err(Error::Data(format!(
                        "speaker {} appears in both {prev} and {}",
                        s.speaker_id, s.split
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.sessions {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut sessions = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: SessionRecord = serde_json::from_str(line)
                .map_err(|e| Error::Data(format!("manifest line {}: {e}", i + 1)))?;
            sessions.push(rec);
        }
        Self::new(sessions)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SessionRecord> {
        self.sessions.iter().filter(move |s| s.split == split)
    }

    /// Copy with the PHQ-8 scores of `split` removed.
    pub fn withhold(&self, split: Split) -> Self {
        let mut m = self.clone();
        for s in m.sessions.iter_mut().filter(|s| s.split == split) {
            s.phq8 = None;
        }
        m
    }

    pub fn speakers(&self, split: Split) -> BTreeSet<&str> {
        self.split(split).map(|s| s.speaker_id.as_str()).collect()
    }
}

/// A slice of one response, in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub response: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn duration_secs(&self, sample_rate: u32) -> f64 {
        self.len() as f64 / sample_rate as f64
    }
}

/// Greedy contiguous 25 s cuts; a trailing remainder under 1 s is dropped.
pub fn segment_response(samples: usize, sample_rate: u32, response: usize) -> Result<Vec<Segment>> {
    let sr = sample_rate as f64;
    let max = (MAX_SEGMENT_SECS * sr).round() as usize;
    let min = (MIN_SEGMENT_SECS * sr).round() as usize;
    if samples < min {
        return Err(Error::NoSegment {
            seconds: samples as f64 / sr,
        });
    }
    let mut out = Vec::new();
    let mut start = 0;
    while samples - start >= min {
        let end = (start + max).min(samples);
        out.push(Segment { response, start, end });
        start = end;
    }
    Ok(out)
}

/// Speaker-level partition; every session follows its speaker.
pub fn split_by_speaker(speakers: &[String], ratios: [f64; 3], seed: u64) -> Result<BTreeMap<String, Split>> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let mut ids: Vec<String> = speakers.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let n = ids.len();
    if n < 3 {
        return Err(Error::Data(format!("{n} speakers cannot fill 3 splits")));
    }
    crate::tensor::Rng::new(seed).derive(0x5917).shuffle(&mut ids);
    let n_train = ((ratios[0] * n as f64).round() as usize).clamp(1, n - 2);
    let n_dev = ((ratios[1] * n as f64).round() as usize).clamp(1, n - n_train - 1);
    Ok(ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let s = if i < n_train {
                Split::Train
            } else if i < n_train + n_dev {
                Split::Dev
            } else {
                Split::Test
            };
            (id, s)
        })
        .collect())
}

/// Counts of one split/class cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StatsCell {
    pub responses: usize,
    pub sessions: usize,
}

/// Responses and sessions per split and class; sessions with withheld
/// labels are counted under "unlabeled".
pub fn corpus_stats(manifest: &Manifest) -> BTreeMap<(Split, &'static str), StatsCell> {
    let mut out = BTreeMap::new();
    for split in Split::ALL {
        for class in ["+dep", "-dep", "unlabeled"] {
            out.insert((split, class), StatsCell::default());
        }
    }
    for s in &manifest.sessions {
        let class = match s.phq8.map(|p| p >= PHQ8_THRESHOLD) {
            Some(true) => "+dep",
            Some(false) => "-dep",
            None => "unlabeled",
        };
        let cell = out.get_mut(&(s.split, class)).expect("all cells present");
        cell.sessions += 1;
        cell.responses += s.responses.len();
    }
    out
}

/// `count,train+dep,train-dep,train,dev+dep,...` with `responses` and
/// `sessions` rows.
pub fn render_stats(manifest: &Manifest) -> String {
    let stats = corpus_stats(manifest);
    let mut header = vec!["count".to_string()];
    for split in Split::ALL {
        header.push(format!("{split}+dep"));
        header.push(format!("{split}-dep"));
        header.push(format!("{split}"));
    }
    let mut out = header.join(",") + "\n";
    for (row, pick) in [
        ("responses", (|c: &StatsCell| c.responses) as fn(&StatsCell) -> usize),
        ("sessions", |c: &StatsCell| c.sessions),
    ] {
        let mut cols = vec![row.to_string()];
        for split in Split::ALL {
            let p = pick(&stats[&(split, "+dep")]);
            let n = pick(&stats[&(split, "-dep")]);
            let u = pick(&stats[&(split, "unlabeled")]);
            cols.extend([p.to_string(), n.to_string(), (p + n + u).to_string()]);
        }
        out.push_str(&(cols.join(",") + "\n"));
    }
    out
}
