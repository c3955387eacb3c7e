//! Synthetic speaker corpus: generation, train/validation/test splitting,
//! and verification trial lists. Everything is derived from a seed, so any
//! experiment is reproducible from its config alone.

mod generate;
mod io;

pub use generate::generate_corpus;
pub use io::{read_corpus, read_trials, write_corpus, write_trials};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{stream_id, Matrix, RngStream, STREAM_TRIALS};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    /// Utterance length range, inclusive.
    pub frames_min: usize,
    pub frames_max: usize,
    pub feature_dim: usize,
    /// Per-frame noise sigma.
    pub within_noise: f64,
    /// Per-utterance channel offset sigma.
    pub channel_noise: f64,
    /// Scale of the speaker direction in every frame.
    pub gain: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_speakers: 30,
            utts_per_speaker: 12,
            frames_min: 50,
            frames_max: 80,
            feature_dim: 10,
            within_noise: 0.3,
            channel_noise: 0.1,
            gain: 1.0,
            seed: 1,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 {
            return Err(Error::Config("corpus.n_speakers must be >= 2".into()));
        }
        if self.feature_dim < 2 {
            return Err(Error::Config("corpus.feature_dim must be >= 2".into()));
        }
        if self.utts_per_speaker == 0 {
            return Err(Error::Config("corpus.utts_per_speaker must be >= 1".into()));
        }
        if self.frames_min == 0 || self.frames_min > self.frames_max {
            return Err(Error::Config(
                "corpus frame range must satisfy 1 <= frames_min <= frames_max".into(),
            ));
        }
        if self.within_noise < 0.0 || self.channel_noise < 0.0 {
            return Err(Error::Config("corpus noise sigmas must be >= 0".into()));
        }
        if !(self.gain.is_finite() && self.gain > 0.0) {
            return Err(Error::Config("corpus.gain must be positive".into()));
        }
        Ok(())
    }
}

/// Utterances grouped by speaker; speaker labels are dense indices into
/// `speakers`.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub feature_dim: usize,
    pub speakers: Vec<Vec<Matrix>>,
}

impl Corpus {
    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn n_utterances(&self) -> usize {
        self.speakers.iter().map(Vec::len).sum()
    }

    pub fn utterance(&self, id: UttId) -> Result<&Matrix> {
        self.speakers
            .get(id.speaker)
            .and_then(|utts| utts.get(id.utt))
            .ok_or_else(|| Error::Shape(format!("utterance {id} not present in corpus")))
    }
}

/// A corpus partitioned for open-set verification: training utterances,
/// a validation slice held out from the *same* speakers, and a disjoint
/// set of test speakers.
#[derive(Debug, Clone)]
pub struct CorpusSplit {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
    /// Global speaker index of the first test speaker.
    pub test_speaker_offset: usize,
}

/// Splits off the last `n_test_speakers` speakers for evaluation and the
/// last `val_utts_per_speaker` utterances of each remaining speaker for
/// validation.
pub fn split_corpus(
    corpus: &Corpus,
    n_test_speakers: usize,
    val_utts_per_speaker: usize,
) -> Result<CorpusSplit> {
    let s = corpus.n_speakers();
    if n_test_speakers == 0 || n_test_speakers + 2 > s {
        return Err(Error::Config(format!(
            "cannot hold out {n_test_speakers} test speakers from {s}; need at least 2 left for training"
        )));
    }
    let n_train = s - n_test_speakers;
    let mut train = Vec::with_capacity(n_train);
    let mut val = Vec::with_capacity(n_train);
    for utts in &corpus.speakers[..n_train] {
        if utts.len() <= val_utts_per_speaker {
            return Err(Error::Config(format!(
                "speaker has {} utterances, cannot hold out {val_utts_per_speaker} for validation",
                utts.len()
            )));
        }
        let cut = utts.len() - val_utts_per_speaker;
        train.push(utts[..cut].to_vec());
        val.push(utts[cut..].to_vec());
    }
    let test = corpus.speakers[n_train..].to_vec();
    Ok(CorpusSplit {
        train: Corpus { feature_dim: corpus.feature_dim, speakers: train },
        val: Corpus { feature_dim: corpus.feature_dim, speakers: val },
        test: Corpus { feature_dim: corpus.feature_dim, speakers: test },
        test_speaker_offset: n_train,
    })
}

/// Identifies an utterance by (speaker, utterance) position in a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UttId {
    pub speaker: usize,
    pub utt: usize,
}

impl std::fmt::Display for UttId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "s{}u{}", self.speaker, self.utt)
    }
}

impl std::str::FromStr for UttId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let body = s
            .strip_prefix('s')
            .ok_or_else(|| Error::Format(format!("bad utterance id {s:?}")))?;
        let (spk, utt) = body
            .split_once('u')
            .ok_or_else(|| Error::Format(format!("bad utterance id {s:?}")))?;
        Ok(UttId {
            speaker: spk
                .parse()
                .map_err(|_| Error::Format(format!("bad utterance id {s:?}")))?,
            utt: utt
                .parse()
                .map_err(|_| Error::Format(format!("bad utterance id {s:?}")))?,
        })
    }
}

/// An enrollment/test pair with its ground-truth flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trial {
    pub enroll: UttId,
    pub test: UttId,
    pub target: bool,
}

/// Samples `n_target` same-speaker and `n_nontarget` cross-speaker pairs
/// from the speakers `speaker_range` of `corpus`, without repetition.
/// Ids use global corpus numbering.
pub fn generate_trials(
    corpus: &Corpus,
    speaker_range: std::ops::Range<usize>,
    seed: u64,
    n_target: usize,
    n_nontarget: usize,
) -> Result<Vec<Trial>> {
    if speaker_range.end > corpus.n_speakers() || speaker_range.is_empty() {
        return Err(Error::Config("trial speaker range out of bounds".into()));
    }
    let speakers: Vec<usize> = speaker_range.collect();

    let mut target_pool = Vec::new();
    for &s in &speakers {
        let n_utt = corpus.speakers[s].len();
        for a in 0..n_utt {
            for b in (a + 1)..n_utt {
                target_pool.push((UttId { speaker: s, utt: a }, UttId { speaker: s, utt: b }));
            }
        }
    }
    let mut nontarget_pool = Vec::new();
    for (i, &sa) in speakers.iter().enumerate() {
        for &sb in &speakers[(i + 1)..] {
            for a in 0..corpus.speakers[sa].len() {
                for b in 0..corpus.speakers[sb].len() {
                    nontarget_pool
                        .push((UttId { speaker: sa, utt: a }, UttId { speaker: sb, utt: b }));
                }
            }
        }
    }
    if n_target > target_pool.len() {
        return Err(Error::Config(format!(
            "requested {n_target} target trials but only {} distinct pairs exist",
            target_pool.len()
        )));
    }
    if n_nontarget > nontarget_pool.len() {
        return Err(Error::Config(format!(
            "requested {n_nontarget} nontarget trials but only {} distinct pairs exist",
            nontarget_pool.len()
        )));
    }

    let mut rng = RngStream::new(seed, stream_id(STREAM_TRIALS, 0, 0));
    let mut trials = Vec::with_capacity(n_target + n_nontarget);
    for idx in rng.choose_distinct(target_pool.len(), n_target) {
        let (enroll, test) = target_pool[idx];
        trials.push(Trial { enroll, test, target: true });
    }
    for idx in rng.choose_distinct(nontarget_pool.len(), n_nontarget) {
        let (enroll, test) = nontarget_pool[idx];
        trials.push(Trial { enroll, test, target: false });
    }
    Ok(trials)
}
