//! On-disk corpus and trial-list formats.
//!
//! Corpus files carry a text header (speaker count, dimension, utterance
//! and frame counts) followed by raw little-endian f64 frames, so they are
//! inspectable with `head` yet compact. Trial lists are plain text,
//! `enroll-id test-id target|nontarget` per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkit::Matrix;

use super::{Corpus, Trial, UttId};

const CORPUS_MAGIC: &str = "SVX-CORPUS 1";

pub fn write_corpus(corpus: &Corpus, path: &Path, digest: u64) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{CORPUS_MAGIC}")?;
    writeln!(w, "digest {digest:016x}")?;
    writeln!(w, "speakers {}", corpus.n_speakers())?;
    writeln!(w, "dim {}", corpus.feature_dim)?;
    let utts: Vec<String> = corpus.speakers.iter().map(|u| u.len().to_string()).collect();
    writeln!(w, "utts {}", utts.join(" "))?;
    let frames: Vec<String> = corpus
        .speakers
        .iter()
        .flat_map(|utts| utts.iter().map(|u| u.rows().to_string()))
        .collect();
    writeln!(w, "frames {}", frames.join(" "))?;
    writeln!(w, "data")?;
    for utts in &corpus.speakers {
        for utt in utts {
            for &v in utt.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn header_line(lines: &mut impl Iterator<Item = std::io::Result<String>>, key: &str) -> Result<String> {
    let line = lines
        .next()
        .ok_or_else(|| Error::Format(format!("corpus header truncated before '{key}'")))??;
    line.strip_prefix(key)
        .map(|rest| rest.trim().to_string())
        .ok_or_else(|| Error::Format(format!("expected corpus header line '{key} ...', got {line:?}")))
}

fn parse_counts(text: &str, what: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|tok| {
            tok.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad {what} count {tok:?}")))
        })
        .collect()
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut lines = (&mut reader).lines();
    let magic = lines
        .next()
        .ok_or_else(|| Error::Format("empty corpus file".into()))??;
    if magic != CORPUS_MAGIC {
        return Err(Error::Format(format!(
            "not a corpus file (magic {magic:?}, expected {CORPUS_MAGIC:?})"
        )));
    }
    let _digest = header_line(&mut lines, "digest")?;
    let n_speakers: usize = header_line(&mut lines, "speakers")?
        .parse()
        .map_err(|_| Error::Format("bad speaker count".into()))?;
    let dim: usize = header_line(&mut lines, "dim")?
        .parse()
        .map_err(|_| Error::Format("bad dimension".into()))?;
    let utt_counts = parse_counts(&header_line(&mut lines, "utts")?, "utterance")?;
    if utt_counts.len() != n_speakers {
        return Err(Error::Format(format!(
            "{} utterance counts for {n_speakers} speakers",
            utt_counts.len()
        )));
    }
    let frame_counts = parse_counts(&header_line(&mut lines, "frames")?, "frame")?;
    let total_utts: usize = utt_counts.iter().sum();
    if frame_counts.len() != total_utts {
        return Err(Error::Format(format!(
            "{} frame counts for {total_utts} utterances",
            frame_counts.len()
        )));
    }
    match lines.next() {
        Some(Ok(line)) if line == "data" => {}
        other => {
            return Err(Error::Format(format!(
                "expected 'data' separator, got {other:?}"
            )))
        }
    }
    drop(lines);

    let mut speakers = Vec::with_capacity(n_speakers);
    let mut frame_iter = frame_counts.iter();
    let mut buf = Vec::new();
    for &n_utts in &utt_counts {
        let mut utts = Vec::with_capacity(n_utts);
        for _ in 0..n_utts {
            let frames = *frame_iter.next().expect("count checked above");
            let n_bytes = frames * dim * 8;
            buf.resize(n_bytes, 0);
            reader.read_exact(&mut buf).map_err(|e| {
                if e.kind() == std::io::ErrorKind::UnexpectedEof {
                    Error::Format("corpus payload truncated".into())
                } else {
                    Error::Io(e)
                }
            })?;
            let data: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            utts.push(Matrix::from_vec(frames, dim, data)?);
        }
        speakers.push(utts);
    }
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after corpus payload".into()));
    }
    Ok(Corpus { feature_dim: dim, speakers })
}

pub fn write_trials(trials: &[Trial], path: &Path, digest: u64) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# digest {digest:016x}")?;
    for t in trials {
        let label = if t.target { "target" } else { "nontarget" };
        writeln!(w, "{} {} {label}", t.enroll, t.test)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    let reader = BufReader::new(File::open(path)?);
    let mut trials = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let (enroll, test, label) = match (fields.next(), fields.next(), fields.next(), fields.next()) {
            (Some(e), Some(t), Some(l), None) => (e, t, l),
            _ => {
                return Err(Error::Format(format!(
                    "trial line {} must be 'enroll test target|nontarget'",
                    lineno + 1
                )))
            }
        };
        let target = match label {
            "target" => true,
            "nontarget" => false,
            other => {
                return Err(Error::Format(format!(
                    "trial line {}: unknown label {other:?}",
                    lineno + 1
                )))
            }
        };
        trials.push(Trial {
            enroll: enroll.parse::<UttId>()?,
            test: test.parse::<UttId>()?,
            target,
        });
    }
    Ok(trials)
}
