use crate::error::Result;
use crate::numkit::{stream_id, Matrix, RngStream, STREAM_SPEAKER, STREAM_UTTERANCE};
use crate::par;

use super::{Corpus, CorpusSpec};

/// Generates the synthetic corpus. Speaker identities are unit vectors
/// drawn uniformly on the hypersphere; each utterance adds a per-utterance
/// channel offset and per-frame noise:
///
/// `frame = gain * direction + channel + N(0, within_noise^2 I)`
///
/// Every utterance owns its own random stream keyed by (speaker, utterance),
/// so generation order (and parallelism) cannot change the corpus.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let speakers: Vec<Vec<Matrix>> = par::map_range(spec.n_speakers, |s| {
        let direction = speaker_direction(spec, s as u64);
        (0..spec.utts_per_speaker)
            .map(|u| synth_utterance(spec, &direction, s as u64, u as u64))
            .collect()
    });
    Ok(Corpus { feature_dim: spec.feature_dim, speakers })
}

fn speaker_direction(spec: &CorpusSpec, s: u64) -> Vec<f64> {
    let mut rng = RngStream::new(spec.seed, stream_id(STREAM_SPEAKER, s, 0));
    loop {
        let v = rng.draw_gaussian(spec.feature_dim);
        let n = crate::numkit::norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn synth_utterance(spec: &CorpusSpec, direction: &[f64], s: u64, u: u64) -> Matrix {
    let mut rng = RngStream::new(spec.seed, stream_id(STREAM_UTTERANCE, s, u));
    let frames = rng.range_inclusive(spec.frames_min, spec.frames_max);
    let dim = spec.feature_dim;
    let channel: Vec<f64> = rng
        .draw_gaussian(dim)
        .into_iter()
        .map(|x| x * spec.channel_noise)
        .collect();
    let mut data = Vec::with_capacity(frames * dim);
    for _ in 0..frames {
        for (c, &dir) in direction.iter().enumerate() {
            data.push(spec.gain * dir + channel[c] + spec.within_noise * rng.gaussian());
        }
    }
    Matrix::from_vec(frames, dim, data).expect("synthesized frames are finite")
}
