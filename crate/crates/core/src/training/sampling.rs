use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrainError;
use crate::data_synth::Dataset;

/// Dataset indices of a training sequence (anchor last) with their labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceSample {
    pub frames: Vec<usize>,
    pub labels: Vec<Vec<u8>>,
    pub subject: String,
}

impl SequenceSample {
    pub fn anchor(&self) -> usize {
        *self.frames.last().expect("sequences are non-empty")
    }
}

/// `seq_len - 1` distinct frames drawn uniformly without replacement from
/// the anchor's earlier frames in the same session, in ascending order,
/// followed by the anchor. Short histories are padded at the front with
/// copies of the earliest frame. Anchors without history are rejected.
pub fn assemble_sequence_with<R: Rng + ?Sized>(
    data: &Dataset,
    anchor: usize,
    seq_len: usize,
    rng: &mut R,
) -> Result<SequenceSample, TrainError> {
    if anchor >= data.len() {
        return Err(TrainError::Config(format!("anchor {anchor} outside a dataset of {}", data.len())));
    }
    if seq_len == 0 {
        return Err(TrainError::Config("sequence length must be positive".into()));
    }
    let priors = data.priors(anchor);
    if priors.is_empty() {
        return Err(TrainError::NoPriors { frame: anchor });
    }
    let need = seq_len - 1;
    let mut frames: Vec<usize> = if priors.len() > need {
        let mut picked: Vec<usize> = index::sample(rng, priors.len(), need)
            .into_iter()
            .map(|i| priors.start + i)
            .collect();
        picked.sort_unstable();
        picked
    } else {
        let mut v = vec![priors.start; need - priors.len()];
        v.extend(priors);
        v
    };
    frames.push(anchor);
    let labels = frames.iter().map(|&i| data.frames[i].labels.clone()).collect();
    Ok(SequenceSample {
        frames,
        labels,
        subject: data.frames[anchor].subject.clone(),
    })
}

/// [`assemble_sequence_with`] on a ChaCha8 stream seeded with `seed`.
pub fn assemble_sequence(data: &Dataset, anchor: usize, seq_len: usize, seed: u64) -> Result<SequenceSample, TrainError> {
    assemble_sequence_with(data, anchor, seq_len, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `n` indices drawn uniformly with replacement from `pool`.
pub fn sample_batch<R: Rng + ?Sized>(pool: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
}

/// `n / 2` positives followed by `n / 2` negatives, each drawn with
/// replacement. `n` must be even and both pools non-empty.
pub fn sample_balanced<R: Rng + ?Sized>(positives: &[usize], negatives: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    let mut out = sample_batch(positives, n / 2, rng);
    out.extend(sample_batch(negatives, n / 2, rng));
    out
}

/// Consecutive evaluation windows covering every frame of `indices` once.
/// Each window is `(frames, scored)`: `seq_len` dataset indices in time
/// order (front-padded with the session's first frame when the session is
/// shorter) and the positions within it whose outputs are scored.
pub fn evaluation_windows(data: &Dataset, indices: &[usize], seq_len: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < indices.len() {
        // one session: a run of indices sharing the same session start
        let start = data.priors(indices[i]).start;
        let mut j = i;
        while j < indices.len() && data.priors(indices[j]).start == start {
            j += 1;
        }
        let session = &indices[i..j];
        let mut pos = 0;
        while pos < session.len() {
            let end = (pos + seq_len).min(session.len());
            let lo = end.saturating_sub(seq_len);
            let mut frames = vec![session[0]; seq_len - (end - lo)];
            frames.extend_from_slice(&session[lo..end]);
            let pad = seq_len - (end - pos);
            out.push((frames, (pad..seq_len).collect()));
            pos = end;
        }
        i = j;
    }
    out
}
