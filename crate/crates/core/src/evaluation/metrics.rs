use log::debug;

use crate::codec::{FrameSequence, RhythmSeq, RhythmToken, HOLD};
use crate::error::{Error, Result};

fn check_lengths(gen: &[FrameSequence], truth: &[FrameSequence]) -> Result<()> {
    if gen.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} generated vs {} reference measures",
            gen.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

/// Fraction of the truth's onset frames where the generated token is the same
/// pitch. `None` when the truth has no onsets at all.
pub fn pitch_accuracy(gen: &[FrameSequence], truth: &[FrameSequence]) -> Result<Option<f64>> {
    check_lengths(gen, truth)?;
    let (mut hits, mut onsets) = (0usize, 0usize);
    for (g, t) in gen.iter().zip(truth) {
        for (gf, tf) in g.frames().iter().zip(t.frames()) {
            if *tf < HOLD {
                onsets += 1;
                hits += (gf == tf) as usize;
            }
        }
    }
    Ok((onsets > 0).then(|| hits as f64 / onsets as f64))
}

/// Fraction of all frames whose onset/hold/rest class agrees.
pub fn rhythm_accuracy(gen: &[FrameSequence], truth: &[FrameSequence]) -> Result<f64> {
    check_lengths(gen, truth)?;
    let agree: usize = gen
        .iter()
        .zip(truth)
        .map(|(g, t)| {
            g.frames()
                .iter()
                .zip(t.frames())
                .filter(|(a, b)| RhythmToken::of_frame(**a) == RhythmToken::of_frame(**b))
                .count()
        })
        .sum();
    Ok(agree as f64 / (truth.len() * crate::codec::FRAMES_PER_MEASURE) as f64)
}

pub fn rhythm_class_agreement(a: &RhythmSeq, b: &RhythmSeq) -> f64 {
    let same = a.tokens().iter().zip(b.tokens()).filter(|(x, y)| x == y).count();
    same as f64 / crate::codec::FRAMES_PER_MEASURE as f64
}

/// Longest common subsequence length, O(|a|·|b|) time and O(|b|) space.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// Onset pitches of consecutive measures, concatenated.
pub fn onset_string(measures: &[FrameSequence]) -> Vec<u32> {
    measures.iter().flat_map(|m| m.onset_pitches()).collect()
}

/// LCS of the onset-pitch strings divided by the source string's length.
/// An empty source scores 1.0.
pub fn lcs_pitch_accuracy(gen: &[FrameSequence], source: &[FrameSequence]) -> f64 {
    let src = onset_string(source);
    if src.is_empty() {
        debug!("empty source onset string scored as 1.0");
        return 1.0;
    }
    lcs_len(&onset_string(gen), &src) as f64 / src.len() as f64
}
