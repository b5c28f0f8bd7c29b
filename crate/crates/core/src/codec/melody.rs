use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use super::{FrameSequence, FRAMES_PER_MEASURE, HOLD, REST};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreFormat {
    Abc,
    Midi,
}

impl ScoreFormat {
    pub fn from_extension(ext: &str) -> Option<Self> {
        match ext.to_ascii_lowercase().as_str() {
            "abc" => Some(Self::Abc),
            "mid" | "midi" => Some(Self::Midi),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelodyMeta {
    #[serde(default)]
    pub key: String,
    /// Quarter-note beats per minute.
    pub tempo: f64,
}

impl Default for MelodyMeta {
    fn default() -> Self {
        Self {
            key: String::new(),
            tempo: 120.0,
        }
    }
}

/// A parsed tune; also the record type of the processed corpus (one JSON line each).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Melody {
    pub id: String,
    pub meta: MelodyMeta,
    pub measures: Vec<FrameSequence>,
}

impl Melody {
    pub fn new(id: impl Into<String>, meta: MelodyMeta, measures: Vec<FrameSequence>) -> Result<Self> {
        if measures.is_empty() {
            return Err(Error::Parse("melody has no measures".into()));
        }
        Ok(Self {
            id: id.into(),
            meta,
            measures,
        })
    }

    pub fn len(&self) -> usize {
        self.measures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measures.is_empty()
    }
}

/// Parses a single tune. ABC input containing several tunes yields the first one.
pub fn parse_score(source: &[u8], format: ScoreFormat) -> Result<Melody> {
    match format {
        ScoreFormat::Abc => {
            let text = std::str::from_utf8(source)
                .map_err(|e| Error::Parse(format!("ABC source is not UTF-8: {e}")))?;
            super::abc::parse_tune(text)
        }
        ScoreFormat::Midi => super::midi::parse_midi(source),
    }
}

pub fn export_midi(measures: &[FrameSequence], tempo: f64) -> Vec<u8> {
    super::midi::write_midi(measures, tempo)
}

/// A note on a continuous frame timeline, before quantization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct TimedNote {
    pub start: Ratio<i64>,
    pub end: Ratio<i64>,
    pub pitch: u8,
}

/// Nearest grid frame, ties resolved toward the earlier frame.
pub(crate) fn snap(x: Ratio<i64>) -> i64 {
    let (n, d) = (*x.numer(), *x.denom());
    (2 * n + d - 1).div_euclid(2 * d)
}

/// Quantizes notes onto the 24-frame grid and slices the timeline into measures.
/// Notes sustained across a barline restart as fresh onsets in the next measure.
pub(crate) fn grid_measures(notes: &[TimedNote], min_measures: usize) -> Result<Vec<FrameSequence>> {
    let mut sorted = notes.to_vec();
    sorted.sort_by(|a, b| a.start.cmp(&b.start).then(a.end.cmp(&b.end)));
    for pair in sorted.windows(2) {
        if pair[1].start < pair[0].end {
            return Err(Error::Polyphony(format!(
                "note {} starts before note {} ends",
                pair[1].pitch, pair[0].pitch
            )));
        }
    }

    let mut placed: Vec<(i64, i64, u8)> = Vec::with_capacity(sorted.len());
    for note in &sorted {
        if note.start < Ratio::from_integer(0) {
            return Err(Error::Parse("note before the start of the tune".into()));
        }
        let start = snap(note.start);
        let end = snap(note.end).max(start + 1);
        if let Some(prev) = placed.last_mut() {
            if start <= prev.0 {
                // collapsed onto the previous onset by quantization
                continue;
            }
            prev.1 = prev.1.min(start);
        }
        placed.push((start, end, note.pitch));
    }

    let total_frames = placed.last().map_or(0, |n| n.1 as usize);
    let count = total_frames.div_ceil(FRAMES_PER_MEASURE).max(min_measures);
    let mut timeline = vec![REST; count * FRAMES_PER_MEASURE];
    for &(start, end, pitch) in &placed {
        let (start, end) = (start as usize, end as usize);
        timeline[start] = pitch as u32;
        timeline[start + 1..end].fill(HOLD);
    }

    let mut sounding = REST;
    for (i, t) in timeline.iter_mut().enumerate() {
        if *t == HOLD && i % FRAMES_PER_MEASURE == 0 {
            *t = sounding;
        } else if *t != HOLD {
            sounding = *t;
        }
    }

    timeline
        .chunks_exact(FRAMES_PER_MEASURE)
        .map(FrameSequence::from_slice)
        .collect()
}
