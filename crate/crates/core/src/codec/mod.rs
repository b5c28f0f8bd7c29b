//! Frame-level measure encoding and the pitch/rhythm factorization.
//!
//! A measure is 24 frames (4 beats of 6 ticks). Frame tokens are note-onset
//! pitches `0..=127`, [`HOLD`] and [`REST`]. A measure factorizes into a
//! [`PitchSeq`] (onset pitches compacted to the front, padded with
//! [`PITCH_PAD`]) and a positionally aligned [`RhythmSeq`].

pub mod abc;
pub mod melody;
pub mod midi;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use melody::{export_midi, parse_score, Melody, MelodyMeta, ScoreFormat};

pub const FRAMES_PER_MEASURE: usize = 24;
pub const BEATS_PER_MEASURE: usize = 4;
pub const TICKS_PER_BEAT: usize = 6;

pub const HOLD: u32 = 128;
pub const REST: u32 = 129;
/// Size of the frame alphabet.
pub const FRAME_VOCAB: usize = 130;

pub const PITCH_PAD: u32 = 128;
pub const PITCH_VOCAB: usize = 129;

pub const RHYTHM_VOCAB: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum RhythmToken {
    Onset = 0,
    Hold = 1,
    Rest = 2,
}

impl RhythmToken {
    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn from_id(id: u32) -> Result<Self> {
        match id {
            0 => Ok(Self::Onset),
            1 => Ok(Self::Hold),
            2 => Ok(Self::Rest),
            token => Err(Error::Vocab {
                token,
                alphabet: "rhythm",
            }),
        }
    }

    /// Rhythm class of a frame token.
    pub fn of_frame(token: u32) -> Self {
        match token {
            HOLD => Self::Hold,
            REST => Self::Rest,
            _ => Self::Onset,
        }
    }
}

/// One measure as 24 frame tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FrameSequence([u32; FRAMES_PER_MEASURE]);

impl FrameSequence {
    /// Checks the alphabet and the well-formedness rules: no HOLD at frame 0
    /// and no HOLD directly after a REST.
    pub fn new(frames: [u32; FRAMES_PER_MEASURE]) -> Result<Self> {
        let seq = Self::from_raw(frames)?;
        if let Some(pos) = seq.first_malformed() {
            return Err(Error::Parse(format!("HOLD without a sounding note at frame {pos}")));
        }
        Ok(seq)
    }

    /// Alphabet check only. Decoder output may violate the hold rules and
    /// metrics are computed on it unrepaired.
    pub fn from_raw(frames: [u32; FRAMES_PER_MEASURE]) -> Result<Self> {
        if let Some(&token) = frames.iter().find(|&&t| t > REST) {
            return Err(Error::Vocab {
                token,
                alphabet: "frame",
            });
        }
        Ok(Self(frames))
    }

    pub fn from_slice(frames: &[u32]) -> Result<Self> {
        let arr: [u32; FRAMES_PER_MEASURE] = frames.try_into().map_err(|_| {
            Error::ShapeMismatch(format!(
                "measure has {} frames, expected {FRAMES_PER_MEASURE}",
                frames.len()
            ))
        })?;
        Self::new(arr)
    }

    pub fn rest() -> Self {
        Self([REST; FRAMES_PER_MEASURE])
    }

    pub fn frames(&self) -> &[u32; FRAMES_PER_MEASURE] {
        &self.0
    }

    pub fn is_well_formed(&self) -> bool {
        self.first_malformed().is_none()
    }

    fn first_malformed(&self) -> Option<usize> {
        let mut prev = REST;
        for (i, &t) in self.0.iter().enumerate() {
            if t == HOLD && prev == REST {
                return Some(i);
            }
            prev = t;
        }
        None
    }

    /// Playback repair: a HOLD with nothing sounding becomes REST.
    pub fn repaired(&self) -> Self {
        let mut out = self.0;
        let mut prev = REST;
        for t in out.iter_mut() {
            if *t == HOLD && prev == REST {
                *t = REST;
            }
            prev = *t;
        }
        Self(out)
    }

    pub fn onset_count(&self) -> usize {
        self.0.iter().filter(|&&t| t < HOLD).count()
    }

    /// Onset pitches in order.
    pub fn onset_pitches(&self) -> impl Iterator<Item = u32> + '_ {
        self.0.iter().copied().filter(|&t| t < HOLD)
    }

    /// `(onset_frame, duration_frames, pitch)` for every note in the measure.
    pub fn notes(&self) -> Vec<(usize, usize, u8)> {
        let mut notes: Vec<(usize, usize, u8)> = Vec::new();
        let mut sounding = false;
        for (i, &t) in self.0.iter().enumerate() {
            match t {
                HOLD if sounding => notes.last_mut().expect("sounding note").1 += 1,
                HOLD | REST => sounding = false,
                pitch => {
                    notes.push((i, 1, pitch as u8));
                    sounding = true;
                }
            }
        }
        notes
    }
}

impl Serialize for FrameSequence {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<'de> Deserialize<'de> for FrameSequence {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let frames = Vec::<u32>::deserialize(d)?;
        FrameSequence::from_slice(&frames).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PitchSeq([u32; FRAMES_PER_MEASURE]);

impl PitchSeq {
    /// Builds a padded pitch sequence from an ordered pitch list (at most 24).
    pub fn from_pitches(pitches: &[u32]) -> Result<Self> {
        if pitches.len() > FRAMES_PER_MEASURE {
            return Err(Error::Range(format!(
                "{} pitches exceed {FRAMES_PER_MEASURE} frames",
                pitches.len()
            )));
        }
        let mut tokens = [PITCH_PAD; FRAMES_PER_MEASURE];
        for (slot, &p) in tokens.iter_mut().zip(pitches) {
            if p > 127 {
                return Err(Error::Range(format!("pitch {p}")));
            }
            *slot = p;
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &[u32; FRAMES_PER_MEASURE] {
        &self.0
    }

    pub fn pitches(&self) -> impl Iterator<Item = u32> + '_ {
        self.0.iter().copied().take_while(|&t| t != PITCH_PAD)
    }

    pub fn len(&self) -> usize {
        self.pitches().count()
    }

    pub fn is_empty(&self) -> bool {
        self.0[0] == PITCH_PAD
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RhythmSeq([RhythmToken; FRAMES_PER_MEASURE]);

impl RhythmSeq {
    pub fn from_ids(ids: &[u32]) -> Result<Self> {
        if ids.len() != FRAMES_PER_MEASURE {
            return Err(Error::ShapeMismatch(format!(
                "rhythm pattern has {} cells, expected {FRAMES_PER_MEASURE}",
                ids.len()
            )));
        }
        let mut tokens = [RhythmToken::Rest; FRAMES_PER_MEASURE];
        for (slot, &id) in tokens.iter_mut().zip(ids) {
            *slot = RhythmToken::from_id(id)?;
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &[RhythmToken; FRAMES_PER_MEASURE] {
        &self.0
    }

    pub fn ids(&self) -> [u32; FRAMES_PER_MEASURE] {
        self.0.map(RhythmToken::id)
    }

    pub fn onset_count(&self) -> usize {
        self.0.iter().filter(|&&t| t == RhythmToken::Onset).count()
    }

    /// Same hold rules as [`FrameSequence`].
    pub fn is_well_formed(&self) -> bool {
        let mut prev = RhythmToken::Rest;
        for &t in &self.0 {
            if t == RhythmToken::Hold && prev == RhythmToken::Rest {
                return false;
            }
            prev = t;
        }
        true
    }
}

/// `notes` are `(onset_frame, duration_frames, pitch)`, sorted and non-overlapping.
pub fn encode_measure(notes: &[(usize, usize, u32)]) -> Result<FrameSequence> {
    let mut frames = [REST; FRAMES_PER_MEASURE];
    let mut cursor = 0usize;
    for &(onset, duration, pitch) in notes {
        if pitch > 127 {
            return Err(Error::Range(format!("pitch {pitch}")));
        }
        if duration == 0 || onset >= FRAMES_PER_MEASURE || onset + duration > FRAMES_PER_MEASURE {
            return Err(Error::Range(format!(
                "note at frame {onset} lasting {duration} frames does not fit the measure"
            )));
        }
        if onset < cursor {
            return Err(Error::Overlap(onset));
        }
        frames[onset] = pitch;
        frames[onset + 1..onset + duration].fill(HOLD);
        cursor = onset + duration;
    }
    Ok(FrameSequence(frames))
}

pub fn factorize(frames: &FrameSequence) -> (PitchSeq, RhythmSeq) {
    let mut pitch = [PITCH_PAD; FRAMES_PER_MEASURE];
    for (slot, p) in pitch.iter_mut().zip(frames.onset_pitches()) {
        *slot = p;
    }
    let rhythm = frames.0.map(RhythmToken::of_frame);
    (PitchSeq(pitch), RhythmSeq(rhythm))
}

/// The k-th onset of `rhythm` takes the k-th pitch of `pitch`; surplus pitches are dropped.
pub fn recombine(pitch: &PitchSeq, rhythm: &RhythmSeq) -> Result<FrameSequence> {
    let onsets = rhythm.onset_count();
    let available = pitch.len();
    if available < onsets {
        return Err(Error::ArityMismatch {
            pitches: available,
            onsets,
        });
    }
    let mut pitches = pitch.pitches();
    let frames = rhythm.0.map(|t| match t {
        RhythmToken::Onset => pitches.next().expect("arity checked"),
        RhythmToken::Hold => HOLD,
        RhythmToken::Rest => REST,
    });
    Ok(FrameSequence(frames))
}
