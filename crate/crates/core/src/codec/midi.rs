use midly::num::{u15, u24, u28, u4, u7};
use midly::{Format, Header, MetaMessage, MidiMessage, Smf, Timing, TrackEvent, TrackEventKind};
use num_rational::Ratio;

use super::melody::{grid_measures, Melody, MelodyMeta, TimedNote};
use super::{FrameSequence, FRAMES_PER_MEASURE};
use crate::error::{Error, Result};

pub const TICKS_PER_QUARTER: u16 = 480;
const TICKS_PER_FRAME: u32 = TICKS_PER_QUARTER as u32 * 4 / FRAMES_PER_MEASURE as u32;
const VELOCITY: u8 = 80;
const PERCUSSION_CHANNEL: u8 = 9;

pub(crate) fn parse_midi(bytes: &[u8]) -> Result<Melody> {
    let smf = Smf::parse(bytes).map_err(|e| Error::Parse(format!("MIDI: {e}")))?;
    let tpq = match smf.header.timing {
        Timing::Metrical(t) if t.as_int() > 0 => t.as_int() as i64,
        Timing::Metrical(_) => return Err(Error::Parse("MIDI: zero ticks per quarter".into())),
        Timing::Timecode(..) => return Err(Error::Parse("MIDI: timecode timing is not supported".into())),
    };

    let mut meta = MelodyMeta::default();
    let mut tempo_seen = false;
    // (tick, is_on, pitch)
    let mut events: Vec<(u64, bool, u8)> = Vec::new();
    let mut end_tick = 0u64;
    for track in &smf.tracks {
        let mut tick = 0u64;
        for ev in track {
            tick += ev.delta.as_int() as u64;
            match ev.kind {
                TrackEventKind::Midi { channel, message } if channel.as_int() != PERCUSSION_CHANNEL => match message {
                    MidiMessage::NoteOn { key, vel } if vel.as_int() > 0 => events.push((tick, true, key.as_int())),
                    MidiMessage::NoteOn { key, .. } | MidiMessage::NoteOff { key, .. } => {
                        events.push((tick, false, key.as_int()))
                    }
                    _ => {}
                },
                TrackEventKind::Meta(MetaMessage::TimeSignature(num, den_pow, ..)) => {
                    if num != 4 || den_pow != 2 {
                        return Err(Error::UnsupportedMeter(format!("{num}/{}", 1u64 << den_pow.min(16))));
                    }
                }
                TrackEventKind::Meta(MetaMessage::Tempo(us)) if !tempo_seen && us.as_int() > 0 => {
                    meta.tempo = 60_000_000.0 / us.as_int() as f64;
                    tempo_seen = true;
                }
                TrackEventKind::Meta(MetaMessage::KeySignature(fifths, minor)) if meta.key.is_empty() => {
                    meta.key = key_name(fifths, minor);
                }
                _ => {}
            }
        }
        end_tick = end_tick.max(tick);
    }
    // note-offs sort before note-ons at the same tick
    events.sort_by_key(|&(tick, on, _)| (tick, on));

    let to_frames = |tick: u64| Ratio::new(tick as i64 * 6, tpq);
    let mut notes = Vec::new();
    let mut active: Option<(u64, u8)> = None;
    for (tick, on, pitch) in events {
        match (on, active) {
            (true, None) => active = Some((tick, pitch)),
            (true, Some((_, other))) => {
                return Err(Error::Polyphony(format!(
                    "note {pitch} starts at tick {tick} while {other} sounds"
                )))
            }
            (false, Some((start, p))) if p == pitch => {
                notes.push(TimedNote {
                    start: to_frames(start),
                    end: to_frames(tick),
                    pitch,
                });
                active = None;
            }
            (false, _) => {}
        }
    }
    if let Some((start, pitch)) = active {
        notes.push(TimedNote {
            start: to_frames(start),
            end: to_frames(end_tick.max(start)),
            pitch,
        });
    }

    let end_frames = super::melody::snap(to_frames(end_tick)).max(0) as usize;
    let min_measures = end_frames.div_ceil(FRAMES_PER_MEASURE).max(1);
    let measures = grid_measures(&notes, min_measures)?;
    Melody::new("midi", meta, measures)
}

fn key_name(fifths: i8, minor: bool) -> String {
    const MAJOR: [&str; 15] = ["Cb", "Gb", "Db", "Ab", "Eb", "Bb", "F", "C", "G", "D", "A", "E", "B", "F#", "C#"];
    const MINOR: [&str; 15] = ["Abm", "Ebm", "Bbm", "Fm", "Cm", "Gm", "Dm", "Am", "Em", "Bm", "F#m", "C#m", "G#m", "D#m", "A#m"];
    let idx = (fifths.clamp(-7, 7) + 7) as usize;
    if minor { MINOR[idx] } else { MAJOR[idx] }.to_string()
}

/// Single-track MIDI: one frame is 80 ticks at 480 ticks per quarter.
pub(crate) fn write_midi(measures: &[FrameSequence], tempo: f64) -> Vec<u8> {
    let tempo = if tempo.is_finite() && tempo > 0.0 { tempo } else { 120.0 };
    let us_per_quarter = (60_000_000.0 / tempo).round().clamp(1.0, 16_777_215.0) as u32;
    let channel = u4::new(0);

    let mut timed: Vec<(u32, TrackEventKind<'static>)> = vec![
        (0, TrackEventKind::Meta(MetaMessage::Tempo(u24::new(us_per_quarter)))),
        (0, TrackEventKind::Meta(MetaMessage::TimeSignature(4, 2, 24, 8))),
    ];
    for (m, measure) in measures.iter().enumerate() {
        let base = (m * FRAMES_PER_MEASURE) as u32 * TICKS_PER_FRAME;
        for (onset, duration, pitch) in measure.repaired().notes() {
            let key = u7::new(pitch);
            let on = base + onset as u32 * TICKS_PER_FRAME;
            let off = on + duration as u32 * TICKS_PER_FRAME;
            timed.push((on, TrackEventKind::Midi {
                channel,
                message: MidiMessage::NoteOn { key, vel: u7::new(VELOCITY) },
            }));
            timed.push((off, TrackEventKind::Midi {
                channel,
                message: MidiMessage::NoteOff { key, vel: u7::new(0) },
            }));
        }
    }
    let is_on = |k: &TrackEventKind| matches!(k, TrackEventKind::Midi { message: MidiMessage::NoteOn { .. }, .. });
    timed.sort_by_key(|(tick, kind)| (*tick, is_on(kind)));
    let end = (measures.len() * FRAMES_PER_MEASURE) as u32 * TICKS_PER_FRAME;
    timed.push((end, TrackEventKind::Meta(MetaMessage::EndOfTrack)));

    let mut track = Vec::with_capacity(timed.len());
    let mut last = 0;
    for (tick, kind) in timed {
        track.push(TrackEvent {
            delta: u28::new(tick - last),
            kind,
        });
        last = tick;
    }
    let smf = Smf {
        header: Header::new(Format::SingleTrack, Timing::Metrical(u15::new(TICKS_PER_QUARTER))),
        tracks: vec![track],
    };
    let mut out = Vec::new();
    smf.write_std(&mut out).expect("writing to a Vec cannot fail");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode_measure, REST};

    fn note_times(bytes: &[u8]) -> Vec<(f64, bool, u8)> {
        let smf = Smf::parse(bytes).unwrap();
        let mut us_per_q = 500_000.0;
        let mut tick = 0u64;
        let mut out = Vec::new();
        for ev in &smf.tracks[0] {
            tick += ev.delta.as_int() as u64;
            let secs = tick as f64 / TICKS_PER_QUARTER as f64 * us_per_q / 1e6;
            match ev.kind {
                TrackEventKind::Meta(MetaMessage::Tempo(t)) => us_per_q = t.as_int() as f64,
                TrackEventKind::Midi { message: MidiMessage::NoteOn { key, .. }, .. } => out.push((secs, true, key.as_int())),
                TrackEventKind::Midi { message: MidiMessage::NoteOff { key, .. }, .. } => out.push((secs, false, key.as_int())),
                _ => {}
            }
        }
        out
    }

    #[test]
    fn whole_note_timing() {
        let m = encode_measure(&[(0, 24, 60)]).unwrap();
        let events = note_times(&write_midi(&[m], 120.0));
        assert_eq!(events, vec![(0.0, true, 60), (2.0, false, 60)]);
    }

    #[test]
    fn rest_measure_has_no_notes() {
        let bytes = write_midi(&[FrameSequence::rest()], 120.0);
        assert!(note_times(&bytes).is_empty());
        let back = parse_midi(&bytes).unwrap();
        assert_eq!(back.measures, vec![FrameSequence::rest()]);
    }

    #[test]
    fn round_trip_with_repeated_pitch() {
        let a = encode_measure(&[(0, 3, 60), (3, 3, 60), (12, 12, 64)]).unwrap();
        let b = encode_measure(&[(0, 24, 64)]).unwrap();
        let bytes = write_midi(&[a, b, FrameSequence::rest()], 96.0);
        let back = parse_midi(&bytes).unwrap();
        assert_eq!(back.measures, vec![a, b, FrameSequence::rest()]);
        assert!((back.meta.tempo - 96.0).abs() < 1e-3);
    }

    #[test]
    fn three_four_rejected() {
        let mut smf = Smf::parse(&write_midi(&[FrameSequence::rest()], 120.0)).unwrap().to_static();
        smf.tracks[0][1].kind = TrackEventKind::Meta(MetaMessage::TimeSignature(3, 2, 24, 8));
        let mut bytes = Vec::new();
        smf.write_std(&mut bytes).unwrap();
        assert!(matches!(parse_midi(&bytes), Err(Error::UnsupportedMeter(_))));
    }

    #[test]
    fn overlapping_notes_rejected() {
        let on = |key: u8| TrackEventKind::Midi { channel: u4::new(0), message: MidiMessage::NoteOn { key: u7::new(key), vel: u7::new(90) } };
        let off = |key: u8| TrackEventKind::Midi { channel: u4::new(0), message: MidiMessage::NoteOff { key: u7::new(key), vel: u7::new(0) } };
        let track = vec![
            TrackEvent { delta: u28::new(0), kind: on(60) },
            TrackEvent { delta: u28::new(100), kind: on(64) },
            TrackEvent { delta: u28::new(100), kind: off(60) },
            TrackEvent { delta: u28::new(100), kind: off(64) },
            TrackEvent { delta: u28::new(0), kind: TrackEventKind::Meta(MetaMessage::EndOfTrack) },
        ];
        let smf = Smf { header: Header::new(Format::SingleTrack, Timing::Metrical(u15::new(480))), tracks: vec![track] };
        let mut bytes = Vec::new();
        smf.write_std(&mut bytes).unwrap();
        assert!(matches!(parse_midi(&bytes), Err(Error::Polyphony(_))));
    }

    #[test]
    fn unquantized_onsets_snap() {
        // 45 ticks is 0.5625 of an 80-tick frame: rounds up; 40 ticks is a tie: rounds down.
        let on = |key: u8| TrackEventKind::Midi { channel: u4::new(0), message: MidiMessage::NoteOn { key: u7::new(key), vel: u7::new(90) } };
        let off = |key: u8| TrackEventKind::Midi { channel: u4::new(0), message: MidiMessage::NoteOff { key: u7::new(key), vel: u7::new(0) } };
        let track = vec![
            TrackEvent { delta: u28::new(45), kind: on(60) },
            TrackEvent { delta: u28::new(435), kind: off(60) },
            TrackEvent { delta: u28::new(40), kind: on(62) },
            TrackEvent { delta: u28::new(400), kind: off(62) },
            TrackEvent { delta: u28::new(0), kind: TrackEventKind::Meta(MetaMessage::EndOfTrack) },
        ];
        let smf = Smf { header: Header::new(Format::SingleTrack, Timing::Metrical(u15::new(480))), tracks: vec![track] };
        let mut bytes = Vec::new();
        smf.write_std(&mut bytes).unwrap();
        let m = parse_midi(&bytes).unwrap();
        assert_eq!(m.measures[0].notes(), vec![(1, 5, 60), (6, 5, 62)]);
        assert_eq!(m.measures[0].frames()[23], REST);
    }
}
