//! A parser for the monophonic subset of ABC notation used by folk-tune collections.
//!
//! Each notated bar becomes one measure. A short first bar is treated as a
//! pickup and right-aligned; other short bars are padded with rest. Repeat
//! signs and ending brackets are read as plain barlines (no expansion).
//! Chords and voice overlays are rejected as polyphony; grace notes, chord
//! symbols, decorations and slurs are skipped.

use std::collections::HashMap;

use num_rational::Ratio;

use super::melody::{grid_measures, Melody, MelodyMeta, TimedNote};
use crate::error::{Error, Result};

type Q = Ratio<i64>;

/// Parses every tune (`X:` section) in the text. Each entry carries the tune's `X:` number.
pub fn parse_tunes(text: &str) -> Vec<(String, Result<Melody>)> {
    split_tunes(text)
        .into_iter()
        .map(|(id, body)| {
            let parsed = parse_single(&id, &body);
            (id, parsed)
        })
        .collect()
}

pub fn parse_tune(text: &str) -> Result<Melody> {
    let (id, body) = split_tunes(text)
        .into_iter()
        .next()
        .ok_or_else(|| Error::Parse("no tune found".into()))?;
    parse_single(&id, &body)
}

fn split_tunes(text: &str) -> Vec<(String, Vec<&str>)> {
    let mut tunes: Vec<(String, Vec<&str>)> = Vec::new();
    let mut current: Option<(String, Vec<&str>)> = None;
    let has_x = text.lines().any(|l| l.trim_start().starts_with("X:"));
    if !has_x {
        let lines: Vec<&str> = text.lines().collect();
        if lines.iter().any(|l| !l.trim().is_empty()) {
            tunes.push(("1".to_string(), lines));
        }
        return tunes;
    }
    for line in text.lines() {
        let trimmed = line.trim_start();
        if let Some(rest) = trimmed.strip_prefix("X:") {
            if let Some(t) = current.take() {
                tunes.push(t);
            }
            current = Some((rest.trim().to_string(), Vec::new()));
        } else if let Some((_, lines)) = current.as_mut() {
            lines.push(line);
        }
    }
    tunes.extend(current);
    tunes
}

fn parse_meter(value: &str) -> Result<()> {
    let v: String = value.split('%').next().unwrap_or("").split_whitespace().collect();
    match v.as_str() {
        "4/4" | "C" => Ok(()),
        "" => Err(Error::UnsupportedMeter("none".into())),
        other => Err(Error::UnsupportedMeter(other.to_string())),
    }
}

fn parse_fraction(value: &str) -> Result<Q> {
    let v = value.trim();
    let (n, d) = v
        .split_once('/')
        .ok_or_else(|| Error::Parse(format!("bad note length {v:?}")))?;
    let n: i64 = n.trim().parse().map_err(|_| Error::Parse(format!("bad note length {v:?}")))?;
    let d: i64 = d.trim().parse().map_err(|_| Error::Parse(format!("bad note length {v:?}")))?;
    if n <= 0 || d <= 0 || n > 64 || d > 256 {
        return Err(Error::Parse(format!("bad note length {v:?}")));
    }
    Ok(Q::new(n, d))
}

/// Quarter-note bpm from a `Q:` field such as `1/4=120`, `3/8=80` or `120`.
fn parse_tempo(value: &str) -> Option<f64> {
    let v = value.split('"').filter(|s| s.contains('=') || s.trim().parse::<f64>().is_ok()).next()?;
    let v = v.trim();
    match v.split_once('=') {
        Some((beat, bpm)) => {
            let bpm: f64 = bpm.trim().parse().ok()?;
            let mut whole = 0.0;
            for part in beat.split_whitespace() {
                let f = parse_fraction(part).ok()?;
                whole += *f.numer() as f64 / *f.denom() as f64;
            }
            let q = bpm * whole * 4.0;
            (q.is_finite() && q > 0.0).then_some(q)
        }
        None => {
            let bpm: f64 = v.parse().ok()?;
            (bpm.is_finite() && bpm > 0.0).then_some(bpm)
        }
    }
}

/// Sharps (positive) or flats (negative) in a `K:` field.
fn key_fifths(value: &str) -> Result<i32> {
    let v = value.split('%').next().unwrap_or("").trim();
    let mut chars = v.chars().peekable();
    let tonic = match chars.next() {
        None => return Ok(0),
        Some(c) => c,
    };
    let base = match tonic.to_ascii_uppercase() {
        'C' => 0,
        'G' => 1,
        'D' => 2,
        'A' => 3,
        'E' => 4,
        'B' => 5,
        'F' => -1,
        _ => {
            let word: String = v.split_whitespace().next().unwrap_or("").to_string();
            return match word.as_str() {
                "none" | "HP" => Ok(0),
                "Hp" => Ok(2),
                _ => Err(Error::Parse(format!("unknown key {v:?}"))),
            };
        }
    };
    let mut fifths = base;
    match chars.peek() {
        Some('#') => {
            fifths += 7;
            chars.next();
        }
        Some('b') => {
            fifths -= 7;
            chars.next();
        }
        _ => {}
    }
    let rest: String = chars.collect();
    let mode: String = rest
        .trim_start()
        .chars()
        .take_while(|c| c.is_ascii_alphabetic())
        .take(3)
        .collect::<String>()
        .to_ascii_lowercase();
    let shift = match mode.as_str() {
        "" | "maj" | "ion" => 0,
        "m" | "min" | "aeo" => -3,
        "mix" => -1,
        "dor" => -2,
        "phr" => -4,
        "lyd" => 1,
        "loc" => -5,
        // "exp" and friends: accept with the tonic's signature
        _ if mode.starts_with('m') => -3,
        _ => 0,
    };
    Ok(fifths + shift)
}

fn key_alterations(fifths: i32) -> HashMap<char, i32> {
    let mut map = HashMap::new();
    if fifths > 0 {
        for &c in ['F', 'C', 'G', 'D', 'A', 'E', 'B'].iter().take(fifths.min(7) as usize) {
            map.insert(c, 1);
        }
    } else if fifths < 0 {
        for &c in ['B', 'E', 'A', 'D', 'G', 'C', 'F'].iter().take((-fifths).min(7) as usize) {
            map.insert(c, -1);
        }
    }
    map
}

fn letter_semitone(c: char) -> i32 {
    match c {
        'C' => 0,
        'D' => 2,
        'E' => 4,
        'F' => 5,
        'G' => 7,
        'A' => 9,
        'B' => 11,
        _ => unreachable!("not a note letter"),
    }
}

struct Bar {
    notes: Vec<(Q, Q, Option<u8>)>,
    cursor: Q,
}

impl Bar {
    fn new() -> Self {
        Self {
            notes: Vec::new(),
            cursor: Q::from_integer(0),
        }
    }
}

struct TuneParser {
    unit: Q,
    key: HashMap<char, i32>,
    bar_accidentals: HashMap<(char, i32), i32>,
    bar: Bar,
    /// Placed bars: (offset within measure, notes).
    bars: Vec<(Q, Vec<(Q, Q, Option<u8>)>)>,
    tie_pending: bool,
    broken_next: Option<Q>,
    tuplet: Option<(Q, u32)>,
}

impl TuneParser {
    fn close_bar(&mut self) -> Result<()> {
        let bar = std::mem::replace(&mut self.bar, Bar::new());
        self.bar_accidentals.clear();
        self.tie_pending = false;
        self.broken_next = None;
        if bar.notes.is_empty() {
            return Ok(());
        }
        let full = Q::from_integer(1);
        if bar.cursor > full {
            return Err(Error::Parse(format!(
                "bar {} holds {} whole notes, more than one 4/4 measure",
                self.bars.len() + 1,
                bar.cursor
            )));
        }
        let offset = if self.bars.is_empty() { full - bar.cursor } else { Q::from_integer(0) };
        self.bars.push((offset, bar.notes));
        Ok(())
    }

    fn push_note(&mut self, pitch: Option<u8>, mut length: Q, tie_out: bool) {
        if let Some(f) = self.broken_next.take() {
            length *= f;
        }
        if let Some((factor, remaining)) = self.tuplet.as_mut() {
            length *= *factor;
            *remaining -= 1;
            if *remaining == 0 {
                self.tuplet = None;
            }
        }
        let merge = self.tie_pending
            && pitch.is_some()
            && self.bar.notes.last().is_some_and(|n| n.2 == pitch);
        if merge {
            self.bar.notes.last_mut().expect("checked").1 += length;
        } else {
            self.bar.notes.push((self.bar.cursor, length, pitch));
        }
        self.bar.cursor += length;
        self.tie_pending = tie_out && pitch.is_some();
    }

    fn broken_rhythm(&mut self, first: Q, second: Q) -> Result<()> {
        let last = self
            .bar
            .notes
            .last_mut()
            .ok_or_else(|| Error::Parse("broken rhythm without a preceding note".into()))?;
        let extra = last.1 * first - last.1;
        last.1 += extra;
        self.bar.cursor += extra;
        self.broken_next = Some(second);
        Ok(())
    }
}

fn parse_single(id: &str, lines: &[&str]) -> Result<Melody> {
    let mut meta = MelodyMeta::default();
    let mut meter_seen = false;
    let mut unit: Option<Q> = None;
    let mut fifths = 0;
    let mut header_done = false;
    let mut body_lines: Vec<&str> = Vec::new();

    for line in lines {
        let t = line.trim();
        if t.is_empty() && !header_done {
            continue;
        }
        if t.starts_with('%') {
            continue;
        }
        if !header_done {
            let Some((field, value)) = field_line(t) else {
                return Err(Error::Parse(format!("expected a header field, got {t:?}")));
            };
            match field {
                'M' => {
                    parse_meter(value)?;
                    meter_seen = true;
                }
                'L' => unit = Some(parse_fraction(value)?),
                'Q' => meta.tempo = parse_tempo(value).unwrap_or(meta.tempo),
                'K' => {
                    fifths = key_fifths(value)?;
                    meta.key = value.split('%').next().unwrap_or("").trim().to_string();
                    header_done = true;
                }
                _ => {}
            }
        } else {
            body_lines.push(line);
        }
    }
    if !header_done {
        return Err(Error::Parse("missing K: field".into()));
    }
    if !meter_seen {
        return Err(Error::UnsupportedMeter("none".into()));
    }

    let mut p = TuneParser {
        unit: unit.unwrap_or(Q::new(1, 8)),
        key: key_alterations(fifths),
        bar_accidentals: HashMap::new(),
        bar: Bar::new(),
        bars: Vec::new(),
        tie_pending: false,
        broken_next: None,
        tuplet: None,
    };

    for line in body_lines {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if let Some((field, value)) = field_line(t) {
            match field {
                'M' => parse_meter(value)?,
                'L' => p.unit = parse_fraction(value)?,
                'K' => p.key = key_alterations(key_fifths(value)?),
                'V' => return Err(Error::Polyphony("multiple voices".into())),
                _ => {}
            }
            continue;
        }
        parse_body_line(&mut p, t)?;
    }
    p.close_bar()?;
    if p.bars.is_empty() {
        return Err(Error::Parse("tune has no notes".into()));
    }

    let bar_count = p.bars.len();
    let mut notes = Vec::new();
    for (index, (offset, bar_notes)) in p.bars.iter().enumerate() {
        for &(start, length, pitch) in bar_notes {
            if let Some(pitch) = pitch {
                let begin = (Q::from_integer(index as i64) + *offset + start) * 24;
                notes.push(TimedNote {
                    start: begin,
                    end: begin + length * 24,
                    pitch,
                });
            }
        }
    }
    let measures = grid_measures(&notes, bar_count)?;
    Melody::new(id, meta, measures)
}

/// `X:value` header-style line (single ASCII letter then colon).
fn field_line(t: &str) -> Option<(char, &str)> {
    let mut chars = t.chars();
    let c = chars.next()?;
    if c.is_ascii_alphabetic() && chars.next() == Some(':') {
        Some((c, &t[2..]))
    } else {
        None
    }
}

fn read_number(chars: &[char], i: &mut usize) -> Option<i64> {
    let start = *i;
    while *i < chars.len() && chars[*i].is_ascii_digit() && *i - start < 6 {
        *i += 1;
    }
    if *i == start {
        None
    } else {
        chars[start..*i].iter().collect::<String>().parse().ok()
    }
}

fn read_length(chars: &[char], i: &mut usize) -> Result<Q> {
    let num = read_number(chars, i).unwrap_or(1);
    let mut den: i64 = 1;
    while *i < chars.len() && chars[*i] == '/' {
        *i += 1;
        den *= read_number(chars, i).unwrap_or(2);
        if den > 1024 {
            return Err(Error::Parse("note length too short".into()));
        }
    }
    if num <= 0 || den <= 0 || num > 64 {
        return Err(Error::Parse("bad note length".into()));
    }
    Ok(Q::new(num, den))
}

/// Accidentals, letter and octave marks of one note; returns the MIDI pitch.
fn read_pitch(p: &mut TuneParser, chars: &[char], i: &mut usize) -> Result<u8> {
    let mut explicit: Option<i32> = None;
    while *i < chars.len() {
        match chars[*i] {
            '^' => explicit = Some(explicit.unwrap_or(0).max(0) + 1),
            '_' => explicit = Some(explicit.unwrap_or(0).min(0) - 1),
            '=' => explicit = Some(0),
            _ => break,
        }
        *i += 1;
    }
    let letter = *chars
        .get(*i)
        .filter(|c| matches!(c.to_ascii_uppercase(), 'A'..='G'))
        .ok_or_else(|| Error::Parse("accidental without a note".into()))?;
    *i += 1;
    let mut octave: i32 = if letter.is_ascii_lowercase() { 1 } else { 0 };
    while *i < chars.len() {
        match chars[*i] {
            '\'' => octave += 1,
            ',' => octave -= 1,
            _ => break,
        }
        *i += 1;
    }
    let upper = letter.to_ascii_uppercase();
    let alteration = match explicit {
        Some(a) => {
            p.bar_accidentals.insert((upper, octave), a);
            a
        }
        None => p
            .bar_accidentals
            .get(&(upper, octave))
            .copied()
            .unwrap_or_else(|| p.key.get(&upper).copied().unwrap_or(0)),
    };
    let midi = 60 + 12 * octave + letter_semitone(upper) + alteration;
    u8::try_from(midi)
        .ok()
        .filter(|&m| m <= 127)
        .ok_or_else(|| Error::Parse(format!("pitch {midi} outside MIDI range")))
}

fn skip_until(chars: &[char], i: &mut usize, end: char) -> Result<()> {
    *i += 1;
    while *i < chars.len() && chars[*i] != end {
        *i += 1;
    }
    if *i >= chars.len() {
        return Err(Error::Parse(format!("unterminated {end:?} group")));
    }
    *i += 1;
    Ok(())
}

fn parse_body_line(p: &mut TuneParser, line: &str) -> Result<()> {
    let chars: Vec<char> = line.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            '%' => break,
            ' ' | '\t' | '`' | '\\' | ')' | 'y' | '~' | '.' | 'H' | 'L' | 'M' | 'O' | 'P' | 'S'
            | 'T' | 'u' | 'v' | '$' | '*' => i += 1,
            '"' => skip_until(&chars, &mut i, '"')?,
            '!' => skip_until(&chars, &mut i, '!')?,
            '+' => skip_until(&chars, &mut i, '+')?,
            '{' => skip_until(&chars, &mut i, '}')?,
            '&' => return Err(Error::Polyphony("voice overlay".into())),
            '(' => {
                i += 1;
                if let Some(n) = read_number(&chars, &mut i) {
                    let mut q = None;
                    let mut r = None;
                    if chars.get(i) == Some(&':') {
                        i += 1;
                        q = read_number(&chars, &mut i);
                        if chars.get(i) == Some(&':') {
                            i += 1;
                            r = read_number(&chars, &mut i);
                        }
                    }
                    if !(2..=9).contains(&n) {
                        return Err(Error::Parse(format!("unsupported tuplet ({n}")));
                    }
                    let q = q.unwrap_or(match n {
                        2 | 4 | 8 => 3,
                        3 | 6 => 2,
                        _ => 2,
                    });
                    let r = r.unwrap_or(n);
                    if q <= 0 || r <= 0 || r > 32 {
                        return Err(Error::Parse("bad tuplet".into()));
                    }
                    p.tuplet = Some((Q::new(q, n), r as u32));
                }
            }
            '>' | '<' => {
                let mut n = 0;
                while i < chars.len() && chars[i] == c {
                    n += 1;
                    i += 1;
                }
                let short = Q::new(1, 1 << n.min(3));
                let long = Q::from_integer(2) - short;
                if c == '>' {
                    p.broken_rhythm(long, short)?;
                } else {
                    p.broken_rhythm(short, long)?;
                }
            }
            '-' => {
                p.tie_pending = p.bar.notes.last().is_some_and(|n| n.2.is_some());
                i += 1;
            }
            '|' | ':' => {
                while i < chars.len() && matches!(chars[i], '|' | ':' | ']') {
                    i += 1;
                }
                if chars.get(i) == Some(&'[') && chars.get(i + 1).is_some_and(|c| c.is_ascii_digit()) {
                    i += 1;
                }
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == ',' || chars[i] == '-') {
                    i += 1;
                }
                p.close_bar()?;
            }
            '[' => {
                let next = chars.get(i + 1).copied();
                if next == Some('|') {
                    i += 1;
                    continue;
                }
                if next.is_some_and(|c| c.is_ascii_digit()) {
                    i += 1;
                    while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == ',' || chars[i] == '-') {
                        i += 1;
                    }
                    continue;
                }
                if next.is_some_and(|c| c.is_ascii_alphabetic()) && chars.get(i + 2) == Some(&':') {
                    let start = i + 1;
                    skip_until(&chars, &mut i, ']')?;
                    let field: String = chars[start..i - 1].iter().collect();
                    match field_line(&field) {
                        Some(('M', v)) => parse_meter(v)?,
                        Some(('L', v)) => p.unit = parse_fraction(v)?,
                        Some(('K', v)) => p.key = key_alterations(key_fifths(v)?),
                        Some(('V', _)) => return Err(Error::Polyphony("multiple voices".into())),
                        _ => {}
                    }
                    continue;
                }
                // chord
                i += 1;
                let mut pitches = Vec::new();
                let mut length = None;
                while i < chars.len() && chars[i] != ']' {
                    match chars[i] {
                        '^' | '_' | '=' | 'A'..='G' | 'a'..='g' => {
                            pitches.push(read_pitch(p, &chars, &mut i)?);
                            let l = read_length(&chars, &mut i)?;
                            length.get_or_insert(l);
                        }
                        '-' | ' ' => i += 1,
                        other => return Err(Error::Parse(format!("unexpected {other:?} in chord"))),
                    }
                }
                if i >= chars.len() {
                    return Err(Error::Parse("unterminated chord".into()));
                }
                i += 1;
                if pitches.len() > 1 {
                    return Err(Error::Polyphony(format!("chord of {} notes", pitches.len())));
                }
                let outer = read_length(&chars, &mut i)?;
                if let Some(&pitch) = pitches.first() {
                    let len = length.unwrap_or(Q::from_integer(1)) * outer * p.unit;
                    let tie = chars.get(i) == Some(&'-');
                    p.push_note(Some(pitch), len, tie);
                }
            }
            '^' | '_' | '=' | 'A'..='G' | 'a'..='g' => {
                let pitch = read_pitch(p, &chars, &mut i)?;
                let len = read_length(&chars, &mut i)? * p.unit;
                let tie = chars.get(i) == Some(&'-');
                if tie {
                    i += 1;
                }
                p.push_note(Some(pitch), len, tie);
            }
            'z' | 'x' => {
                i += 1;
                let len = read_length(&chars, &mut i)? * p.unit;
                p.push_note(None, len, false);
            }
            'Z' | 'X' => {
                i += 1;
                let bars = read_number(&chars, &mut i).unwrap_or(1);
                if !(1..=256).contains(&bars) {
                    return Err(Error::Parse("bad multi-measure rest".into()));
                }
                p.close_bar()?;
                for _ in 0..bars {
                    p.push_note(None, Q::from_integer(1), false);
                    p.close_bar()?;
                }
            }
            other => return Err(Error::Parse(format!("unexpected character {other:?}"))),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{HOLD, REST};

    fn tune(body: &str) -> String {
        format!("X:1\nT:test\nM:4/4\nL:1/8\nK:C\n{body}\n")
    }

    #[test]
    fn whole_note() {
        let m = parse_tune(&tune("C8|")).unwrap();
        assert_eq!(m.measures.len(), 1);
        let mut expected = [HOLD; 24];
        expected[0] = 60;
        assert_eq!(m.measures[0].frames(), &expected);
    }

    #[test]
    fn non_common_meter_rejected() {
        let text = "X:1\nM:3/4\nL:1/8\nK:G\nABc|\n";
        assert!(matches!(parse_tune(text), Err(Error::UnsupportedMeter(_))));
        let text = "X:1\nM:C|\nL:1/8\nK:G\nABcd|\n";
        assert!(matches!(parse_tune(text), Err(Error::UnsupportedMeter(_))));
        assert!(matches!(parse_tune("X:1\nK:G\nABcd|\n"), Err(Error::UnsupportedMeter(_))));
    }

    #[test]
    fn chords_are_polyphony() {
        assert!(matches!(parse_tune(&tune("[CEG]8|")), Err(Error::Polyphony(_))));
        assert!(parse_tune(&tune("[C]8|")).is_ok());
    }

    #[test]
    fn key_signature_and_bar_accidentals() {
        // D major: F and C sharp. Explicit natural lasts until the barline.
        let m = parse_tune("X:1\nM:4/4\nL:1/4\nK:D\nF=FFc|F4|\n").unwrap();
        let p: Vec<u32> = m.measures[0].onset_pitches().collect();
        assert_eq!(p, vec![66, 65, 65, 73]);
        assert_eq!(m.measures[1].onset_pitches().collect::<Vec<_>>(), vec![66]);
        assert_eq!(key_fifths("Ador").unwrap(), 1);
        assert_eq!(key_fifths("Bb").unwrap(), -2);
        assert_eq!(key_fifths("Emin").unwrap(), 1);
        assert_eq!(key_fifths("F#m").unwrap(), 3);
    }

    #[test]
    fn octaves() {
        let m = parse_tune("X:1\nM:4/4\nL:1/4\nK:C\nC, C c c'|\n").unwrap();
        assert_eq!(m.measures[0].onset_pitches().collect::<Vec<_>>(), vec![48, 60, 72, 84]);
    }

    #[test]
    fn triplets_and_broken_rhythm() {
        // (3 of eighth notes fill one beat: three 2-frame notes
        let m = parse_tune(&tune("(3ABc d>e f2 g2|")).unwrap();
        let notes = m.measures[0].notes();
        assert_eq!(
            notes.iter().map(|n| (n.0, n.1)).collect::<Vec<_>>(),
            vec![(0, 2), (2, 2), (4, 2), (6, 4), (10, 2), (12, 6), (18, 6)]
        );
    }

    #[test]
    fn ties_merge_within_bar_and_split_across() {
        let m = parse_tune(&tune("A4-A2 B2-|B8|")).unwrap();
        assert_eq!(m.measures[0].notes(), vec![(0, 18, 69), (18, 6, 71)]);
        assert_eq!(m.measures[1].notes(), vec![(0, 24, 71)]);
    }

    #[test]
    fn pickup_is_right_aligned() {
        let m = parse_tune(&tune("AB|c8|")).unwrap();
        assert_eq!(m.measures.len(), 2);
        let f = m.measures[0].frames();
        assert!(f[..18].iter().all(|&t| t == REST));
        assert_eq!(f[18], 69);
        assert_eq!(f[21], 71);
    }

    #[test]
    fn overfull_bar_is_an_error() {
        assert!(matches!(parse_tune(&tune("c8 d|")), Err(Error::Parse(_))));
    }

    #[test]
    fn decorations_and_symbols_skipped() {
        let m = parse_tune(&tune("\"Am\"!trill!~A2 {g}B2 .c2 (de)|:z8:|")).unwrap();
        assert_eq!(m.measures.len(), 2);
        assert_eq!(m.measures[0].onset_pitches().collect::<Vec<_>>(), vec![69, 71, 72, 74, 76]);
        assert_eq!(m.measures[1], crate::codec::FrameSequence::rest());
    }

    #[test]
    fn multiple_tunes() {
        let text = format!("{}\n{}", tune("C8|"), tune("D8|").replace("X:1", "X:2"));
        let tunes = parse_tunes(&text);
        assert_eq!(tunes.len(), 2);
        assert_eq!(tunes[1].0, "2");
        assert_eq!(tunes[1].1.as_ref().unwrap().measures[0].frames()[0], 62);
    }

    #[test]
    fn tempo_field() {
        assert_eq!(parse_tempo("1/4=100"), Some(100.0));
        assert_eq!(parse_tempo("3/8=80"), Some(120.0));
        assert_eq!(parse_tempo("\"Allegro\" 1/2=60"), Some(120.0));
    }
}
