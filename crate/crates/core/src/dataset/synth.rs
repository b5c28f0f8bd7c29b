//! Seeded generator of small folk-like 4/4 tunes written as ABC, for smoke
//! tests and desk-scale training runs.
//!
//! Three tune families are mixed: strictly periodic tunes (period 2 or 5
//! measures, so past and future contexts coincide and the gap repeats
//! material from them), AABB-form tunes built
//! from 8-measure phrases, and through-composed tunes whose measures are all
//! drawn independently.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::Result;
use crate::nn::{seeded_rng, ModelRng};

/// One measure's durations in eighth notes (sum 8); negative entries are rests.
/// A leading `0` marks a triplet of eighths on the first beat.
const RHYTHMS: &[&[i32]] = &[
    &[2, 2, 2, 2],
    &[1, 1, 1, 1, 1, 1, 1, 1],
    &[3, 1, 2, 2],
    &[4, 2, 2],
    &[2, 1, 1, 2, 1, 1],
    &[1, 1, 2, 1, 1, 2],
    &[4, 4],
    &[2, 2, 4],
    &[8],
    &[0, 2, 2, 2],
    &[2, -2, 2, 2],
    &[3, 1, 3, 1],
    &[6, 2],
    &[2, 2, 2, -2],
];

const KEYS: &[(&str, usize, i32)] = &[("C", 0, 0), ("G", 4, -1), ("D", 1, 0), ("F", 3, -1)];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TuneFamily {
    Periodic,
    Folk,
    Through,
}

struct Motif {
    rhythm: usize,
    degrees: Vec<i32>,
}

fn note_count(rhythm: &[i32]) -> usize {
    rhythm
        .iter()
        .map(|&d| match d {
            0 => 3,
            d if d > 0 => 1,
            _ => 0,
        })
        .sum()
}

fn random_motif(rng: &mut ModelRng, start: &mut i32) -> Motif {
    let rhythm = rng.random_range(0..RHYTHMS.len());
    let n = note_count(RHYTHMS[rhythm]);
    let degrees = (0..n)
        .map(|_| {
            *start = (*start + rng.random_range(-2..=2)).clamp(0, 11);
            *start
        })
        .collect();
    Motif { rhythm, degrees }
}

fn spell(letter_offset: usize, octave_shift: i32, degree: i32) -> String {
    const LETTERS: [char; 7] = ['C', 'D', 'E', 'F', 'G', 'A', 'B'];
    let d = letter_offset as i32 + degree;
    let letter = LETTERS[d.rem_euclid(7) as usize];
    let octave = d.div_euclid(7) + octave_shift;
    match octave {
        o if o <= 0 => {
            let mut s = letter.to_string();
            s.push_str(&",".repeat((-o) as usize));
            s
        }
        o => {
            let mut s = letter.to_ascii_lowercase().to_string();
            s.push_str(&"'".repeat((o - 1) as usize));
            s
        }
    }
}

fn write_measure(out: &mut String, motif: &Motif, letter_offset: usize, octave_shift: i32) {
    let mut notes = motif.degrees.iter();
    for &d in RHYTHMS[motif.rhythm] {
        match d {
            0 => {
                out.push_str("(3");
                for _ in 0..3 {
                    out.push_str(&spell(letter_offset, octave_shift, *notes.next().expect("triplet notes")));
                }
            }
            d if d < 0 => {
                let _ = write!(out, "z{}", -d);
            }
            d => {
                out.push_str(&spell(letter_offset, octave_shift, *notes.next().expect("note")));
                if d != 1 {
                    let _ = write!(out, "{d}");
                }
            }
        }
        out.push(' ');
    }
}

/// One tune of `measures` bars as an ABC record with the given `X:` number.
pub fn toy_tune(x: usize, measures: usize, family: TuneFamily, rng: &mut ModelRng) -> String {
    let (key, letter_offset, octave_shift) = KEYS[rng.random_range(0..KEYS.len())];
    let mut pos = rng.random_range(2..8);
    let motifs: Vec<Motif> = match family {
        TuneFamily::Periodic => {
            let period = [2, 5][rng.random_range(0..2)];
            let phrase: Vec<Motif> = (0..period).map(|_| random_motif(rng, &mut pos)).collect();
            (0..measures)
                .map(|i| {
                    let m = &phrase[i % period];
                    Motif { rhythm: m.rhythm, degrees: m.degrees.clone() }
                })
                .collect()
        }
        TuneFamily::Folk => {
            let a: Vec<Motif> = (0..8).map(|_| random_motif(rng, &mut pos)).collect();
            let b: Vec<Motif> = (0..8).map(|_| random_motif(rng, &mut pos)).collect();
            (0..measures)
                .map(|i| {
                    let m = if (i / 16) % 2 == 0 { &a[i % 8] } else { &b[i % 8] };
                    Motif { rhythm: m.rhythm, degrees: m.degrees.clone() }
                })
                .collect()
        }
        TuneFamily::Through => (0..measures).map(|_| random_motif(rng, &mut pos)).collect(),
    };

    let mut out = String::new();
    let _ = writeln!(out, "X:{x}");
    let _ = writeln!(out, "T:Toy tune {x}");
    let _ = writeln!(out, "M:4/4");
    let _ = writeln!(out, "L:1/8");
    let _ = writeln!(out, "Q:1/4=120");
    let _ = writeln!(out, "K:{key}");
    for (i, motif) in motifs.iter().enumerate() {
        write_measure(&mut out, motif, letter_offset, octave_shift);
        out.push_str(if i + 1 == motifs.len() { "|]\n" } else if i % 4 == 3 { "|\n" } else { "| " });
    }
    out
}

/// Writes `tunes` tunes of `measures` bars into `dir`, ten tunes per `.abc` file.
pub fn write_toy_corpus(dir: &Path, tunes: usize, measures: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut rng = seeded_rng(seed);
    let mut file = String::new();
    for i in 0..tunes {
        let family = match rng.random_range(0..10) {
            0..=2 => TuneFamily::Periodic,
            3..=6 => TuneFamily::Folk,
            _ => TuneFamily::Through,
        };
        file.push_str(&toy_tune(i + 1, measures, family, &mut rng));
        file.push('\n');
        if (i + 1) % 10 == 0 || i + 1 == tunes {
            fs::write(dir.join(format!("toy_{:04}.abc", i / 10)), std::mem::take(&mut file))?;
        }
    }
    Ok(())
}
