#![no_main]

use libfuzzer_sys::fuzz_target;
use sketchfill::codec::{export_midi, parse_score, ScoreFormat};

fuzz_target!(|data: &[u8]| {
    let Ok(melody) = parse_score(data, ScoreFormat::Midi) else { return };
    assert!(melody.measures.iter().all(|m| m.is_well_formed()));
    if melody.measures.iter().all(|m| m.onset_count() == 0) {
        return;
    }
    // our own writer must reproduce everything up to the last sounding measure
    let again = parse_score(&export_midi(&melody.measures, 120.0), ScoreFormat::Midi).unwrap();
    let n = again.measures.len();
    assert!(n <= melody.measures.len());
    assert_eq!(again.measures[..], melody.measures[..n]);
    assert!(melody.measures[n..].iter().all(|m| m.onset_count() == 0));
});
