#![no_main]

use libfuzzer_sys::fuzz_target;
use sketchfill::codec::abc::parse_tunes;

fuzz_target!(|text: &str| {
    for (_, parsed) in parse_tunes(text) {
        if let Ok(melody) = parsed {
            assert!(!melody.measures.is_empty());
            assert!(melody.measures.iter().all(|m| m.is_well_formed()));
        }
    }
});
