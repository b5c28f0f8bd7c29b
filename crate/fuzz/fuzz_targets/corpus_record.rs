#![no_main]

use libfuzzer_sys::fuzz_target;
use sketchfill::dataset::parse_record;

fuzz_target!(|line: &str| {
    if let Ok(melody) = parse_record(line) {
        let text = serde_json::to_string(&melody).unwrap();
        assert_eq!(parse_record(&text).unwrap(), melody);
    }
});
