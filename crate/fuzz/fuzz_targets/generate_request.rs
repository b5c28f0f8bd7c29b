#![no_main]

use libfuzzer_sys::fuzz_target;
use sketchfill::dataset::WindowShape;
use sketchfill::pipeline::GenerateRequest;

fuzz_target!(|text: &str| {
    if let Ok(req) = GenerateRequest::from_json(text) {
        let _ = req.validate(WindowShape::default());
    }
});
