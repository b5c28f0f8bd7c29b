#![no_main]

use libfuzzer_sys::fuzz_target;
use sketchfill::connector::SketchSpec;
use sketchfill::dataset::WindowShape;

fuzz_target!(|text: &str| {
    let Ok(spec) = SketchSpec::from_json(text) else { return };
    let shape = WindowShape::default();
    if let Ok(resolved) = spec.resolve(shape) {
        assert!(resolved.len() <= shape.missing);
        for r in resolved {
            assert!(r.slot < shape.missing);
            assert!(r.pitch.is_some() || r.rhythm.is_some());
            if let (Some(p), Some(rh)) = (r.pitch, r.rhythm) {
                assert_eq!(p.len(), rh.onset_count());
            }
        }
    }
});
