#![no_main]

use libfuzzer_sys::fuzz_target;
use sketchfill::codec::{factorize, recombine, FrameSequence, FRAMES_PER_MEASURE};

fuzz_target!(|data: [u8; FRAMES_PER_MEASURE]| {
    let frames = data.map(|b| b as u32 % 130);
    let Ok(raw) = FrameSequence::from_raw(frames) else { return };
    let fixed = raw.repaired();
    assert!(fixed.is_well_formed());
    assert_eq!(fixed.repaired(), fixed);
    let (pitch, rhythm) = factorize(&fixed);
    assert_eq!(recombine(&pitch, &rhythm).unwrap(), fixed);
    if let Ok(m) = FrameSequence::new(frames) {
        assert_eq!(m, fixed);
    }
});
