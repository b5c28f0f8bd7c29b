use candle_core::{DType, Device};
use proptest::prelude::*;
use sketchfill::codec::{FrameSequence, FRAMES_PER_MEASURE, HOLD, REST};
use sketchfill::connector::{random_unmask, UnmaskFlag, UnmaskMode};
use sketchfill::evaluation::bootstrap::bootstrap_test;
use sketchfill::evaluation::metrics::{lcs_len, lcs_pitch_accuracy, pitch_accuracy, rhythm_accuracy};
use sketchfill::nn::{normal_noise, seeded_rng};

/// Textbook exponential recursion.
fn naive_lcs(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (Some((x, ra)), Some((y, rb))) if x == y => 1 + naive_lcs(ra, rb),
        (Some((_, ra)), Some((_, rb))) => naive_lcs(ra, b).max(naive_lcs(a, rb)),
        _ => 0,
    }
}

fn all_strings(max_len: usize, alphabet: u8) -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|s: &Vec<u8>| {
                (0..alphabet).map(move |c| {
                    let mut t = s.clone();
                    t.push(c);
                    t
                })
            })
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

#[test]
fn lcs_matches_recursion_on_all_short_strings() {
    let strings = all_strings(4, 3);
    assert_eq!(strings.len(), 121);
    for a in &strings {
        for b in &strings {
            assert_eq!(lcs_len(a, b), naive_lcs(a, b), "{a:?} {b:?}");
        }
    }
}

fn raw_measure() -> impl Strategy<Value = FrameSequence> {
    prop::collection::vec(prop_oneof![60u32..64, Just(HOLD), Just(REST)], FRAMES_PER_MEASURE)
        .prop_map(|v| FrameSequence::from_raw(v.try_into().unwrap()).unwrap())
}

fn class(t: u32) -> u8 {
    match t {
        HOLD => 1,
        REST => 2,
        _ => 0,
    }
}

proptest! {
    #[test]
    fn lcs_matches_recursion(a in prop::collection::vec(0u8..4, 0..7), b in prop::collection::vec(0u8..4, 0..7)) {
        prop_assert_eq!(lcs_len(&a, &b), naive_lcs(&a, &b));
        prop_assert_eq!(lcs_len(&a, &b), lcs_len(&b, &a));
    }

    #[test]
    fn frame_metrics_match_direct_counts(pairs in prop::collection::vec((raw_measure(), raw_measure()), 1..5)) {
        let (gen, truth): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let g: Vec<u32> = gen.iter().flat_map(|m| *m.frames()).collect();
        let t: Vec<u32> = truth.iter().flat_map(|m| *m.frames()).collect();
        let onsets: Vec<usize> = (0..t.len()).filter(|&i| t[i] < HOLD).collect();
        let expected_pitch = (!onsets.is_empty())
            .then(|| onsets.iter().filter(|&&i| g[i] == t[i]).count() as f64 / onsets.len() as f64);
        let expected_rhythm = (0..t.len()).filter(|&i| class(g[i]) == class(t[i])).count() as f64 / t.len() as f64;
        prop_assert_eq!(pitch_accuracy(&gen, &truth).unwrap(), expected_pitch);
        prop_assert!((rhythm_accuracy(&gen, &truth).unwrap() - expected_rhythm).abs() < 1e-12);
        let lcs = lcs_pitch_accuracy(&gen, &truth);
        prop_assert!((0.0..=1.0).contains(&lcs));
        prop_assert_eq!(lcs_pitch_accuracy(&truth, &truth), 1.0);
    }

    #[test]
    fn bootstrap_p_values_are_probabilities(a in prop::collection::vec(0.0f64..1.0, 1..20), seed in 0u64..1000) {
        let b: Vec<f64> = a.iter().rev().copied().collect();
        let p = bootstrap_test(&a, &b, 200, &mut seeded_rng(seed)).unwrap();
        prop_assert!(p > 0.0 && p <= 1.0);
    }
}

#[test]
fn metrics_reject_mismatched_lengths() {
    let m = FrameSequence::rest();
    assert!(pitch_accuracy(&[m], &[m, m]).is_err());
    assert!(rhythm_accuracy(&[], &[]).is_err());
    assert_eq!(pitch_accuracy(&[m], &[m]).unwrap(), None);
}

#[test]
fn bootstrap_separates_constant_samples() {
    let ones = vec![1.0; 50];
    let zeros = vec![0.0; 50];
    assert!(bootstrap_test(&ones, &zeros, 10_000, &mut seeded_rng(3)).unwrap() < 0.001);
}

#[test]
fn bootstrap_false_positive_rate_is_near_nominal() {
    let mut rng = seeded_rng(17);
    let trials = 200;
    let mut rejected = 0;
    for _ in 0..trials {
        let a: Vec<f64> = (0..40).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
        let b: Vec<f64> = (0..40).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
        rejected += (bootstrap_test(&a, &b, 500, &mut rng).unwrap() < 0.05) as usize;
    }
    let rate = rejected as f64 / trials as f64;
    assert!((0.01..=0.10).contains(&rate), "false positive rate {rate}");
}

#[test]
fn unmask_rate_and_content() {
    let dev = Device::Cpu;
    let mut rng = seeded_rng(9);
    let pred = normal_noise(&mut rng, &[40, 4, 256], DType::F32, &dev).unwrap();
    let truth = normal_noise(&mut rng, &[40, 4, 256], DType::F32, &dev).unwrap();
    let mut total = 0.0;
    for _ in 0..50 {
        let (fused, record) = random_unmask(&pred, &truth, 0.3, UnmaskMode::Whole, &mut rng).unwrap();
        total += record.unmasked_fraction();
        let f = fused.to_vec3::<f32>().unwrap();
        let p = pred.to_vec3::<f32>().unwrap();
        let t = truth.to_vec3::<f32>().unwrap();
        for (k, flag) in record.flags.iter().enumerate() {
            let (b, n) = (k / 4, k % 4);
            let src = if *flag == UnmaskFlag::UnmaskedBoth { &t } else { &p };
            assert_eq!(f[b][n], src[b][n]);
        }
    }
    let rate = total / 50.0;
    assert!((rate - 0.3).abs() < 0.02, "unmask rate {rate}");

    let (same, _) = random_unmask(&pred, &truth, 0.0, UnmaskMode::PerHalf, &mut rng).unwrap();
    assert_eq!(same.to_vec3::<f32>().unwrap(), pred.to_vec3::<f32>().unwrap());
    let (all, _) = random_unmask(&pred, &truth, 1.0, UnmaskMode::PerHalf, &mut rng).unwrap();
    assert_eq!(all.to_vec3::<f32>().unwrap(), truth.to_vec3::<f32>().unwrap());
    assert!(random_unmask(&pred, &truth, 1.5, UnmaskMode::Whole, &mut rng).is_err());
}
