mod common;

use common::{copy_mass_gap, random_decode_steps, sari_oracle, sari_oracle_gap, tape_copy_gap};
use factedit::metrics::sari;
use proptest::prelude::*;

#[test]
fn sari_matches_brute_force_on_random_triples() {
    let gap = sari_oracle_gap(50, 10, 3);
    assert!(gap <= 1e-12, "gap {gap:e}");
}

#[test]
fn sari_trivial_cases() {
    let input = [1u32, 2, 3, 4];
    let reference = [1u32, 2, 9, 4];
    assert_eq!(sari(&input, &reference, &reference).unwrap().sari, 1.0);
    let copy = sari(&input, &input, &reference).unwrap();
    assert_eq!(copy.add_f1, 0.0);
    assert_eq!(copy.sari, 0.0);
    assert_eq!(sari_oracle(&input, &input, &reference)[3], 0.0);
}

#[test]
fn mixture_copy_terms_match_position_sums() {
    let (n, gap) = copy_mass_gap(5, 1);
    assert_eq!(n, 4 + 16 + 64 + 256 + 1024);
    assert!(gap <= 1e-12, "gap {gap:e}");
}

#[test]
fn training_probability_matches_decoder_mixture() {
    let (n, gap) = tape_copy_gap(4);
    assert!(n > 1000);
    assert!(gap < 1e-12, "relative gap {gap:e}");
}

#[test]
fn decode_steps_and_classifier_outputs_normalize() {
    let r = random_decode_steps(1000, 17);
    assert!(r.steps >= 1000);
    assert!(r.mixture <= 1e-9, "mixture off by {:e}", r.mixture);
    assert!(r.attention <= 1e-9, "attention off by {:e}", r.attention);
    assert!(r.classifier <= 1e-9, "classifier off by {:e}", r.classifier);
}

proptest! {
    #[test]
    fn sari_components_lie_in_unit_interval(
        input in prop::collection::vec(0u32..6, 1..12),
        output in prop::collection::vec(0u32..6, 0..12),
        reference in prop::collection::vec(0u32..6, 1..12),
    ) {
        let s = sari(&input, &output, &reference).unwrap();
        for x in [s.keep_f1, s.add_f1, s.del_f1, s.sari] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
        let o = sari_oracle(&input, &output, &reference);
        prop_assert!((s.sari - o[3]).abs() <= 1e-12);
    }

    #[test]
    fn output_equal_to_reference_scores_one(
        input in prop::collection::vec(0u32..6, 1..12),
        reference in prop::collection::vec(0u32..6, 1..12),
    ) {
        prop_assert_eq!(sari(&input, &reference, &reference).unwrap().sari, 1.0);
    }
}

proptest! {
    #[test]
    fn mask_scores_are_bounded_and_f1_is_harmonic(
        masks in prop::collection::vec(
            prop::collection::vec((0u8..2, 0u8..2), 1..8), 1..6)
    ) {
        let pred: Vec<Vec<u8>> = masks.iter().map(|m| m.iter().map(|p| p.0).collect()).collect();
        let gold: Vec<Vec<u8>> = masks.iter().map(|m| m.iter().map(|p| p.1).collect()).collect();
        let s = factedit::metrics::mask_prf(&pred, &gold).unwrap();
        for x in [s.precision, s.recall, s.f1] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
        if s.precision + s.recall > 0.0 {
            let h = 2.0 * s.precision * s.recall / (s.precision + s.recall);
            prop_assert!((s.f1 - h).abs() < 1e-12);
        }
        prop_assert_eq!(factedit::metrics::mask_prf(&gold, &gold).unwrap().f1, 1.0);
    }
}
