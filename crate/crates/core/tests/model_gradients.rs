mod common;

use common::{generator_gradients, masker_gradients, stance_gradients, TOL};
use factedit::generator::GeneratorMode;

fn assert_all(errs: Vec<(String, f64)>) {
    assert!(!errs.is_empty());
    for (name, e) in &errs {
        assert!(*e < TOL, "{name}: relative error {e:e}");
    }
}

#[test]
fn stance_cross_entropy_gradients() {
    assert_all(stance_gradients());
}

#[test]
fn masker_loss_gradients() {
    assert_all(masker_gradients(false));
}

#[test]
fn masker_loss_with_target_term_gradients() {
    assert_all(masker_gradients(true));
}

#[test]
fn generator_nll_gradients_in_every_mode() {
    for mode in [
        GeneratorMode::TwoEncoder,
        GeneratorMode::Concat,
        GeneratorMode::NoCopy,
        GeneratorMode::ClaimOnly,
    ] {
        let errs = generator_gradients(mode);
        for (name, e) in &errs {
            assert!(*e < TOL, "{mode:?} {name}: relative error {e:e}");
        }
    }
}
