mod common;

use common::{toks, toy_generator, toy_stance, toy_vocab};
use factedit::corpus::Relation;
use factedit::generator::{
    greedy_decode, rewrite_with_escalation, train_generator, Controls, ExtendedSources,
    GeneratorDims, GeneratorExample, GeneratorMode, GeneratorModel, GeneratorTraining,
    InferenceConfig,
};
use factedit_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn schedule() -> InferenceConfig {
    InferenceConfig::default()
}

#[test]
fn escalation_stops_at_the_first_agreeing_decode() {
    let vocab = toy_vocab();
    let model = toy_generator(GeneratorMode::TwoEncoder, vocab.len(), 3);
    let mut stance = toy_stance(vocab.len(), 4);
    let out = stance.net.output;
    *stance.store.get_mut(out.weight).unwrap() = Tensor::zeros(4, 3);
    *stance.store.get_mut(out.bias).unwrap() = Tensor::row(vec![5.0, 0.0, 0.0]);
    let r = rewrite_with_escalation(
        &model,
        &stance,
        &vocab,
        &toks("a ★ c"),
        &toks("a d c"),
        &schedule(),
    )
    .unwrap();
    assert!(!r.tokens.is_empty());
    assert_eq!(r.relation, Relation::Agree);
    assert_eq!((r.tau, r.attempts), (0.0, 1));
}

#[test]
fn escalation_walks_the_whole_schedule_without_agreement() {
    let vocab = toy_vocab();
    let model = toy_generator(GeneratorMode::TwoEncoder, vocab.len(), 3);
    // zero output layer: uniform prediction, which ties toward NEUTRAL
    let stance = factedit::stance::StanceModel::new(
        factedit::stance::StanceDims {
            vocab: vocab.len(),
            embed: 3,
            hidden: 2,
            mlp: 4,
        },
        1,
    );
    let cfg = schedule();
    let r = rewrite_with_escalation(
        &model,
        &stance,
        &vocab,
        &toks("a ★ c"),
        &toks("a d c"),
        &cfg,
    )
    .unwrap();
    assert_eq!(r.relation, Relation::Neutral);
    assert_eq!(r.attempts, cfg.schedule.len());
    assert_eq!(r.tau, *cfg.schedule.last().unwrap());
}

#[test]
fn claim_only_ignores_the_residual() {
    let vocab = toy_vocab();
    let model = toy_generator(GeneratorMode::ClaimOnly, vocab.len(), 8);
    let decode = |residual: &str| {
        let src = ExtendedSources::new(
            &vocab,
            GeneratorMode::ClaimOnly,
            &toks(residual),
            &toks("b e q"),
        )
        .unwrap();
        greedy_decode(&model, &vocab, src, Controls::default(), 12)
            .unwrap()
            .tokens
    };
    assert_eq!(decode("a ★ c"), decode("h g f e d"));
}

#[test]
fn decoding_is_deterministic_and_bounded() {
    let vocab = toy_vocab();
    for mode in [
        GeneratorMode::TwoEncoder,
        GeneratorMode::Concat,
        GeneratorMode::NoCopy,
    ] {
        let model = toy_generator(mode, vocab.len(), 12);
        let src = ExtendedSources::new(&vocab, mode, &toks("a ★ zed"), &toks("zed b")).unwrap();
        let a = greedy_decode(&model, &vocab, src.clone(), Controls::default(), 7).unwrap();
        let b = greedy_decode(&model, &vocab, src, Controls::default(), 7).unwrap();
        assert_eq!(a, b);
        assert!(a.ids.len() <= 7);
        assert!(!a
            .tokens
            .iter()
            .any(|t| t == "★" || t == "<s>" || t == "<pad>"));
    }
}

/// Sentence fused with itself: everything is reachable by copying.
#[test]
fn identity_fusion_is_learned() {
    let vocab = toy_vocab();
    let words = ["a", "b", "c", "d", "e", "f", "g", "h", "p", "q", "r"];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut sample = |n: usize| -> Vec<Vec<String>> {
        (0..n)
            .map(|_| {
                let len = rng.random_range(3..=6);
                (0..len)
                    .map(|_| words[rng.random_range(0..words.len())].to_string())
                    .collect()
            })
            .collect()
    };
    let train = sample(200);
    let held_out = sample(40);
    let mode = GeneratorMode::TwoEncoder;
    let examples: Vec<GeneratorExample> = train
        .iter()
        .map(|s| {
            GeneratorExample::new(&vocab, mode, s, s, s)
                .unwrap()
                .unwrap()
        })
        .collect();
    let mut model = GeneratorModel::new(
        GeneratorDims {
            vocab: vocab.len(),
            embed: 8,
            hidden: 12,
            attention: 12,
            mode,
        },
        5,
    );
    let cfg = GeneratorTraining {
        steps: 400,
        batch_size: 16,
        learning_rate: 1e-2,
        log_every: 100,
        ..GeneratorTraining::default()
    };
    let report = train_generator(&mut model, &examples, 0, &cfg).unwrap();
    assert!(report.rows.last().unwrap().train_loss < report.first_batch_loss);

    let (mut right, mut total) = (0usize, 0usize);
    for s in &held_out {
        let src = ExtendedSources::new(&vocab, mode, s, s).unwrap();
        let out = greedy_decode(&model, &vocab, src, Controls::default(), 12)
            .unwrap()
            .tokens;
        total += s.len().max(out.len());
        right += s.iter().zip(&out).filter(|(a, b)| a == b).count();
    }
    let acc = right as f64 / total as f64;
    assert!(acc >= 0.99, "token accuracy {acc}");
}
