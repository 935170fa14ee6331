use std::collections::BTreeSet;

use factedit::corpus::{
    corpus_stats, generate_synthetic, redacted_pairs, slot_oracle, ClaimPair, Relation, SynthConfig,
};
use factedit::vocab::{Vocab, MASK_TOKEN};
use proptest::prelude::*;

fn entities(pairs: &[ClaimPair]) -> BTreeSet<String> {
    pairs
        .iter()
        .map(|p| {
            p.paragraph_id
                .clone()
                .expect("synthetic pairs have a paragraph")
        })
        .collect()
}

#[test]
fn default_corpus_size_and_vocabulary() {
    let c = generate_synthetic(&SynthConfig::default()).unwrap();
    assert_eq!(c.all().count(), 5000);
    let vocab = Vocab::build(
        c.all()
            .flat_map(|p| [p.sentence.as_slice(), p.claim.as_slice()]),
        1,
    );
    assert!(vocab.len() <= 300, "vocabulary of {}", vocab.len());
}

#[test]
fn splits_are_entity_disjoint() {
    let c = generate_synthetic(&SynthConfig::default()).unwrap();
    let (tr, dv, te) = (entities(&c.train), entities(&c.dev), entities(&c.test));
    assert!(tr.is_disjoint(&dv) && tr.is_disjoint(&te) && dv.is_disjoint(&te));
    assert_eq!(tr.len() + dv.len() + te.len(), 500);
    assert_eq!((dv.len(), te.len()), (50, 50));
}

#[test]
fn cue_marks_refuting_claims_at_the_configured_rate() {
    let cfg = SynthConfig {
        bias_prob: 0.9,
        ..SynthConfig::default()
    };
    let c = generate_synthetic(&cfg).unwrap();
    let pairs: Vec<ClaimPair> = c.all().cloned().collect();
    let s = corpus_stats(&pairs, &cfg.bias_cue);
    assert!(
        (s.cue_in_disagree - 0.9).abs() <= 0.03,
        "{}",
        s.cue_in_disagree
    );
    assert_eq!(s.cue_in_agree, 0.0);

    let unbiased = generate_synthetic(&SynthConfig::default()).unwrap();
    let pairs: Vec<ClaimPair> = unbiased.all().cloned().collect();
    assert_eq!(corpus_stats(&pairs, &cfg.bias_cue).cue_in_disagree, 0.0);
}

#[test]
fn redacted_labels_follow_the_oracle() {
    let cfg = SynthConfig {
        entities: 80,
        ..SynthConfig::default()
    };
    let c = generate_synthetic(&cfg).unwrap();
    let red = redacted_pairs(&cfg, &c.train, 0.5, 3, 4);
    assert!(!red.is_empty());
    let mut neutralized = 0;
    for p in &red {
        let stars = p.sentence.iter().filter(|t| *t == MASK_TOKEN).count();
        assert!((1..=3).contains(&stars));
        assert_eq!(slot_oracle(&cfg, &p.sentence, &p.claim), Some(p.relation));
        neutralized += (p.relation == Relation::Neutral) as usize;
    }
    assert!(neutralized > 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn labels_masks_and_updates_agree_with_the_slots(seed in any::<u64>(), bias in 0.0f64..1.0) {
        let cfg = SynthConfig {
            seed,
            entities: 40,
            bias_prob: bias,
            ..SynthConfig::default()
        };
        let c = generate_synthetic(&cfg).unwrap();
        for p in c.all() {
            prop_assert_eq!(slot_oracle(&cfg, &p.sentence, &p.claim), Some(p.relation));
            match p.relation {
                Relation::Neutral => {
                    prop_assert!(p.gold_mask.is_none() && p.gold_updated.is_none());
                }
                Relation::Agree => {
                    prop_assert!(p.gold_updated.is_none());
                    let mask = p.gold_mask.as_ref().unwrap();
                    prop_assert_eq!(mask.len(), p.sentence.len());
                    prop_assert!(mask.contains(&1));
                    // the masked value is what the claim states
                    for (t, &m) in p.sentence.iter().zip(mask) {
                        if m == 1 {
                            prop_assert!(p.claim.contains(t));
                        }
                    }
                }
                Relation::Disagree => {
                    let mask = p.gold_mask.as_ref().unwrap();
                    let updated = p.gold_updated.as_ref().unwrap();
                    prop_assert_eq!(updated.len(), p.sentence.len());
                    for (k, (&m, (old, new))) in
                        mask.iter().zip(p.sentence.iter().zip(updated)).enumerate()
                    {
                        if m == 1 {
                            prop_assert!(old != new, "slot {k} unchanged");
                            prop_assert!(p.claim.contains(new));
                        } else {
                            prop_assert_eq!(old, new);
                        }
                    }
                    prop_assert_eq!(
                        slot_oracle(&cfg, updated, &p.claim),
                        Some(Relation::Agree)
                    );
                }
            }
        }
    }

    #[test]
    fn generation_is_a_function_of_the_seed(seed in any::<u64>()) {
        let cfg = SynthConfig { seed, entities: 30, ..SynthConfig::default() };
        prop_assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
    }
}
