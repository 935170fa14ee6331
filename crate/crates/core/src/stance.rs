//! Three-way claim/sentence relation classifier.
//!
//! Both sides run through one shared BiLSTM, are aligned with a bilinear
//! attention in both directions, compared per token, pooled, and scored by a
//! two-layer MLP. Token representations concatenate the word embedding with
//! the encoder state so exact token matches stay visible to the alignment.
//! Once trained the parameter store is frozen; the masker backpropagates
//! through it without ever updating it.

use factedit_tensor::{Optimizer, ParamStore, Tape, Tensor, Var};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClaimPair, Relation};
use crate::error::{contract, Error, Result};
use crate::layers::{BiLstm, BilinearAttention, Embedding, Linear};
use crate::vocab::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StanceDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub mlp: usize,
}

/// Parameter layout of the classifier; values live in a separate store.
#[derive(Debug, Clone, Copy)]
pub struct StanceNet {
    pub dims: StanceDims,
    pub embedding: Embedding,
    pub encoder: BiLstm,
    pub align: BilinearAttention,
    pub hidden_layer: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone)]
pub struct StanceModel {
    pub store: ParamStore,
    pub net: StanceNet,
}

/// Predicted label: argmax over `[A, D, N]`, ties resolved toward NEUTRAL
/// and then toward AGREE.
pub fn argmax_relation(p: [f64; 3]) -> Relation {
    if p[2] >= p[0] && p[2] >= p[1] {
        Relation::Neutral
    } else if p[0] >= p[1] {
        Relation::Agree
    } else {
        Relation::Disagree
    }
}

impl StanceModel {
    /// Output layer starts at zero so the untrained model is uniform.
    pub fn new(dims: StanceDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embedding = Embedding::new(&mut store, "stance.emb", dims.vocab, dims.embed, &mut rng);
        let encoder = BiLstm::new(&mut store, "stance.enc", dims.embed, dims.hidden, &mut rng);
        let d = dims.embed + 2 * dims.hidden;
        let align = BilinearAttention::new(&mut store, "stance.align", d, &mut rng);
        let hidden_layer = Linear::new(&mut store, "stance.mlp", 16 * d, dims.mlp, &mut rng);
        let output = Linear::zeros(&mut store, "stance.out", dims.mlp, 3);
        StanceModel {
            store,
            net: StanceNet {
                dims,
                embedding,
                encoder,
                align,
                hidden_layer,
                output,
            },
        }
    }

    pub fn dims(&self) -> StanceDims {
        self.net.dims
    }

    pub fn is_frozen(&self) -> bool {
        self.store.is_frozen()
    }

    pub fn embed(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        self.net.embedding.forward(tape, &self.store, ids)
    }

    /// The ★ embedding row.
    pub fn mask_row(&self, tape: &mut Tape) -> Result<Var> {
        self.embed(tape, &[crate::vocab::MASK])
    }

    pub fn logits_embedded(&self, tape: &mut Tape, sentence: Var, claim: &[usize]) -> Result<Var> {
        self.net.logits_embedded(tape, &self.store, sentence, claim)
    }

    pub fn logits(&self, tape: &mut Tape, sentence: &[usize], claim: &[usize]) -> Result<Var> {
        self.net.logits(tape, &self.store, sentence, claim)
    }
}

impl StanceNet {
    /// Logits `[1 x 3]` from already-embedded sentence rows and claim ids.
    pub fn logits_embedded(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sentence: Var,
        claim: &[usize],
    ) -> Result<Var> {
        if tape.shape(sentence).0 == 0 || claim.is_empty() {
            return Err(contract(
                "classification needs a nonempty sentence and claim",
            ));
        }
        let c_emb = self.embedding.forward(tape, store, claim)?;
        let s_states = self.encoder.forward(tape, store, sentence)?.states;
        let c_states = self.encoder.forward(tape, store, c_emb)?.states;
        let s = tape.concat_cols(&[sentence, s_states])?;
        let c = tape.concat_cols(&[c_emb, c_states])?;
        let scores = self.align.scores(tape, store, s, c)?;
        let a = tape.softmax(scores)?;
        let s_ctx = tape.matmul(a, c)?;
        let st = tape.transpose(scores);
        let b = tape.softmax(st)?;
        let c_ctx = tape.matmul(b, s)?;
        let ps = compare_pool(tape, s, s_ctx)?;
        let pc = compare_pool(tape, c, c_ctx)?;
        let v = tape.concat_cols(&[ps, pc])?;
        let h = self.hidden_layer.forward(tape, store, v)?;
        let h = tape.tanh(h);
        self.output.forward(tape, store, h)
    }

    pub fn logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sentence: &[usize],
        claim: &[usize],
    ) -> Result<Var> {
        if sentence.is_empty() {
            return Err(contract(
                "classification needs a nonempty sentence and claim",
            ));
        }
        let s = self.embedding.forward(tape, store, sentence)?;
        self.logits_embedded(tape, store, s, claim)
    }
}

impl StanceModel {
    /// `[p(A), p(D), p(N)]`.
    pub fn classify(&self, sentence: &[usize], claim: &[usize]) -> Result<[f64; 3]> {
        let mut tape = Tape::new();
        let logits = self.logits(&mut tape, sentence, claim)?;
        let p = tape.softmax(logits)?;
        let d = tape.value(p).data();
        Ok([d[0], d[1], d[2]])
    }

    pub fn predict(&self, sentence: &[usize], claim: &[usize]) -> Result<Relation> {
        Ok(argmax_relation(self.classify(sentence, claim)?))
    }

    /// `log p(N)` as a tape node, differentiable w.r.t. the sentence rows.
    pub fn log_neutrality(&self, tape: &mut Tape, sentence: Var, claim: &[usize]) -> Result<Var> {
        let logits = self.logits_embedded(tape, sentence, claim)?;
        let lp = tape.log_softmax(logits)?;
        Ok(tape.pick(lp, 0, Relation::Neutral.index())?)
    }

    /// `p(N)` for soft sentence rows (plain value, no gradient).
    pub fn neutrality_prob(&self, sentence_rows: &Tensor, claim: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let s = tape.constant(sentence_rows.clone());
        let logits = self.logits_embedded(&mut tape, s, claim)?;
        let p = tape.softmax(logits)?;
        Ok(tape.value(p).data()[Relation::Neutral.index()])
    }

    pub fn accuracy(&self, examples: &[Encoded]) -> Result<f64> {
        if examples.is_empty() {
            return Err(contract("accuracy over an empty set"));
        }
        let correct: Result<Vec<bool>> = examples
            .par_iter()
            .map(|e| Ok(self.predict(&e.sentence, &e.claim)? == e.relation))
            .collect();
        Ok(correct?.iter().filter(|&&c| c).count() as f64 / examples.len() as f64)
    }
}

/// `[X, X~, X - X~, X * X~]` per token, then max- and mean-pooled.
fn compare_pool(tape: &mut Tape, x: Var, ctx: Var) -> Result<Var> {
    let diff = tape.sub(x, ctx)?;
    let prod = tape.mul(x, ctx)?;
    let feats = tape.concat_cols(&[x, ctx, diff, prod])?;
    let max = tape.max_rows(feats)?;
    let mean = tape.mean_rows(feats)?;
    Ok(tape.concat_cols(&[max, mean])?)
}

/// A pair mapped to vocabulary ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub sentence: Vec<usize>,
    pub claim: Vec<usize>,
    pub relation: Relation,
}

pub fn encode_pairs(vocab: &Vocab, pairs: &[ClaimPair]) -> Vec<Encoded> {
    pairs
        .iter()
        .map(|p| Encoded {
            sentence: vocab.encode(&p.sentence),
            claim: vocab.encode(&p.claim),
            relation: p.relation,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeReport {
    pub added: usize,
    pub skipped: usize,
}

/// For every polarizing pair adds a NEUTRAL pair whose sentence is a
/// uniformly drawn sibling from the same paragraph.
pub fn build_neutral_negatives(pairs: &[ClaimPair], seed: u64) -> (Vec<ClaimPair>, NegativeReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = pairs.to_vec();
    let mut report = NegativeReport {
        added: 0,
        skipped: 0,
    };
    for p in pairs.iter().filter(|p| p.is_polar()) {
        let candidates: Vec<&Vec<String>> = p
            .siblings
            .iter()
            .filter(|s| **s != p.sentence && !s.is_empty())
            .collect();
        let Some(sibling) = candidates.choose(&mut rng) else {
            report.skipped += 1;
            continue;
        };
        out.push(ClaimPair {
            id: format!("{}-neg", p.id),
            claim: p.claim.clone(),
            sentence: (*sibling).clone(),
            relation: Relation::Neutral,
            paragraph_id: p.paragraph_id.clone(),
            siblings: Vec::new(),
            gold_mask: None,
            gold_updated: None,
        });
        report.added += 1;
    }
    (out, report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StanceTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Keep the best-dev epoch; otherwise keep the last epoch.
    pub keep_best: bool,
}

impl Default for StanceTraining {
    fn default() -> Self {
        StanceTraining {
            epochs: 12,
            batch_size: 16,
            learning_rate: 5e-3,
            clip_norm: 5.0,
            seed: 7,
            keep_best: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StanceEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
    pub best_dev_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StanceReport {
    pub first_batch_loss: f64,
    pub epochs: Vec<StanceEpoch>,
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
}

/// Cross-entropy training with best-dev-accuracy selection. The model is
/// frozen on return.
pub fn train_stance(
    model: &mut StanceModel,
    train: &[Encoded],
    dev: &[Encoded],
    cfg: &StanceTraining,
) -> Result<StanceReport> {
    if model.is_frozen() {
        return Err(Error::Tensor(factedit_tensor::TensorError::Frozen));
    }
    for r in Relation::ALL {
        if !train.iter().any(|e| e.relation == r) {
            return Err(Error::DegenerateCorpus(format!(
                "no {r} examples in the training set"
            )));
        }
    }
    if dev.is_empty() {
        return Err(contract("stance training needs a nonempty dev set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::adam(cfg.learning_rate);
    if cfg.clip_norm > 0.0 {
        opt = opt.with_clip(cfg.clip_norm);
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = model.store.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut first_batch_loss = f64::NAN;
    let mut epochs = Vec::new();
    let batch = cfg.batch_size.max(1);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            model.store.zero_grad();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let e = &train[i];
                let mut tape = Tape::new();
                let logits = model.logits(&mut tape, &e.sentence, &e.claim)?;
                let lp = tape.log_softmax(logits)?;
                let picked = tape.pick(lp, 0, e.relation.index())?;
                let loss = tape.scale(picked, -1.0 / chunk.len() as f64);
                batch_loss += tape.item(loss);
                let grads = tape.backward(loss)?;
                model.store.accumulate(&grads);
            }
            if first_batch_loss.is_nan() {
                first_batch_loss = batch_loss;
            }
            total += batch_loss * chunk.len() as f64;
            opt.step(&mut model.store)?;
        }
        let dev_accuracy = model.accuracy(dev)?;
        if dev_accuracy > best_acc || !cfg.keep_best {
            best_acc = dev_accuracy;
            best_epoch = epoch;
            best.copy_values_from(&model.store)?;
        }
        epochs.push(StanceEpoch {
            epoch,
            train_loss: total / train.len() as f64,
            dev_accuracy,
            best_dev_accuracy: best_acc,
        });
    }
    model.store.copy_values_from(&best)?;
    model.store.round_to_f32();
    model.store.freeze();
    Ok(StanceReport {
        first_batch_loss,
        epochs,
        best_epoch,
        best_dev_accuracy: best_acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> StanceDims {
        StanceDims {
            vocab: 12,
            embed: 4,
            hidden: 3,
            mlp: 5,
        }
    }

    #[test]
    fn untrained_model_is_uniform() {
        let m = StanceModel::new(dims(), 1);
        let p = m.classify(&[5, 6, 7], &[8, 9]).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(argmax_relation(p), Relation::Neutral);
    }

    #[test]
    fn tie_break_prefers_neutral() {
        assert_eq!(argmax_relation([0.4, 0.4, 0.2]), Relation::Agree);
        assert_eq!(argmax_relation([0.4, 0.2, 0.4]), Relation::Neutral);
        assert_eq!(argmax_relation([0.2, 0.4, 0.4]), Relation::Neutral);
        assert_eq!(argmax_relation([0.1, 0.6, 0.3]), Relation::Disagree);
    }

    #[test]
    fn empty_input_is_a_contract_error() {
        let m = StanceModel::new(dims(), 1);
        assert!(matches!(m.classify(&[], &[5]), Err(Error::Contract(_))));
        assert!(matches!(m.classify(&[5], &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn hard_neutrality_matches_classify() {
        let mut m = StanceModel::new(dims(), 2);
        let out = m.store.find("stance.out.weight").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        *m.store.get_mut(out).unwrap() = factedit_tensor::init::uniform(5, 3, 1.0, &mut rng);
        let (s, c) = ([5, 9, 7, 2], [8, 10, 11]);
        let p = m.classify(&s, &c).unwrap();
        let mut tape = Tape::new();
        let rows = m.embed(&mut tape, &s).unwrap();
        let rows = tape.value(rows).clone();
        assert_eq!(m.neutrality_prob(&rows, &c).unwrap(), p[2]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    fn pair(id: &str, relation: Relation, siblings: &[&str]) -> ClaimPair {
        let mut p = ClaimPair::new(id, "a b c", "x y", relation);
        p.siblings = siblings.iter().map(|s| crate::vocab::tokenize(s)).collect();
        p
    }

    #[test]
    fn negatives_skip_lonely_sentences() {
        let pairs = vec![
            pair("1", Relation::Agree, &[]),
            pair("2", Relation::Disagree, &["d e", "f g"]),
            pair("3", Relation::Agree, &["a b c"]),
            pair("4", Relation::Neutral, &["h"]),
        ];
        let (out, report) = build_neutral_negatives(&pairs, 3);
        assert_eq!(
            report,
            NegativeReport {
                added: 1,
                skipped: 2
            }
        );
        assert_eq!(out.len(), 5);
        let neg = out.last().unwrap();
        assert_eq!(neg.relation, Relation::Neutral);
        assert_ne!(neg.sentence, pairs[1].sentence);
    }

    #[test]
    fn single_label_corpus_is_degenerate() {
        let mut m = StanceModel::new(dims(), 1);
        let e = Encoded {
            sentence: vec![5, 6],
            claim: vec![7],
            relation: Relation::Agree,
        };
        let r = train_stance(
            &mut m,
            std::slice::from_ref(&e),
            std::slice::from_ref(&e),
            &StanceTraining::default(),
        );
        assert!(matches!(r, Err(Error::DegenerateCorpus(_))));
    }
}
