//! Span masker: per-token deletion probabilities trained against a frozen
//! stance classifier's neutrality score, with a sparsity penalty and an
//! optional pull toward a precomputed target span.

use factedit_tensor::{Optimizer, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClaimPair, Relation};
use crate::error::{contract, Error, Result};
use crate::layers::{BiLstm, BilinearAttention, Embedding, Linear};
use crate::metrics::{mask_prf, Prf};
use crate::stance::{argmax_relation, StanceModel};
use crate::vocab::{Vocab, MASK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskerDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub mask_hidden: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct MaskerNet {
    pub dims: MaskerDims,
    pub embedding: Embedding,
    /// Shared by the sentence and the claim.
    pub encoder: BiLstm,
    pub attention: BilinearAttention,
    pub mask_encoder: BiLstm,
    pub head: Linear,
}

#[derive(Debug, Clone)]
pub struct MaskerModel {
    pub store: ParamStore,
    pub net: MaskerNet,
}

impl MaskerModel {
    pub fn new(dims: MaskerDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embedding = Embedding::new(&mut store, "masker.emb", dims.vocab, dims.embed, &mut rng);
        let encoder = BiLstm::new(&mut store, "masker.enc", dims.embed, dims.hidden, &mut rng);
        let d = 2 * dims.hidden;
        let attention = BilinearAttention::new(&mut store, "masker.att", d, &mut rng);
        let mask_encoder = BiLstm::new(&mut store, "masker.g", d, dims.mask_hidden, &mut rng);
        let head = Linear::new(&mut store, "masker.head", 2 * dims.mask_hidden, 1, &mut rng);
        MaskerModel {
            store,
            net: MaskerNet {
                dims,
                embedding,
                encoder,
                attention,
                mask_encoder,
                head,
            },
        }
    }

    /// Soft mask probabilities, one per sentence token.
    pub fn mask_probs(&self, sentence: &[usize], claim: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let m = self.net.probs(&mut tape, &self.store, sentence, claim)?;
        Ok(tape.value(m).data().to_vec())
    }

    pub fn hard_mask(
        &self,
        sentence: &[usize],
        claim: &[usize],
        threshold: f64,
    ) -> Result<Vec<u8>> {
        Ok(round_mask(&self.mask_probs(sentence, claim)?, threshold))
    }
}

impl MaskerNet {
    /// `p(m_i = 1)` as a `[l x 1]` node.
    pub fn probs(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sentence: &[usize],
        claim: &[usize],
    ) -> Result<Var> {
        if sentence.is_empty() || claim.is_empty() {
            return Err(contract("masking needs a nonempty sentence and claim"));
        }
        let s = self.embedding.forward(tape, store, sentence)?;
        let c = self.embedding.forward(tape, store, claim)?;
        let e = self.encoder.forward(tape, store, s)?.states;
        let c = self.encoder.forward(tape, store, c)?.states;
        let (_, attended) = self.attention.attend(tape, store, e, c)?;
        let z = tape.add(e, attended)?;
        let g = self.mask_encoder.forward(tape, store, z)?.states;
        let logits = self.head.forward(tape, store, g)?;
        Ok(tape.sigmoid(logits))
    }
}

/// Rows `(1 - m_i) * rows_i + m_i * star` on the tape. `m` is `[l x 1]`.
pub fn soft_mask_rows(tape: &mut Tape, rows: Var, star: Var, m: Var) -> Result<Var> {
    let (l, _) = tape.shape(rows);
    if tape.shape(m) != (l, 1) {
        return Err(contract(format!(
            "mask of shape {:?} for {l} sentence rows",
            tape.shape(m)
        )));
    }
    let stars = tape.gather_rows(star, &vec![0; l])?;
    let keep = tape.one_minus(m);
    let kept = tape.mul_col(rows, keep)?;
    let masked = tape.mul_col(stars, m)?;
    Ok(tape.add(kept, masked)?)
}

/// Plain-value version of [`soft_mask_rows`].
pub fn apply_soft_mask(rows: &Tensor, star: &[f64], mask: &[f64]) -> Result<Tensor> {
    if mask.len() != rows.rows() || star.len() != rows.cols() {
        return Err(contract(format!(
            "mask of length {} and ★ row of width {} for {:?} rows",
            mask.len(),
            star.len(),
            rows.shape()
        )));
    }
    let mut tape = Tape::new();
    let r = tape.constant(rows.clone());
    let s = tape.constant(Tensor::row(star.to_vec()));
    let m = tape.constant(Tensor::column(mask.to_vec()));
    let out = soft_mask_rows(&mut tape, r, s, m)?;
    Ok(tape.value(out).clone())
}

/// `1` where `m_i >= threshold`.
pub fn round_mask(mask: &[f64], threshold: f64) -> Vec<u8> {
    mask.iter().map(|&m| (m >= threshold) as u8).collect()
}

/// Replaces every token whose mask value reaches the threshold by `star`.
pub fn apply_hard_mask<T: Clone>(tokens: &[T], mask: &[f64], threshold: f64, star: T) -> Vec<T> {
    tokens
        .iter()
        .zip(mask)
        .map(|(t, &m)| {
            if m >= threshold {
                star.clone()
            } else {
                t.clone()
            }
        })
        .collect()
}

pub fn mask_ids(sentence: &[usize], hard: &[u8]) -> Vec<usize> {
    sentence
        .iter()
        .zip(hard)
        .map(|(&t, &m)| if m == 1 { MASK } else { t })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskerConfig {
    pub lambda: f64,
    pub syntactic_reg: bool,
    pub reg_weight: f64,
    pub threshold: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub min_span: usize,
    pub max_span: usize,
}

impl Default for MaskerConfig {
    fn default() -> Self {
        MaskerConfig {
            lambda: 0.4,
            syntactic_reg: false,
            reg_weight: 1.0,
            threshold: 0.5,
            epochs: 100,
            patience: 10,
            batch_size: 16,
            learning_rate: 3e-3,
            clip_norm: 5.0,
            seed: 11,
            min_span: 2,
            max_span: 10,
        }
    }
}

impl MaskerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be >= 0 (got {})",
                self.lambda
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must lie in (0, 1) (got {})",
                self.threshold
            )));
        }
        if self.min_span == 0 || self.min_span > self.max_span {
            return Err(Error::Config(
                "span bounds must satisfy 1 <= min_span <= max_span".into(),
            ));
        }
        Ok(())
    }
}

/// One masker training/evaluation instance in vocabulary ids.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskExample {
    pub sentence: Vec<usize>,
    pub claim: Vec<usize>,
    pub gold: Option<Vec<u8>>,
}

/// Polarizing (AGREE/DISAGREE) pairs only.
pub fn mask_examples(vocab: &Vocab, pairs: &[ClaimPair]) -> Vec<MaskExample> {
    pairs
        .iter()
        .filter(|p| p.is_polar())
        .map(|p| MaskExample {
            sentence: vocab.encode(&p.sentence),
            claim: vocab.encode(&p.claim),
            gold: p.gold_mask.clone(),
        })
        .collect()
}

fn require_frozen(stance: &StanceModel) -> Result<()> {
    if stance.is_frozen() {
        Ok(())
    } else {
        Err(contract(
            "the stance classifier must be frozen before masker training",
        ))
    }
}

/// Sparsity-regularized negative log-neutrality, plus the target-mask term
/// when `target` is given and the regularizer is enabled.
pub fn masker_loss(
    tape: &mut Tape,
    masker: &MaskerNet,
    store: &ParamStore,
    stance: &StanceModel,
    example: &MaskExample,
    target: Option<&[u8]>,
    cfg: &MaskerConfig,
) -> Result<Var> {
    let m = masker.probs(tape, store, &example.sentence, &example.claim)?;
    let l = example.sentence.len() as f64;
    let rows = stance.embed(tape, &example.sentence)?;
    let star = stance.mask_row(tape)?;
    let soft = soft_mask_rows(tape, rows, star, m)?;
    let log_n = stance.log_neutrality(tape, soft, &example.claim)?;
    let mut loss = tape.neg(log_n);
    if cfg.lambda != 0.0 {
        let size = tape.sum(m);
        let size = tape.scale(size, cfg.lambda / l);
        loss = tape.add(loss, size)?;
    }
    if let (true, Some(t)) = (cfg.syntactic_reg, target) {
        if t.len() != example.sentence.len() {
            return Err(contract("target mask length differs from the sentence"));
        }
        let t = tape.constant(Tensor::column(t.iter().map(|&v| v as f64).collect()));
        let d = tape.sub(m, t)?;
        let sq = tape.mul(d, d)?;
        let sq = tape.sum(sq);
        let reg = tape.scale(sq, cfg.reg_weight / l);
        loss = tape.add(loss, reg)?;
    }
    Ok(loss)
}

/// Shortest contiguous span whose masking makes the classifier answer
/// NEUTRAL; among spans of that length the one with the highest `p(N)`
/// (earliest on exact ties).
pub fn target_mask_oracle(
    stance: &StanceModel,
    sentence: &[usize],
    claim: &[usize],
    min_span: usize,
    max_span: usize,
) -> Result<Option<Vec<u8>>> {
    let l = sentence.len();
    for len in min_span..=max_span.min(l) {
        let mut best: Option<(f64, usize)> = None;
        for start in 0..=l - len {
            let mut residual = sentence.to_vec();
            residual[start..start + len].fill(MASK);
            let p = stance.classify(&residual, claim)?;
            if argmax_relation(p) == Relation::Neutral && best.is_none_or(|(b, _)| p[2] > b) {
                best = Some((p[2], start));
            }
        }
        if let Some((_, start)) = best {
            let mut mask = vec![0u8; l];
            mask[start..start + len].fill(1);
            return Ok(Some(mask));
        }
    }
    Ok(None)
}

/// Target masks for every example, computed in parallel.
pub fn target_masks(
    stance: &StanceModel,
    examples: &[MaskExample],
    cfg: &MaskerConfig,
) -> Result<Vec<Option<Vec<u8>>>> {
    examples
        .par_iter()
        .map(|e| target_mask_oracle(stance, &e.sentence, &e.claim, cfg.min_span, cfg.max_span))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskEval {
    /// Percent of residuals the classifier labels NEUTRAL.
    pub accuracy: f64,
    /// Mean percent of tokens masked per sentence.
    pub size: f64,
    pub delta: f64,
    /// Against gold masks where present.
    pub prf: Option<Prf>,
}

pub fn evaluate_masker(
    masker: &MaskerModel,
    stance: &StanceModel,
    examples: &[MaskExample],
    threshold: f64,
) -> Result<MaskEval> {
    if examples.is_empty() {
        return Err(contract("masker evaluation over an empty set"));
    }
    let rows: Vec<(bool, f64, Vec<u8>)> = examples
        .par_iter()
        .map(|e| {
            let hard = masker.hard_mask(&e.sentence, &e.claim, threshold)?;
            let residual = mask_ids(&e.sentence, &hard);
            let neutral = stance.predict(&residual, &e.claim)? == Relation::Neutral;
            let size = hard.iter().filter(|&&m| m == 1).count() as f64 / hard.len() as f64;
            Ok::<_, Error>((neutral, size, hard))
        })
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let accuracy = 100.0 * rows.iter().filter(|r| r.0).count() as f64 / n;
    let size = 100.0 * rows.iter().map(|r| r.1).sum::<f64>() / n;
    let (pred, gold): (Vec<Vec<u8>>, Vec<Vec<u8>>) = rows
        .iter()
        .zip(examples)
        .filter_map(|(r, e)| e.gold.clone().map(|g| (r.2.clone(), g)))
        .unzip();
    let prf = if gold.is_empty() {
        None
    } else {
        Some(mask_prf(&pred, &gold)?)
    };
    Ok(MaskEval {
        accuracy,
        size,
        delta: accuracy - size,
        prf,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskerEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev: MaskEval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskerReport {
    pub lambda: f64,
    pub syntactic_reg: bool,
    pub epochs: Vec<MaskerEpoch>,
    pub best_epoch: usize,
    pub best_dev: MaskEval,
    pub targets_found: usize,
    pub target_hit_rate: f64,
}

/// Trains until `Δ = accuracy − size` on the dev set stops improving for
/// `patience` epochs; keeps the best-Δ parameters and freezes them.
pub fn train_masker(
    masker: &mut MaskerModel,
    stance: &StanceModel,
    train: &[MaskExample],
    dev: &[MaskExample],
    cfg: &MaskerConfig,
) -> Result<MaskerReport> {
    cfg.validate()?;
    require_frozen(stance)?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::DegenerateCorpus(
            "masker training needs AGREE/DISAGREE pairs in both train and dev".into(),
        ));
    }
    let targets = if cfg.syntactic_reg {
        target_masks(stance, train, cfg)?
    } else {
        vec![None; train.len()]
    };
    let targets_found = targets.iter().filter(|t| t.is_some()).count();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::adam(cfg.learning_rate);
    if cfg.clip_norm > 0.0 {
        opt = opt.with_clip(cfg.clip_norm);
    }
    let checksum = stance.store.checksum();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = masker.store.clone();
    let mut best_dev: Option<MaskEval> = None;
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    let batch = cfg.batch_size.max(1);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            masker.store.zero_grad();
            for &i in chunk {
                let mut tape = Tape::new();
                let loss = masker_loss(
                    &mut tape,
                    &masker.net,
                    &masker.store,
                    stance,
                    &train[i],
                    targets[i].as_deref(),
                    cfg,
                )?;
                let loss = tape.scale(loss, 1.0 / chunk.len() as f64);
                total += tape.item(loss) * chunk.len() as f64;
                let grads = tape.backward(loss)?;
                masker.store.accumulate(&grads);
            }
            opt.step(&mut masker.store)?;
        }
        let dev_eval = evaluate_masker(masker, stance, dev, cfg.threshold)?;
        epochs.push(MaskerEpoch {
            epoch,
            train_loss: total / train.len() as f64,
            dev: dev_eval,
        });
        if best_dev.is_none_or(|b| dev_eval.delta > b.delta) {
            best_dev = Some(dev_eval);
            best_epoch = epoch;
            best.copy_values_from(&masker.store)?;
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    debug_assert_eq!(checksum, stance.store.checksum());
    masker.store.copy_values_from(&best)?;
    masker.store.round_to_f32();
    masker.store.freeze();
    Ok(MaskerReport {
        lambda: cfg.lambda,
        syntactic_reg: cfg.syntactic_reg,
        epochs,
        best_epoch,
        best_dev: best_dev.expect("at least one epoch"),
        targets_found,
        target_hit_rate: targets_found as f64 / train.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> MaskerDims {
        MaskerDims {
            vocab: 10,
            embed: 4,
            hidden: 3,
            mask_hidden: 3,
        }
    }

    #[test]
    fn zero_head_gives_half() {
        let mut m = MaskerModel::new(dims(), 1);
        let w = m.net.head.weight;
        m.store.get_mut(w).unwrap().data_mut().fill(0.0);
        let p = m.mask_probs(&[5, 6, 7, 8], &[9, 5]).unwrap();
        assert_eq!(p, vec![0.5; 4]);
    }

    #[test]
    fn soft_mask_endpoints_and_midpoint() {
        let rows = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let star = [10.0, 20.0];
        assert_eq!(apply_soft_mask(&rows, &star, &[0.0, 0.0]).unwrap(), rows);
        assert_eq!(
            apply_soft_mask(&rows, &star, &[1.0, 1.0]).unwrap().data(),
            &[10.0, 20.0, 10.0, 20.0]
        );
        assert_eq!(
            apply_soft_mask(&rows, &star, &[0.5, 0.5]).unwrap().data(),
            &[5.5, 11.0, 6.5, 12.0]
        );
        assert!(apply_soft_mask(&rows, &star, &[0.5]).is_err());
    }

    #[test]
    fn hard_mask_rounding() {
        let toks = ["a", "b", "c"];
        assert_eq!(
            apply_hard_mask(&toks, &[0.6, 0.2, 0.9], 0.5, "★"),
            vec!["★", "b", "★"]
        );
        assert_eq!(
            apply_hard_mask(&toks, &[0.1, 0.2, 0.3], 0.5, "★"),
            toks.to_vec()
        );
        assert_eq!(
            apply_hard_mask(&toks, &[0.5, 0.0, 0.0], 0.5, "★"),
            vec!["★", "b", "c"]
        );
    }

    #[test]
    fn oracle_needs_two_tokens() {
        let mut stance = crate::stance::StanceModel::new(
            crate::stance::StanceDims {
                vocab: 10,
                embed: 3,
                hidden: 2,
                mlp: 3,
            },
            1,
        );
        stance.store.freeze();
        assert_eq!(
            target_mask_oracle(&stance, &[5], &[6], 2, 10).unwrap(),
            None
        );
        // the untrained classifier is uniform, so every span is NEUTRAL and
        // the first length-2 span wins
        assert_eq!(
            target_mask_oracle(&stance, &[5, 6, 7], &[6], 2, 10).unwrap(),
            Some(vec![1, 1, 0])
        );
    }

    #[test]
    fn config_validation() {
        assert!(MaskerConfig {
            lambda: -0.1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(MaskerConfig {
            threshold: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(MaskerConfig::default().validate().is_ok());
    }
}
