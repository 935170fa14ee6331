//! Toy models and independent oracles shared by the integration tests and
//! the acceptance suite.
#![allow(dead_code)]

use factedit::generator::{
    Controls, Decoder, ExtendedDistribution, ExtendedSources, GeneratorDims, GeneratorExample,
    GeneratorMode, GeneratorModel,
};
use factedit::masker::{masker_loss, MaskExample, MaskerConfig, MaskerDims, MaskerModel};
use factedit::stance::{StanceDims, StanceModel};
use factedit::vocab::{Vocab, RESERVED};
use factedit_tensor::check::check_params;
use factedit_tensor::{init, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-3;
pub const TOL: f64 = 1e-4;

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Reserved entries plus `a`..`h`.
pub fn toy_vocab() -> Vocab {
    Vocab::from_tokens(
        RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain("a b c d e f g h".split(' ').map(str::to_string))
            .collect(),
    )
}

pub fn randomize(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let (r, c) = store.get(id).shape();
        *store.get_mut(id).unwrap() = init::uniform(r, c, 0.5, &mut rng);
    }
}

pub fn toy_stance(vocab: usize, seed: u64) -> StanceModel {
    let mut m = StanceModel::new(
        StanceDims {
            vocab,
            embed: 3,
            hidden: 2,
            mlp: 4,
        },
        seed,
    );
    randomize(&mut m.store, seed + 1);
    m
}

pub fn stance_gradients() -> Vec<(String, f64)> {
    let mut model = toy_stance(9, 4);
    let net = model.net;
    check_params(&mut model.store, H, |tape, store| {
        let logits = net.logits(tape, store, &[5, 6, 7], &[8, 5])?;
        let lp = tape.log_softmax(logits)?;
        let p = tape.pick(lp, 0, 1)?;
        Ok::<_, factedit::Error>(tape.neg(p))
    })
    .unwrap()
}

/// Masker loss gradients through a frozen classifier, with the sparsity
/// term and optionally the target-mask term.
pub fn masker_gradients(syntactic: bool) -> Vec<(String, f64)> {
    let mut stance = toy_stance(10, 8);
    stance.store.freeze();
    let mut masker = MaskerModel::new(
        MaskerDims {
            vocab: 10,
            embed: 3,
            hidden: 2,
            mask_hidden: 2,
        },
        3,
    );
    randomize(&mut masker.store, 21);
    let cfg = MaskerConfig {
        lambda: 0.7,
        syntactic_reg: syntactic,
        reg_weight: 0.5,
        ..MaskerConfig::default()
    };
    let example = MaskExample {
        sentence: vec![5, 6, 2, 7],
        claim: vec![8, 9, 5],
        gold: None,
    };
    let target = [0u8, 1, 1, 0];
    let net = masker.net;
    check_params(&mut masker.store, H, |tape, store| {
        masker_loss(tape, &net, store, &stance, &example, Some(&target), &cfg)
    })
    .unwrap()
}

pub fn toy_generator(mode: GeneratorMode, vocab: usize, seed: u64) -> GeneratorModel {
    let mut m = GeneratorModel::new(
        GeneratorDims {
            vocab,
            embed: 3,
            hidden: 2,
            attention: 3,
            mode,
        },
        seed,
    );
    randomize(&mut m.store, seed + 100);
    m
}

/// Teacher-forced NLL gradients on a target that mixes a generated token,
/// a repeated copied token and an out-of-vocabulary copy.
pub fn generator_gradients(mode: GeneratorMode) -> Vec<(String, f64)> {
    let vocab = toy_vocab();
    let mut model = toy_generator(mode, vocab.len(), 5);
    let example = GeneratorExample::new(
        &vocab,
        mode,
        &toks("a ★ b a"),
        &toks("zed c a"),
        &toks("a zed d"),
    )
    .unwrap()
    .expect("reachable target");
    let net = model.net;
    check_params(&mut model.store, H, |tape, store| {
        net.nll(tape, store, &example)
    })
    .unwrap()
}

/// Every model check, labelled by model.
pub fn all_model_gradients() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut add = |label: &str, errs: Vec<(String, f64)>| {
        out.extend(errs.into_iter().map(|(n, e)| (format!("{label}/{n}"), e)));
    };
    add("stance", stance_gradients());
    add("masker", masker_gradients(false));
    add("masker+reg", masker_gradients(true));
    for mode in [
        GeneratorMode::TwoEncoder,
        GeneratorMode::Concat,
        GeneratorMode::NoCopy,
        GeneratorMode::ClaimOnly,
    ] {
        add(&format!("generator {mode:?}"), generator_gradients(mode));
    }
    out
}

// ---- SARI oracle ----

fn all_ngrams(seq: &[u32], n: usize) -> Vec<Vec<u32>> {
    if seq.len() < n {
        return Vec::new();
    }
    (0..=seq.len() - n)
        .map(|i| seq[i..i + n].to_vec())
        .collect()
}

/// Multiset intersection by one-to-one matching.
fn bag_and(a: &[Vec<u32>], b: &[Vec<u32>]) -> Vec<Vec<u32>> {
    let mut pool = b.to_vec();
    let mut out = Vec::new();
    for g in a {
        if let Some(k) = pool.iter().position(|x| x == g) {
            pool.swap_remove(k);
            out.push(g.clone());
        }
    }
    out
}

/// Multiset difference `a − b`.
fn bag_minus(a: &[Vec<u32>], b: &[Vec<u32>]) -> Vec<Vec<u32>> {
    let mut pool = b.to_vec();
    let mut out = Vec::new();
    for g in a {
        match pool.iter().position(|x| x == g) {
            Some(k) => {
                pool.swap_remove(k);
            }
            None => out.push(g.clone()),
        }
    }
    out
}

fn bag_f1(pred: &[Vec<u32>], gold: &[Vec<u32>]) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let overlap = bag_and(pred, gold).len() as f64;
    if overlap == 0.0 {
        return 0.0;
    }
    let p = overlap / pred.len() as f64;
    let r = overlap / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// `(keep, add, del, sari)` by explicit n-gram lists.
pub fn sari_oracle(input: &[u32], output: &[u32], reference: &[u32]) -> [f64; 4] {
    let mut parts = [0.0; 3];
    for n in 1..=4 {
        let i = all_ngrams(input, n);
        let o = all_ngrams(output, n);
        let r = all_ngrams(reference, n);
        parts[0] += bag_f1(&bag_and(&i, &o), &bag_and(&i, &r));
        parts[1] += bag_f1(&bag_minus(&o, &i), &bag_minus(&r, &i));
        parts[2] += bag_f1(&bag_minus(&i, &o), &bag_minus(&i, &r));
    }
    let [k, a, d] = parts.map(|x| x / 4.0);
    [k, a, d, (k * a * d).cbrt()]
}

/// Random token sequence of length `lo..=hi` over `0..alphabet`.
pub fn random_seq(rng: &mut ChaCha8Rng, lo: usize, hi: usize, alphabet: u32) -> Vec<u32> {
    let n = rng.random_range(lo..=hi);
    (0..n).map(|_| rng.random_range(0..alphabet)).collect()
}

/// Worst `|library − oracle|` over every component of `count` random
/// triples with at most `max_len` tokens.
pub fn sari_oracle_gap(count: usize, max_len: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let input = random_seq(&mut rng, 1, max_len, 5);
        let output = random_seq(&mut rng, 0, max_len, 5);
        let reference = random_seq(&mut rng, 1, max_len, 5);
        let lib = factedit::metrics::sari(&input, &output, &reference).unwrap();
        let [k, a, d, s] = sari_oracle(&input, &output, &reference);
        for (x, y) in [
            (lib.keep_f1, k),
            (lib.add_f1, a),
            (lib.del_f1, d),
            (lib.sari, s),
        ] {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

// ---- copy mass ----

/// Every sequence of length `1..=max_len` over `alphabet`.
pub fn all_sequences(alphabet: &[usize], max_len: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut layer: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..max_len {
        layer = layer
            .iter()
            .flat_map(|s| {
                alphabet.iter().map(move |&t| {
                    let mut s = s.clone();
                    s.push(t);
                    s
                })
            })
            .collect();
        out.extend(layer.iter().cloned());
    }
    out
}

/// The mixture written out per id: generation mass plus, for each source,
/// the attention summed over every position holding that id.
#[allow(clippy::too_many_arguments)]
pub fn mixture_oracle(
    id: usize,
    p_vocab: &[f64],
    p_gen: f64,
    p_enc1: f64,
    a1: &[f64],
    s1: &[usize],
    a2: &[f64],
    s2: &[usize],
) -> f64 {
    let gen = p_vocab.get(id).copied().unwrap_or(0.0);
    let mut c1 = 0.0;
    for j in 0..s1.len() {
        if s1[j] == id {
            c1 += a1[j];
        }
    }
    let mut c2 = 0.0;
    for j in 0..s2.len() {
        if s2[j] == id {
            c2 += a2[j];
        }
    }
    p_gen * gen + (1.0 - p_gen) * (p_enc1 * c1 + (1.0 - p_enc1) * c2)
}

fn simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Worst gap between [`ExtendedDistribution::mix`] and the position-sum
/// oracle over every source sequence of length `<= max_len` on a 4-token
/// alphabet (two vocabulary ids, two extended ids). The second source is
/// the first reversed with the alphabet permuted.
pub fn copy_mass_gap(max_len: usize, seed: u64) -> (usize, f64) {
    const V: usize = 6;
    let alphabet = [3usize, 5, V, V + 1];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs = all_sequences(&alphabet, max_len);
    let mut worst: f64 = 0.0;
    for s1 in &seqs {
        let s2: Vec<usize> = s1
            .iter()
            .rev()
            .map(|t| alphabet[(alphabet.iter().position(|a| a == t).unwrap() + 1) % 4])
            .collect();
        let a1 = simplex(&mut rng, s1.len());
        let a2 = simplex(&mut rng, s2.len());
        let p_vocab = simplex(&mut rng, V);
        let (p_gen, p_enc1) = (rng.random::<f64>(), rng.random::<f64>());
        let size = V + 2;
        let dist =
            ExtendedDistribution::mix(size, &p_vocab, p_gen, p_enc1, &a1, s1, &a2, &s2).unwrap();
        for id in 0..size {
            let o = mixture_oracle(id, &p_vocab, p_gen, p_enc1, &a1, s1, &a2, &s2);
            worst = worst.max((dist.probs[id] - o).abs());
        }
    }
    (seqs.len(), worst)
}

/// Worst relative gap between the training-time probability of a target
/// (read back from the NLL of `[t, </s>]`) and the decoder's mixture, over
/// every residual sequence of length `<= max_len` on `a b x y` (`x`, `y`
/// out of vocabulary) and every target in that alphabet.
pub fn tape_copy_gap(max_len: usize) -> (usize, f64) {
    let vocab = toy_vocab();
    let model = toy_generator(GeneratorMode::TwoEncoder, vocab.len(), 9);
    let words = ["a", "b", "x", "y"];
    let ids: Vec<usize> = (0..4).collect();
    let claim = toks("y c a");
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for seq in all_sequences(&ids, max_len) {
        let residual: Vec<String> = seq.iter().map(|&k| words[k].to_string()).collect();
        for w in words {
            let Some(ex) = GeneratorExample::new(
                &vocab,
                GeneratorMode::TwoEncoder,
                &residual,
                &claim,
                &[w.to_string()],
            )
            .unwrap() else {
                continue;
            };
            cases += 1;
            let mut tape = factedit_tensor::Tape::new();
            let nll = model.net.nll(&mut tape, &model.store, &ex).unwrap();
            let nll = tape.item(nll);

            let mut dec = Decoder::new(&model, ex.sources.clone(), Controls::default()).unwrap();
            let s0 = dec.initial_state();
            let (d1, mut s1, _) = dec.step(&s0).unwrap();
            s1.prev = ex.target[0];
            let (d2, _, _) = dec.step(&s1).unwrap();
            let expected = -(d1.probs[ex.target[0]].ln() + d2.probs[ex.target[1]].ln()) / 2.0;
            worst = worst.max(((nll - expected) / expected).abs());
        }
    }
    (cases, worst)
}

// ---- distribution invariants ----

#[derive(Debug, Default)]
pub struct Normalization {
    pub steps: usize,
    pub mixture: f64,
    pub attention: f64,
    pub classifier: f64,
}

/// Random decode steps over random models, sources, modes and gate
/// controls. Records the worst deviation from 1 of the mixture, of each
/// attention row and of classifier outputs.
pub fn random_decode_steps(target: usize, seed: u64) -> Normalization {
    let vocab = toy_vocab();
    let words: Vec<&str> = "a b c d e f g h ★ p q".split(' ').collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Normalization::default();
    let modes = [
        GeneratorMode::TwoEncoder,
        GeneratorMode::Concat,
        GeneratorMode::NoCopy,
        GeneratorMode::ClaimOnly,
    ];
    while out.steps < target {
        let mode = modes[rng.random_range(0..4)];
        let model = toy_generator(mode, vocab.len(), rng.random());
        let mut pick = |lo: usize, hi: usize| -> Vec<String> {
            let n = rng.random_range(lo..=hi);
            (0..n)
                .map(|_| words[rng.random_range(0..words.len())].to_string())
                .collect()
        };
        let residual = pick(1, 7);
        let claim = pick(1, 5);
        let sources = ExtendedSources::new(&vocab, mode, &residual, &claim).unwrap();
        let controls = Controls {
            tau: [0.0, 0.3, 0.9][rng.random_range(0..3)],
            force_p_gen: rng.random_bool(0.2).then(|| rng.random()),
            force_p_enc1: rng.random_bool(0.2).then(|| rng.random()),
        };
        let mut dec = Decoder::new(&model, sources.clone(), controls).unwrap();
        let mut state = dec.initial_state();
        for _ in 0..10 {
            let (dist, mut next, diag) = dec.step(&state).unwrap();
            out.steps += 1;
            out.mixture = out.mixture.max((dist.total() - 1.0).abs());
            for row in [&diag.attn1, &diag.attn2] {
                if !row.is_empty() {
                    out.attention = out.attention.max((row.iter().sum::<f64>() - 1.0).abs());
                }
            }
            next.prev = rng.random_range(0..sources.extended_size());
            state = next;
        }

        let stance = toy_stance(vocab.len(), rng.random());
        let p = stance
            .classify(&vocab.encode(&residual), &vocab.encode(&claim))
            .unwrap();
        out.classifier = out.classifier.max((p.iter().sum::<f64>() - 1.0).abs());
    }
    out
}

// ---- pipeline ----

/// A pipeline small enough to train every stage in seconds.
pub fn tiny_config(out: &std::path::Path) -> factedit::pipeline::PipelineConfig {
    let mut cfg = factedit::pipeline::PipelineConfig {
        out: out.to_path_buf(),
        ..Default::default()
    };
    cfg.corpus.entities = 40;
    cfg.classifier.training.epochs = 2;
    cfg.masker.training.epochs = 2;
    cfg.generator.training.steps = 20;
    cfg.generator.training.log_every = 10;
    cfg.sweep.lambdas = vec![0.0, 100.0];
    cfg.sweep.epochs = 1;
    cfg.augmentation.classifier_epochs = 1;
    cfg
}

/// Every file under `dir`, keyed by its path relative to `dir`.
pub fn snapshot(dir: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Paths whose contents differ between two snapshots, or that only one has.
pub fn differing(
    a: &std::collections::BTreeMap<String, Vec<u8>>,
    b: &std::collections::BTreeMap<String, Vec<u8>>,
) -> Vec<String> {
    let keys: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    keys.into_iter()
        .filter(|k| a.get(*k) != b.get(*k))
        .cloned()
        .collect()
}
