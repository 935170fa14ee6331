//! Two-encoder pointer-generator that fuses a residual sentence with a claim.
//!
//! Source 1 is the residual sentence and source 2 the claim. Both are read
//! by one shared BiLSTM. Each decoder step attends over both sources, blends
//! the two contexts with a sigmoid gate `α`, and mixes three distributions:
//! the vocabulary softmax, copying from source 1, and copying from source 2.
//! Tokens outside the vocabulary can still be copied through per-example
//! extended ids `V, V+1, ...`.

use factedit_tensor::{init, Optimizer, ParamId, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Relation;
use crate::error::{contract, Error, Result};
use crate::layers::{BiLstm, Embedding, Linear, Lstm};
use crate::masker::MaskerModel;
use crate::stance::StanceModel;
use crate::vocab::{Vocab, BOS, EOS, MASK, MASK_TOKEN, PAD, UNK};

/// Floor on target probabilities before the log in the training loss.
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GeneratorMode {
    /// Separate residual and claim sources with both gates.
    #[default]
    TwoEncoder,
    /// `residual ++ </s> ++ claim` as one source.
    Concat,
    /// Two sources, but `p_gen` fixed to 1.
    NoCopy,
    /// The claim as the only source.
    ClaimOnly,
}

impl GeneratorMode {
    fn two_sources(self) -> bool {
        matches!(self, GeneratorMode::TwoEncoder | GeneratorMode::NoCopy)
    }
}

impl std::str::FromStr for GeneratorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "TWO_ENCODER" => Ok(GeneratorMode::TwoEncoder),
            "CONCAT" => Ok(GeneratorMode::Concat),
            "NO_COPY" => Ok(GeneratorMode::NoCopy),
            "CLAIM_ONLY" => Ok(GeneratorMode::ClaimOnly),
            _ => Err(Error::Config(format!("unknown generator mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorDims {
    pub vocab: usize,
    pub embed: usize,
    /// Encoder hidden size per direction; the decoder uses twice this.
    pub hidden: usize,
    /// Width of the additive attention layer.
    pub attention: usize,
    pub mode: GeneratorMode,
}

#[derive(Debug, Clone, Copy)]
pub struct GeneratorNet {
    pub dims: GeneratorDims,
    pub embedding: Embedding,
    /// Shared by both sources.
    pub encoder: BiLstm,
    pub decoder: Lstm,
    pub att_source: ParamId,
    pub att_state: ParamId,
    pub att_bias: ParamId,
    pub att_u: ParamId,
    /// `u_enc` over `[r_1, r_2]`.
    pub enc_gate: ParamId,
    /// `[v_x; v_h; v_r]` over `[x, h, r]`.
    pub gen_gate: ParamId,
    /// `[u_x; u_h; u_r]` over `[x, h, r]`.
    pub src_gate: ParamId,
    /// `V` over `[h, r]`.
    pub output: Linear,
}

#[derive(Debug, Clone)]
pub struct GeneratorModel {
    pub store: ParamStore,
    pub net: GeneratorNet,
}

impl GeneratorModel {
    pub fn new(dims: GeneratorDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = 2 * dims.hidden;
        let x = d + dims.embed;
        let embedding = Embedding::new(&mut store, "gen.emb", dims.vocab, dims.embed, &mut rng);
        let encoder = BiLstm::new(&mut store, "gen.enc", dims.embed, dims.hidden, &mut rng);
        let decoder = Lstm::new(&mut store, "gen.dec", x, d, &mut rng);
        let att_source = store.add(
            "gen.att.source",
            init::glorot_uniform(d, dims.attention, &mut rng),
        );
        let att_state = store.add(
            "gen.att.state",
            init::glorot_uniform(d, dims.attention, &mut rng),
        );
        let att_bias = store.add("gen.att.bias", Tensor::zeros(1, dims.attention));
        let att_u = store.add(
            "gen.att.u",
            init::glorot_uniform(dims.attention, 1, &mut rng),
        );
        let enc_gate = store.add("gen.gate.enc", init::glorot_uniform(2 * d, 1, &mut rng));
        let gen_gate = store.add("gen.gate.gen", init::glorot_uniform(x + 2 * d, 1, &mut rng));
        let src_gate = store.add("gen.gate.src", init::glorot_uniform(x + 2 * d, 1, &mut rng));
        let output = Linear::new(&mut store, "gen.out", 2 * d, dims.vocab, &mut rng);
        GeneratorModel {
            store,
            net: GeneratorNet {
                dims,
                embedding,
                encoder,
                decoder,
                att_source,
                att_state,
                att_bias,
                att_u,
                enc_gate,
                gen_gate,
                src_gate,
                output,
            },
        }
    }

    pub fn mode(&self) -> GeneratorMode {
        self.net.dims.mode
    }
}

/// The sources of one example mapped to extended ids. Vocabulary tokens keep
/// their id; other tokens get `V + k` in order of first appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedSources {
    pub source1: Vec<usize>,
    /// Empty in single-source modes.
    pub source2: Vec<usize>,
    pub oov: Vec<String>,
    pub vocab_size: usize,
}

impl ExtendedSources {
    /// Routes `(residual, claim)` into sources according to `mode`.
    pub fn new(
        vocab: &Vocab,
        mode: GeneratorMode,
        residual: &[String],
        claim: &[String],
    ) -> Result<Self> {
        if claim.is_empty() || (residual.is_empty() && mode != GeneratorMode::ClaimOnly) {
            return Err(contract("generator sources must be nonempty"));
        }
        let mut ext = ExtendedSources {
            source1: Vec::new(),
            source2: Vec::new(),
            oov: Vec::new(),
            vocab_size: vocab.len(),
        };
        match mode {
            GeneratorMode::TwoEncoder | GeneratorMode::NoCopy => {
                ext.source1 = ext.intern_all(vocab, residual);
                ext.source2 = ext.intern_all(vocab, claim);
            }
            GeneratorMode::Concat => {
                let mut joined = residual.to_vec();
                joined.push(vocab.token(EOS).to_string());
                joined.extend_from_slice(claim);
                ext.source1 = ext.intern_all(vocab, &joined);
            }
            GeneratorMode::ClaimOnly => ext.source1 = ext.intern_all(vocab, claim),
        }
        Ok(ext)
    }

    fn intern_all(&mut self, vocab: &Vocab, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.intern(vocab, t)).collect()
    }

    fn intern(&mut self, vocab: &Vocab, token: &str) -> usize {
        if let Some(id) = vocab.get(token) {
            return id;
        }
        let k = match self.oov.iter().position(|o| o == token) {
            Some(k) => k,
            None => {
                self.oov.push(token.to_string());
                self.oov.len() - 1
            }
        };
        self.vocab_size + k
    }

    pub fn extended_size(&self) -> usize {
        self.vocab_size + self.oov.len()
    }

    /// Extended id of a target token, or `None` if it can be neither
    /// generated nor copied.
    pub fn target_id(&self, vocab: &Vocab, token: &str) -> Option<usize> {
        vocab.get(token).or_else(|| {
            self.oov
                .iter()
                .position(|o| o == token)
                .map(|k| self.vocab_size + k)
        })
    }

    pub fn surface<'a>(&'a self, vocab: &'a Vocab, id: usize) -> &'a str {
        if id < self.vocab_size {
            vocab.token(id)
        } else {
            &self.oov[id - self.vocab_size]
        }
    }

    fn input_id(&self, id: usize) -> usize {
        if id < self.vocab_size {
            id
        } else {
            UNK
        }
    }
}

/// Gate overrides for one decode.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Controls {
    /// Claim-side floor: caps `α` and `p_enc1` at `1 − tau`.
    pub tau: f64,
    pub force_p_gen: Option<f64>,
    pub force_p_enc1: Option<f64>,
}

/// Probabilities over the extended vocabulary, collapsed by surface token.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedDistribution {
    pub probs: Vec<f64>,
}

impl ExtendedDistribution {
    /// `p_gen P_vocab + (1−p_gen) p_enc1 Σ a_1 + (1−p_gen)(1−p_enc1) Σ a_2`,
    /// with each copy sum over positions holding the same extended id.
    #[allow(clippy::too_many_arguments)]
    pub fn mix(
        size: usize,
        p_vocab: &[f64],
        p_gen: f64,
        p_enc1: f64,
        a1: &[f64],
        source1: &[usize],
        a2: &[f64],
        source2: &[usize],
    ) -> Result<Self> {
        if a1.len() != source1.len() || a2.len() != source2.len() || p_vocab.len() > size {
            return Err(contract(
                "attention weights do not line up with their sources",
            ));
        }
        let mut probs = vec![0.0; size];
        for (p, &v) in probs.iter_mut().zip(p_vocab) {
            *p = p_gen * v;
        }
        let w1 = (1.0 - p_gen) * p_enc1;
        let w2 = (1.0 - p_gen) * (1.0 - p_enc1);
        for (&a, &id) in a1.iter().zip(source1) {
            probs[id] += w1 * a;
        }
        for (&a, &id) in a2.iter().zip(source2) {
            probs[id] += w2 * a;
        }
        Ok(ExtendedDistribution { probs })
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Highest-probability id outside `excluded`; ties go to the lower id.
    pub fn argmax_excluding(&self, excluded: &[usize]) -> usize {
        let mut best = None;
        for (id, &p) in self.probs.iter().enumerate() {
            if excluded.contains(&id) {
                continue;
            }
            if best.is_none_or(|(_, b)| p > b) {
                best = Some((id, p));
            }
        }
        best.map_or(EOS, |(id, _)| id)
    }
}

/// Recurrent state between decode steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub h: Tensor,
    pub c: Tensor,
    pub prev: usize,
    pub step: usize,
    pub attn1: Vec<f64>,
    pub attn2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub alpha: f64,
    pub p_gen: f64,
    pub p_enc1: f64,
    pub attn1: Vec<f64>,
    pub attn2: Vec<f64>,
}

struct Encodings {
    states1: Var,
    keys1: Var,
    source2: Option<(Var, Var)>,
    h0: Var,
}

struct StepVars {
    h: Var,
    c: Var,
    a1: Var,
    a2: Option<Var>,
    alpha: Var,
    p_gen: Var,
    p_enc1: Var,
    p_vocab: Var,
}

impl GeneratorNet {
    fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        src: &ExtendedSources,
    ) -> Result<Encodings> {
        let w = tape.param(store, self.att_source);
        let ids1: Vec<usize> = src.source1.iter().map(|&i| src.input_id(i)).collect();
        let x1 = self.embedding.forward(tape, store, &ids1)?;
        let e1 = self.encoder.forward(tape, store, x1)?;
        let keys1 = tape.matmul(e1.states, w)?;
        if !self.dims.mode.two_sources() {
            return Ok(Encodings {
                states1: e1.states,
                keys1,
                source2: None,
                h0: e1.last,
            });
        }
        let ids2: Vec<usize> = src.source2.iter().map(|&i| src.input_id(i)).collect();
        let x2 = self.embedding.forward(tape, store, &ids2)?;
        let e2 = self.encoder.forward(tape, store, x2)?;
        let keys2 = tape.matmul(e2.states, w)?;
        let sum = tape.add(e1.last, e2.last)?;
        let h0 = tape.scale(sum, 0.5);
        Ok(Encodings {
            states1: e1.states,
            keys1,
            source2: Some((e2.states, keys2)),
            h0,
        })
    }

    /// Attention weights `[1 x l]` and context `[1 x 2H]` for one source.
    fn attend(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        states: Var,
        keys: Var,
        query: Var,
    ) -> Result<(Var, Var)> {
        let ws = tape.param(store, self.att_state);
        let b = tape.param(store, self.att_bias);
        let u = tape.param(store, self.att_u);
        let q = tape.matmul(query, ws)?;
        let q = tape.add(q, b)?;
        let pre = tape.add_row(keys, q)?;
        let act = tape.tanh(pre);
        let z = tape.matmul(act, u)?;
        let z = tape.transpose(z);
        let a = tape.softmax(z)?;
        let ctx = tape.matmul(a, states)?;
        Ok((a, ctx))
    }

    fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        enc: &Encodings,
        (h, c): (Var, Var),
        prev: usize,
        controls: &Controls,
    ) -> Result<StepVars> {
        let (a1, r1) = self.attend(tape, store, enc.states1, enc.keys1, h)?;
        let (a2, r, alpha) = match enc.source2 {
            Some((states2, keys2)) => {
                let (a2, r2) = self.attend(tape, store, states2, keys2, h)?;
                let both = tape.concat_cols(&[r1, r2])?;
                let ue = tape.param(store, self.enc_gate);
                let logit = tape.matmul(both, ue)?;
                let alpha = tape.sigmoid(logit);
                let alpha = tape.clamp_max(alpha, 1.0 - controls.tau);
                let left = tape.scale_by(r1, alpha)?;
                let rest = tape.one_minus(alpha);
                let right = tape.scale_by(r2, rest)?;
                (Some(a2), tape.add(left, right)?, alpha)
            }
            None => (None, r1, tape.constant(Tensor::scalar(1.0))),
        };
        let prev_emb = self.embedding.forward(tape, store, &[prev])?;
        let x = tape.concat_cols(&[r, prev_emb])?;
        let (h, c) = self.decoder.step(tape, store, x, (h, c))?;
        let xhr = tape.concat_cols(&[x, h, r])?;

        let p_gen = match (self.dims.mode, controls.force_p_gen) {
            (GeneratorMode::NoCopy, _) => tape.constant(Tensor::scalar(1.0)),
            (_, Some(v)) => tape.constant(Tensor::scalar(v)),
            (_, None) => {
                let v = tape.param(store, self.gen_gate);
                let logit = tape.matmul(xhr, v)?;
                tape.sigmoid(logit)
            }
        };
        // With a single source all copy mass goes to it, forced or not.
        let p_enc1 = match (a2, controls.force_p_enc1) {
            (None, _) => tape.constant(Tensor::scalar(1.0)),
            (Some(_), Some(v)) => tape.constant(Tensor::scalar(v)),
            (Some(_), None) => {
                let u = tape.param(store, self.src_gate);
                let logit = tape.matmul(xhr, u)?;
                let p = tape.sigmoid(logit);
                tape.clamp_max(p, 1.0 - controls.tau)
            }
        };
        let hr = tape.concat_cols(&[h, r])?;
        let logits = self.output.forward(tape, store, hr)?;
        let p_vocab = tape.softmax(logits)?;
        Ok(StepVars {
            h,
            c,
            a1,
            a2,
            alpha,
            p_gen,
            p_enc1,
            p_vocab,
        })
    }

    /// `P(target)` under the mixture, as a differentiable scalar.
    fn target_prob(
        &self,
        tape: &mut Tape,
        sv: &StepVars,
        src: &ExtendedSources,
        target: usize,
    ) -> Result<Var> {
        let copy1 = copy_mass(tape, sv.a1, &src.source1, target)?;
        let copy2 = match sv.a2 {
            Some(a2) => copy_mass(tape, a2, &src.source2, target)?,
            None => None,
        };
        let copy = match (copy1, copy2) {
            (None, None) => None,
            (Some(c1), None) => Some(tape.mul(sv.p_enc1, c1)?),
            (None, Some(c2)) => {
                let w = tape.one_minus(sv.p_enc1);
                Some(tape.mul(w, c2)?)
            }
            (Some(c1), Some(c2)) => {
                let t1 = tape.mul(sv.p_enc1, c1)?;
                let w = tape.one_minus(sv.p_enc1);
                let t2 = tape.mul(w, c2)?;
                Some(tape.add(t1, t2)?)
            }
        };
        let generated = if target < self.dims.vocab {
            let pv = tape.pick(sv.p_vocab, 0, target)?;
            Some(tape.mul(sv.p_gen, pv)?)
        } else {
            None
        };
        let copied = match copy {
            Some(c) => {
                let w = tape.one_minus(sv.p_gen);
                Some(tape.mul(w, c)?)
            }
            None => None,
        };
        match (generated, copied) {
            (Some(g), Some(c)) => Ok(tape.add(g, c)?),
            (Some(g), None) => Ok(g),
            (None, Some(c)) => Ok(c),
            (None, None) => Err(contract(format!("target id {target} is unreachable"))),
        }
    }

    /// Mean teacher-forced NLL of `example.target` (which ends in `</s>`).
    pub fn nll(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        example: &GeneratorExample,
    ) -> Result<Var> {
        if example.target.is_empty() {
            return Err(contract("empty generator target"));
        }
        let enc = self.encode(tape, store, &example.sources)?;
        let (_, c0) = self.decoder.zero_state(tape);
        let mut state = (enc.h0, c0);
        let mut prev = BOS;
        let mut terms = Vec::with_capacity(example.target.len());
        for &t in &example.target {
            let sv = self.step(tape, store, &enc, state, prev, &Controls::default())?;
            let p = self.target_prob(tape, &sv, &example.sources, t)?;
            let p = tape.clamp_min(p, PROB_FLOOR);
            terms.push(tape.log(p));
            state = (sv.h, sv.c);
            prev = example.sources.input_id(t);
        }
        let all = tape.concat_cols(&terms)?;
        let mean = tape.mean(all)?;
        Ok(tape.neg(mean))
    }
}

/// `Σ_j a_j [source_j = target]`, or `None` when no position matches.
fn copy_mass(
    tape: &mut Tape,
    attention: Var,
    source: &[usize],
    target: usize,
) -> Result<Option<Var>> {
    if !source.contains(&target) {
        return Ok(None);
    }
    let matches: Vec<f64> = source
        .iter()
        .map(|&s| if s == target { 1.0 } else { 0.0 })
        .collect();
    let col = tape.constant(Tensor::new(source.len(), 1, matches)?);
    let m = tape.matmul(attention, col)?;
    Ok(Some(m))
}

/// Step-by-step decoding over fixed sources. Holds one tape for the whole
/// decode; the state passed between steps is plain values.
pub struct Decoder<'m> {
    model: &'m GeneratorModel,
    sources: ExtendedSources,
    controls: Controls,
    tape: Tape,
    enc: Encodings,
}

impl<'m> Decoder<'m> {
    pub fn new(
        model: &'m GeneratorModel,
        sources: ExtendedSources,
        controls: Controls,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&controls.tau) {
            return Err(contract(format!(
                "gate floor {} outside [0, 1)",
                controls.tau
            )));
        }
        let mut tape = Tape::new();
        let enc = model.net.encode(&mut tape, &model.store, &sources)?;
        Ok(Decoder {
            model,
            sources,
            controls,
            tape,
            enc,
        })
    }

    pub fn sources(&self) -> &ExtendedSources {
        &self.sources
    }

    pub fn initial_state(&self) -> DecoderState {
        let h = self.tape.value(self.enc.h0).clone();
        let c = Tensor::zeros(1, h.cols());
        DecoderState {
            h,
            c,
            prev: BOS,
            step: 0,
            attn1: Vec::new(),
            attn2: Vec::new(),
        }
    }

    pub fn step(
        &mut self,
        state: &DecoderState,
    ) -> Result<(ExtendedDistribution, DecoderState, StepDiagnostics)> {
        let tape = &mut self.tape;
        let h = tape.constant(state.h.clone());
        let c = tape.constant(state.c.clone());
        let prev = self.sources.input_id(state.prev);
        let sv = self.model.net.step(
            tape,
            &self.model.store,
            &self.enc,
            (h, c),
            prev,
            &self.controls,
        )?;
        let attn1 = tape.value(sv.a1).data().to_vec();
        let attn2 = sv
            .a2
            .map(|a| tape.value(a).data().to_vec())
            .unwrap_or_default();
        let diag = StepDiagnostics {
            alpha: tape.item(sv.alpha),
            p_gen: tape.item(sv.p_gen),
            p_enc1: tape.item(sv.p_enc1),
            attn1: attn1.clone(),
            attn2: attn2.clone(),
        };
        let dist = ExtendedDistribution::mix(
            self.sources.extended_size(),
            tape.value(sv.p_vocab).data(),
            diag.p_gen,
            diag.p_enc1,
            &attn1,
            &self.sources.source1,
            &attn2,
            &self.sources.source2,
        )?;
        let next = DecoderState {
            h: tape.value(sv.h).clone(),
            c: tape.value(sv.c).clone(),
            prev: state.prev,
            step: state.step + 1,
            attn1,
            attn2,
        };
        Ok((dist, next, diag))
    }
}

/// Mean gate values over the steps of one decode.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GateSummary {
    pub alpha: f64,
    pub p_gen: f64,
    pub p_enc1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub ids: Vec<usize>,
    pub tokens: Vec<String>,
    pub gates: GateSummary,
}

/// Ids greedy decoding never emits.
pub const NEVER_EMITTED: [usize; 3] = [PAD, BOS, MASK];

/// Argmax decoding from `<s>` until `</s>` or `max_len` tokens.
pub fn greedy_decode(
    model: &GeneratorModel,
    vocab: &Vocab,
    sources: ExtendedSources,
    controls: Controls,
    max_len: usize,
) -> Result<Decoded> {
    let mut dec = Decoder::new(model, sources, controls)?;
    let mut state = dec.initial_state();
    let mut ids = Vec::new();
    let mut gates = GateSummary::default();
    let mut steps = 0;
    while ids.len() < max_len {
        let (dist, mut next, diag) = dec.step(&state)?;
        steps += 1;
        gates.alpha += diag.alpha;
        gates.p_gen += diag.p_gen;
        gates.p_enc1 += diag.p_enc1;
        let y = dist.argmax_excluding(&NEVER_EMITTED);
        if y == EOS {
            break;
        }
        ids.push(y);
        next.prev = y;
        state = next;
    }
    if steps > 0 {
        let n = steps as f64;
        gates = GateSummary {
            alpha: gates.alpha / n,
            p_gen: gates.p_gen / n,
            p_enc1: gates.p_enc1 / n,
        };
    }
    let tokens = ids
        .iter()
        .map(|&i| dec.sources().surface(vocab, i).to_string())
        .collect();
    Ok(Decoded { ids, tokens, gates })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub max_len: usize,
    /// Claim-side gate floors tried in order.
    pub schedule: Vec<f64>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            max_len: 40,
            schedule: (0..7).map(|k| k as f64 * 0.15).collect(),
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return Err(Error::Config("max decode length must be positive".into()));
        }
        if self.schedule.is_empty() {
            return Err(Error::Config("escalation schedule is empty".into()));
        }
        if self.schedule.iter().any(|t| !(0.0..1.0).contains(t)) {
            return Err(Error::Config("escalation floors must lie in [0, 1)".into()));
        }
        if self.schedule.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "escalation schedule must be strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rewrite {
    pub tokens: Vec<String>,
    pub relation: Relation,
    pub tau: f64,
    /// Decodes actually run (1 means no escalation).
    pub attempts: usize,
    pub gates: GateSummary,
}

/// Relation of a decoded sentence; an empty output counts as NEUTRAL.
pub fn judge(
    stance: &StanceModel,
    vocab: &Vocab,
    sentence: &[String],
    claim: &[String],
) -> Result<Relation> {
    if sentence.is_empty() {
        return Ok(Relation::Neutral);
    }
    stance.predict(&vocab.encode(sentence), &vocab.encode(claim))
}

/// Decodes at each floor of the schedule in turn, from scratch, and stops at
/// the first output the classifier labels AGREE. Otherwise returns the
/// output at the last floor.
pub fn rewrite_with_escalation(
    model: &GeneratorModel,
    stance: &StanceModel,
    vocab: &Vocab,
    residual: &[String],
    claim: &[String],
    cfg: &InferenceConfig,
) -> Result<Rewrite> {
    cfg.validate()?;
    let sources = ExtendedSources::new(vocab, model.mode(), residual, claim)?;
    let mut last = None;
    for (k, &tau) in cfg.schedule.iter().enumerate() {
        let controls = Controls {
            tau,
            ..Controls::default()
        };
        let out = greedy_decode(model, vocab, sources.clone(), controls, cfg.max_len)?;
        let relation = judge(stance, vocab, &out.tokens, claim)?;
        let rw = Rewrite {
            tokens: out.tokens,
            relation,
            tau,
            attempts: k + 1,
            gates: out.gates,
        };
        if relation == Relation::Agree {
            return Ok(rw);
        }
        last = Some(rw);
    }
    Ok(last.expect("nonempty schedule"))
}

/// One reconstruction example: sources plus the extended-id target ending
/// in `</s>`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorExample {
    pub sources: ExtendedSources,
    pub target: Vec<usize>,
}

impl GeneratorExample {
    /// `None` when some target token is neither in the vocabulary nor in a
    /// source.
    pub fn new(
        vocab: &Vocab,
        mode: GeneratorMode,
        residual: &[String],
        claim: &[String],
        target: &[String],
    ) -> Result<Option<Self>> {
        let sources = ExtendedSources::new(vocab, mode, residual, claim)?;
        let mut ids = Vec::with_capacity(target.len() + 1);
        for t in target {
            match sources.target_id(vocab, t) {
                Some(id) => ids.push(id),
                None => return Ok(None),
            }
        }
        ids.push(EOS);
        Ok(Some(GeneratorExample {
            sources,
            target: ids,
        }))
    }
}

/// Reconstruction data from agreeing `(sentence, claim)` pairs: the hard
/// masked sentence and the claim as sources, the sentence as target.
/// Returns the examples and the number skipped as unreachable.
pub fn reconstruction_examples(
    vocab: &Vocab,
    mode: GeneratorMode,
    masker: &MaskerModel,
    threshold: f64,
    pairs: &[(Vec<String>, Vec<String>)],
) -> Result<(Vec<GeneratorExample>, usize)> {
    if !masker.store.is_frozen() {
        return Err(contract("the masker must be trained and frozen first"));
    }
    let mut out = Vec::new();
    let mut skipped = 0;
    for (sentence, claim) in pairs {
        let mask = masker.mask_probs(&vocab.encode(sentence), &vocab.encode(claim))?;
        let residual =
            crate::masker::apply_hard_mask(sentence, &mask, threshold, MASK_TOKEN.to_string());
        match GeneratorExample::new(vocab, mode, &residual, claim, sentence)? {
            Some(ex) => out.push(ex),
            None => skipped += 1,
        }
    }
    Ok((out, skipped))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Steps between report rows.
    pub log_every: usize,
}

impl Default for GeneratorTraining {
    fn default() -> Self {
        GeneratorTraining {
            steps: 3000,
            batch_size: 64,
            learning_rate: 3e-3,
            clip_norm: 5.0,
            seed: 17,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorLogRow {
    pub step: usize,
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorReport {
    pub examples: usize,
    pub skipped: usize,
    pub first_batch_loss: f64,
    pub rows: Vec<GeneratorLogRow>,
}

/// Teacher-forced training for a fixed number of optimizer steps; rounds
/// the parameters to `f32` and freezes them at the end.
pub fn train_generator(
    model: &mut GeneratorModel,
    examples: &[GeneratorExample],
    skipped: usize,
    cfg: &GeneratorTraining,
) -> Result<GeneratorReport> {
    if model.store.is_frozen() {
        return Err(contract("generator is already trained"));
    }
    if examples.is_empty() {
        return Err(Error::DegenerateCorpus(
            "no reachable generator training examples".into(),
        ));
    }
    if cfg.batch_size == 0 || cfg.log_every == 0 {
        return Err(Error::Config(
            "batch size and log interval must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::adam(cfg.learning_rate);
    if cfg.clip_norm > 0.0 {
        opt = opt.with_clip(cfg.clip_norm);
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut rows = Vec::new();
    let mut first_batch_loss = None;
    let (mut window, mut window_n) = (0.0, 0usize);
    for step in 1..=cfg.steps {
        model.store.zero_grad();
        let n = cfg.batch_size.min(examples.len());
        let mut batch_loss = 0.0;
        for _ in 0..n {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ex = &examples[order[cursor]];
            cursor += 1;
            let mut tape = Tape::new();
            let loss = model.net.nll(&mut tape, &model.store, ex)?;
            let loss = tape.scale(loss, 1.0 / n as f64);
            batch_loss += tape.item(loss);
            let grads = tape.backward(loss)?;
            model.store.accumulate(&grads);
        }
        opt.step(&mut model.store)?;
        first_batch_loss.get_or_insert(batch_loss);
        window += batch_loss;
        window_n += 1;
        if step % cfg.log_every == 0 || step == cfg.steps {
            rows.push(GeneratorLogRow {
                step,
                train_loss: window / window_n as f64,
            });
            (window, window_n) = (0.0, 0);
        }
    }
    model.store.round_to_f32();
    model.store.freeze();
    Ok(GeneratorReport {
        examples: examples.len(),
        skipped,
        first_batch_loss: first_batch_loss.unwrap_or(f64::NAN),
        rows,
    })
}
