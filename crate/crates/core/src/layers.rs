//! Embeddings, LSTM encoders, bilinear attention and dense heads.
//!
//! Layers only hold parameter ids; values live in the owning model's
//! [`ParamStore`] and every forward call takes the store explicitly.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use factedit_tensor::{init, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{contract, io_err, Error, Result};
use crate::vocab::Vocab;

#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub weight: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init::normal(vocab, dim, 0.1, rng));
        Embedding { weight, vocab, dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        if let Some(&id) = ids.iter().find(|&&id| id >= self.vocab) {
            return Err(Error::Vocabulary {
                id,
                size: self.vocab,
            });
        }
        let table = tape.param(store, self.weight);
        Ok(tape.gather_rows(table, ids)?)
    }

    /// Overwrites rows for tokens found in a pretrained text file (`word v1 v2
    /// ...` per line). Returns how many rows were replaced. A missing file
    /// leaves the random initialization in place and returns zero.
    pub fn load_pretrained(
        &self,
        store: &mut ParamStore,
        vocab: &Vocab,
        path: &Path,
    ) -> Result<usize> {
        if !path.exists() {
            return Ok(0);
        }
        let vectors = read_vectors(path, self.dim)?;
        let table = store.get_mut(self.weight)?;
        let mut hits = 0;
        for (id, token) in vocab.tokens().iter().enumerate() {
            if let Some(v) = vectors.get(token) {
                let row = &mut table.data_mut()[id * self.dim..(id + 1) * self.dim];
                row.copy_from_slice(v);
                hits += 1;
            }
        }
        Ok(hits)
    }
}

fn read_vectors(path: &Path, dim: usize) -> Result<HashMap<String, Vec<f64>>> {
    let file = File::open(path).map_err(io_err(format!("opening {}", path.display())))?;
    let mut out = HashMap::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(format!("reading {}", path.display())))?;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let values: std::result::Result<Vec<f64>, _> = parts.map(str::parse).collect();
        let bad = |message: String| Error::Record {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let values = values.map_err(|e| bad(format!("bad number: {e}")))?;
        if values.len() != dim {
            return Err(bad(format!(
                "expected {dim} values, found {}",
                values.len()
            )));
        }
        out.insert(word.to_string(), values);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        Linear {
            weight: store.add(
                format!("{name}.weight"),
                init::glorot_uniform(input, output, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, output)),
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), Tensor::zeros(input, output)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, output)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        Ok(tape.add_row(y, b)?)
    }
}

/// Single-layer LSTM with gate order input, forget, candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct Lstm {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut bias = Tensor::zeros(1, 4 * hidden);
        for k in hidden..2 * hidden {
            bias.data_mut()[k] = 1.0;
        }
        Lstm {
            w_x: store.add(
                format!("{name}.w_x"),
                init::glorot_uniform(input, 4 * hidden, rng),
            ),
            w_h: store.add(
                format!("{name}.w_h"),
                init::glorot_uniform(hidden, 4 * hidden, rng),
            ),
            bias: store.add(format!("{name}.bias"), bias),
            input,
            hidden,
        }
    }

    pub fn zero_state(&self, tape: &mut Tape) -> (Var, Var) {
        (
            tape.constant(Tensor::zeros(1, self.hidden)),
            tape.constant(Tensor::zeros(1, self.hidden)),
        )
    }

    /// One step given the precomputed input projection `x W_x + b`.
    fn cell(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        xw: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let w_h = tape.param(store, self.w_h);
        let hw = tape.matmul(h, w_h)?;
        let gates = tape.add(xw, hw)?;
        let n = self.hidden;
        let i = tape.slice_cols(gates, 0, n)?;
        let f = tape.slice_cols(gates, n, 2 * n)?;
        let g = tape.slice_cols(gates, 2 * n, 3 * n)?;
        let o = tape.slice_cols(gates, 3 * n, 4 * n)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        Ok((h, c))
    }

    /// One recurrence step on a single input row.
    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        state: (Var, Var),
    ) -> Result<(Var, Var)> {
        let (_, cols) = tape.shape(x);
        if cols != self.input {
            return Err(factedit_tensor::TensorError::Shape {
                op: "lstm_step",
                left: tape.shape(x),
                right: (1, self.input),
            }
            .into());
        }
        let w_x = tape.param(store, self.w_x);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w_x)?;
        let xw = tape.add_row(xw, b)?;
        self.cell(tape, store, xw, state.0, state.1)
    }

    /// Runs over all rows of `xs`, back to front when `reverse` is set.
    /// Returns hidden states indexed by input position, and the final
    /// `(h, c)`.
    pub fn run(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        xs: Var,
        reverse: bool,
    ) -> Result<(Vec<Var>, (Var, Var))> {
        let (len, cols) = tape.shape(xs);
        if cols != self.input {
            return Err(factedit_tensor::TensorError::Shape {
                op: "lstm",
                left: (len, cols),
                right: (len, self.input),
            }
            .into());
        }
        let w_x = tape.param(store, self.w_x);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(xs, w_x)?;
        let xw = tape.add_row(xw, b)?;
        let (mut h, mut c) = self.zero_state(tape);
        let mut hs = vec![h; len];
        let order: Vec<usize> = if reverse {
            (0..len).rev().collect()
        } else {
            (0..len).collect()
        };
        for t in order {
            let row = tape.row(xw, t)?;
            (h, c) = self.cell(tape, store, row, h, c)?;
            hs[t] = h;
        }
        Ok((hs, (h, c)))
    }
}

/// Encoded sequence: per-position states `[l x 2H]` and the concatenated
/// final states of both directions `[1 x 2H]`.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub states: Var,
    pub last: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BiLstm {
    pub forward: Lstm,
    pub backward: Lstm,
}

impl BiLstm {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        BiLstm {
            forward: Lstm::new(store, &format!("{name}.fwd"), input, hidden, rng),
            backward: Lstm::new(store, &format!("{name}.bwd"), input, hidden, rng),
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.forward.hidden
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, xs: Var) -> Result<Encoded> {
        if tape.shape(xs).0 == 0 {
            return Err(contract("cannot encode an empty sequence"));
        }
        let (fwd, (fh, _)) = self.forward.run(tape, store, xs, false)?;
        let (bwd, (bh, _)) = self.backward.run(tape, store, xs, true)?;
        let f = tape.concat_rows(&fwd)?;
        let b = tape.concat_rows(&bwd)?;
        let states = tape.concat_cols(&[f, b])?;
        let last = tape.concat_cols(&[fh, bh])?;
        Ok(Encoded { states, last })
    }
}

/// `softmax_j(q_i W k_j^T + b)` attention.
#[derive(Debug, Clone, Copy)]
pub struct BilinearAttention {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl BilinearAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        BilinearAttention {
            weight: store.add(
                format!("{name}.weight"),
                init::glorot_uniform(dim, dim, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, 1)),
        }
    }

    /// Raw logits `[l x n]`.
    pub fn scores(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: Var,
        keys: Var,
    ) -> Result<Var> {
        let (l, _) = tape.shape(queries);
        let (n, _) = tape.shape(keys);
        if n == 0 {
            return Err(contract("attention over an empty key sequence"));
        }
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let qw = tape.matmul(queries, w)?;
        let kt = tape.transpose(keys);
        let logits = tape.matmul(qw, kt)?;
        let ones = tape.constant(Tensor::filled(l, n, 1.0));
        let shift = tape.scale_by(ones, b)?;
        Ok(tape.add(logits, shift)?)
    }

    /// Returns `(weights [l x n], context [l x d])`.
    pub fn attend(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: Var,
        keys: Var,
    ) -> Result<(Var, Var)> {
        let logits = self.scores(tape, store, queries, keys)?;
        let weights = tape.softmax(logits)?;
        let context = tape.matmul(weights, keys)?;
        Ok((weights, context))
    }
}
