//! Central finite-difference gradient checks.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the backward rules it is used to verify.

use crate::{ParamStore, Result, Tape, Tensor, Var};

/// Norm-wise relative error `|a - n| / max(|a|, |n|)`, or the absolute
/// difference when both gradients are (numerically) zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Checks gradients with respect to free input tensors. Returns the relative
/// error per input.
pub fn check_inputs<F, E>(inputs: &[Tensor], h: f64, f: F) -> Result<Vec<f64>, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<crate::TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |xs: &[Tensor]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.item(loss))
    };

    let mut errors = Vec::with_capacity(inputs.len());
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = vec![0.0; inputs[k].len()];
        let mut xs = inputs.to_vec();
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[k].data()[i];
            xs[k].data_mut()[i] = orig + h;
            let plus = eval(&xs)?;
            xs[k].data_mut()[i] = orig - h;
            let minus = eval(&xs)?;
            xs[k].data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        errors.push(relative_error(&analytic, &numeric));
    }
    Ok(errors)
}

/// Checks gradients with respect to every parameter of a store. Returns
/// `(parameter name, relative error)` pairs.
pub fn check_params<F, E>(store: &mut ParamStore, h: f64, f: F) -> Result<Vec<(String, f64)>, E>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, E>,
    E: From<crate::TensorError>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = store
        .ids()
        .map(|id| {
            grads
                .param(store, id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; store.get(id).len()])
        })
        .collect();

    let eval = |store: &ParamStore| -> Result<f64, E> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        Ok(tape.item(loss))
    };

    let ids: Vec<_> = store.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for (k, id) in ids.into_iter().enumerate() {
        let n = store.get(id).len();
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).data()[i];
            store.get_mut(id)?.data_mut()[i] = orig + h;
            let plus = eval(store)?;
            store.get_mut(id)?.data_mut()[i] = orig - h;
            let minus = eval(store)?;
            store.get_mut(id)?.data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        out.push((
            store.param(id).name.clone(),
            relative_error(&analytic[k], &numeric),
        ));
    }
    Ok(out)
}

type OpCase = (
    &'static str,
    Vec<Tensor>,
    Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>,
);

/// Reduces an output to a scalar through a fixed random projection, so every
/// output entry contributes with a distinct weight.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    use rand::SeedableRng;
    let (r, c) = tape.shape(v);
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let w = tape.constant(crate::init::uniform(r, c, 1.0, &mut rng));
    let prod = tape.mul(v, w)?;
    Ok(tape.sum(prod))
}

macro_rules! unary_case {
    ($name:expr, $input:expr, $seed:expr, |$t:ident, $x:ident| $body:expr) => {
        (
            $name,
            vec![$input.clone()],
            Box::new(move |$t: &mut Tape, xs: &[Var]| {
                let $x = xs[0];
                let y = $body;
                project($t, y, $seed)
            }) as Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>,
        )
    };
}

macro_rules! binary_case {
    ($name:expr, $a:expr, $b:expr, $seed:expr, |$t:ident, $x:ident, $y:ident| $body:expr) => {
        (
            $name,
            vec![$a.clone(), $b.clone()],
            Box::new(move |$t: &mut Tape, xs: &[Var]| {
                let ($x, $y) = (xs[0], xs[1]);
                let z = $body;
                project($t, z, $seed)
            }) as Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>,
        )
    };
}

/// Gradient-checks every differentiable tape op on small random inputs.
/// Inputs to kinked ops (`relu`, the clamps) are kept away from the kink.
/// Returns the worst relative error per op.
pub fn op_suite(seed: u64, h: f64) -> Result<Vec<(&'static str, f64)>> {
    use rand::SeedableRng;
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut u = |r, c| crate::init::uniform(r, c, 2.0, &mut rng);
    let a23 = u(2, 3);
    let b34 = u(3, 4);
    let c23 = u(2, 3);
    let row3 = u(1, 3);
    let col2 = u(2, 1);
    let s = u(1, 1);
    let pos = a23.map(|x| 0.5 + x.abs());
    let away = a23.map(|x| x.signum() * (0.2 + x.abs()));

    let cases: Vec<OpCase> = vec![
        binary_case!("matmul", a23, b34, 1, |t, x, y| t.matmul(x, y)?),
        binary_case!("add", a23, c23, 2, |t, x, y| t.add(x, y)?),
        binary_case!("sub", a23, c23, 3, |t, x, y| t.sub(x, y)?),
        binary_case!("mul", a23, c23, 4, |t, x, y| t.mul(x, y)?),
        binary_case!("add_row", a23, row3, 5, |t, x, y| t.add_row(x, y)?),
        binary_case!("mul_col", a23, col2, 6, |t, x, y| t.mul_col(x, y)?),
        binary_case!("scale_by", a23, s, 7, |t, x, y| t.scale_by(x, y)?),
        unary_case!("scale", a23, 8, |t, x| t.scale(x, -1.7)),
        unary_case!("add_scalar", a23, 9, |t, x| {
            let y = t.add_scalar(x, 0.3);
            t.mul(y, y)?
        }),
        unary_case!("neg", a23, 10, |t, x| t.neg(x)),
        unary_case!("one_minus", a23, 11, |t, x| t.one_minus(x)),
        unary_case!("sigmoid", a23, 12, |t, x| t.sigmoid(x)),
        unary_case!("tanh", a23, 13, |t, x| t.tanh(x)),
        unary_case!("relu", away, 14, |t, x| t.relu(x)),
        unary_case!("exp", a23, 15, |t, x| t.exp(x)),
        unary_case!("log", pos, 16, |t, x| t.log(x)),
        unary_case!("clamp_max", away, 17, |t, x| t.clamp_max(x, 0.0)),
        unary_case!("clamp_min", away, 18, |t, x| t.clamp_min(x, 0.0)),
        unary_case!("softmax", a23, 19, |t, x| t.softmax(x)?),
        unary_case!("log_softmax", a23, 20, |t, x| t.log_softmax(x)?),
        unary_case!("sum", a23, 21, |t, x| {
            let y = t.sum(x);
            t.mul(y, y)?
        }),
        unary_case!("mean", a23, 22, |t, x| {
            let y = t.mean(x)?;
            t.mul(y, y)?
        }),
        unary_case!("sum_rows", a23, 23, |t, x| t.sum_rows(x)),
        unary_case!("mean_rows", a23, 24, |t, x| t.mean_rows(x)?),
        unary_case!("max_rows", a23, 25, |t, x| t.max_rows(x)?),
        unary_case!("slice_rows", b34, 26, |t, x| t.slice_rows(x, 1, 3)?),
        unary_case!("row", b34, 27, |t, x| t.row(x, 2)?),
        unary_case!("slice_cols", b34, 28, |t, x| t.slice_cols(x, 1, 3)?),
        unary_case!("pick", b34, 29, |t, x| {
            let y = t.pick(x, 1, 2)?;
            t.mul(y, y)?
        }),
        binary_case!("concat_cols", a23, col2, 30, |t, x, y| t
            .concat_cols(&[x, y, x])?),
        binary_case!("concat_rows", a23, row3, 31, |t, x, y| t
            .concat_rows(&[y, x, y])?),
        unary_case!("transpose", a23, 32, |t, x| t.transpose(x)),
        unary_case!("gather_rows", b34, 33, |t, x| t
            .gather_rows(x, &[2, 0, 2])?),
    ];

    let mut out = Vec::with_capacity(cases.len());
    for (name, inputs, f) in cases {
        let errs = check_inputs(&inputs, h, |t, x| f(t, x))?;
        out.push((name, errs.into_iter().fold(0.0, f64::max)));
    }
    Ok(out)
}
