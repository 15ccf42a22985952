//! Central finite-difference checks of tape gradients in `f64`.
//!
//! Relative error is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`;
//! the floor keeps near-zero gradients from turning rounding noise into
//! huge ratios.

use rand::seq::index::sample;

use crate::error::Result;
use crate::numerics::{rng, ParamStore, Tape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-4;
pub const RELATIVE_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub checked: usize,
}

impl GradCheck {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
        self.max_relative_error = self.max_relative_error.max((analytic - numeric).abs() / denom);
        self.checked += 1;
    }

    fn merge(&mut self, other: GradCheck) {
        self.max_relative_error = self.max_relative_error.max(other.max_relative_error);
        self.checked += other.checked;
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_relative_error < tolerance
    }
}

fn indices(numel: usize, limit: usize, seed: u64) -> Vec<usize> {
    if numel <= limit {
        (0..numel).collect()
    } else {
        let mut r = rng::seeded(seed);
        let mut picked = sample(&mut r, numel, limit).into_vec();
        picked.sort_unstable();
        picked
    }
}

/// Checks gradients with respect to constant inputs. `f` receives the
/// inputs as leaves and must return a scalar.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], store: &ParamStore<f64>, limit: usize, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect::<Vec<_>>()
    };
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::inference(store);
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };
    let mut report = GradCheck::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for i in indices(inputs[k].numel(), limit, k as u64) {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + DEFAULT_EPS;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - DEFAULT_EPS;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            report.record(grad.data()[i], (plus - minus) / (2.0 * DEFAULT_EPS));
        }
    }
    Ok(report)
}

/// Checks gradients with respect to every parameter in `store`, sampling at
/// most `limit` entries per tensor.
pub fn check_params<F>(store: &ParamStore<f64>, limit: usize, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        tape.backward(loss)?
    };
    let mut work = store.clone();
    let mut report = GradCheck::default();
    let ids: Vec<_> = store.names().map(|n| store.id(n).expect("listed name")).collect();
    for (k, id) in ids.into_iter().enumerate() {
        let numel = store.get(id).value.numel();
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).value.shape().to_vec()));
        let mut part = GradCheck::default();
        for i in indices(numel, limit, 1000 + k as u64) {
            let orig = store.get(id).value.data()[i];
            let mut eval = |v: f64| -> Result<f64> {
                work.get_mut(id).value.data_mut()[i] = v;
                let mut tape = Tape::inference(&work);
                let loss = f(&mut tape)?;
                Ok(tape.value(loss).item())
            };
            let plus = eval(orig + DEFAULT_EPS)?;
            let minus = eval(orig - DEFAULT_EPS)?;
            work.get_mut(id).value.data_mut()[i] = orig;
            part.record(analytic.data()[i], (plus - minus) / (2.0 * DEFAULT_EPS));
        }
        report.merge(part);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use std::rc::Rc;

    use super::*;
    use crate::numerics::rng::uniform;

    const TOL: f64 = 1e-4;

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        uniform(shape, 1.0, &mut rng::seeded(seed))
    }

    /// Weighted sum so every output element gets a distinct upstream gradient.
    fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
        let w = tape.constant(rand(tape.value(y).shape(), seed));
        let prod = tape.mul(y, w)?;
        Ok(tape.sum(prod))
    }

    fn run(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> GradCheck {
        let store = ParamStore::new();
        let report = check_inputs(inputs, &store, 64, |t, v| {
            let y = f(t, v)?;
            probe(t, y, 99)
        })
        .unwrap();
        assert!(report.passes(TOL), "{report:?}");
        report
    }

    #[test]
    fn conv_gradients_at_each_dilation() {
        for dil in [1, 2, 4] {
            run(&[rand(&[7, 3], 1), rand(&[4, 3, 3], 2), rand(&[4], 3)], |t, v| {
                t.conv1d_dilated(v[0], v[1], v[2], dil, 7)
            });
            run(&[rand(&[10, 2], 4), rand(&[3, 2, 3], 5), rand(&[3], 6)], |t, v| {
                t.conv1d_dilated(v[0], v[1], v[2], dil, 5)
            });
        }
    }

    #[test]
    fn dense_op_gradients() {
        run(&[rand(&[3, 4], 1), rand(&[4, 2], 2)], |t, v| t.matmul(v[0], v[1]));
        run(&[rand(&[3, 4], 1), rand(&[5, 4], 2)], |t, v| t.matmul_nt(v[0], v[1]));
        run(&[rand(&[3, 4], 1), rand(&[5, 4], 2), rand(&[5], 3)], |t, v| t.linear(v[0], v[1], v[2]));
        run(&[rand(&[3, 4], 1), rand(&[3, 4], 2)], |t, v| t.mul(v[0], v[1]));
        run(&[rand(&[3, 4], 1), rand(&[3, 4], 2)], |t, v| t.add(v[0], v[1]));
        run(&[rand(&[3, 4], 1)], |t, v| Ok(t.sigmoid(v[0])));
        run(&[rand(&[3, 4], 1)], |t, v| t.softmax_rows(v[0]));
        run(&[rand(&[3, 4], 1), rand(&[3, 2], 2)], |t, v| t.concat_cols(&[v[0], v[1], v[0]]));
        run(&[rand(&[3, 4], 1)], |t, v| t.slice_cols(v[0], 1, 3));
        run(&[rand(&[5, 3], 1)], |t, v| t.gather_rows(v[0], vec![4, 0, 4, 2]));
        run(&[rand(&[4, 3], 1)], |t, v| t.mask_rows(v[0], Rc::from(vec![true, false, true, false])));
        run(&[rand(&[4, 3], 1)], |t, v| {
            let mut r = rng::seeded(5);
            t.dropout(v[0], 0.3, &mut r)
        });
    }

    #[test]
    fn segmented_attention_gradients() {
        run(&[rand(&[6, 4], 1), rand(&[6, 4], 2)], |t, v| t.seg_matmul_nt(v[0], v[1], 3));
        run(&[rand(&[6, 3], 1), rand(&[6, 2], 2)], |t, v| t.seg_matmul(v[0], v[1], 3));
        run(&[rand(&[6, 3], 1)], |t, v| t.masked_softmax_rows(v[0], 3, Rc::from(vec![3, 2])));
    }
}
