//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Reduce `out` to a scalar as `Σ out ⊙ w` with fixed pseudo-random weights,
/// so every output element carries a distinct upstream gradient. A scalar
/// `out` is returned unchanged.
fn weighted_loss(tape: &mut Tape, out: Var) -> Result<Var> {
    if tape.value(out).len() == 1 && tape.shape(out).is_empty() {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = Tensor::from_fn(tape.shape(out), |_| rng.random_range(-1.0..1.0));
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// For each input group, `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`
/// with central differences of step `h`.
pub fn gradient_check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        let loss = weighted_loss(&mut tape, out)?;
        Ok(tape.item(loss))
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let loss = weighted_loss(&mut tape, out)?;
    let grads = tape.backward(loss)?;

    let mut errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.tensor(vars[i]);
        let mut numeric = vec![0.0; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        let diff = analytic.data().iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = analytic.sum_squares().sqrt();
        let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        errors.push(diff / na.max(nn).max(1e-12));
    }
    Ok(errors)
}
