//! Central finite-difference gradient checking.
//!
//! The checker is independent of the backward pass by construction: it only
//! re-runs forward evaluations at perturbed inputs and compares the slope
//! against the gradients reported by [`Tape::backward`].

use crate::error::Result;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Checks d(loss)/d(input) for every element of every input against central
/// finite differences with step `h`.
///
/// `build` receives a fresh tape plus one grad-enabled leaf per input and
/// must return the scalar loss node. It must be deterministic: any RNG used
/// inside has to be re-seeded per call.
///
/// Comparison is `|analytic − fd| ≤ rel_tol · max(1, |analytic|, |fd|)`.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    h: f64,
    rel_tol: f64,
    build: F,
) -> std::result::Result<(), String>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |points: &[Tensor]| -> std::result::Result<f64, String> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = points
            .iter()
            .enumerate()
            .map(|(i, t)| tape.var(t.clone(), format!("input{i}")))
            .collect();
        let loss = build(&mut tape, &ids).map_err(|e| e.to_string())?;
        tape.value(loss).scalar_value().map_err(|e| e.to_string())
    };

    // Analytic gradients once.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.var(t.clone(), format!("input{i}")))
        .collect();
    let loss = build(&mut tape, &ids).map_err(|e| e.to_string())?;
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;

    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(ids[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for e in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= h;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = analytic.data()[e];
            let denom = 1.0f64.max(a.abs()).max(fd.abs());
            if (a - fd).abs() > rel_tol * denom {
                return Err(format!(
                    "gradient mismatch at input {i} element {e}: analytic {a}, finite-diff {fd} \
                     (rel err {})",
                    (a - fd).abs() / denom
                ));
            }
        }
    }
    Ok(())
}
