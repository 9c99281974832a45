//! Central finite-difference gradient oracle.
//!
//! The tape is replayed in f64 around perturbed leaf values, so the numeric
//! side is free of f32 rounding noise; it exercises only the forward
//! evaluation and is independent of the reverse-mode rules it checks.

use crate::tensor::{Graph, Val};
use std::collections::HashMap;

/// Compares reverse-mode gradients of `loss` w.r.t. each leaf against
/// central differences with step `h`. Returns the worst relative error seen,
/// or an error message naming the offending leaf/element.
pub fn check_grads(
    graph: &mut Graph,
    loss: Val,
    leaves: &[Val],
    h: f64,
    tol: f64,
) -> Result<f64, String> {
    graph
        .backward(loss)
        .map_err(|e| format!("backward failed: {e}"))?;
    let mut per_leaf: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(leaves.len());
    for &leaf in leaves {
        // a leaf with no path to the loss has gradient zero
        let analytic = match graph.grad(leaf) {
            Some(g) => g.data().iter().map(|&x| x as f64).collect::<Vec<_>>(),
            None => vec![0.0; graph.value(leaf).numel()],
        };
        let base = graph.value(leaf).cast::<f64>();
        let n = base.numel();
        let mut numeric = vec![0.0f64; n];
        for i in 0..n {
            let mut plus = base.clone();
            plus.data_mut()[i] += h;
            let mut minus = base.clone();
            minus.data_mut()[i] -= h;
            let mut over = HashMap::new();
            over.insert(leaf.0, plus);
            let lp = graph.eval_f64(loss, &over).item();
            over.insert(leaf.0, minus);
            let lm = graph.eval_f64(loss, &over).item();
            numeric[i] = (lp - lm) / (2.0 * h);
        }
        per_leaf.push((analytic, numeric));
    }
    // global gradient scale: f32 forward/backward rounding puts an absolute
    // noise floor of ~1e-7 * gmax on every component, so components far
    // below the dominant scale are compared against that floor, not
    // against their own (negligible) magnitude
    let gmax_global = per_leaf
        .iter()
        .flat_map(|(_, num)| num.iter())
        .fold(0.0f64, |m, &x| m.max(x.abs()));
    let mut worst = 0.0f64;
    for (li, (analytic, numeric)) in per_leaf.iter().enumerate() {
        let gmax = numeric.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        for (i, (&a, &num)) in analytic.iter().zip(numeric).enumerate() {
            let denom = a
                .abs()
                .max(num.abs())
                .max(0.05 * gmax)
                .max(1e-3 * gmax_global)
                .max(1e-8);
            let rel = (a - num).abs() / denom;
            worst = worst.max(rel);
            if rel > tol {
                return Err(format!(
                    "leaf {li} elem {i}: analytic {a:.6e} vs numeric {num:.6e} (rel {rel:.3e})"
                ));
            }
        }
    }
    Ok(worst)
}
