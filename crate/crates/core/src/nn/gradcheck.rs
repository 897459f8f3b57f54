//! Finite-difference verification of analytic gradients.
//!
//! The checker is generic over any parameterized object: the caller supplies
//! a visitor that exposes every [`Param`], a `backprop` closure that zeroes
//! nothing itself but computes the loss and accumulates analytic gradients,
//! and a pure `loss` closure for probing. Central differences with the given
//! step are compared against the analytic values coordinate by coordinate.
//!
//! Frozen parameters are skipped: they are not trained, and their analytic
//! gradients are intentionally never produced. Coordinates where both the
//! analytic and numeric values are below 1e-7 in magnitude are treated as
//! zero (the finite-difference probe cannot resolve them).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{Param, Tensor};
use crate::derive_seed;

/// Maximum relative error observed for one parameter tensor.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    /// Largest relative error across all checked tensors.
    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err() < tolerance
    }
}

type Visit<M> = dyn Fn(&mut M, &mut dyn FnMut(&mut Param));

fn with_elem<M>(model: &mut M, visit: &Visit<M>, tensor: usize, elem: usize, f: &mut dyn FnMut(&mut f64)) {
    let mut i = 0;
    visit(model, &mut |p| {
        if i == tensor {
            f(&mut p.value.data_mut()[elem]);
        }
        i += 1;
    });
}

/// Checks analytic gradients against central finite differences.
///
/// Up to `max_samples` coordinates are probed per tensor: the half with the
/// largest analytic magnitude plus a random (seeded) remainder, so both
/// dominant directions and arbitrary coordinates get covered.
pub fn grad_check<M>(
    model: &mut M,
    visit: &Visit<M>,
    backprop: &mut dyn FnMut(&mut M) -> f64,
    loss: &mut dyn FnMut(&mut M) -> f64,
    step: f64,
    max_samples: usize,
    seed: u64,
) -> GradCheckReport {
    visit(model, &mut |p| p.zero_grad());
    let reference = backprop(model);
    assert!(
        reference.is_finite(),
        "grad_check: non-finite loss at the probe point"
    );

    // Snapshot of the analytic gradients, in visit order.
    let mut snapshot: Vec<(String, Tensor, bool)> = Vec::new();
    visit(model, &mut |p| {
        snapshot.push((p.name.clone(), p.grad.clone(), p.frozen));
    });

    let mut entries = Vec::new();
    for (tensor_idx, (name, grad, frozen)) in snapshot.iter().enumerate() {
        if *frozen {
            continue;
        }
        let n = grad.elem_count();
        let indices: Vec<usize> = if n <= max_samples {
            (0..n).collect()
        } else {
            let mut by_magnitude: Vec<usize> = (0..n).collect();
            by_magnitude
                .sort_by(|&a, &b| grad.data()[b].abs().total_cmp(&grad.data()[a].abs()));
            let head = max_samples / 2;
            let mut chosen: Vec<usize> = by_magnitude[..head].to_vec();
            let mut rest: Vec<usize> = by_magnitude[head..].to_vec();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tensor_idx as u64));
            rest.shuffle(&mut rng);
            chosen.extend_from_slice(&rest[..max_samples - head]);
            chosen
        };
        let mut max_rel = 0.0f64;
        for &elem in &indices {
            let mut orig = 0.0;
            with_elem(model, visit, tensor_idx, elem, &mut |v| orig = *v);
            with_elem(model, visit, tensor_idx, elem, &mut |v| *v = orig + step);
            let up = loss(model);
            with_elem(model, visit, tensor_idx, elem, &mut |v| *v = orig - step);
            let down = loss(model);
            with_elem(model, visit, tensor_idx, elem, &mut |v| *v = orig);
            let numeric = (up - down) / (2.0 * step);
            let analytic = grad.data()[elem];
            let denom = analytic.abs() + numeric.abs();
            if denom < 1e-7 {
                continue;
            }
            max_rel = max_rel.max((analytic - numeric).abs() / denom);
        }
        entries.push(GradCheckEntry {
            name: name.clone(),
            max_rel_err: max_rel,
            checked: indices.len(),
        });
    }
    GradCheckReport { entries }
}
