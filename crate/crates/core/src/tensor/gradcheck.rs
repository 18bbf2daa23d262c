//! Central finite-difference verification of analytic gradients.
//!
//! The op under test is composed with a fixed random projection so the output
//! becomes a scalar; the analytic vector-Jacobian product is then compared
//! against (f(x+h) - f(x-h)) / 2h coordinate by coordinate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NodeId, Result, Tape, Tensor};

/// Finite-difference step balancing truncation against round-off at f64.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct InputReport {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs
            .iter()
            .map(|r| r.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self) -> bool {
        self.max_rel_err() <= self.tol
    }

    /// Human-readable description of the worst offending coordinate, present
    /// only when the check failed.
    pub fn failure(&self) -> Option<String> {
        if self.passes() {
            return None;
        }
        let (i, worst) = self
            .inputs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.max_rel_err.total_cmp(&b.1.max_rel_err))?;
        Some(format!(
            "input {} coordinate {}: analytic {:.6e} vs numeric {:.6e} (rel err {:.3e} > tol {:.1e})",
            i, worst.worst_coord, worst.analytic_at_worst, worst.numeric_at_worst,
            worst.max_rel_err, self.tol
        ))
    }
}

/// Relative error with a unit floor, so near-zero gradients are compared
/// absolutely instead of blowing up the ratio.
pub(crate) fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / f64::max(1.0, f64::max(a.abs(), n.abs()))
}

/// Checks `build`'s analytic gradients on `inputs` against central finite
/// differences with step `h`. The projection vector is seeded so reruns are
/// reproducible.
pub fn grad_check<F>(
    build: F,
    inputs: &[Tensor],
    h: f64,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |xs: &[Tensor]| -> Result<(Tape, Vec<NodeId>, NodeId)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&mut tape, &ids)?;
        Ok((tape, ids, out))
    };

    let (tape, ids, out) = eval(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let projection = Tensor::from_fn(tape.value(out).shape(), |_| rng.gen_range(-1.0..1.0));
    let scalar = |t: &Tape, node: NodeId| t.value(node).dot(&projection);

    let grads = tape.backward(out, projection.clone())?;
    let mut reports = Vec::with_capacity(inputs.len());
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(ids[which], input.shape());
        let mut worst = InputReport {
            max_rel_err: 0.0,
            worst_coord: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
        };
        for coord in 0..input.len() {
            let mut bumped: Vec<Tensor> = inputs.to_vec();
            bumped[which].data_mut()[coord] = input.data()[coord] + h;
            let (tp, _, op) = eval(&bumped)?;
            let plus = scalar(&tp, op);
            bumped[which].data_mut()[coord] = input.data()[coord] - h;
            let (tm, _, om) = eval(&bumped)?;
            let minus = scalar(&tm, om);
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[coord];
            let e = rel_err(a, numeric);
            if e > worst.max_rel_err {
                worst = InputReport {
                    max_rel_err: e,
                    worst_coord: coord,
                    analytic_at_worst: a,
                    numeric_at_worst: numeric,
                };
            }
        }
        reports.push(worst);
    }
    Ok(GradCheckReport {
        inputs: reports,
        tol,
    })
}
