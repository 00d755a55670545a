//! The training objective: classification plus four evidence terms.
//!
//! Given one bag forwarded three ways (ungated, keep-gated, drop-gated)
//! and the gate vector itself, the total loss is
//!
//! ```text
//! L = CE(full)
//!   + lambda_suff   * ( CE(keep) + max(tau - p_y(keep), 0) )
//!   + lambda_excl   *   max(p_y(drop) - beta, 0)
//!   + lambda_contig *   sum_i z_i ||c_i - mu_z||^2 / sum_i z_i
//!   + lambda_budget *   mean(z)
//! ```
//!
//! The sufficiency hinge demands the kept tiles alone support the label
//! with probability at least `tau`; the exclusion hinge demands the
//! remainder support it with probability at most `beta`; the contiguity
//! term is the gate-weighted coordinate variance around the gate-weighted
//! centroid; the budget term prices every open gate.
//!
//! Both hinges kink where their argument crosses zero. The margins are
//! reported so finite-difference checks can exclude coordinates whose
//! perturbation would cross a kink.

use crate::backbone::ModelError;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Array, Scalar};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Sufficiency target: kept tiles should reach this label probability.
    pub tau: f64,
    /// Exclusion ceiling: dropped tiles should stay below this.
    pub beta: f64,
    pub lambda_suff: f64,
    pub lambda_excl: f64,
    pub lambda_contig: f64,
    pub lambda_budget: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            tau: 0.90,
            beta: 0.10,
            lambda_suff: 1.0,
            lambda_excl: 1.0,
            lambda_contig: 0.1,
            lambda_budget: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = (0.0..=1.0).contains(&self.tau)
            && (0.0..=1.0).contains(&self.beta)
            && self.lambda_suff >= 0.0
            && self.lambda_excl >= 0.0
            && self.lambda_contig >= 0.0
            && self.lambda_budget >= 0.0
            && [self.tau, self.beta, self.lambda_suff, self.lambda_excl, self.lambda_contig, self.lambda_budget]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(ModelError::Config(format!("invalid loss weights: {self:?}")))
        }
    }
}

/// Scalar values of each term, read off the tape after construction.
/// Unweighted: `total` applies the lambdas.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub l_full: f64,
    pub l_suff: f64,
    pub l_excl: f64,
    pub l_contig: f64,
    pub l_budget: f64,
    pub total: f64,
    pub p_full: f64,
    pub p_keep: f64,
    pub p_drop: f64,
}

/// The total-loss node plus diagnostics.
pub struct LossNodes {
    pub total: NodeId,
    pub breakdown: LossBreakdown,
    /// Signed distances to each hinge kink: `[tau - p_keep, p_drop - beta]`.
    /// A finite-difference step that flips one of these signs crosses a
    /// non-differentiable point.
    pub kink_margins: Vec<f64>,
}

/// Logit nodes for the three views of one bag, plus its gates and
/// normalized coordinates.
pub struct ObjectiveInputs {
    /// Rank-1 `(C)` logits of the ungated bag.
    pub logits_full: NodeId,
    /// Rank-1 `(C)` logits of the keep view.
    pub logits_keep: NodeId,
    /// Rank-1 `(C)` logits of the drop view.
    pub logits_drop: NodeId,
    /// Rank-1 `(N)` gate values in `[0, 1]`.
    pub gates: NodeId,
    /// Rank-2 `(N, 2)` coordinates; pass them normalized so the
    /// contiguity scale is comparable across bags.
    pub coords: NodeId,
    pub label: usize,
}

/// Probability assigned to `label` by rank-1 logits, as a rank-0 node.
pub fn label_probability<T: Scalar>(
    tape: &mut Tape<T>,
    logits: NodeId,
    label: usize,
) -> Result<NodeId, ModelError> {
    let probs = tape.softmax(logits, 0)?;
    let p = tape.slice_rows(probs, label, 1)?;
    Ok(tape.reshape(p, Vec::new())?)
}

/// `max(margin, 0)` where `margin = sign * (p - threshold)`.
fn hinge<T: Scalar>(
    tape: &mut Tape<T>,
    p: NodeId,
    threshold: f64,
    sign: f64,
) -> Result<NodeId, ModelError> {
    let th = tape.scalar_const(T::from_f64(threshold));
    let diff = tape.sub(p, th)?;
    let signed = tape.scale_const(diff, T::from_f64(sign))?;
    Ok(tape.relu(signed)?)
}

/// Gate-weighted coordinate spread: `sum_i z_i ||c_i - mu_z||^2 / sum_i z_i`
/// with `mu_z` the gate-weighted centroid. When the gate mass is below
/// 1e-8 the term is defined as zero (there is nothing to pull together).
pub fn contiguity_loss<T: Scalar>(
    tape: &mut Tape<T>,
    gates: NodeId,
    coords: NodeId,
) -> Result<NodeId, ModelError> {
    let n = tape.value(gates).numel();
    assert_eq!(tape.value(coords).shape(), &[n, 2], "coords must be (N, 2)");

    let mass: f64 = tape.value(gates).data().iter().map(|v| v.as_f64()).sum();
    if mass < 1e-8 {
        log::warn!("contiguity term skipped: total gate mass {mass:.3e} is numerically zero");
        return Ok(tape.scalar_const(T::zero()));
    }

    let z_row = tape.reshape(gates, [1, n])?;
    let weighted_sum = tape.matmul(z_row, coords)?;
    let sum_z = tape.sum(gates)?;
    let inv = tape.recip(sum_z)?;
    let inv2 = tape.expand_scalar(inv, 2)?;
    let mu_flat = tape.reshape(weighted_sum, [2])?;
    let mu = tape.mul(mu_flat, inv2)?;
    let neg_mu = tape.scale_const(mu, T::from_f64(-1.0))?;
    let centered = tape.add_rowvec(coords, neg_mu)?;
    let squared = tape.mul(centered, centered)?;
    let ones = tape.constant(Array::full([2, 1], T::one()));
    let row_norms = tape.matmul(squared, ones)?;
    let row_norms = tape.reshape(row_norms, [n])?;
    let weighted = tape.mul(gates, row_norms)?;
    let total = tape.sum(weighted)?;
    Ok(tape.mul(total, inv)?)
}

/// Builds the weighted five-term loss and reads back its scalar pieces.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    inputs: &ObjectiveInputs,
    weights: &LossWeights,
) -> Result<LossNodes, ModelError> {
    weights.validate()?;
    let y = inputs.label;

    let l_full = tape.cross_entropy(inputs.logits_full, y)?;

    let ce_keep = tape.cross_entropy(inputs.logits_keep, y)?;
    let p_keep = label_probability(tape, inputs.logits_keep, y)?;
    let suff_hinge = hinge(tape, p_keep, weights.tau, -1.0)?;
    let l_suff = tape.add(ce_keep, suff_hinge)?;

    let p_drop = label_probability(tape, inputs.logits_drop, y)?;
    let l_excl = hinge(tape, p_drop, weights.beta, 1.0)?;

    let l_contig = contiguity_loss(tape, inputs.gates, inputs.coords)?;
    let l_budget = tape.mean(inputs.gates)?;

    let mut total = l_full;
    for (term, lambda) in [
        (l_suff, weights.lambda_suff),
        (l_excl, weights.lambda_excl),
        (l_contig, weights.lambda_contig),
        (l_budget, weights.lambda_budget),
    ] {
        let scaled = tape.scale_const(term, T::from_f64(lambda))?;
        total = tape.add(total, scaled)?;
    }

    let p_full = label_probability(tape, inputs.logits_full, y)?;
    let read = |tape: &Tape<T>, id: NodeId| tape.value(id).scalar_value().as_f64();
    let p_keep_v = read(tape, p_keep);
    let p_drop_v = read(tape, p_drop);
    let breakdown = LossBreakdown {
        l_full: read(tape, l_full),
        l_suff: read(tape, l_suff),
        l_excl: read(tape, l_excl),
        l_contig: read(tape, l_contig),
        l_budget: read(tape, l_budget),
        total: read(tape, total),
        p_full: read(tape, p_full),
        p_keep: p_keep_v,
        p_drop: p_drop_v,
    };
    Ok(LossNodes {
        total,
        breakdown,
        kink_margins: vec![weights.tau - p_keep_v, p_drop_v - weights.beta],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Binary logits giving the label (index 1) probability `p`.
    fn logits_for_p(p: f64) -> Array<f64> {
        Array::vector(vec![0.0, (p / (1.0 - p)).ln()])
    }

    fn build(
        p_full: f64,
        p_keep: f64,
        p_drop: f64,
        z: Vec<f64>,
        coords: Vec<f64>,
        w: &LossWeights,
    ) -> LossBreakdown {
        let n = z.len();
        let mut tape = Tape::<f64>::new();
        let logits_full = tape.constant(logits_for_p(p_full));
        let logits_keep = tape.constant(logits_for_p(p_keep));
        let logits_drop = tape.constant(logits_for_p(p_drop));
        let gates = tape.constant(Array::vector(z));
        let coords = tape.constant(Array::from_vec([n, 2], coords));
        let inputs = ObjectiveInputs {
            logits_full,
            logits_keep,
            logits_drop,
            gates,
            coords,
            label: 1,
        };
        total_loss(&mut tape, &inputs, w).unwrap().breakdown
    }

    #[test]
    fn sufficiency_hinge_is_inactive_above_tau() {
        let w = LossWeights::default();
        let b = build(0.95, 0.95, 0.05, vec![1.0, 0.0], vec![0.0; 4], &w);
        // Above tau the sufficiency term is the keep cross entropy alone.
        let ce = -(0.95f64.ln());
        assert!((b.l_suff - ce).abs() < 1e-12, "{}", b.l_suff);
    }

    #[test]
    fn sufficiency_hinge_charges_the_gap_below_tau() {
        let w = LossWeights::default();
        let b = build(0.95, 0.60, 0.05, vec![1.0, 0.0], vec![0.0; 4], &w);
        let expected = -(0.60f64.ln()) + (0.90 - 0.60);
        assert!((b.l_suff - expected).abs() < 1e-9, "{}", b.l_suff);
    }

    #[test]
    fn exclusion_hinge_activates_only_above_beta() {
        let w = LossWeights::default();
        let quiet = build(0.9, 0.9, 0.08, vec![1.0, 0.0], vec![0.0; 4], &w);
        assert_eq!(quiet.l_excl, 0.0);
        let loud = build(0.9, 0.9, 0.35, vec![1.0, 0.0], vec![0.0; 4], &w);
        assert!((loud.l_excl - 0.25).abs() < 1e-9, "{}", loud.l_excl);
    }

    #[test]
    fn contiguity_matches_a_hand_computation() {
        // Two tiles at (0,0) and (2,0) with equal gates: centroid (1,0),
        // each contributes distance^2 = 1, so the weighted mean is 1.
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Array::vector(vec![1.0, 1.0]));
        let c = tape.constant(Array::from_vec([2, 2], vec![0.0, 0.0, 2.0, 0.0]));
        let l = contiguity_loss(&mut tape, z, c).unwrap();
        assert!((tape.value(l).scalar_value() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn contiguity_ignores_gate_rescaling_and_translation() {
        let coords = vec![10.0, -3.0, 14.0, 2.0, 9.0, 9.0];
        let z = vec![0.2, 0.7, 0.4];
        let eval = |z: &[f64], coords: &[f64]| {
            let mut tape = Tape::<f64>::new();
            let zn = tape.constant(Array::vector(z.to_vec()));
            let cn = tape.constant(Array::from_vec([3, 2], coords.to_vec()));
            let l = contiguity_loss(&mut tape, zn, cn).unwrap();
            tape.value(l).scalar_value()
        };
        let base = eval(&z, &coords);
        let scaled_z: Vec<f64> = z.iter().map(|v| v * 7.5).collect();
        assert!((eval(&scaled_z, &coords) - base).abs() < 1e-12);
        let shifted: Vec<f64> = coords.iter().map(|v| v + 100.0).collect();
        assert!((eval(&z, &shifted) - base).abs() < 1e-9);
        // Dilation scales quadratically.
        let dilated: Vec<f64> = coords.iter().map(|v| v * 3.0).collect();
        assert!((eval(&z, &dilated) - 9.0 * base).abs() < 1e-9 * 9.0 * base.max(1.0));
    }

    #[test]
    fn contiguity_with_zero_mass_is_zero() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Array::vector(vec![0.0, 0.0]));
        let c = tape.constant(Array::from_vec([2, 2], vec![0.0, 0.0, 5.0, 5.0]));
        let l = contiguity_loss(&mut tape, z, c).unwrap();
        assert_eq!(tape.value(l).scalar_value(), 0.0);
    }

    #[test]
    fn budget_is_the_mean_gate() {
        let w = LossWeights::default();
        let b = build(0.9, 0.9, 0.05, vec![0.0, 1.0], vec![0.0; 4], &w);
        assert_eq!(b.l_budget, 0.5);
        let b = build(0.9, 0.9, 0.05, vec![1.0, 1.0], vec![0.0; 4], &w);
        assert_eq!(b.l_budget, 1.0);
    }

    #[test]
    fn breakdown_recombines_to_the_total() {
        let w = LossWeights {
            tau: 0.8,
            beta: 0.2,
            lambda_suff: 1.3,
            lambda_excl: 0.7,
            lambda_contig: 0.25,
            lambda_budget: 2.0,
        };
        let b = build(
            0.7,
            0.55,
            0.4,
            vec![0.9, 0.3],
            vec![0.1, 0.2, 0.8, 0.9],
            &w,
        );
        let recombined = b.l_full
            + w.lambda_suff * b.l_suff
            + w.lambda_excl * b.l_excl
            + w.lambda_contig * b.l_contig
            + w.lambda_budget * b.l_budget;
        assert!((b.total - recombined).abs() <= 1e-6, "{} vs {recombined}", b.total);
    }

    #[test]
    fn zero_lambdas_reduce_to_plain_cross_entropy() {
        let w = LossWeights {
            tau: 0.9,
            beta: 0.1,
            lambda_suff: 0.0,
            lambda_excl: 0.0,
            lambda_contig: 0.0,
            lambda_budget: 0.0,
        };
        let b = build(0.65, 0.2, 0.9, vec![0.5, 0.5], vec![0.0, 0.0, 3.0, 4.0], &w);
        assert_eq!(b.total, b.l_full);
        assert!((b.l_full - -(0.65f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn fully_open_gates_make_keep_match_full() {
        // With z = 1 everywhere the keep view is the full view; feeding the
        // same logits twice must give an identical cross entropy.
        let w = LossWeights {
            tau: 0.5,
            ..LossWeights::default()
        };
        let b = build(0.8, 0.8, 0.05, vec![1.0, 1.0, 1.0], vec![0.0; 6], &w);
        assert_eq!(b.l_suff, b.l_full);
        assert_eq!(b.p_keep, b.p_full);
    }

    #[test]
    fn zeroing_one_lambda_changes_only_its_own_contribution() {
        let w = LossWeights::default();
        let args = (0.7, 0.55, 0.4, vec![0.9, 0.3], vec![0.1, 0.2, 0.8, 0.9]);
        let base = build(args.0, args.1, args.2, args.3.clone(), args.4.clone(), &w);
        for which in 0..4 {
            let mut ablated = w;
            let removed = match which {
                0 => {
                    ablated.lambda_suff = 0.0;
                    w.lambda_suff * base.l_suff
                }
                1 => {
                    ablated.lambda_excl = 0.0;
                    w.lambda_excl * base.l_excl
                }
                2 => {
                    ablated.lambda_contig = 0.0;
                    w.lambda_contig * base.l_contig
                }
                _ => {
                    ablated.lambda_budget = 0.0;
                    w.lambda_budget * base.l_budget
                }
            };
            let b = build(args.0, args.1, args.2, args.3.clone(), args.4.clone(), &ablated);
            // Unweighted terms are untouched by the reweighting.
            assert_eq!(b.l_full, base.l_full);
            assert_eq!(b.l_suff, base.l_suff);
            assert_eq!(b.l_excl, base.l_excl);
            assert_eq!(b.l_contig, base.l_contig);
            assert_eq!(b.l_budget, base.l_budget);
            // The total loses exactly the removed contribution.
            assert!((base.total - b.total - removed).abs() < 1e-12, "ablation {which}");
        }
    }

    #[test]
    fn kink_margins_report_hinge_distances() {
        let n = 2;
        let mut tape = Tape::<f64>::new();
        let logits_full = tape.constant(logits_for_p(0.9));
        let logits_keep = tape.constant(logits_for_p(0.75));
        let logits_drop = tape.constant(logits_for_p(0.3));
        let gates = tape.constant(Array::vector(vec![0.5, 0.5]));
        let coords = tape.constant(Array::from_vec([n, 2], vec![0.0; 4]));
        let inputs = ObjectiveInputs {
            logits_full,
            logits_keep,
            logits_drop,
            gates,
            coords,
            label: 1,
        };
        let w = LossWeights::default();
        let out = total_loss(&mut tape, &inputs, &w).unwrap();
        assert!((out.kink_margins[0] - (0.90 - 0.75)).abs() < 1e-9);
        assert!((out.kink_margins[1] - (0.3 - 0.10)).abs() < 1e-9);
    }

    #[test]
    fn invalid_weights_are_rejected() {
        let w = LossWeights {
            tau: 1.5,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
        let w = LossWeights {
            lambda_budget: -1.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }

    #[test]
    fn budget_pressure_drives_gates_shut() {
        // Minimal end-to-end sanity: optimize raw selection logits under
        // the budget term alone and watch the mean gate collapse.
        let mut a = vec![0.0f64; 8];
        let lr = 4.0;
        for _ in 0..200 {
            let mut tape = Tape::<f64>::new();
            let an = tape.param(Array::vector(a.clone()));
            let z = tape.sigmoid(an).unwrap();
            let budget = tape.mean(z).unwrap();
            tape.backward(budget).unwrap();
            let g = tape.grad(an).unwrap().data().to_vec();
            for (ai, gi) in a.iter_mut().zip(g) {
                *ai -= lr * gi;
            }
        }
        let mean_z: f64 = a.iter().map(|v| 1.0 / (1.0 + (-v).exp())).sum::<f64>() / 8.0;
        assert!(mean_z < 0.05, "mean gate {mean_z}");
    }
}
