//! Finite-difference verification of tape gradients.
//!
//! The checker perturbs every element of every named parameter tensor by
//! `±step`, compares the central difference against the analytic gradient,
//! and reports the worst relative error per tensor. Two guards keep the
//! comparison honest:
//!
//! - The model closure is evaluated twice at the base point first; if the
//!   two losses differ bitwise the run is aborted as non-deterministic,
//!   because finite differences against a noisy function are meaningless.
//! - Hinge-style terms are only piecewise differentiable. The closure
//!   reports a margin value per hinge; when a perturbation pair straddles
//!   or touches a margin's zero, that element is excluded (counted, not
//!   failed), since the two-sided difference crosses a kink there.

use thiserror::Error;

use crate::params::ParamSet;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckSettings {
    /// Central-difference half step.
    pub step: f64,
    /// Maximum allowed relative error per element.
    pub tolerance: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            step: 1e-4,
            tolerance: 1e-3,
        }
    }
}

/// One model evaluation at a parameter point.
pub struct Evaluation {
    pub loss: f64,
    /// Signed distances to each hinge kink (empty when the loss is smooth).
    pub kink_margins: Vec<f64>,
    /// Analytic gradients; only requested for the base-point evaluation.
    pub grads: Option<ParamSet<f64>>,
}

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("model is non-deterministic: repeated losses {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("base evaluation returned no analytic gradients")]
    NoGrads,
    #[error("kink margin count changed between evaluations ({first} vs {second})")]
    MarginCountMismatch { first: usize, second: usize },
    #[error("model evaluation failed: {0}")]
    Model(String),
}

#[derive(Clone, Debug)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub excluded: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub settings: GradCheckSettings,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn total_excluded(&self) -> usize {
        self.groups.iter().map(|g| g.excluded).sum()
    }

    pub fn total_checked(&self) -> usize {
        self.groups.iter().map(|g| g.checked).sum()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.settings.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "gradient check: step={:.1e} tolerance={:.1e}",
            self.settings.step, self.settings.tolerance
        )?;
        for g in &self.groups {
            writeln!(
                f,
                "  {:<28} max_rel_err={:<12.3e} checked={:<6} excluded={}",
                g.name, g.max_rel_err, g.checked, g.excluded
            )?;
        }
        write!(
            f,
            "  overall max_rel_err={:.3e} ({})",
            self.max_rel_err(),
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

/// `|a-b| / max(|a|, |b|, 1e-6)`: relative where the scale allows, absolute
/// near zero so finite-difference noise on dead parameters cannot fail.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Plain central-difference gradient of a scalar function, for tests that
/// need an oracle without the full parameter-set machinery.
pub fn finite_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut work = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        let orig = work[j];
        work[j] = orig + h;
        let fp = f(&work);
        work[j] = orig - h;
        let fm = f(&work);
        work[j] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

fn straddles_kink(plus: &[f64], minus: &[f64]) -> Result<bool, GradCheckError> {
    if plus.len() != minus.len() {
        return Err(GradCheckError::MarginCountMismatch {
            first: plus.len(),
            second: minus.len(),
        });
    }
    const TINY: f64 = 1e-9;
    Ok(plus.iter().zip(minus).any(|(&p, &m)| {
        p.abs() < TINY || m.abs() < TINY || (p > 0.0) != (m > 0.0)
    }))
}

/// Checks analytic gradients of `eval` against central differences over
/// every element of `params`. The closure receives the parameter point and
/// whether analytic gradients are needed; it must be a pure function of the
/// parameters (frozen data, frozen noise).
pub fn gradcheck<F>(
    params: &ParamSet<f64>,
    mut eval: F,
    settings: GradCheckSettings,
) -> Result<GradCheckReport, GradCheckError>
where
    F: FnMut(&ParamSet<f64>, bool) -> Result<Evaluation, GradCheckError>,
{
    let base = eval(params, true)?;
    let grads = base.grads.ok_or(GradCheckError::NoGrads)?;
    let repeat = eval(params, false)?;
    if base.loss.to_bits() != repeat.loss.to_bits() {
        return Err(GradCheckError::NonDeterministic {
            first: base.loss,
            second: repeat.loss,
        });
    }

    let h = settings.step;
    let mut work = params.clone();
    let mut groups = Vec::with_capacity(params.len());
    for (name, tensor) in params.iter() {
        let analytic = grads.get(name).ok_or(GradCheckError::NoGrads)?.clone();
        let mut group = GroupReport {
            name: name.to_string(),
            max_rel_err: 0.0,
            checked: 0,
            excluded: 0,
        };
        for j in 0..tensor.numel() {
            let orig = tensor.data()[j];
            let slot = work.get_mut(name).unwrap();
            slot.data_mut()[j] = orig + h;
            let plus = eval(&work, false)?;
            let slot = work.get_mut(name).unwrap();
            slot.data_mut()[j] = orig - h;
            let minus = eval(&work, false)?;
            work.get_mut(name).unwrap().data_mut()[j] = orig;

            if straddles_kink(&plus.kink_margins, &minus.kink_margins)? {
                group.excluded += 1;
                continue;
            }
            let fd = (plus.loss - minus.loss) / (2.0 * h);
            let mut rel = relative_error(fd, analytic.data()[j]);
            // A disagreement at one step size may be truncation error on an
            // ill-conditioned direction (large third derivative, small first
            // derivative) rather than a wrong gradient. Retry at nearby
            // steps and keep the best agreement: a genuinely wrong analytic
            // gradient disagrees at every step.
            if rel > settings.tolerance {
                for factor in [4.0, 0.25] {
                    let h2 = h * factor;
                    let slot = work.get_mut(name).unwrap();
                    slot.data_mut()[j] = orig + h2;
                    let plus = eval(&work, false)?;
                    let slot = work.get_mut(name).unwrap();
                    slot.data_mut()[j] = orig - h2;
                    let minus = eval(&work, false)?;
                    work.get_mut(name).unwrap().data_mut()[j] = orig;
                    if straddles_kink(&plus.kink_margins, &minus.kink_margins)? {
                        continue;
                    }
                    let fd2 = (plus.loss - minus.loss) / (2.0 * h2);
                    rel = rel.min(relative_error(fd2, analytic.data()[j]));
                }
            }
            group.max_rel_err = group.max_rel_err.max(rel);
            group.checked += 1;
        }
        groups.push(group);
    }
    Ok(GradCheckReport { groups, settings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{NodeId, Tape};
    use crate::tensor::Array;

    fn quadratic_eval(params: &ParamSet<f64>, with_grads: bool) -> Result<Evaluation, GradCheckError> {
        // loss = sum(w^2) + 3*sum(b)
        let w = params.get("w").unwrap();
        let b = params.get("b").unwrap();
        let loss: f64 = w.data().iter().map(|v| v * v).sum::<f64>()
            + 3.0 * b.data().iter().sum::<f64>();
        let grads = with_grads.then(|| {
            let mut g = ParamSet::new();
            g.insert("w", w.map(|v| 2.0 * v));
            g.insert("b", b.map(|_| 3.0));
            g
        });
        Ok(Evaluation {
            loss,
            kink_margins: vec![],
            grads,
        })
    }

    fn toy_params() -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Array::vector(vec![0.5, -1.25, 2.0]));
        p.insert("b", Array::vector(vec![0.1, 0.2]));
        p
    }

    #[test]
    fn analytic_quadratic_passes_tightly() {
        let report = gradcheck(
            &toy_params(),
            quadratic_eval,
            GradCheckSettings {
                step: 1e-5,
                tolerance: 1e-6,
            },
        )
        .unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.total_checked(), 5);
        assert_eq!(report.total_excluded(), 0);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let eval = |params: &ParamSet<f64>, with_grads: bool| {
            let mut e = quadratic_eval(params, with_grads)?;
            if let Some(g) = &mut e.grads {
                g.get_mut("w").unwrap().data_mut()[1] += 0.5;
            }
            Ok(e)
        };
        let report = gradcheck(&toy_params(), eval, GradCheckSettings::default()).unwrap();
        assert!(!report.passed(), "{report}");
    }

    #[test]
    fn hinge_at_kink_is_excluded_not_failed() {
        // loss = max(w0, 0); at w0 = 0 the +/-h pair straddles the kink.
        let eval = |params: &ParamSet<f64>, with_grads: bool| {
            let w = params.get("w").unwrap().data()[0];
            let grads = with_grads.then(|| {
                let mut g = ParamSet::new();
                g.insert("w", Array::vector(vec![if w > 0.0 { 1.0 } else { 0.0 }]));
                g
            });
            Ok(Evaluation {
                loss: w.max(0.0),
                kink_margins: vec![w],
                grads,
            })
        };
        let mut p = ParamSet::new();
        p.insert("w", Array::vector(vec![0.0]));
        let report = gradcheck(&p, eval, GradCheckSettings::default()).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.total_excluded(), 1);
        assert_eq!(report.total_checked(), 0);
    }

    #[test]
    fn hinge_away_from_kink_is_checked() {
        let eval = |params: &ParamSet<f64>, with_grads: bool| {
            let w = params.get("w").unwrap().data()[0];
            let grads = with_grads.then(|| {
                let mut g = ParamSet::new();
                g.insert("w", Array::vector(vec![if w > 0.0 { 1.0 } else { 0.0 }]));
                g
            });
            Ok(Evaluation {
                loss: w.max(0.0),
                kink_margins: vec![w],
                grads,
            })
        };
        let mut p = ParamSet::new();
        p.insert("w", Array::vector(vec![0.7]));
        let report = gradcheck(&p, eval, GradCheckSettings::default()).unwrap();
        assert!(report.passed());
        assert_eq!(report.total_checked(), 1);
        assert_eq!(report.total_excluded(), 0);
    }

    #[test]
    fn nondeterministic_model_is_rejected() {
        let mut counter = 0u64;
        let eval = move |params: &ParamSet<f64>, with_grads: bool| {
            counter += 1;
            let mut e = quadratic_eval(params, with_grads)?;
            e.loss += counter as f64 * 1e-9;
            Ok(e)
        };
        let err = gradcheck(&toy_params(), eval, GradCheckSettings::default()).unwrap_err();
        assert!(matches!(err, GradCheckError::NonDeterministic { .. }));
    }

    // ---- per-op oracle sweep: analytic backward vs central differences ----

    /// Deterministic pseudo-random fill that avoids op-specific hazards.
    fn fill(n: usize, lo: f64, hi: f64, salt: u64) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let x = ((i as u64 + 1) * 2654435761 ^ salt.wrapping_mul(0x9e3779b97f4a7c15))
                    as f64
                    / u64::MAX as f64;
                lo + (hi - lo) * x.fract().abs()
            })
            .collect()
    }

    /// Builds the op on a fresh tape, reduces the output to a scalar with a
    /// fixed weighting, and compares every input gradient against an FD
    /// oracle computed from value-only re-evaluations.
    fn fd_check_op(
        inputs: &[Array<f64>],
        build: impl Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
    ) {
        let readout = |tape: &mut Tape<f64>, out: NodeId| -> NodeId {
            let n = tape.value(out).numel();
            if n == 1 {
                return out;
            }
            let shape = tape.value(out).shape().to_vec();
            let w = Array::from_vec(shape, (0..n).map(|i| ((i as f64) * 0.7).sin() + 0.4).collect());
            let wn = tape.constant(w);
            let prod = tape.mul(out, wn).unwrap();
            tape.sum(prod).unwrap()
        };

        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|a| tape.param(a.clone())).collect();
        let out = build(&mut tape, &ids);
        let loss = readout(&mut tape, out);
        tape.backward(loss).unwrap();
        let analytic: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| tape.grad(id).unwrap().data().to_vec())
            .collect();

        let eval_at = |points: &[Array<f64>]| -> f64 {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = points.iter().map(|a| tape.param(a.clone())).collect();
            let out = build(&mut tape, &ids);
            let loss = readout(&mut tape, out);
            tape.value(loss).scalar_value()
        };

        let h = 1e-5;
        for (which, base) in inputs.iter().enumerate() {
            let flat = base.data().to_vec();
            let fd = finite_difference(
                |x| {
                    let mut pts = inputs.to_vec();
                    pts[which] = Array::from_vec(base.shape().to_vec(), x.to_vec());
                    eval_at(&pts)
                },
                &flat,
                h,
            );
            for (j, (&a, &f)) in analytic[which].iter().zip(&fd).enumerate() {
                let rel = relative_error(f, a);
                assert!(
                    rel < 1e-4,
                    "input {which} elem {j}: analytic {a} vs fd {f} (rel {rel:.2e})"
                );
            }
        }
    }

    #[test]
    fn fd_matmul() {
        fd_check_op(
            &[
                Array::from_vec([3, 4], fill(12, -1.0, 1.0, 1)),
                Array::from_vec([4, 2], fill(8, -1.0, 1.0, 2)),
            ],
            |t, ids| t.matmul(ids[0], ids[1]).unwrap(),
        );
    }

    #[test]
    fn fd_transpose_add_sub_mul() {
        fd_check_op(
            &[
                Array::from_vec([2, 3], fill(6, -1.0, 1.0, 3)),
                Array::from_vec([3, 2], fill(6, -1.0, 1.0, 4)),
            ],
            |t, ids| {
                let xt = t.transpose(ids[0]).unwrap();
                let s = t.add(xt, ids[1]).unwrap();
                let d = t.sub(s, ids[1]).unwrap();
                t.mul(d, ids[1]).unwrap()
            },
        );
    }

    #[test]
    fn fd_add_rowvec_and_scale() {
        fd_check_op(
            &[
                Array::from_vec([3, 2], fill(6, -1.0, 1.0, 5)),
                Array::from_vec([2], fill(2, -1.0, 1.0, 6)),
            ],
            |t, ids| {
                let y = t.add_rowvec(ids[0], ids[1]).unwrap();
                t.scale_const(y, 1.7).unwrap()
            },
        );
    }

    #[test]
    fn fd_recip_on_positive_inputs() {
        fd_check_op(&[Array::from_vec([4], fill(4, 0.5, 2.0, 7))], |t, ids| {
            t.recip(ids[0]).unwrap()
        });
    }

    #[test]
    fn fd_sigmoid_gelu() {
        fd_check_op(&[Array::from_vec([5], fill(5, -2.0, 2.0, 8))], |t, ids| {
            let s = t.sigmoid(ids[0]).unwrap();
            t.gelu(s).unwrap()
        });
    }

    #[test]
    fn fd_relu_away_from_kink() {
        fd_check_op(&[Array::vector(vec![-1.5, -0.3, 0.4, 2.0])], |t, ids| {
            t.relu(ids[0]).unwrap()
        });
    }

    #[test]
    fn fd_softmax_both_axes() {
        fd_check_op(&[Array::from_vec([3, 4], fill(12, -2.0, 2.0, 9))], |t, ids| {
            t.softmax(ids[0], 1).unwrap()
        });
        fd_check_op(&[Array::from_vec([3, 4], fill(12, -2.0, 2.0, 10))], |t, ids| {
            t.softmax(ids[0], 0).unwrap()
        });
    }

    #[test]
    fn fd_layer_norm_all_inputs() {
        fd_check_op(
            &[
                Array::from_vec([3, 5], fill(15, -2.0, 2.0, 11)),
                Array::from_vec([5], fill(5, 0.5, 1.5, 12)),
                Array::from_vec([5], fill(5, -0.5, 0.5, 13)),
            ],
            |t, ids| t.layer_norm(ids[0], ids[1], ids[2]).unwrap(),
        );
    }

    #[test]
    fn fd_cross_entropy() {
        fd_check_op(&[Array::vector(vec![0.3, -1.2, 0.8])], |t, ids| {
            t.cross_entropy(ids[0], 2).unwrap()
        });
    }

    #[test]
    fn fd_reductions_and_shapes() {
        fd_check_op(&[Array::from_vec([2, 3], fill(6, -1.0, 1.0, 14))], |t, ids| {
            let m = t.mean(ids[0]).unwrap();
            let v = t.expand_scalar(m, 4).unwrap();
            t.sum(v).unwrap()
        });
        fd_check_op(
            &[
                Array::from_vec([2, 3], fill(6, -1.0, 1.0, 15)),
                Array::from_vec([1, 3], fill(3, -1.0, 1.0, 16)),
            ],
            |t, ids| {
                let cat = t.concat_rows(&[ids[0], ids[1]]).unwrap();
                let sl = t.slice_rows(cat, 1, 2).unwrap();
                t.reshape(sl, [6]).unwrap()
            },
        );
    }

    #[test]
    fn fd_broadcast_scale() {
        fd_check_op(
            &[
                Array::from_vec([4], fill(4, 0.1, 0.9, 17)),
                Array::from_vec([4, 3], fill(12, -1.0, 1.0, 18)),
            ],
            |t, ids| t.broadcast_scale(ids[0], ids[1]).unwrap(),
        );
    }
}
