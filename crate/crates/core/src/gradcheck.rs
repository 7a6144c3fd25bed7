//! Central finite-difference gradient checking.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so that near-zero gradients are
/// compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub h: f64,
    pub tol: f64,
    /// Negative-control hook: adds 1.0 to the first analytic gradient entry.
    pub corrupt_analytic: bool,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { h: 1e-5, tol: 1e-4, corrupt_analytic: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

impl GradCheck {
    /// Compares tape gradients of the scalar `f` against
    /// `(f(θ+h) − f(θ−h)) / 2h` for every entry of every named parameter.
    pub fn run<F>(&self, f: F, params: &[(&str, Tensor)]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        if self.h <= 0.0 {
            return Err(Error::Argument(format!("finite-difference step must be positive, got {}", self.h)));
        }
        let values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
        let eval = |vals: &[Tensor]| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
            let out = f(&mut tape, &vars)?;
            Ok(tape.value(out).item())
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let base = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        if eval(&values)?.to_bits() != base.to_bits() {
            return Err(Error::Contract("function is not deterministic across evaluations".into()));
        }

        let mut reports = Vec::with_capacity(params.len());
        let mut perturbed = values.clone();
        for (p, (name, _)) in params.iter().enumerate() {
            let mut analytic = grads.get(vars[p]);
            if self.corrupt_analytic && p == 0 {
                analytic.data_mut()[0] += 1.0;
            }
            let mut worst = (0.0_f64, 0usize);
            for k in 0..values[p].len() {
                let orig = values[p].data()[k];
                perturbed[p].data_mut()[k] = orig + self.h;
                let plus = eval(&perturbed)?;
                perturbed[p].data_mut()[k] = orig - self.h;
                let minus = eval(&perturbed)?;
                perturbed[p].data_mut()[k] = orig;
                let numeric = (plus - minus) / (2.0 * self.h);
                let err = relative_error(analytic.data()[k], numeric);
                if err > worst.0 || err.is_nan() {
                    worst = (err, k);
                }
            }
            reports.push(ParamCheck { name: String::from(*name), max_rel_err: worst.0, worst_index: worst.1 });
        }
        let max_rel_err = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
        Ok(GradCheckReport { params: reports, max_rel_err, tol: self.tol, passed: max_rel_err <= self.tol })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn quadratic_bowl_is_exact() {
        let x = Tensor::matrix(2, 3, vec![0.3, -1.2, 2.0, 0.7, 0.0, -0.4]).unwrap();
        let report = GradCheck::default()
            .run(
                |tape, v| {
                    let sq = tape.mul(v[0], v[0])?;
                    tape.sum(sq)
                },
                &[("x", x)],
            )
            .unwrap();
        assert!(report.passed);
        assert!(report.max_rel_err < 1e-8, "{}", report.max_rel_err);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let x = Tensor::row(&[1.0, 2.0]);
        let check = GradCheck { corrupt_analytic: true, ..GradCheck::default() };
        let report = check
            .run(
                |tape, v| {
                    let sq = tape.mul(v[0], v[0])?;
                    tape.sum(sq)
                },
                &[("x", x)],
            )
            .unwrap();
        assert!(!report.passed);
        assert_eq!(report.worst().unwrap().name, "x");
    }

    #[test]
    fn rejects_non_positive_step() {
        let check = GradCheck { h: 0.0, ..GradCheck::default() };
        assert!(check.run(|tape, v| tape.sum(v[0]), &[("x", Tensor::scalar(1.0))]).is_err());
    }
}
