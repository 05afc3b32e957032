//! Central finite-difference gradient checking.
//!
//! For every checked element the analytic gradient `a` from [`Graph::backward`]
//! is compared with `n = (f(x + h) − f(x − h)) / 2h`. The relative error is
//! `|a − n| / max(|a|, |n|, floor)`; `floor` keeps elements whose true
//! gradient is zero from amplifying rounding noise.

use std::fmt;

use super::graph::{Graph, Var};
use super::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElementCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct InputReport {
    pub checks: Vec<ElementCheck>,
}

impl InputReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tolerance: f64,
    /// Set when the function under test failed to evaluate.
    pub error: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.inputs.iter().all(InputReport::passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.inputs
            .iter()
            .map(InputReport::max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn elements_checked(&self) -> usize {
        self.inputs.iter().map(|r| r.checks.len()).sum()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(e) = &self.error {
            return write!(f, "error: {e}");
        }
        write!(
            f,
            "{} elements, max rel. error {:.3e} (tolerance {:.0e})",
            self.elements_checked(),
            self.max_rel_error(),
            self.tolerance
        )?;
        for (i, r) in self.inputs.iter().enumerate() {
            if let Some(worst) = r
                .checks
                .iter()
                .filter(|c| !c.passed)
                .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
            {
                write!(
                    f,
                    "; input {i} element {}: analytic {:.6e} vs numeric {:.6e}",
                    worst.index, worst.analytic, worst.numeric
                )?;
            }
        }
        Ok(())
    }
}

impl GradCheck {
    pub fn with_tolerance(tolerance: f64) -> Self {
        GradCheck {
            tolerance,
            ..Self::default()
        }
    }

    pub fn rel_error(&self, analytic: f64, numeric: f64) -> f64 {
        let scale = analytic.abs().max(numeric.abs()).max(self.floor);
        (analytic - numeric).abs() / scale
    }

    /// Checks every element of every input.
    pub fn run<F>(&self, f: F, inputs: &[Tensor]) -> GradCheckReport
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let all: Vec<(usize, usize)> = inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.numel()).map(move |e| (i, e)))
            .collect();
        self.run_sampled(f, inputs, &all)
    }

    /// Checks only the listed `(input, element)` pairs.
    pub fn run_sampled<F>(&self, f: F, inputs: &[Tensor], elements: &[(usize, usize)]) -> GradCheckReport
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut report = GradCheckReport {
            inputs: vec![InputReport::default(); inputs.len()],
            tolerance: self.tolerance,
            error: None,
        };
        let analytic = match analytic_grads(&f, inputs) {
            Ok(a) => a,
            Err(e) => {
                report.error = Some(e.to_string());
                return report;
            }
        };
        let mut work: Vec<Tensor> = inputs.to_vec();
        for &(i, e) in elements {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + self.step;
            let plus = eval(&f, &work);
            work[i].data_mut()[e] = orig - self.step;
            let minus = eval(&f, &work);
            work[i].data_mut()[e] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(err), _) | (_, Err(err)) => {
                    report.error = Some(err.to_string());
                    return report;
                }
            };
            let numeric = (plus - minus) / (2.0 * self.step);
            let a = analytic[i][e];
            let rel_error = self.rel_error(a, numeric);
            report.inputs[i].checks.push(ElementCheck {
                index: e,
                analytic: a,
                numeric,
                rel_error,
                passed: rel_error < self.tolerance && a.is_finite(),
            });
        }
        report
    }
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

fn analytic_grads<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars.iter().map(|&v| g.grad_or_zeros(v)).collect())
}
