//! Central-difference verification of tape gradients.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::math::abs;
use crate::params::{Bound, ParamSet};
use crate::tensor::Tensor;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = abs(analytic).max(abs(numeric)).max(1e-8);
    abs(analytic - numeric) / denom
}

fn finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NumericDomain(alloc::format!("{what} evaluated to {value}")))
    }
}

/// Largest relative disagreement between the tape gradient of `f` at `x` and
/// its central difference with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape<'_>, Var) -> Result<Var>,
{
    let eval = |point: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.leaf(point);
        let out = f(&tape, v)?;
        finite(tape.item(out), "perturbed point")
    };

    let tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&tape, v)?;
    finite(tape.item(out), "base point")?;
    let analytic = tape.backward(out)?.wrt(v);

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Outcome of [`grad_check_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub max_relative_error: f64,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    pub entries: Vec<Coordinate>,
}

/// Both derivative estimates for one parameter coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Coordinate {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Coordinate {
    pub fn relative_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }

    pub fn magnitude(&self) -> f64 {
        abs(self.analytic).max(abs(self.numeric))
    }
}

impl ParamCheck {
    /// Largest relative error among coordinates whose gradient magnitude is
    /// at least `floor`, and largest absolute error among the rest.
    pub fn split_at(&self, floor: f64) -> (f64, f64) {
        let (mut rel, mut absolute) = (0.0f64, 0.0f64);
        for c in &self.entries {
            if c.magnitude() >= floor {
                rel = rel.max(c.relative_error());
            } else {
                absolute = absolute.max(abs(c.analytic - c.numeric));
            }
        }
        (rel, absolute)
    }
}

/// Gradient check of a loss over every coordinate of every parameter in `params`.
pub fn grad_check_params<F>(params: &ParamSet, f: F, eps: f64) -> Result<ParamCheck>
where
    F: for<'t, 'p> Fn(&Bound<'t, 'p>) -> Result<Var>,
{
    let eval = |p: &ParamSet| -> Result<f64> {
        let tape = Tape::new();
        let bound = Bound::new(&tape, p);
        let out = f(&bound)?;
        finite(tape.item(out), "perturbed point")
    };

    let tape = Tape::new();
    let bound = Bound::new(&tape, params);
    let out = f(&bound)?;
    finite(tape.item(out), "base point")?;
    let grads = bound.gradients(&tape.backward(out)?);

    let mut report = ParamCheck { max_relative_error: 0.0, worst: None, coordinates: 0, entries: Vec::new() };
    let names: Vec<String> = params.names().map(ToString::to_string).collect();
    let mut work = params.clone();
    for name in &names {
        let n = params.get(name).map_or(0, Tensor::numel);
        for i in 0..n {
            let original = params.get(name).unwrap().data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = original + eps;
            let up = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = original - eps;
            let down = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = original;

            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.get(name).map_or(0.0, |g| g.data()[i]);
            let err = relative_error(analytic, numeric);
            report.coordinates += 1;
            report.entries.push(Coordinate { name: name.clone(), index: i, analytic, numeric });
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn quadratic_is_exact() {
        let err = grad_check(|t, x| Ok(t.mul(x, x)), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err =
            grad_check(|t, _x| Ok(t.constant(Tensor::scalar(4.2))), &Tensor::vector(vec![1.0, -2.0]), 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_evaluation_is_reported() {
        let r = grad_check(
            |t, x| {
                let y = t.affine(x, 1.0, 0.0);
                let s = t.sum(y);
                Ok(t.affine(s, f64::INFINITY, 0.0))
            },
            &Tensor::scalar(1.0),
            1e-5,
        );
        assert!(matches!(r, Err(Error::NumericDomain(_))));
    }

    #[test]
    fn params_check_covers_every_coordinate() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::vector(vec![0.3, -0.7]));
        p.insert("b", Tensor::vector(vec![1.1, 0.2]));
        let report = grad_check_params(
            &p,
            |b| {
                let t = b.tape();
                let m = t.mul(b.get("a"), b.get("b"));
                let s = t.tanh(m);
                Ok(t.sum(s))
            },
            1e-5,
        )
        .unwrap();
        assert_eq!(report.coordinates, 4);
        assert!(report.max_relative_error < 1e-6);
    }
}
