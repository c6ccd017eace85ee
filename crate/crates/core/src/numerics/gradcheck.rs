//! Central finite-difference verification of analytic gradients.

use super::tensor::{Parameter, Tensor};
use crate::error::{Error, Result};

/// A scalar objective over a set of named parameters.
pub trait Differentiable {
    fn loss(&self) -> Result<f64>;

    /// Zeroes gradient buffers, evaluates the loss and backpropagates into them.
    fn loss_and_grad(&mut self) -> Result<f64>;

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter));
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// Denominator floor so that near-zero gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn perturb<M: Differentiable + ?Sized>(model: &mut M, target: usize, idx: usize, delta: f64) {
    let mut k = 0;
    model.visit_params_mut(&mut |_, p| {
        if k == target {
            p.value.data_mut()[idx] += delta;
        }
        k += 1;
    });
}

/// Compares the analytic gradient of every trainable entry against central
/// differences with step `eps` and returns the worst relative error.
pub fn grad_check<M: Differentiable + ?Sized>(model: &mut M, eps: f64) -> Result<GradCheckReport> {
    let base = model.loss_and_grad()?;
    if !base.is_finite() {
        return Err(Error::NonFinite {
            op: "loss at base point".into(),
        });
    }
    let mut snapshot: Vec<(String, bool, Vec<f64>, Vec<f64>)> = Vec::new();
    model.visit_params_mut(&mut |name, p| {
        snapshot.push((
            name.to_string(),
            p.trainable,
            p.grad.data().to_vec(),
            p.value.data().to_vec(),
        ))
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    for (pi, (name, trainable, grad, _)) in snapshot.iter().enumerate() {
        if !trainable {
            continue;
        }
        for (idx, &analytic) in grad.iter().enumerate() {
            perturb(model, pi, idx, eps);
            let plus = model.loss();
            perturb(model, pi, idx, -2.0 * eps);
            let minus = model.loss();
            perturb(model, pi, idx, eps);
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("loss with {name}[{idx}] perturbed"),
                });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic, numeric);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), idx));
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    // restore exact values in case perturbation round-trips were inexact
    let mut k = 0;
    model.visit_params_mut(&mut |_, p| {
        p.value.data_mut().copy_from_slice(&snapshot[k].3);
        k += 1;
    });
    Ok(report)
}

/// Adapts a closure `params -> (loss, gradients)` into a [`Differentiable`].
pub struct FnObjective<F> {
    pub params: Vec<Parameter>,
    f: F,
}

impl<F> FnObjective<F>
where
    F: Fn(&[Tensor]) -> (f64, Vec<Tensor>),
{
    pub fn new(values: Vec<Tensor>, f: F) -> Self {
        FnObjective {
            params: values.into_iter().map(Parameter::new).collect(),
            f,
        }
    }

    fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }
}

impl<F> Differentiable for FnObjective<F>
where
    F: Fn(&[Tensor]) -> (f64, Vec<Tensor>),
{
    fn loss(&self) -> Result<f64> {
        Ok((self.f)(&self.values()).0)
    }

    fn loss_and_grad(&mut self) -> Result<f64> {
        let (l, grads) = (self.f)(&self.values());
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.zero_grad();
            p.accumulate(g.data());
        }
        Ok(l)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        for (i, p) in self.params.iter_mut().enumerate() {
            f(&format!("p{i}"), p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops;

    #[test]
    fn quadratic_at_three() {
        let mut obj = FnObjective::new(vec![Tensor::full(&[1], 3.0)], |v| {
            let x = v[0].data()[0];
            (x * x, vec![Tensor::full(&[1], 2.0 * x)])
        });
        let r = grad_check(&mut obj, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert!((r.analytic - 6.0).abs() < 1e-15);
    }

    #[test]
    fn linear_function_is_exact_to_roundoff() {
        let coeffs = [0.5, -2.0, 3.25];
        let mut obj = FnObjective::new(vec![Tensor::from_vec(&[3], vec![1.0, 2.0, -1.0]).unwrap()], |v| {
            let l = v[0].data().iter().zip(&coeffs).map(|(a, b)| a * b).sum();
            (l, vec![Tensor::from_vec(&[3], coeffs.to_vec()).unwrap()])
        });
        let r = grad_check(&mut obj, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.entries_checked, 3);
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut obj = FnObjective::new(vec![Tensor::full(&[1], 3.0)], |v| {
            let x = v[0].data()[0];
            (x * x, vec![Tensor::full(&[1], x)])
        });
        let r = grad_check(&mut obj, 1e-5).unwrap();
        assert!(r.max_rel_error > 0.4);
    }

    #[test]
    fn matmul_and_affine_backward_pass_check() {
        let a0 = Tensor::from_rows(&[vec![0.3, -0.7, 1.1], vec![0.2, 0.5, -0.4]]).unwrap();
        let b0 = Tensor::from_rows(&[vec![1.0, -0.5], vec![0.25, 0.75], vec![-1.5, 0.1]]).unwrap();
        let g = Tensor::from_rows(&[vec![0.9, -0.3], vec![0.4, 1.2]]).unwrap();
        let mut obj = FnObjective::new(vec![a0, b0], move |v| {
            let y = ops::matmul(&v[0], &v[1]).unwrap();
            let l = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let (da, db) = ops::matmul_backward(&v[0], &v[1], &g).unwrap();
            (l, vec![da, db])
        });
        assert!(grad_check(&mut obj, 1e-5).unwrap().max_rel_error < 1e-3);

        let x0 = Tensor::from_vec(&[2, 2, 2], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8]).unwrap();
        let w0 = Tensor::from_rows(&[vec![0.5, -1.0], vec![1.5, 0.2], vec![-0.3, 0.8]]).unwrap();
        let b0 = Tensor::from_vec(&[3], vec![0.1, 0.2, -0.1]).unwrap();
        let mut obj = FnObjective::new(vec![x0, w0, b0], |v| {
            let mut w = Parameter::new(v[1].clone());
            let mut b = Parameter::new(v[2].clone());
            let y = ops::affine_1x1(&v[0], &w, &b).unwrap();
            let l = y.data().iter().map(|t| t.sin()).sum();
            let dy = Tensor::from_vec(y.shape(), y.data().iter().map(|t| t.cos()).collect()).unwrap();
            let dx = ops::affine_1x1_backward(&v[0], &mut w, &mut b, &dy);
            (l, vec![dx, w.grad, b.grad])
        });
        assert!(grad_check(&mut obj, 1e-5).unwrap().max_rel_error < 1e-3);
    }
}
