//! Central-difference gradient verification.

use super::graph::{Graph, Var};
use super::param::Parameterized;
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

fn eval_scalar<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.input(x.clone())?;
    let out = f(&mut g, v)?;
    finite_scalar(&g, out)
}

fn finite_scalar(g: &Graph<f64>, out: Var) -> Result<f64> {
    if g.value(out).len() != 1 {
        return Err(shape_err("grad_check", format!("function must return a scalar, got {:?}", g.shape(out))));
    }
    let y = g.scalar(out);
    if !y.is_finite() {
        return Err(Error::NonFinite { op: "grad_check", node: out.index() });
    }
    Ok(y)
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Max over coordinates of |analytic − central difference| / max(1, |central difference|)
/// for a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.leaf(x.clone())?;
    let out = f(&mut g, v)?;
    finite_scalar(&g, out)?;
    let grads = g.backward(out)?;
    let zeros = Tensor::zeros(x.shape());
    let analytic = grads.wrt(v).unwrap_or(&zeros);

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Same metric as [`grad_check`], taken over every parameter scalar of `model`.
pub fn grad_check_params<M, F>(model: &mut M, f: F, h: f64) -> Result<f64>
where
    M: Parameterized<f64>,
    F: Fn(&M, &mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(model, &mut g)?;
    finite_scalar(&g, out)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = model
        .named_params()
        .iter()
        .map(|(_, p)| grads.param(p).cloned().unwrap_or_else(|| Tensor::zeros(p.value().shape())))
        .collect();
    drop(g);

    let eval = |m: &M| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(m, &mut g)?;
        finite_scalar(&g, out)
    };

    let mut worst = 0.0f64;
    let count = analytic.len();
    for (pi, grad) in analytic.iter().enumerate().take(count) {
        for i in 0..grad.len() {
            let orig = model.params_mut()[pi].value().data()[i];
            model.params_mut()[pi].value_mut().data_mut()[i] = orig + h;
            let plus = eval(model)?;
            model.params_mut()[pi].value_mut().data_mut()[i] = orig - h;
            let minus = eval(model)?;
            model.params_mut()[pi].value_mut().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_err(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}
