use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Elements where both analytic and numeric magnitudes fall below this are
/// not compared.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// Outcome of a central-difference gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the reverse-mode gradient of a scalar function against central
/// differences at every element of `input`.
///
/// `f` receives a fresh graph and the input node and must return a scalar node.
pub fn grad_check<F>(f: F, input: &Tensor<f64>, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("grad_check eps must be > 0, got {eps}")));
    }
    let mut g = Graph::new();
    let x = g.param(input.clone());
    let y = f(&mut g, x)?;
    g.backward(y)?;
    let analytic: Vec<f64> = match g.grad(x) {
        Some(t) => t.data().to_vec(),
        None => vec![0.0; input.len()],
    };

    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(t);
        let y = f(&mut g, x)?;
        Ok(g.value(y).item())
    };

    let mut numeric = Vec::with_capacity(input.len());
    let mut max_rel_err = 0.0f64;
    let mut worst_index = None;
    let mut checked = 0;
    for i in 0..input.len() {
        let mut plus = input.clone();
        plus.data_mut()[i] += eps;
        let mut minus = input.clone();
        minus.data_mut()[i] -= eps;
        let n = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        numeric.push(n);
        let a = analytic[i];
        if a.abs() < GRAD_CHECK_FLOOR && n.abs() < GRAD_CHECK_FLOOR {
            continue;
        }
        checked += 1;
        let rel = (a - n).abs() / a.abs().max(n.abs());
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = Some(i);
        }
    }
    Ok(GradCheck {
        max_rel_err,
        worst_index,
        checked,
        analytic,
        numeric,
    })
}
