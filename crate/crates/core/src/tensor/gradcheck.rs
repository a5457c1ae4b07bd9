//! Central finite-difference gradient checks in 64-bit.

use crate::error::Result;

use super::{Graph, Tensor, Var};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Relative error per input: `‖analytic − numeric‖∞ / max(‖numeric‖∞, ‖analytic‖∞, 1e-6)`.
    pub rel_errors: Vec<f64>,
    pub evaluations: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central
/// differences of step `h`.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let l = f(&mut g, &vars)?;
        g.value(l).item()
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut evaluations = 0;
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * h);
            evaluations += 2;
        }
        let n = Tensor::from_parts(a.shape().to_vec(), numeric);
        let scale = n.max_abs().max(a.max_abs()).max(1e-6);
        rel_errors.push(a.max_abs_diff(&n)? / scale);
    }
    Ok(GradCheckReport {
        rel_errors,
        evaluations,
    })
}
