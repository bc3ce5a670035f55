use crate::error::Result;

use super::{Tensor, TwoStreamNet};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub n_checked: usize,
    /// (parameter index, element index) of the worst element.
    pub worst: (usize, usize),
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compares backprop gradients with central differences for every
/// parameter element. Relative error is `|ga − gn| / max(|ga|, |gn|, 1e-8)`.
pub fn grad_check(
    net: &TwoStreamNet<f64>,
    u: &Tensor<f64>,
    m: &Tensor<f64>,
    labels: &[u8],
    eps: f64,
) -> Result<GradCheckReport> {
    let mut work = net.clone();
    work.loss_and_backward(u.clone(), m.clone(), labels)?;
    let analytic: Vec<Vec<f64>> = work.params().iter().map(|p| p.grad.clone()).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        n_checked: 0,
        worst: (0, 0),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for (pi, grads) in analytic.iter().enumerate() {
        for (j, &ga) in grads.iter().enumerate() {
            let orig = work.params()[pi].value[j];
            work.params_mut()[pi].value[j] = orig + eps;
            let lp = work.train_loss(u.clone(), m.clone(), labels)?;
            work.params_mut()[pi].value[j] = orig - eps;
            let lm = work.train_loss(u.clone(), m.clone(), labels)?;
            work.params_mut()[pi].value[j] = orig;
            let gn = (lp - lm) / (2.0 * eps);
            let rel = (ga - gn).abs() / ga.abs().max(gn.abs()).max(1e-8);
            report.n_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, j);
                report.worst_analytic = ga;
                report.worst_numeric = gn;
            }
        }
    }
    Ok(report)
}
