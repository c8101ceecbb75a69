use super::tensor::{mse, mse_with_grad, Tensor3};
use super::{NetError, Network};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
    /// The floor keeps structurally zero gradients (a conv bias feeding batch
    /// norm) from turning finite-difference roundoff into a relative error.
    pub max_rel_error: f64,
    /// Parameters compared.
    pub checked: usize,
    /// Parameters whose perturbation flipped a ReLU, where central
    /// differences straddle a kink and are not a valid reference.
    pub skipped_kinks: usize,
}

const REL_FLOOR: f64 = 1e-6;

/// Compare analytic gradients of the training-mode reconstruction MSE
/// against central finite differences, for every learnable scalar.
pub fn grad_check(net: &Network, batch: &Tensor3, epsilon: f64) -> Result<GradCheckReport, NetError> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(NetError::InvalidConfig(format!(
            "epsilon {epsilon} outside (0, 1e-2]"
        )));
    }
    let (out, tape) = net.forward_train(batch)?;
    let (_, grad_out) = mse_with_grad(&out, batch);
    let analytic = net.backward(&tape, &grad_out);
    let base_pattern = Network::activation_pattern(&tape);

    let mut probe = net.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    let shapes: Vec<usize> = net.param_tensors().iter().map(|(_, t)| t.len()).collect();
    for (ti, &len) in shapes.iter().enumerate() {
        for k in 0..len {
            let original = net.param_tensors()[ti].1[k];
            let mut eval_at = |value: f64| -> Result<(f64, Vec<bool>), NetError> {
                probe.param_tensors_mut()[ti].1[k] = value;
                let (y, t) = probe.forward_train(batch)?;
                Ok((mse(&y, batch), Network::activation_pattern(&t)))
            };
            let (plus, pat_plus) = eval_at(original + epsilon)?;
            let (minus, pat_minus) = eval_at(original - epsilon)?;
            probe.param_tensors_mut()[ti].1[k] = original;
            if pat_plus != base_pattern || pat_minus != base_pattern {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.tensors[ti][k];
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            let rel = (a - numeric).abs() / denom;
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
