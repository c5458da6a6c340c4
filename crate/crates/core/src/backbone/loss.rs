use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{log_softmax, Matrix};
use crate::tokenizer::TokenId;

/// Mean token-level negative log-likelihood over the non-padding positions,
/// together with its gradient w.r.t. the logits.
pub fn nll_loss<T: Scalar>(
    logits: &Matrix<T>,
    targets: &[TokenId],
    valid: Option<&[bool]>,
) -> Result<(f64, Matrix<T>)> {
    if logits.rows() != targets.len() {
        return Err(Error::Invalid(format!(
            "{} logit rows for {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    if let Some(v) = valid {
        if v.len() != targets.len() {
            return Err(Error::Invalid("target mask length differs from targets".into()));
        }
    }
    let keep = |t: usize| valid.is_none_or(|v| v[t]);
    let count = (0..targets.len()).filter(|&t| keep(t)).count();
    if count == 0 {
        return Err(Error::Invalid("target is entirely padding".into()));
    }
    let scale = 1.0 / count as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (t, &target) in targets.iter().enumerate() {
        if !keep(t) {
            continue;
        }
        let target = target as usize;
        if target >= logits.cols() {
            return Err(Error::Invalid(format!("target id {target} outside vocabulary")));
        }
        let row: Vec<f64> = logits.row(t).iter().map(|v| v.widen()).collect();
        let lp = log_softmax(&row);
        total -= lp[target];
        for (c, g) in grad.row_mut(t).iter_mut().enumerate() {
            let p = lp[c].exp();
            let y = if c == target { 1.0 } else { 0.0 };
            *g = T::narrow((p - y) * scale);
        }
    }
    Ok((total * scale, grad))
}
