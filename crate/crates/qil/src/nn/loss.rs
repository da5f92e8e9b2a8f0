//! Task losses: softmax cross-entropy on labels and logit MSE for
//! distillation.

use crate::error::{QilError, Result};
use crate::tensor::Tensor;

/// Mean cross-entropy over the batch plus the logit gradient
/// `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(QilError::ShapeMismatch(format!(
            "logits {:?} vs {} labels",
            shape,
            labels.len()
        )));
    }
    let (n, classes) = (shape[0], shape[1]);
    for &l in labels {
        if l >= classes {
            return Err(QilError::LabelOutOfRange {
                label: l,
                num_classes: classes,
            });
        }
    }
    let mut grad = Tensor::zeros(&[n, classes]);
    let mut loss = 0.0;
    let ld = logits.data();
    let gd = grad.data_mut();
    for i in 0..n {
        let row = &ld[i * classes..(i + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln() + max;
        loss += log_denom - row[labels[i]];
        for j in 0..classes {
            let p = (row[j] - log_denom).exp();
            gd[i * classes + j] = (p - if j == labels[i] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Mean squared difference between student and teacher logits with its
/// gradient w.r.t. the student.
pub fn mse_logits(student: &Tensor, teacher: &Tensor) -> Result<(f64, Tensor)> {
    if !student.same_shape(teacher) {
        return Err(QilError::ShapeMismatch(format!(
            "student {:?} vs teacher {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    let n = student.len() as f64;
    let mut grad = Tensor::zeros(student.shape());
    let mut loss = 0.0;
    for ((g, &s), &t) in grad
        .data_mut()
        .iter_mut()
        .zip(student.data())
        .zip(teacher.data())
    {
        let d = s - t;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}
