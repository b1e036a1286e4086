//! Logit-mimic plus cross-entropy objective used while fine-tuning a
//! pruned student against its teacher.
//!
//! ```text
//! loss = α·‖l_T − l_S‖₂² + Σ_i −p_i log q_i,    q = softmax(l_S)
//! ```
//!
//! Both terms are averaged over the samples of a batch. Labels are class
//! indices, i.e. the one-hot `p` is implicit.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Borrowed `[batch × classes]` logits for one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct DistillLossInputs<'a, F> {
    pub teacher: &'a [F],
    pub student: &'a [F],
    pub labels: &'a [usize],
    pub classes: usize,
    pub alpha: F,
}

impl<F: Float> DistillLossInputs<'_, F> {
    fn check(&self) -> Result<usize> {
        let batch = self.labels.len();
        if self.classes == 0 || batch == 0 {
            return Err(Error::InvalidArgument("empty logits".into()));
        }
        if self.student.len() != batch * self.classes || self.teacher.len() != self.student.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![batch, self.classes],
                got: vec![self.teacher.len(), self.student.len()],
            });
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range")));
        }
        let finite = |s: &[F]| s.iter().all(|v| v.is_finite());
        if !finite(self.teacher) || !finite(self.student) || !self.alpha.is_finite() {
            return Err(Error::NonFinite("mimic_ce_loss"));
        }
        if self.alpha < F::zero() {
            return Err(Error::InvalidArgument("alpha must be non-negative".into()));
        }
        Ok(batch)
    }
}

fn log_sum_exp<F: Float>(row: &[F]) -> F {
    let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
    max + row.iter().map(|&v| (v - max).exp()).fold(F::zero(), |a, b| a + b).ln()
}

/// Mean over the batch of `α‖l_T − l_S‖² − log softmax(l_S)[label]`.
pub fn mimic_ce_loss<F: Float>(inputs: &DistillLossInputs<'_, F>) -> Result<F> {
    let batch = inputs.check()?;
    let c = inputs.classes;
    let mut total = F::zero();
    for (b, &label) in inputs.labels.iter().enumerate() {
        let s = &inputs.student[b * c..(b + 1) * c];
        let t = &inputs.teacher[b * c..(b + 1) * c];
        let mimic = s.iter().zip(t).map(|(&s, &t)| (t - s) * (t - s)).fold(F::zero(), |a, b| a + b);
        let ce = log_sum_exp(s) - s[label];
        total = total + inputs.alpha * mimic + ce;
    }
    Ok(total / F::from(batch).expect("batch fits in F"))
}

/// Gradient of [`mimic_ce_loss`] with respect to the student logits:
/// `(2α(l_S − l_T) + q − p) / batch`.
pub fn mimic_ce_grad<F: Float>(inputs: &DistillLossInputs<'_, F>) -> Result<Vec<F>> {
    let batch = inputs.check()?;
    let c = inputs.classes;
    let scale = F::one() / F::from(batch).expect("batch fits in F");
    let two = F::one() + F::one();
    let mut grad = Vec::with_capacity(inputs.student.len());
    for (b, &label) in inputs.labels.iter().enumerate() {
        let s = &inputs.student[b * c..(b + 1) * c];
        let t = &inputs.teacher[b * c..(b + 1) * c];
        let lse = log_sum_exp(s);
        for j in 0..c {
            let q = (s[j] - lse).exp();
            let p = if j == label { F::one() } else { F::zero() };
            grad.push(scale * (two * inputs.alpha * (s[j] - t[j]) + q - p));
        }
    }
    Ok(grad)
}

/// Loss and logit gradient for `f32` tensors, accumulated in `f64`.
pub fn mimic_ce_with_grad(teacher: &Tensor, student: &Tensor, labels: &[usize], alpha: f64) -> Result<(f64, Tensor)> {
    if teacher.shape() != student.shape() {
        return Err(Error::ShapeMismatch {
            expected: student.shape().to_vec(),
            got: teacher.shape().to_vec(),
        });
    }
    let (_, classes) = student.dims2();
    let t: Vec<f64> = teacher.data().iter().map(|&v| v as f64).collect();
    let s: Vec<f64> = student.data().iter().map(|&v| v as f64).collect();
    let inputs = DistillLossInputs {
        teacher: &t,
        student: &s,
        labels,
        classes,
        alpha,
    };
    let loss = mimic_ce_loss(&inputs)?;
    let grad = mimic_ce_grad(&inputs)?.into_iter().map(|g| g as f32).collect();
    Ok((loss, Tensor::from_vec(student.shape(), grad)?))
}

/// Plain cross-entropy (the mimic term switched off).
pub fn cross_entropy_with_grad(student: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    mimic_ce_with_grad(student, student, labels, 0.0)
}
