use crate::error::{Error, Result};

/// Probabilities are clamped to this before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

/// Row-wise softmax of `logits / temperature`.
pub fn softmax_rows(logits: &[f64], classes: usize, temperature: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut sum = 0.0;
        for &z in row {
            let e = ((z - max) / temperature).exp();
            sum += e;
            out.push(e);
        }
        for p in &mut out[start..] {
            *p /= sum;
        }
    }
    out
}

/// Row-wise log-softmax of `logits / temperature`.
pub fn log_softmax_rows(logits: &[f64], classes: usize, temperature: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row
            .iter()
            .map(|&z| ((z - max) / temperature).exp())
            .sum::<f64>()
            .ln();
        out.extend(row.iter().map(|&z| (z - max) / temperature - lse));
    }
    out
}

/// Mean of `-ln p(label)` over rows.
pub fn cross_entropy(probs: &[f64], classes: usize, labels: &[usize]) -> Result<f64> {
    if classes == 0 || probs.len() != labels.len() * classes {
        return Err(Error::DimensionMismatch {
            location: "cross_entropy".into(),
            expected: labels.len() * classes,
            found: probs.len(),
        });
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (row, &y) in probs.chunks(classes).zip(labels) {
        if y >= classes {
            return Err(Error::param(format!("label {y} out of range for {classes} classes")));
        }
        total -= row[y].max(LOG_CLAMP).ln();
    }
    Ok(total / labels.len() as f64)
}

/// `T^2 * KL(teacher_T || student_T)`, averaged over rows. The teacher
/// probabilities must already be softened at `temperature`.
pub fn kd_loss(
    student_logits: &[f64],
    teacher_probs: &[f64],
    classes: usize,
    temperature: f64,
) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::param(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if classes == 0 || student_logits.len() != teacher_probs.len() || student_logits.len() % classes != 0
    {
        return Err(Error::DimensionMismatch {
            location: "kd_loss".into(),
            expected: teacher_probs.len(),
            found: student_logits.len(),
        });
    }
    let rows = student_logits.len() / classes;
    if rows == 0 {
        return Ok(0.0);
    }
    let log_student = log_softmax_rows(student_logits, classes, temperature);
    let mut total = 0.0;
    for (t, ls) in teacher_probs.iter().zip(&log_student) {
        if *t > 0.0 {
            total += t * (t.ln() - ls);
        }
    }
    Ok(temperature * temperature * total / rows as f64)
}
