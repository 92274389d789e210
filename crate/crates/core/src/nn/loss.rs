use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Row-wise softmax with the max-shift trick.
pub fn softmax(logits: &Tensor) -> Tensor {
    let k = logits.shape[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data.chunks(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / sum));
    }
    Tensor::new(logits.shape.clone(), out)
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub probs: Tensor,
    /// Gradient of `loss` with respect to the logits.
    pub grad: Tensor,
}

/// Weighted mean cross-entropy over the batch:
/// `sum_i w[y_i] * CE_i / sum_i w[y_i]` (plain mean without weights).
pub fn softmax_cross_entropy(
    logits: &Tensor,
    targets: &[usize],
    class_weights: Option<&[f64]>,
) -> Result<LossOutput> {
    if logits.shape.len() != 2 || logits.shape[0] != targets.len() {
        return Err(Error::Shape(format!(
            "logits {:?} do not match {} targets",
            logits.shape,
            targets.len()
        )));
    }
    let k = logits.shape[1];
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::InvalidInput(format!(
            "class index {bad} out of range for {k} classes"
        )));
    }
    if let Some(w) = class_weights {
        if w.len() != k {
            return Err(Error::Shape(format!(
                "{} class weights for {k} classes",
                w.len()
            )));
        }
    }
    let weight = |t: usize| class_weights.map_or(1.0, |w| w[t]);
    let total_w: f64 = targets.iter().map(|&t| weight(t)).sum();
    if total_w.is_nan() || total_w <= 0.0 {
        return Err(Error::InvalidInput(
            "class weights sum to zero over the batch".into(),
        ));
    }
    let probs = softmax(logits);
    let mut loss = 0.0;
    let mut grad = probs.data.clone();
    for (i, &t) in targets.iter().enumerate() {
        let row = &logits.data[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let w = weight(t) / total_w;
        loss += w * (lse - row[t]);
        grad[i * k + t] -= 1.0;
        for g in &mut grad[i * k..(i + 1) * k] {
            *g *= w;
        }
    }
    Ok(LossOutput {
        loss,
        probs,
        grad: Tensor::new(logits.shape.clone(), grad),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits() {
        let out =
            softmax_cross_entropy(&Tensor::new(vec![1, 2], vec![0.0, 0.0]), &[0], None).unwrap();
        assert_eq!(out.probs.data, vec![0.5, 0.5]);
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn huge_logits_are_stable() {
        let out =
            softmax_cross_entropy(&Tensor::new(vec![1, 2], vec![1000.0, 0.0]), &[1], None).unwrap();
        assert!(out.probs.all_finite() && out.grad.all_finite());
        assert!((out.probs.data[0] - 1.0).abs() < 1e-15);
        assert!((out.loss - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn rows_sum_to_one() {
        let p = softmax(&Tensor::new(
            vec![2, 3],
            vec![0.3, -2.0, 5.0, 1.0, 1.0, -700.0],
        ));
        for row in p.data.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn bad_target() {
        assert!(
            softmax_cross_entropy(&Tensor::new(vec![1, 2], vec![0.0, 0.0]), &[2], None).is_err()
        );
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let logits = Tensor::new(vec![3, 2], vec![0.2, -0.4, 1.5, 0.3, -0.7, -0.1]);
        let targets = [0, 1, 1];
        let w = [0.8, 1.4];
        let out = softmax_cross_entropy(&logits, &targets, Some(&w)).unwrap();
        let h = 1e-6;
        for i in 0..logits.len() {
            let mut plus = logits.clone();
            plus.data[i] += h;
            let mut minus = logits.clone();
            minus.data[i] -= h;
            let fd = (softmax_cross_entropy(&plus, &targets, Some(&w))
                .unwrap()
                .loss
                - softmax_cross_entropy(&minus, &targets, Some(&w))
                    .unwrap()
                    .loss)
                / (2.0 * h);
            assert!((fd - out.grad.data[i]).abs() < 1e-8);
        }
    }
}
