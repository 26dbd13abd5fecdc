use super::tensor::{shape_err, NnError, Tensor};

pub const PROB_FLOOR: f64 = 1e-12;

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row-wise softmax of a `[N, C]` or `[C]` tensor.
pub fn softmax_tensor(logits: &Tensor) -> Result<Tensor, NnError> {
    let c = match *logits.shape() {
        [c] | [_, c] => c,
        _ => return shape_err(format!("softmax expects 1-D or 2-D, got {:?}", logits.shape())),
    };
    let data = logits.data().chunks(c).flat_map(softmax).collect();
    Tensor::new(logits.shape().to_vec(), data)
}

fn single_loss(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(PROB_FLOOR).ln()
}

/// Batch-mean cross-entropy between `[N, C]` probabilities and one-hot targets.
pub fn cross_entropy(probs: &Tensor, one_hot: &Tensor) -> Result<f64, NnError> {
    if probs.shape() != one_hot.shape() {
        return shape_err(format!(
            "probabilities {:?} vs targets {:?}",
            probs.shape(),
            one_hot.shape()
        ));
    }
    let c = *probs.shape().last().expect("non-empty shape");
    let rows = probs.len() / c;
    let mut total = 0.0;
    for (p, y) in probs.data().chunks(c).zip(one_hot.data().chunks(c)) {
        let hot: Vec<usize> = (0..c).filter(|&i| y[i] == 1.0).collect();
        if hot.len() != 1 || y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return shape_err("target row is not one-hot");
        }
        total += single_loss(p, hot[0]);
    }
    Ok(total / rows as f64)
}

/// Cross-entropy of one example given its class index.
pub fn cross_entropy_label(probs: &[f64], label: usize) -> f64 {
    single_loss(probs, label)
}

/// Gradient of softmax + cross-entropy with respect to the logits.
pub fn softmax_ce_grad(probs: &[f64], label: usize) -> Vec<f64> {
    let mut g = probs.to_vec();
    g[label] -= 1.0;
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_softmax() {
        let p = softmax(&[0.0, 0.0, 0.0]);
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn large_logits_are_stable() {
        let p = softmax(&[1000.0, 999.0, -1000.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_has_no_loss() {
        let p = Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let y = Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        assert!(cross_entropy(&p, &y).unwrap() <= 1e-11);
    }

    #[test]
    fn uniform_loss_is_ln3() {
        let p = Tensor::new(vec![1, 3], vec![1.0 / 3.0; 3]).unwrap();
        let y = Tensor::new(vec![1, 3], vec![0.0, 0.0, 1.0]).unwrap();
        assert!((cross_entropy(&p, &y).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn batch_loss_is_mean() {
        let rows = [[0.7, 0.2, 0.1], [0.1, 0.3, 0.6]];
        let p = Tensor::new(vec![2, 3], rows.concat()).unwrap();
        let y = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let want = (-(0.7f64).ln() - (0.3f64).ln()) / 2.0;
        assert!((cross_entropy(&p, &y).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_targets() {
        let p = Tensor::new(vec![1, 3], vec![1.0 / 3.0; 3]).unwrap();
        let two_hot = Tensor::new(vec![1, 3], vec![1.0, 1.0, 0.0]).unwrap();
        assert!(cross_entropy(&p, &two_hot).is_err());
        let short = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert!(cross_entropy(&p, &short).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(z in proptest::collection::vec(-50.0f64..50.0, 1..8)) {
            let p = softmax(&z);
            prop_assert!(p.iter().all(|&v| v > 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn batch_equals_mean_of_singles(rows in proptest::collection::vec((proptest::collection::vec(-5.0f64..5.0, 3), 0usize..3), 1..6)) {
            let n = rows.len();
            let mut pd = Vec::new();
            let mut yd = Vec::new();
            let mut singles = 0.0;
            for (z, label) in &rows {
                let p = softmax(z);
                singles += cross_entropy_label(&p, *label);
                pd.extend(p);
                let mut y = vec![0.0; 3];
                y[*label] = 1.0;
                yd.extend(y);
            }
            let batch = cross_entropy(&Tensor::new(vec![n, 3], pd).unwrap(), &Tensor::new(vec![n, 3], yd).unwrap()).unwrap();
            prop_assert!((batch - singles / n as f64).abs() < 1e-12);
        }
    }
}
