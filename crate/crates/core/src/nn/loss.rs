use super::attention::{matmul, matmul_at, matmul_bt};
use super::Tensor;
use crate::{Error, Result};

/// Affine map over batch-last features: `x` `[d, N]`, `w` `[out, d]`,
/// `b` `[out]` → `[out, N]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (d, n, out) = linear_dims(x, w, b)?;
    let mut y = matmul(w.data(), x.data(), out, d, n);
    for o in 0..out {
        for v in &mut y[o * n..(o + 1) * n] {
            *v += b.data()[o];
        }
    }
    Ok(Tensor::from_parts(vec![out, n], y))
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let [d, n] = match *x.shape() {
        [d, n] => [d, n],
        _ => return Err(Error::shape("linear_backward", &[0, 0], x.shape())),
    };
    let out = w.shape()[0];
    if dy.shape() != [out, n] {
        return Err(Error::shape("linear_backward", &[out, n], dy.shape()));
    }
    let dx = matmul_at(w.data(), dy.data(), out, d, n);
    let dw = matmul_bt(dy.data(), x.data(), out, n, d);
    let db = (0..out)
        .map(|o| dy.data()[o * n..(o + 1) * n].iter().sum())
        .collect();
    Ok((
        Tensor::from_parts(vec![d, n], dx),
        Tensor::from_parts(vec![out, d], dw),
        Tensor::from_parts(vec![out], db),
    ))
}

fn linear_dims(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let [d, n] = match *x.shape() {
        [d, n] => [d, n],
        _ => return Err(Error::shape("linear", &[0, 0], x.shape())),
    };
    let out = match *w.shape() {
        [out, dd] if dd == d => out,
        _ => return Err(Error::shape("linear", &[0, d], w.shape())),
    };
    if b.shape() != [out] {
        return Err(Error::shape("linear bias", &[out], b.shape()));
    }
    Ok((d, n, out))
}

/// Mean softmax cross-entropy over a `[C, N]` logit block.
///
/// `labels` are 0-based class indices. Returns `(loss, probabilities,
/// dlogits)` where `dlogits = (softmax - onehot) / N`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor, Tensor)> {
    let [c, n] = match *logits.shape() {
        [c, n] => [c, n],
        _ => return Err(Error::shape("softmax_cross_entropy", &[0, labels.len()], logits.shape())),
    };
    if labels.len() != n {
        return Err(Error::shape("softmax_cross_entropy", &[c, labels.len()], logits.shape()));
    }
    if n == 0 {
        return Err(Error::Empty("softmax_cross_entropy batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: c,
        });
    }
    let z = logits.data();
    let mut probs = vec![0.0; c * n];
    let mut loss = 0.0;
    for m in 0..n {
        let max = (0..c).map(|k| z[k * n + m]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..c).map(|k| (z[k * n + m] - max).exp()).sum();
        let log_sum = sum.ln();
        for k in 0..c {
            probs[k * n + m] = (z[k * n + m] - max - log_sum).exp();
        }
        loss -= z[labels[m] * n + m] - max - log_sum;
    }
    loss /= n as f64;
    let mut grad = probs.clone();
    for (m, &l) in labels.iter().enumerate() {
        grad[l * n + m] -= 1.0;
    }
    for g in &mut grad {
        *g /= n as f64;
    }
    Ok((
        loss,
        Tensor::from_parts(vec![c, n], probs),
        Tensor::from_parts(vec![c, n], grad),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_and_bias_only() {
        let x = Tensor::new(vec![3, 1], vec![1.0, -2.0, 0.5]).unwrap();
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(linear(&x, &eye, &Tensor::zeros(&[3])).unwrap(), x);
        let b = Tensor::new(vec![2], vec![0.25, -7.0]).unwrap();
        let y = linear(&x, &Tensor::zeros(&[2, 3]), &b).unwrap();
        assert_eq!(y.data(), &[0.25, -7.0]);
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Tensor::zeros(&[7, 3]);
        let (loss, probs, _) = softmax_cross_entropy(&logits, &[0, 3, 6]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
        assert!((loss - 1.9459).abs() < 1e-4);
        assert!(probs.data().iter().all(|&p| (p - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn saturated_logit_gives_tiny_loss() {
        let mut logits = Tensor::zeros(&[4, 1]);
        logits.data_mut()[2] = 30.0;
        let (loss, _, _) = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert!(loss < 1e-9);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::zeros(&[3, 1]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, c) = (4, 3);
        let raw: Vec<f64> = (0..n * c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels = [0usize, 2, 1, 2];
        // logits[k][m] stored class-major
        let logits = Tensor::new(vec![c, n], raw.clone()).unwrap();
        let (loss, _, _) = softmax_cross_entropy(&logits, &labels).unwrap();
        let mut expected = 0.0;
        for m in 0..n {
            let denom: f64 = (0..c).map(|k| raw[k * n + m].exp()).sum();
            expected += -(raw[labels[m] * n + m].exp() / denom).ln();
        }
        expected /= n as f64;
        assert!((loss - expected).abs() < 1e-12);
    }
}
