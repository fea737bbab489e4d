//! Aligned-vs-intrinsic consistency scores and their two-population split
//! with a 1-D Gaussian mixture.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const VAR_FLOOR: f64 = 1e-8;
const TOL: f64 = 1e-8;
const MAX_ITERS: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyScore {
    /// Cosine similarity in `[-1, 1]`.
    pub sim: f64,
    /// `sim²`.
    pub s: f64,
}

pub fn consistency_score(fa: &[f64], fb: &[f64]) -> Result<ConsistencyScore> {
    if fa.len() != fb.len() {
        return Err(Error::shape("consistency_score", &[fa.len()], &[fb.len()]));
    }
    let dot: f64 = fa.iter().zip(fb).map(|(a, b)| a * b).sum();
    let na = fa.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = fb.iter().map(|b| b * b).sum::<f64>().sqrt();
    if !(na > 1e-12 && nb > 1e-12) {
        return Err(Error::Degenerate(format!(
            "feature norm too small for a cosine score ({na:e}, {nb:e})"
        )));
    }
    let sim = (dot / (na * nb)).clamp(-1.0, 1.0);
    Ok(ConsistencyScore { sim, s: sim * sim })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmModel {
    pub pi: Vec<f64>,
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
    /// Log-likelihood at the start of every EM iteration; the last entry is
    /// the likelihood of the returned parameters.
    pub log_likelihood_trace: Vec<f64>,
}

/// Serialized form `{K, pi, mu, var, loglik}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmJson {
    #[serde(rename = "K")]
    pub k: usize,
    pub pi: Vec<f64>,
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
    pub loglik: f64,
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.mu.len()
    }

    pub fn log_likelihood(&self) -> f64 {
        *self.log_likelihood_trace.last().unwrap_or(&f64::NEG_INFINITY)
    }

    pub fn to_json(&self) -> GmmJson {
        GmmJson {
            k: self.k(),
            pi: self.pi.clone(),
            mu: self.mu.clone(),
            var: self.var.clone(),
            loglik: self.log_likelihood(),
        }
    }

    /// Index of the highest-mean component, or `None` when that maximum is
    /// shared.
    fn unknown_component(&self) -> Option<usize> {
        let max = self.mu.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let at: Vec<usize> = (0..self.k()).filter(|&k| self.mu[k] == max).collect();
        (at.len() == 1).then(|| at[0])
    }
}

fn log_joint(pi: &[f64], mu: &[f64], var: &[f64], s: f64, out: &mut [f64]) -> f64 {
    const LN_2PI: f64 = 1.837_877_066_409_345_5;
    for k in 0..pi.len() {
        let d = s - mu[k];
        out[k] = pi[k].ln() - 0.5 * (LN_2PI + var[k].ln()) - 0.5 * d * d / var[k];
    }
    let m = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + out.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// EM for a `k`-component 1-D Gaussian mixture.
///
/// Means start at the `(2j-1)/(2k)` quantiles, weights uniform, variances at
/// the sample variance. Stops when the log-likelihood changes by less than
/// `1e-8` or after 500 iterations. The initialisation is deterministic, so
/// `_seed` does not affect the result.
pub fn gmm_fit(scores: &[f64], k: usize, _seed: u64) -> Result<GmmModel> {
    if k < 2 {
        return Err(Error::Config(format!("need at least two components, got {k}")));
    }
    if let Some(v) = scores.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Config(format!("scores must lie in [0, 1], found {v}")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let distinct = 1 + sorted.windows(2).filter(|w| w[1] - w[0] > 1e-9).count();
    if scores.is_empty() || distinct < k {
        return Err(Error::Degenerate(format!(
            "{distinct} distinct scores cannot support {k} components"
        )));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let sample_var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    let mut mu: Vec<f64> = (0..k)
        .map(|j| quantile(&sorted, (2 * j + 1) as f64 / (2 * k) as f64))
        .collect();
    let mut var = vec![sample_var.max(VAR_FLOOR); k];
    let mut pi = vec![1.0 / k as f64; k];

    let mut gamma = vec![0.0; scores.len() * k];
    let mut trace = Vec::new();
    let mut buf = vec![0.0; k];
    for _ in 0..MAX_ITERS {
        let mut ll = 0.0;
        for (i, &s) in scores.iter().enumerate() {
            let lse = log_joint(&pi, &mu, &var, s, &mut buf);
            ll += lse;
            for j in 0..k {
                gamma[i * k + j] = (buf[j] - lse).exp();
            }
        }
        let converged = trace.last().is_some_and(|&prev: &f64| (ll - prev).abs() < TOL);
        trace.push(ll);
        if converged {
            break;
        }
        for j in 0..k {
            let nk: f64 = (0..scores.len()).map(|i| gamma[i * k + j]).sum();
            if nk <= 0.0 {
                continue;
            }
            let m = scores.iter().enumerate().map(|(i, s)| gamma[i * k + j] * s).sum::<f64>() / nk;
            let v = scores
                .iter()
                .enumerate()
                .map(|(i, s)| gamma[i * k + j] * (s - m) * (s - m))
                .sum::<f64>()
                / nk;
            pi[j] = nk / n;
            mu[j] = m;
            var[j] = v.max(VAR_FLOOR);
        }
        let total: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|p| *p = (*p / total).max(f64::MIN_POSITIVE));
    }
    Ok(GmmModel {
        pi,
        mu,
        var,
        log_likelihood_trace: trace,
    })
}

/// Posterior component probabilities of a score.
pub fn responsibilities(model: &GmmModel, s: f64) -> Vec<f64> {
    let mut buf = vec![0.0; model.k()];
    let lse = log_joint(&model.pi, &model.mu, &model.var, s, &mut buf);
    buf.iter().map(|v| (v - lse).exp()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenSetDecision {
    pub unknown: bool,
    /// Responsibility of the highest-mean component.
    pub gamma_unknown: f64,
}

/// Unknown iff the most responsible component is the highest-mean one.
/// Responsibility ties go to the lower-mean component; a shared maximum mean
/// makes every sample known.
pub fn classify_known_unknown(model: &GmmModel, scores: &[f64]) -> Vec<OpenSetDecision> {
    let top = model.unknown_component();
    scores
        .iter()
        .map(|&s| {
            let g = responsibilities(model, s);
            let best = (0..model.k())
                .reduce(|a, b| {
                    let better = g[b] > g[a] || (g[b] == g[a] && model.mu[b] < model.mu[a]);
                    if better {
                        b
                    } else {
                        a
                    }
                })
                .expect("k >= 2");
            OpenSetDecision {
                unknown: top == Some(best),
                gamma_unknown: top.map_or(0.0, |t| g[t]),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn score_examples() {
        let a = [1.0, -2.0, 0.5];
        assert_eq!(consistency_score(&a, &a).unwrap().s, 1.0);
        let s = consistency_score(&[1.0, 0.0], &[0.0, 3.0]).unwrap();
        assert_eq!((s.sim, s.s), (0.0, 0.0));
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        let s = consistency_score(&a, &neg).unwrap();
        assert!((s.sim + 1.0).abs() < 1e-15 && (s.s - 1.0).abs() < 1e-15);
        assert!(matches!(
            consistency_score(&[0.0, 0.0], &[1.0, 1.0]),
            Err(Error::Degenerate(_))
        ));
        assert!(consistency_score(&[1.0], &[1.0, 2.0]).is_err());
    }

    /// Reference EM written independently: plain densities, no log space.
    fn reference_em(x: &[f64], mut mu: [f64; 2], mut var: [f64; 2], iters: usize) -> ([f64; 2], [f64; 2], [f64; 2]) {
        let mut pi = [0.5, 0.5];
        let pdf = |x: f64, m: f64, v: f64| (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
        for _ in 0..iters {
            let g: Vec<[f64; 2]> = x
                .iter()
                .map(|&s| {
                    let a = pi[0] * pdf(s, mu[0], var[0]);
                    let b = pi[1] * pdf(s, mu[1], var[1]);
                    [a / (a + b), b / (a + b)]
                })
                .collect();
            for k in 0..2 {
                let nk: f64 = g.iter().map(|r| r[k]).sum();
                mu[k] = g.iter().zip(x).map(|(r, s)| r[k] * s).sum::<f64>() / nk;
                var[k] = (g.iter().zip(x).map(|(r, s)| r[k] * (s - mu[k]).powi(2)).sum::<f64>() / nk).max(1e-8);
                pi[k] = nk / x.len() as f64;
            }
        }
        (pi, mu, var)
    }

    #[test]
    fn two_point_masses() {
        let m = gmm_fit(&[0.0, 0.0, 1.0, 1.0], 2, 0).unwrap();
        let (lo, hi) = if m.mu[0] < m.mu[1] { (0, 1) } else { (1, 0) };
        assert!(m.mu[lo].abs() < 1e-6 && (m.mu[hi] - 1.0).abs() < 1e-6);
        assert!((m.pi[0] - 0.5).abs() < 1e-6);
        let (pi, mu, _) = reference_em(&[0.0, 0.0, 1.0, 1.0], [0.0, 1.0], [0.25, 0.25], 200);
        assert!((mu[0] - m.mu[0]).abs() < 1e-6 && (pi[1] - m.pi[1]).abs() < 1e-6);
    }

    fn clusters(seed: u64, a: f64, b: f64, sd: f64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (na, nb) = (Normal::new(a, sd).unwrap(), Normal::new(b, sd).unwrap());
        (0..n)
            .map(|i| if i % 2 == 0 { na.sample(&mut rng) } else { nb.sample(&mut rng) })
            .map(|v: f64| v.clamp(0.0, 1.0))
            .collect()
    }

    #[test]
    fn matches_reference_em() {
        let x = clusters(7, 0.3, 0.6, 0.08, 200);
        let m = gmm_fit(&x, 2, 0).unwrap();
        let mut s = x.clone();
        s.sort_by(f64::total_cmp);
        let mean = x.iter().sum::<f64>() / 200.0;
        let v = x.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 200.0;
        let iters = m.log_likelihood_trace.len() - 1;
        let (pi, mu, var) = reference_em(&x, [quantile(&s, 0.25), quantile(&s, 0.75)], [v, v], iters);
        for k in 0..2 {
            assert!((pi[k] - m.pi[k]).abs() < 1e-9);
            assert!((mu[k] - m.mu[k]).abs() < 1e-9);
            assert!((var[k] - m.var[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn recovers_separated_clusters() {
        let x = clusters(1, 0.1, 0.9, 0.02, 100);
        let m = gmm_fit(&x, 2, 0).unwrap();
        let mut mu = m.mu.clone();
        mu.sort_by(f64::total_cmp);
        assert!((mu[0] - 0.1).abs() < 0.05 && (mu[1] - 0.9).abs() < 0.05);
        for w in m.log_likelihood_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-10);
        }
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(gmm_fit(&[0.5, 0.5 + 1e-10, 0.5], 2, 0), Err(Error::Degenerate(_))));
        assert!(gmm_fit(&[0.1, 0.9], 1, 0).is_err());
        assert!(gmm_fit(&[0.1, 1.5], 2, 0).is_err());
        assert!(gmm_fit(&[], 2, 0).is_err());
    }

    #[test]
    fn responsibility_examples() {
        let m = GmmModel {
            pi: vec![0.5, 0.5],
            mu: vec![0.2, 0.8],
            var: vec![0.001, 0.001],
            log_likelihood_trace: vec![0.0],
        };
        assert!(responsibilities(&m, 0.2)[0] > 0.99);
        let g = responsibilities(&m, 0.5);
        assert!((g[0] - 0.5).abs() < 1e-12 && (g[1] - 0.5).abs() < 1e-12);
        // at the exact midpoint the tie goes to the lower mean
        assert!(!classify_known_unknown(&m, &[0.5])[0].unknown);
        let tied = GmmModel { mu: vec![0.5, 0.5], ..m.clone() };
        assert!(classify_known_unknown(&tied, &[0.0, 0.5, 1.0]).iter().all(|d| !d.unknown));
        let d = classify_known_unknown(&m, &[0.1, 0.15, 0.3]);
        assert!(d.iter().all(|d| !d.unknown));
    }

    #[test]
    fn four_point_decisions() {
        let s = [0.05, 0.1, 0.9, 0.95];
        let m = gmm_fit(&s, 2, 0).unwrap();
        let d: Vec<bool> = classify_known_unknown(&m, &s).iter().map(|d| d.unknown).collect();
        assert_eq!(d, vec![false, false, true, true]);
    }

    #[test]
    fn permuting_components_keeps_decisions() {
        let x = clusters(3, 0.2, 0.7, 0.05, 100);
        let m = gmm_fit(&x, 2, 0).unwrap();
        let p = GmmModel {
            pi: vec![m.pi[1], m.pi[0]],
            mu: vec![m.mu[1], m.mu[0]],
            var: vec![m.var[1], m.var[0]],
            log_likelihood_trace: m.log_likelihood_trace.clone(),
        };
        assert_eq!(classify_known_unknown(&m, &x), classify_known_unknown(&p, &x));
    }

    #[test]
    fn json_shape() {
        let m = gmm_fit(&[0.0, 0.1, 0.9, 1.0], 2, 0).unwrap();
        let v = serde_json::to_value(m.to_json()).unwrap();
        assert_eq!(v["K"], 2);
        assert_eq!(v["pi"].as_array().unwrap().len(), 2);
        assert!(v["loglik"].is_number());
    }

    proptest! {
        #[test]
        fn score_scale_and_sign_invariant(
            a in proptest::collection::vec(-5.0f64..5.0, 4),
            b in proptest::collection::vec(-5.0f64..5.0, 4),
            ka in 0.01f64..100.0, kb in 0.01f64..100.0,
        ) {
            prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
            let base = consistency_score(&a, &b).unwrap().s;
            let sa: Vec<f64> = a.iter().map(|v| -ka * v).collect();
            let sb: Vec<f64> = b.iter().map(|v| kb * v).collect();
            prop_assert!((consistency_score(&sa, &sb).unwrap().s - base).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&base));
        }

        #[test]
        fn responsibilities_normalised(s in 0.0f64..1.0, m0 in 0.0f64..1.0, m1 in 0.0f64..1.0, v in 1e-6f64..0.5, p in 0.01f64..0.99) {
            let m = GmmModel { pi: vec![p, 1.0 - p], mu: vec![m0, m1], var: vec![v, 2.0 * v], log_likelihood_trace: vec![] };
            let g = responsibilities(&m, s);
            prop_assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn em_trace_nondecreasing(seed in 0u64..500, k in 2usize..5) {
            let x = clusters(seed, 0.25, 0.65, 0.1, 80);
            let m = gmm_fit(&x, k, seed).unwrap();
            for w in m.log_likelihood_trace.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-10, "{:?}", w);
            }
            prop_assert!((m.pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(m.var.iter().all(|&v| v >= 1e-8));
            prop_assert_eq!(&m, &gmm_fit(&x, k, seed + 1).unwrap());
        }
    }
}
