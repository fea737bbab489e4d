//! RBF-kernel maximum mean discrepancy between source and target feature
//! batches, with analytic gradients, and the spectral + spatial decoupled
//! alignment loss built from it.

use serde::{Deserialize, Serialize};

use crate::nn::Tensor;
use crate::{Error, Result};

/// Row-major batch of feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    n: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureBatch {
    pub fn new(n: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * dim {
            return Err(Error::shape("FeatureBatch", &[n, dim], &[data.len()]));
        }
        Ok(FeatureBatch { n, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::shape("FeatureBatch::from_rows", &[dim], &[r.len()]));
        }
        Ok(FeatureBatch {
            n: rows.len(),
            dim,
            data: rows.concat(),
        })
    }

    /// Columns `range` of a batch-last `[dim, N]` tensor, one row per column.
    pub fn from_columns(t: &Tensor, range: std::ops::Range<usize>) -> Result<Self> {
        let [dim, n] = match *t.shape() {
            [d, n] => [d, n],
            _ => return Err(Error::shape("FeatureBatch::from_columns", &[0, 0], t.shape())),
        };
        if range.end > n {
            return Err(Error::shape("FeatureBatch::from_columns", &[dim, range.end], t.shape()));
        }
        let mut data = Vec::with_capacity(range.len() * dim);
        for m in range.clone() {
            data.extend((0..dim).map(|k| t.data()[k * n + m]));
        }
        Ok(FeatureBatch {
            n: range.len(),
            dim,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// How the RBF bandwidth is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Explicit `σ > 0`.
    Fixed(f64),
    /// Lower median of the nonzero pairwise distances of the pooled batch.
    /// The gradient includes the dependence of `σ` on the two samples that
    /// realise the median distance, which makes the loss exactly invariant to
    /// a common rescaling of all features.
    Median,
    /// As [`Bandwidth::Median`] but `σ` is treated as a constant in the
    /// gradient.
    MedianDetached,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub bandwidth: Bandwidth,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            bandwidth: Bandwidth::Median,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        match self.bandwidth {
            Bandwidth::Fixed(s) if !(s > 0.0 && s.is_finite()) => {
                Err(Error::Config(format!("bandwidth must be positive, got {s}")))
            }
            _ => Ok(()),
        }
    }
}

/// Per-step loss breakdown. `mmd = spe + spa`, `total = cls + alpha · mmd`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cls: f64,
    pub spe: f64,
    pub spa: f64,
    pub mmd: f64,
    pub total: f64,
    pub alpha: f64,
}

impl LossReport {
    pub fn new(cls: f64, spe: f64, spa: f64, alpha: f64) -> Self {
        let mmd = spe + spa;
        LossReport {
            cls,
            spe,
            spa,
            mmd,
            total: cls + alpha * mmd,
            alpha,
        }
    }
}

/// `exp(-‖x - y‖² / (2σ²))`.
pub fn rbf_kernel(x: &[f64], y: &[f64], sigma: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("rbf_kernel", &[x.len()], &[y.len()]));
    }
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("bandwidth must be positive, got {sigma}")));
    }
    Ok((-sq_dist(x, y) / (2.0 * sigma * sigma)).exp())
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Lower median of the nonzero pairwise Euclidean distances.
pub fn median_bandwidth(samples: &[Vec<f64>]) -> Result<f64> {
    let batch = FeatureBatch::from_rows(samples)?;
    let d2 = pairwise_sq(&[&batch]);
    median_pair(&d2, batch.len()).map(|(s, _, _)| s)
}

fn pairwise_sq(parts: &[&FeatureBatch]) -> Vec<f64> {
    let rows: Vec<&[f64]> = parts
        .iter()
        .flat_map(|b| (0..b.len()).map(move |i| b.row(i)))
        .collect();
    let n = rows.len();
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = sq_dist(rows[i], rows[j]);
            d2[i * n + j] = v;
            d2[j * n + i] = v;
        }
    }
    d2
}

/// Returns `(σ, i, j)` where `(i, j)` is the pair realising the lower median
/// of the nonzero distances, ties broken by pair index.
fn median_pair(d2: &[f64], n: usize) -> Result<(f64, usize, usize)> {
    if n < 2 {
        return Err(Error::Degenerate(
            "median bandwidth needs at least two samples".into(),
        ));
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let v = d2[i * n + j];
            if v > 0.0 {
                pairs.push((v, i, j));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Degenerate("all samples are identical".into()));
    }
    let k = (pairs.len() - 1) / 2;
    let (_, &mut (v, i, j), _) =
        pairs.select_nth_unstable_by(k, |a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    Ok((v.sqrt(), i, j))
}

/// Biased MMD² estimate with gradients for every sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MmdOutput {
    pub value: f64,
    pub sigma: f64,
    /// Row-major `[|S|, dim]`.
    pub grad_source: Vec<f64>,
    /// Row-major `[|T|, dim]`.
    pub grad_target: Vec<f64>,
    /// Index pair (into the pooled `S ∪ T` ordering) realising the median
    /// distance, if the bandwidth came from the median heuristic.
    pub median_pair: Option<(usize, usize)>,
}

/// `(1/|S|²) ΣΣ k(s,s') + (1/|T|²) ΣΣ k(t,t') - (2/|S||T|) ΣΣ k(s,t)`.
pub fn mmd2(s: &FeatureBatch, t: &FeatureBatch, cfg: &KernelConfig) -> Result<MmdOutput> {
    cfg.validate()?;
    if s.is_empty() || t.is_empty() {
        return Err(Error::Empty("mmd2 needs nonempty source and target batches".into()));
    }
    if s.dim() != t.dim() {
        return Err(Error::shape("mmd2", &[s.dim()], &[t.dim()]));
    }
    let (ns, nt, dim) = (s.len(), t.len(), s.dim());
    let n = ns + nt;
    let d2 = pairwise_sq(&[s, t]);
    let (sigma, pair) = match cfg.bandwidth {
        Bandwidth::Fixed(v) => (v, None),
        Bandwidth::Median => {
            let (v, i, j) = median_pair(&d2, n)?;
            (v, Some((i, j)))
        }
        Bandwidth::MedianDetached => (median_pair(&d2, n)?.0, None),
    };
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    let k: Vec<f64> = d2.iter().map(|&v| (-v * inv2s2).exp()).collect();

    let block = |r: std::ops::Range<usize>, c: std::ops::Range<usize>| -> f64 {
        r.map(|i| c.clone().map(|j| k[i * n + j]).sum::<f64>()).sum()
    };
    let kss = block(0..ns, 0..ns);
    let ktt = block(ns..n, ns..n);
    // Both orders of the cross block so that swapping S and T is bitwise exact.
    let kst = 0.5 * (block(0..ns, ns..n) + block(ns..n, 0..ns));
    let (fs, ft) = (ns as f64, nt as f64);
    let value = (kss / (fs * fs) + ktt / (ft * ft)) - 2.0 * kst / (fs * ft);

    let weight = |i: usize, j: usize| -> f64 {
        match (i < ns, j < ns) {
            (true, true) => 1.0 / (fs * fs),
            (false, false) => 1.0 / (ft * ft),
            _ => -1.0 / (fs * ft),
        }
    };
    let row = |i: usize| -> &[f64] {
        if i < ns {
            s.row(i)
        } else {
            t.row(i - ns)
        }
    };
    let mut grad = vec![0.0; n * dim];
    let scale = -2.0 / (sigma * sigma);
    for i in 0..n {
        let zi = row(i);
        let g = &mut grad[i * dim..(i + 1) * dim];
        for j in 0..n {
            if i == j {
                continue;
            }
            let c = weight(i, j) * k[i * n + j] * scale;
            for ((gv, a), b) in g.iter_mut().zip(zi).zip(row(j)) {
                *gv += c * (a - b);
            }
        }
    }
    if let Some((p, q)) = pair {
        // dvalue/dσ = Σ_ab w_ab k_ab d²_ab / σ³ ; dσ/dz_p = (z_p - z_q)/σ
        let mut dsigma = 0.0;
        for i in 0..n {
            for j in 0..n {
                dsigma += weight(i, j) * k[i * n + j] * d2[i * n + j];
            }
        }
        dsigma /= sigma * sigma * sigma;
        let (zp, zq) = (row(p).to_vec(), row(q).to_vec());
        for m in 0..dim {
            let u = dsigma * (zp[m] - zq[m]) / sigma;
            grad[p * dim + m] += u;
            grad[q * dim + m] -= u;
        }
    }
    let grad_target = grad.split_off(ns * dim);
    Ok(MmdOutput {
        value,
        sigma,
        grad_source: grad,
        grad_target,
        median_pair: pair,
    })
}

/// Separate MMD terms on spectral and spatial features, each with its own
/// bandwidth.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoupledLoss {
    pub spectral: MmdOutput,
    pub spatial: MmdOutput,
}

impl DecoupledLoss {
    pub fn total(&self) -> f64 {
        self.spectral.value + self.spatial.value
    }
}

pub fn decoupled_loss(
    spe_source: &FeatureBatch,
    spe_target: &FeatureBatch,
    spa_source: &FeatureBatch,
    spa_target: &FeatureBatch,
    cfg: &KernelConfig,
) -> Result<DecoupledLoss> {
    Ok(DecoupledLoss {
        spectral: mmd2(spe_source, spe_target, cfg)?,
        spatial: mmd2(spa_source, spa_target, cfg)?,
    })
}
