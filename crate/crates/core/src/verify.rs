//! Finite-difference gradient suite over every differentiable operator and
//! the full training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::alignment::{decoupled_loss, mmd2, Bandwidth, FeatureBatch, KernelConfig};
use crate::encoder::{global_pool, global_pool_backward, ArchConfig};
use crate::nn::{
    channel_attention, channel_attention_backward, conv1d, conv1d_backward, conv3d,
    conv3d_backward, fold_bits, fold_index, grad_check, linear, linear_backward, relu,
    relu_backward, residual_fuse, softmax_cross_entropy, spatial_attention,
    spatial_attention_backward, ConvSpec, Evaluation, GradCheckReport, Tensor, BRANCH_SEED,
    SPATIAL_GATE_SHAPE,
};
use crate::trainer::{loss_and_grads, TrainConfig, TrainState};
use crate::Result;

const EPS: f64 = 1e-5;

/// One registered gradient check.
#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    /// Whole-objective checks use the looser composite tolerance.
    pub composite: bool,
    run: fn(u64) -> Result<GradCheckReport>,
}

impl GradCase {
    pub fn run(&self, seed: u64) -> Result<GradCheckReport> {
        (self.run)(seed)
    }
}

impl std::fmt::Debug for GradCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GradCase")
            .field("name", &self.name)
            .field("composite", &self.composite)
            .finish()
    }
}

pub fn registry() -> Vec<GradCase> {
    let op = |name, run| GradCase {
        name,
        composite: false,
        run,
    };
    vec![
        op("conv1d", check_conv1d),
        op("conv3d", check_conv3d),
        op("relu", check_relu),
        op("residual_fuse", check_residual),
        op("channel_attention", check_channel_attention),
        op("spatial_attention", check_spatial_attention),
        op("global_pool", check_global_pool),
        op("linear", check_linear),
        op("softmax_cross_entropy", check_cross_entropy),
        op("mmd2_fixed", |s| check_mmd(s, Bandwidth::Fixed(0.9))),
        op("mmd2_median", |s| check_mmd(s, Bandwidth::Median)),
        op("decoupled_loss", check_decoupled),
        GradCase {
            name: "encoder_objective",
            composite: true,
            run: check_objective,
        },
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Tolerances {
    pub operator: f64,
    pub composite: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            operator: 1e-6,
            composite: 1e-5,
        }
    }
}

impl Tolerances {
    pub fn uniform(tol: f64) -> Self {
        Tolerances {
            operator: tol,
            composite: tol,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub composite: bool,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub seeds: usize,
    pub passed: bool,
}

/// Runs every registered case over `seeds`, merging reports per case.
pub fn run_suite(seeds: std::ops::Range<u64>, tol: Tolerances) -> Result<Vec<CheckResult>> {
    let n = seeds.clone().count();
    registry()
        .into_iter()
        .map(|case| {
            let mut total = GradCheckReport::default();
            for seed in seeds.clone() {
                total = total.merge(case.run(seed)?);
            }
            let tolerance = if case.composite {
                tol.composite
            } else {
                tol.operator
            };
            Ok(CheckResult {
                name: case.name,
                composite: case.composite,
                tolerance,
                max_rel_error: total.max_rel_error,
                checked: total.checked,
                skipped: total.skipped,
                seeds: n,
                passed: total.checked > 0 && total.max_rel_error <= tolerance,
            })
        })
        .collect()
}

fn rng_for(seed: u64, case: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(crate::rng::derive(seed, 0x6772_6164 + case))
}

fn uniform(g: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| g.random_range(-1.0..1.0)).collect()
}

fn tensor(g: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::new(shape.to_vec(), uniform(g, shape.iter().product())).expect("finite draw")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Splits `v` into tensors with the shapes of `like`.
fn unpack(v: &[f64], like: &[&Tensor]) -> Vec<Tensor> {
    let mut at = 0;
    like.iter()
        .map(|t| {
            let out = Tensor::new(t.shape().to_vec(), v[at..at + t.len()].to_vec()).expect("shape");
            at += t.len();
            out
        })
        .collect()
}

fn pack(parts: &[&Tensor]) -> Vec<f64> {
    parts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn check_conv1d(seed: u64) -> Result<GradCheckReport> {
    let mut g = rng_for(seed, 1);
    let spec = ConvSpec::new_1d(2, 3, 3)?;
    let x = tensor(&mut g, &[2, 5, 3]);
    let w = tensor(&mut g, &spec.weight_shape());
    let b = tensor(&mut g, &[3]);
    let r = tensor(&mut g, &[3, 5, 3]);
    let gr = conv1d_backward(&x, &spec, &w, &r, true)?;
    let analytic = pack(&[gr.dx.as_ref().expect("requested"), &gr.dw, &gr.db]);
    let f = |v: &[f64]| {
        let p = unpack(v, &[&x, &w, &b]);
        Evaluation::from(dot(conv1d(&p[0], &spec, &p[1], &p[2]).expect("shape").data(), r.data()))
    };
    Ok(grad_check(f, &pack(&[&x, &w, &b]), &analytic, EPS, None))
}

fn check_conv3d(seed: u64) -> Result<GradCheckReport> {
    let mut g = rng_for(seed, 2);
    let spec = ConvSpec::new_3d(2, 3, [3, 3, 3])?;
    let x = tensor(&mut g, &[2, 3, 4, 3, 2]);
    let w = tensor(&mut g, &spec.weight_shape());
    let b = tensor(&mut g, &[3]);
    let r = tensor(&mut g, &[3, 3, 4, 3, 2]);
    let gr = conv3d_backward(&x, &spec, &w, &r, true)?;
    let analytic = pack(&[gr.dx.as_ref().expect("requested"), &gr.dw, &gr.db]);
    let f = |v: &[f64]| {
        let p = unpack(v, &[&x, &w, &b]);
        Evaluation::from(dot(conv3d(&p[0], &spec, &p[1], &p[2]).expect("shape").data(), r.data()))
    };
    Ok(grad_check(f, &pack(&[&x, &w, &b]), &analytic, EPS, None))
}

fn check_relu(seed: u64) -> Result<GradCheckReport> {
    let mut g = rng_for(seed, 3);
    let x = tensor(&mut g, &[4, 5]);
    let r = tensor(&mut g, &[4, 5]);
    let analytic = relu_backward(&relu(&x), &r);
    let f = |v: &[f64]| {
        let y = relu(&Tensor::new(vec![4, 5], v.to_vec()).expect("shape"));
        Evaluation {
            value: dot(y.data(), r.data()),
            branch: fold_bits(BRANCH_SEED, v.iter().map(|&a| a > 0.0)),
        }
    };
    Ok(grad_check(f, x.data(), analytic.data(), EPS, None))
}

fn check_residual(seed: u64) -> Result<GradCheckReport> {
    let mut g = rng_for(seed, 4);
    let a = tensor(&mut g, &[3, 4]);
    let b = tensor(&mut g, &[3, 4]);
    let r = tensor(&mut g, &[3, 4]);
    let analytic = pack(&[&r, &r]);
    let f = |v: &[f64]| {
        let p = unpack(v, &[&a, &b]);
        Evaluation::from(dot(residual_fuse(&p[0], &p[1]).expect("shape").data(), r.data()))
    };
    Ok(grad_check(f, &pack(&[&a, &b]), &analytic, EPS, None))
}

fn check_channel_attention(seed: u64) -> Result<GradCheckReport> {
    let mut g = rng_for(seed, 5);
    let x = tensor(&mut g, &[4, 5, 3]);
    let w1 = tensor(&mut g, &[2, 4]);
    let w2 = tensor(&mut g, &[4, 2]);
    let r = tensor(&mut g, &[4, 5, 3]);
    let (_, cache) = channel_attention(&x, &w1, &w2)?;
    let (dx, dw1, dw2) = channel_attention_backward(&x, &w1, &w2, &cache, &r)?;
    let analytic = pack(&[&dx, &dw1, &dw2]);
    let f = |v: &[f64]| {
        let p = unpack(v, &[&x, &w1, &w2]);
        let (y, c) = channel_attention(&p[0], &p[1], &p[2]).expect("shape");
        Evaluation {
            value: dot(y.data(), r.data()),
            branch: fold_bits(BRANCH_SEED, c.hidden_signs()),
        }
    };
    Ok(grad_check(f, &pack(&[&x, &w1, &w2]), &analytic, EPS, None))
}

fn check_spatial_attention(seed: u64) -> Result<GradCheckReport> {
    let mut g = rng_for(seed, 6);
    let x = tensor(&mut g, &[3, 2, 3, 3, 2]);
    let wg = tensor(&mut g, &SPATIAL_GATE_SHAPE);
    let bg = tensor(&mut g, &[1]);
    let r = tensor(&mut g, x.shape());
    let (_, cache) = spatial_attention(&x, &wg, &bg)?;
    let (dx, dwg, dbg) = spatial_attention_backward(&x, &wg, &cache, &r)?;
    let analytic = pack(&[&dx, &dwg, &dbg]);
    let f = |v: &[f64]| {
        let p = unpack(v, &[&x, &wg, &bg]);
        let (y, c) = spatial_attention(&p[0], &p[1], &p[2]).expect("shape");
        Evaluation {
            value: dot(y.data(), r.data()),
            branch: fold_index(BRANCH_SEED, c.argmax().iter().copied()),
        }
    };
    Ok(grad_check(f, &pack(&[&x, &wg, &bg]), &analytic, EPS, None))
}

fn check_global_pool(seed: u64) -> Result<GradCheckReport> {
    let mut g = rng_for(seed, 7);
    let x = tensor(&mut g, &[3, 2, 2, 3, 2]);
    let r = tensor(&mut g, &[3, 2]);
    let analytic = global_pool_backward(x.shape(), &r);
    let f = |v: &[f64]| {
        let t = Tensor::new(x.shape().to_vec(), v.to_vec()).expect("shape");
        Evaluation::from(dot(global_pool(&t).data(), r.data()))
    };
    Ok(grad_check(f, x.data(), analytic.data(), EPS, None))
}

fn check_linear(seed: u64) -> Result<GradCheckReport> {
    let mut g = rng_for(seed, 8);
    let x = tensor(&mut g, &[4, 3]);
    let w = tensor(&mut g, &[2, 4]);
    let b = tensor(&mut g, &[2]);
    let r = tensor(&mut g, &[2, 3]);
    let (dx, dw, db) = linear_backward(&x, &w, &r)?;
    let analytic = pack(&[&dx, &dw, &db]);
    let f = |v: &[f64]| {
        let p = unpack(v, &[&x, &w, &b]);
        Evaluation::from(dot(linear(&p[0], &p[1], &p[2]).expect("shape").data(), r.data()))
    };
    Ok(grad_check(f, &pack(&[&x, &w, &b]), &analytic, EPS, None))
}

fn check_cross_entropy(seed: u64) -> Result<GradCheckReport> {
    let mut g = rng_for(seed, 9);
    let logits = tensor(&mut g, &[3, 4]).map(|v| 3.0 * v);
    let labels: Vec<usize> = (0..4).map(|_| g.random_range(0..3)).collect();
    let (_, _, analytic) = softmax_cross_entropy(&logits, &labels)?;
    let f = |v: &[f64]| {
        let t = Tensor::new(vec![3, 4], v.to_vec()).expect("shape");
        Evaluation::from(softmax_cross_entropy(&t, &labels).expect("labels").0)
    };
    Ok(grad_check(f, logits.data(), analytic.data(), EPS, None))
}

fn median_branch(pairs: impl IntoIterator<Item = Option<(usize, usize)>>) -> u64 {
    fold_index(
        BRANCH_SEED,
        pairs
            .into_iter()
            .flat_map(|p| p.map_or([usize::MAX; 2], |(a, b)| [a, b])),
    )
}

fn check_mmd(seed: u64, bandwidth: Bandwidth) -> Result<GradCheckReport> {
    let mut g = rng_for(seed, 10);
    let (ns, nt, dim) = (3, 4, 3);
    let x = uniform(&mut g, (ns + nt) * dim);
    let cfg = KernelConfig { bandwidth };
    let split = |v: &[f64]| {
        (
            FeatureBatch::new(ns, dim, v[..ns * dim].to_vec()).expect("shape"),
            FeatureBatch::new(nt, dim, v[ns * dim..].to_vec()).expect("shape"),
        )
    };
    let (s, t) = split(&x);
    let out = mmd2(&s, &t, &cfg)?;
    let mut analytic = out.grad_source;
    analytic.extend_from_slice(&out.grad_target);
    let f = |v: &[f64]| {
        let (s, t) = split(v);
        let o = mmd2(&s, &t, &cfg).expect("nondegenerate");
        Evaluation {
            value: o.value,
            branch: median_branch([o.median_pair]),
        }
    };
    Ok(grad_check(f, &x, &analytic, EPS, None))
}

fn check_decoupled(seed: u64) -> Result<GradCheckReport> {
    let mut g = rng_for(seed, 11);
    let (ns, nt, d1, d2) = (3, 3, 2, 3);
    let sizes = [ns * d1, nt * d1, ns * d2, nt * d2];
    let x = uniform(&mut g, sizes.iter().sum());
    let cfg = KernelConfig::default();
    let split = |v: &[f64]| {
        let mut at = 0;
        let mut next = |n: usize, d: usize| {
            let b = FeatureBatch::new(n, d, v[at..at + n * d].to_vec()).expect("shape");
            at += n * d;
            b
        };
        [next(ns, d1), next(nt, d1), next(ns, d2), next(nt, d2)]
    };
    let [a, b, c, d] = split(&x);
    let out = decoupled_loss(&a, &b, &c, &d, &cfg)?;
    let analytic: Vec<f64> = [
        &out.spectral.grad_source,
        &out.spectral.grad_target,
        &out.spatial.grad_source,
        &out.spatial.grad_target,
    ]
    .into_iter()
    .flatten()
    .copied()
    .collect();
    let f = |v: &[f64]| {
        let [a, b, c, d] = split(v);
        let o = decoupled_loss(&a, &b, &c, &d, &cfg).expect("nondegenerate");
        Evaluation {
            value: o.total(),
            branch: median_branch([o.spectral.median_pair, o.spatial.median_pair]),
        }
    };
    Ok(grad_check(f, &x, &analytic, EPS, None))
}

/// Reduced widths that keep every architectural path of the default
/// encoder while staying cheap enough for exhaustive probing.
pub fn check_arch() -> ArchConfig {
    ArchConfig {
        spectral_width: 3,
        spatial_width: 2,
        feature_channels: 4,
        spectral_kernel: 3,
        spatial_kernel: [3, 3, 3],
        reduction: 2,
    }
}

/// `L_cls + α·(L_spe + L_spa)` on a 2+2 batch, as a function of every
/// aligned-encoder and classifier parameter.
fn check_objective(seed: u64) -> Result<GradCheckReport> {
    let mut g = rng_for(seed, 12);
    let cfg = TrainConfig {
        seed,
        arch: check_arch(),
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&cfg, 3)?;
    for id in state.aligned.store.ids().collect::<Vec<_>>() {
        if state.aligned.store.name(id).ends_with(".b") {
            for v in state.aligned.store.value_mut(id).data_mut() {
                *v = g.random_range(-0.3..0.3);
            }
        }
    }
    let (bands, p) = (5, 3);
    let xs = tensor(&mut g, &[1, bands, p, p, 2]);
    let xt = tensor(&mut g, &[1, bands, p, p, 2]).map(|v| v + 0.5);
    let ys = [0, 2];
    let grads = loss_and_grads(&state, &xs, &ys, &xt, &cfg)?;
    let analytic: Vec<f64> = grads
        .encoder
        .iter()
        .chain(&grads.classifier)
        .flat_map(|t| t.data().iter().copied())
        .collect();
    let mut theta = state.aligned.store.flatten();
    theta.extend(state.classifier.store.flatten());
    let k = state.aligned.store.scalar_count();
    let mut probe = state.clone();
    let f = |v: &[f64]| {
        probe.aligned.store.unflatten(&v[..k]);
        probe.classifier.store.unflatten(&v[k..]);
        let o = loss_and_grads(&probe, &xs, &ys, &xt, &cfg).expect("finite");
        Evaluation {
            value: o.report.total,
            branch: o.branch,
        }
    };
    Ok(grad_check(f, &theta, &analytic, EPS, None))
}
