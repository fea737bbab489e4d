//! Joint single-stage training of the aligned encoder and classifier, and
//! open-set inference against the frozen intrinsic encoder.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{mmd2, FeatureBatch, KernelConfig, LossReport, MmdOutput};
use crate::data::{BatchSampler, PatchBatch};
use crate::encoder::{
    backward, encode, forward, init_encoder, ArchConfig, Branch, Checkpoint, EncoderParams,
};
use crate::metrics::{compute_metrics, Label, MetricsReport};
use crate::nn::{fold_index, linear, linear_backward, softmax_cross_entropy, ParamStore, Tensor};
use crate::openset::{classify_known_unknown, consistency_score, gmm_fit, GmmModel};
use crate::{rng, Error, Result};

/// How the frozen intrinsic encoder is initialised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntrinsicInit {
    /// A copy of the aligned encoder's initial weights, taken before the first
    /// update.
    Snapshot,
    /// A separate draw from the intrinsic branch's own seed stream.
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub k: usize,
    pub patch: usize,
    pub arch: ArchConfig,
    pub kernel: KernelConfig,
    pub intrinsic_init: IntrinsicInit,
    /// Samples per forward pass at inference.
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 10.0,
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 1e-3,
            batch_size: 64,
            epochs: 50,
            seed: 0,
            k: 2,
            patch: 7,
            arch: ArchConfig::default(),
            kernel: KernelConfig::default(),
            intrinsic_init: IntrinsicInit::Snapshot,
            eval_chunk: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be finite and nonnegative, got {}", self.alpha));
        }
        if !(self.lr > 0.0 && self.momentum >= 0.0 && self.momentum < 1.0 && self.weight_decay >= 0.0) {
            return bad("need lr > 0, 0 <= momentum < 1, weight_decay >= 0".into());
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return bad(format!("batch_size must be even and >= 2, got {}", self.batch_size));
        }
        if self.k < 2 {
            return bad(format!("k must be at least 2, got {}", self.k));
        }
        if self.patch % 2 == 0 {
            return bad(format!("patch must be odd, got {}", self.patch));
        }
        if self.eval_chunk == 0 {
            return bad("eval_chunk must be positive".into());
        }
        self.arch.validate()?;
        self.kernel.validate()
    }
}

/// Linear head over fused features: `w` is `[C, 2·C_f]`, `b` is `[C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub store: ParamStore,
}

impl Classifier {
    pub fn new(seed: u64, classes: usize, dim: usize) -> Self {
        let mut g = rng::stream(seed, rng::tags::CLASSIFIER_INIT);
        let bound = (6.0 / dim as f64).sqrt();
        let w = (0..classes * dim).map(|_| g.random_range(-bound..bound)).collect();
        let mut store = ParamStore::new();
        store.push("w", Tensor::new(vec![classes, dim], w).expect("finite init"));
        store.push("b", Tensor::zeros(&[classes]));
        Classifier { store }
    }

    fn w(&self) -> &Tensor {
        &self.store.values()[0]
    }

    fn b(&self) -> &Tensor {
        &self.store.values()[1]
    }

    pub fn classes(&self) -> usize {
        self.w().shape()[0]
    }

    pub fn logits(&self, fused: &Tensor) -> Result<Tensor> {
        linear(fused, self.w(), self.b())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub aligned: EncoderParams,
    pub classifier: Classifier,
    pub intrinsic: EncoderParams,
    pub epoch: usize,
    pub history: Vec<LossReport>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, classes: usize) -> Result<Self> {
        cfg.validate()?;
        if classes < 2 {
            return Err(Error::Config(format!("need at least two classes, got {classes}")));
        }
        let aligned = init_encoder(cfg.seed, &cfg.arch, Branch::Aligned)?;
        let intrinsic = match cfg.intrinsic_init {
            IntrinsicInit::Snapshot => aligned.snapshot(Branch::Intrinsic),
            IntrinsicInit::Independent => init_encoder(cfg.seed, &cfg.arch, Branch::Intrinsic)?,
        };
        Ok(TrainState {
            classifier: Classifier::new(cfg.seed, classes, cfg.arch.fused_dim()),
            aligned,
            intrinsic,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// Parameters of all three networks plus the optimizer's momentum
    /// buffers.
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let velocity = |s: &ParamStore| {
            let mut v = ParamStore::new();
            for (id, m) in s.ids().zip(s.momentum()) {
                v.push(s.name(id), m.clone());
            }
            v
        };
        let (va, vc) = (velocity(&self.aligned.store), velocity(&self.classifier.store));
        let meta = serde_json::json!({
            "epoch": self.epoch,
            "classes": self.classifier.classes(),
            "config": cfg,
        });
        Checkpoint::new(
            cfg.seed,
            &cfg.arch,
            meta,
            &[
                ("aligned", &self.aligned.store),
                ("classifier", &self.classifier.store),
                ("intrinsic", &self.intrinsic.store),
                ("momentum.aligned", &va),
                ("momentum.classifier", &vc),
            ],
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        let classes = ckpt.manifest.meta["classes"]
            .as_u64()
            .ok_or_else(|| Error::Config("checkpoint lacks a class count".into()))? as usize;
        let mut state = TrainState::new(cfg, classes)?;
        ckpt.restore("aligned", &mut state.aligned.store)?;
        ckpt.restore("classifier", &mut state.classifier.store)?;
        ckpt.restore("intrinsic", &mut state.intrinsic.store)?;
        for (group, store) in [
            ("momentum.aligned", &mut state.aligned.store),
            ("momentum.classifier", &mut state.classifier.store),
        ] {
            let mut v = ParamStore::new();
            for id in store.ids() {
                v.push(store.name(id), Tensor::zeros(store.value(id).shape()));
            }
            ckpt.restore(group, &mut v)?;
            for (m, t) in store.momentum_mut().iter_mut().zip(v.values()) {
                *m = t.clone();
            }
        }
        state.epoch = ckpt.manifest.meta["epoch"].as_u64().unwrap_or(0) as usize;
        Ok(state)
    }
}

fn rows_to_batch_last(grad: &[f64], n: usize, dim: usize) -> Tensor {
    let mut out = vec![0.0; n * dim];
    for i in 0..n {
        for k in 0..dim {
            out[k * n + i] = grad[i * dim + k];
        }
    }
    Tensor::from_parts(vec![dim, n], out)
}

fn split_fused(d: &Tensor, cf: usize) -> (Tensor, Tensor) {
    let n = d.shape()[1];
    (
        Tensor::from_parts(vec![cf, n], d.data()[..cf * n].to_vec()),
        Tensor::from_parts(vec![cf, n], d.data()[cf * n..].to_vec()),
    )
}

fn check(term: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence { term })
    }
}

/// Loss and parameter gradients for one mixed batch.
#[derive(Clone, Debug)]
pub struct StepGrads {
    pub report: LossReport,
    /// Aligned-encoder gradients in store order.
    pub encoder: Vec<Tensor>,
    /// Classifier `[dw, db]`.
    pub classifier: Vec<Tensor>,
    /// Fingerprint of the piecewise decisions taken (ReLU signs, max
    /// winners, median pairs).
    pub branch: u64,
}

/// Computes the loss and its gradients without updating any parameter.
pub fn loss_and_grads(
    state: &TrainState,
    xs: &Tensor,
    ys: &[usize],
    xt: &Tensor,
    cfg: &TrainConfig,
) -> Result<StepGrads> {
    let (fs, cache_s) = forward(&state.aligned, xs)?;
    let (ft, cache_t) = forward(&state.aligned, xt)?;
    let logits = state.classifier.logits(&fs.fused)?;
    let (cls, _, dlogits) = softmax_cross_entropy(&logits, ys)?;
    let (dfused, dw, db) = linear_backward(&fs.fused, state.classifier.w(), &dlogits)?;

    let (ns, nt) = (fs.len(), ft.len());
    let cf = cfg.arch.feature_channels;
    let mmd = |s: &Tensor, t: &Tensor| -> Result<MmdOutput> {
        mmd2(
            &FeatureBatch::from_columns(s, 0..ns)?,
            &FeatureBatch::from_columns(t, 0..nt)?,
            &cfg.kernel,
        )
    };
    let spe = mmd(&fs.spe, &ft.spe)?;
    let spa = mmd(&fs.spa, &ft.spa)?;
    let report = LossReport::new(
        check("cls", cls)?,
        check("spe", spe.value)?,
        check("spa", spa.value)?,
        cfg.alpha,
    );
    check("total", report.total)?;

    let (mut d_spe, mut d_spa) = split_fused(&dfused, cf);
    let grads = if cfg.alpha > 0.0 {
        let scaled = |g: &[f64], n| rows_to_batch_last(g, n, cf).map(|v| cfg.alpha * v);
        d_spe.add_assign(&scaled(&spe.grad_source, ns));
        d_spa.add_assign(&scaled(&spa.grad_source, ns));
        let gt = backward(
            &state.aligned,
            &cache_t,
            &scaled(&spe.grad_target, nt),
            &scaled(&spa.grad_target, nt),
        )?;
        let mut gs = backward(&state.aligned, &cache_s, &d_spe, &d_spa)?;
        for (a, b) in gs.iter_mut().zip(&gt) {
            a.add_assign(b);
        }
        gs
    } else {
        backward(&state.aligned, &cache_s, &d_spe, &d_spa)?
    };
    for g in &grads {
        if !g.is_finite() {
            return Err(Error::Divergence { term: "gradient" });
        }
    }
    let pairs = [spe.median_pair, spa.median_pair]
        .into_iter()
        .flat_map(|p| p.map_or([usize::MAX; 2], |(a, b)| [a, b]));
    let branch = fold_index(
        cache_s.branch_fingerprint() ^ cache_t.branch_fingerprint().rotate_left(1),
        pairs,
    );
    Ok(StepGrads {
        report,
        encoder: grads,
        classifier: vec![dw, db],
        branch,
    })
}

/// One SGD update of the aligned encoder and classifier on a mixed batch.
/// `xs`, `xt` are `[1, bands, p, p, n]`; `ys` are 0-based source labels.
pub fn train_step(
    state: &mut TrainState,
    xs: &Tensor,
    ys: &[usize],
    xt: &Tensor,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let g = loss_and_grads(state, xs, ys, xt, cfg)?;
    let report = g.report;
    state.aligned.store.accumulate(&g.encoder);
    state.classifier.store.accumulate(&g.classifier);
    state.aligned.store.sgd_step(cfg.lr, cfg.momentum, cfg.weight_decay);
    state.classifier.store.sgd_step(cfg.lr, cfg.momentum, cfg.weight_decay);
    state.history.push(report);
    Ok(report)
}

#[derive(Serialize)]
struct LogLine<'a> {
    epoch: usize,
    step: usize,
    #[serde(flatten)]
    loss: &'a LossReport,
}

/// Runs `cfg.epochs` epochs of mixed batches. Writes one JSON line per step
/// to `log` when given.
pub fn train(
    state: &mut TrainState,
    source: &PatchBatch,
    target: &PatchBatch,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<()> {
    cfg.validate()?;
    let labels = source
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config("source patches carry no labels".into()))?;
    if let Some(&l) = labels.iter().find(|&&l| l >= state.classifier.classes()) {
        return Err(Error::LabelOutOfRange {
            label: l,
            classes: state.classifier.classes(),
        });
    }
    let sampler = BatchSampler::new(source.len(), target.len(), cfg.batch_size, cfg.seed)?;
    let mut step = state.history.len();
    for _ in 0..cfg.epochs {
        for (si, ti) in sampler.epoch(state.epoch) {
            let ys: Vec<usize> = si.iter().map(|&i| labels[i]).collect();
            let report = train_step(state, &source.gather(&si), &ys, &target.gather(&ti), cfg)?;
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&LogLine {
                    epoch: state.epoch,
                    step,
                    loss: &report,
                })?;
                writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
            }
            step += 1;
        }
        state.epoch += 1;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub predictions: Vec<Label>,
    /// Closed-set classifier decision for every sample.
    pub closed_set: Vec<usize>,
    pub scores: Vec<f64>,
    pub gmm: GmmModel,
    pub metrics: Option<MetricsReport>,
}

/// Consistency scores and closed-set labels for every target patch.
pub fn score_targets(state: &TrainState, target: &PatchBatch, cfg: &TrainConfig) -> Result<(Vec<f64>, Vec<usize>)> {
    let fa = encode(&state.aligned, target, cfg.eval_chunk)?;
    let fb = encode(&state.intrinsic, target, cfg.eval_chunk)?;
    let logits = state.classifier.logits(&fa.fused)?;
    let c = state.classifier.classes();
    let n = fa.len();
    let closed = (0..n)
        .map(|i| {
            (0..c)
                .reduce(|a, b| if logits.data()[b * n + i] > logits.data()[a * n + i] { b } else { a })
                .expect("c >= 2")
        })
        .collect();
    let scores = (0..n)
        .map(|i| consistency_score(&fa.fused_row(i), &fb.fused_row(i)).map(|s| s.s))
        .collect::<Result<_>>()?;
    Ok((scores, closed))
}

/// Known/unknown split of precomputed scores with a `k`-component mixture.
pub fn decide(
    scores: &[f64],
    closed: &[usize],
    k: usize,
    seed: u64,
    truth: Option<&[Label]>,
    classes: usize,
) -> Result<Inference> {
    let gmm = gmm_fit(scores, k, seed)?;
    let predictions: Vec<Label> = classify_known_unknown(&gmm, scores)
        .iter()
        .zip(closed)
        .map(|(d, &c)| if d.unknown { Label::Unknown } else { Label::Known(c) })
        .collect();
    let metrics = truth
        .map(|t| compute_metrics(&predictions, t, classes))
        .transpose()?;
    Ok(Inference {
        predictions,
        closed_set: closed.to_vec(),
        scores: scores.to_vec(),
        gmm,
        metrics,
    })
}

/// Scores every target patch with both encoders, fits the mixture on all
/// scores and labels each sample.
pub fn infer(
    state: &TrainState,
    target: &PatchBatch,
    truth: Option<&[Label]>,
    cfg: &TrainConfig,
) -> Result<Inference> {
    let (scores, closed) = score_targets(state, target, cfg)?;
    decide(&scores, &closed, cfg.k, cfg.seed, truth, state.classifier.classes())
}

#[cfg(test)]
mod tests;
