use super::*;
use crate::data::Domain;
use crate::encoder::load_checkpoint;
use crate::encoder::save_checkpoint;
use crate::verify::check_arch;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BANDS: usize = 5;
const P: usize = 3;

fn cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        arch: check_arch(),
        batch_size: 8,
        epochs: 2,
        patch: P,
        ..TrainConfig::default()
    }
}

/// Patches around per-class mean spectra; `labels == None` gives a target set.
fn patches(g: &mut ChaCha8Rng, labels: Option<Vec<usize>>, n: usize, offset: f64, noise: f64) -> PatchBatch {
    let means: Vec<Vec<f64>> = (0..4)
        .map(|c| (0..BANDS).map(|b| if (b + c) % 4 == 0 { 1.5 } else { -0.5 }).collect())
        .collect();
    let per = BANDS * P * P;
    let mut data = Vec::with_capacity(n * per);
    for i in 0..n {
        let c = labels.as_ref().map_or(i % 4, |l| l[i]);
        for b in 0..BANDS {
            for _ in 0..P * P {
                data.push(means[c][b] + offset + noise * g.random_range(-1.0..1.0));
            }
        }
    }
    PatchBatch {
        patches: data,
        domain: if labels.is_some() { Domain::Source } else { Domain::Target },
        labels,
        patch_size: P,
        bands: BANDS,
        pixels: (0..n).collect(),
    }
}

fn source(g: &mut ChaCha8Rng, n: usize, classes: usize) -> PatchBatch {
    patches(g, Some((0..n).map(|i| i % classes).collect()), n, 0.0, 0.3)
}

fn target(g: &mut ChaCha8Rng, n: usize) -> PatchBatch {
    patches(g, None, n, 0.4, 0.3)
}

fn accuracy(state: &TrainState, batch: &PatchBatch) -> f64 {
    let f = encode(&state.aligned, batch, 16).unwrap();
    let logits = state.classifier.logits(&f.fused).unwrap();
    let (c, n) = (state.classifier.classes(), batch.len());
    let labels = batch.labels.as_ref().unwrap();
    let hits = (0..n)
        .filter(|&i| {
            let best = (0..c)
                .max_by(|&a, &b| logits.data()[a * n + i].total_cmp(&logits.data()[b * n + i]))
                .unwrap();
            best == labels[i]
        })
        .count();
    hits as f64 / n as f64
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { alpha: -1.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 7, ..TrainConfig::default() },
        TrainConfig { lr: 0.0, ..TrainConfig::default() },
        TrainConfig { k: 1, ..TrainConfig::default() },
        TrainConfig { patch: 4, ..TrainConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
}

#[test]
fn zero_alpha_step_is_a_pure_classification_step() {
    let mut g = ChaCha8Rng::seed_from_u64(1);
    let c = TrainConfig { alpha: 0.0, ..cfg(1) };
    let xs = source(&mut g, 4, 3).gather(&[0, 1, 2, 3]);
    let ys = [0, 1, 2, 0];
    let xt = target(&mut g, 4).gather(&[0, 1, 2, 3]);

    let mut a = TrainState::new(&c, 3).unwrap();
    let mut b = a.clone();
    let report = train_step(&mut a, &xs, &ys, &xt, &c).unwrap();
    assert_eq!(report.total, report.cls);

    // classification-only reference update
    let (f, cache) = forward(&b.aligned, &xs).unwrap();
    let logits = b.classifier.logits(&f.fused).unwrap();
    let (cls, _, dl) = softmax_cross_entropy(&logits, &ys).unwrap();
    let (df, dw, db) = linear_backward(&f.fused, b.classifier.w(), &dl).unwrap();
    let (ds, dp) = split_fused(&df, c.arch.feature_channels);
    let ge = crate::encoder::backward(&b.aligned, &cache, &ds, &dp).unwrap();
    b.aligned.store.accumulate(&ge);
    b.classifier.store.accumulate(&[dw, db]);
    b.aligned.store.sgd_step(c.lr, c.momentum, c.weight_decay);
    b.classifier.store.sgd_step(c.lr, c.momentum, c.weight_decay);

    assert_eq!(report.cls.to_bits(), cls.to_bits());
    assert_eq!(a.aligned.store.flatten(), b.aligned.store.flatten());
    assert_eq!(a.classifier.store.flatten(), b.classifier.store.flatten());
}

#[test]
fn identical_domains_have_zero_alignment_loss() {
    let mut g = ChaCha8Rng::seed_from_u64(2);
    let c = cfg(2);
    let xs = source(&mut g, 4, 2).gather(&[0, 1, 2, 3]);
    let state = TrainState::new(&c, 2).unwrap();
    let r = loss_and_grads(&state, &xs, &[0, 1, 0, 1], &xs, &c).unwrap().report;
    assert_eq!(r.mmd, 0.0);
    assert_eq!(r.total, r.cls);
}

#[test]
fn full_step_gradient_matches_finite_differences() {
    let case = crate::verify::registry()
        .into_iter()
        .find(|c| c.composite)
        .unwrap();
    for seed in 0..2 {
        let r = case.run(seed).unwrap();
        assert!(r.max_rel_error <= 1e-5, "{r:?}");
        assert!(r.checked > r.skipped);
    }
}

#[test]
fn separable_two_class_task_converges() {
    let mut g = ChaCha8Rng::seed_from_u64(3);
    let c = TrainConfig {
        epochs: 30,
        batch_size: 16,
        ..cfg(3)
    };
    let s = source(&mut g, 256, 2);
    let t = target(&mut g, 256);
    let mut state = TrainState::new(&c, 2).unwrap();
    train(&mut state, &s, &t, &c, None).unwrap();
    let last = state.history.last().unwrap();
    assert!(last.cls < 0.1, "{last:?}");
}

#[test]
fn eight_samples_are_memorised() {
    let mut g = ChaCha8Rng::seed_from_u64(4);
    let c = TrainConfig {
        epochs: 200,
        batch_size: 16,
        lr: 0.01,
        ..cfg(4)
    };
    // noise-dominated inputs with arbitrary labels
    let s = patches(&mut g, Some(vec![0, 1, 2, 3, 3, 2, 1, 0]), 8, 0.0, 2.0);
    let t = target(&mut g, 8);
    let mut state = TrainState::new(&c, 4).unwrap();
    train(&mut state, &s, &t, &c, None).unwrap();
    assert_eq!(accuracy(&state, &s), 1.0, "{:?}", state.history.last());
}

#[test]
fn training_is_deterministic_and_leaves_intrinsic_branch_alone() {
    let mut g = ChaCha8Rng::seed_from_u64(5);
    let c = cfg(5);
    let s = source(&mut g, 16, 3);
    let t = target(&mut g, 20);
    let run = || {
        let mut state = TrainState::new(&c, 3).unwrap();
        let before = state.intrinsic.store.flatten();
        let mut log = Vec::new();
        train(&mut state, &s, &t, &c, Some(&mut log)).unwrap();
        assert_eq!(
            before.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            state.intrinsic.store.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        (state, log)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_eq!(a.history.len(), 2 * 4);
    for r in &a.history {
        assert!(r.total.is_finite() && r.mmd >= 0.0);
    }
    let text = String::from_utf8(la).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["alpha"], 10.0);
    assert_eq!(first["epoch"], 0);
    assert_eq!(text.lines().count(), a.history.len());
}

#[test]
fn without_alignment_or_decay_target_data_is_irrelevant() {
    let mut g = ChaCha8Rng::seed_from_u64(6);
    let c = TrainConfig {
        alpha: 0.0,
        weight_decay: 0.0,
        ..cfg(6)
    };
    let s = source(&mut g, 16, 2);
    let t1 = target(&mut g, 12);
    let t2 = patches(&mut g, None, 12, -3.0, 1.0);
    let run = |t: &PatchBatch| {
        let mut state = TrainState::new(&c, 2).unwrap();
        train(&mut state, &s, t, &c, None).unwrap();
        (state.aligned.store.flatten(), state.classifier.store.flatten())
    };
    assert_eq!(run(&t1), run(&t2));
}

#[test]
fn divergence_names_the_term() {
    let mut g = ChaCha8Rng::seed_from_u64(7);
    let c = cfg(7);
    let xs = source(&mut g, 4, 2).gather(&[0, 1, 2, 3]);
    let xt = target(&mut g, 4).gather(&[0, 1, 2, 3]);
    let mut state = TrainState::new(&c, 2).unwrap();
    let w = state.classifier.store.find("w").unwrap();
    state.classifier.store.value_mut(w).data_mut()[0] = f64::INFINITY;
    let err = train_step(&mut state, &xs, &[0, 1, 0, 1], &xt, &c).unwrap_err();
    assert!(err.is_numeric(), "{err}");
    assert!(matches!(err, Error::Divergence { term: "cls" }), "{err}");
    assert!(state.history.is_empty());
}

#[test]
fn no_unknowns_leave_unk_undefined() {
    let scores = [0.1, 0.15, 0.8, 0.85, 0.12, 0.82];
    let closed = [0, 1, 1, 0, 0, 1];
    let truth: Vec<Label> = closed.iter().map(|&c| Label::Known(c)).collect();
    let inf = decide(&scores, &closed, 2, 0, Some(&truth), 2).unwrap();
    let m = inf.metrics.unwrap();
    assert_eq!(m.unk, None);
    assert_eq!(m.hos, None);
    assert!((m.os_star - 0.5).abs() < 1e-12, "{m:?}");
}

#[test]
fn identical_targets_get_identical_decisions() {
    let mut g = ChaCha8Rng::seed_from_u64(8);
    let c = cfg(8);
    let s = source(&mut g, 16, 3);
    let mut t = target(&mut g, 12);
    let per = BANDS * P * P;
    let first = t.patches[..per].to_vec();
    t.patches[5 * per..6 * per].copy_from_slice(&first);
    let mut state = TrainState::new(&c, 3).unwrap();
    train(&mut state, &s, &t, &c, None).unwrap();
    let inf = infer(&state, &t, None, &c).unwrap();
    assert_eq!(inf.scores[0].to_bits(), inf.scores[5].to_bits());
    assert_eq!(inf.predictions[0], inf.predictions[5]);
    assert!(inf.metrics.is_none());
}

#[test]
fn checkpoint_resumes_training_exactly() {
    let mut g = ChaCha8Rng::seed_from_u64(9);
    let c = TrainConfig { epochs: 1, ..cfg(9) };
    let s = source(&mut g, 16, 3);
    let t = target(&mut g, 16);
    let mut a = TrainState::new(&c, 3).unwrap();
    train(&mut a, &s, &t, &c, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = save_checkpoint(&a.checkpoint(&c), dir.path(), "state").unwrap();
    let mut b = TrainState::from_checkpoint(&load_checkpoint(&path).unwrap(), &c).unwrap();
    assert_eq!(b.epoch, 1);
    assert_eq!(b.aligned, a.aligned);
    assert_eq!(b.intrinsic, a.intrinsic);
    assert_eq!(b.classifier, a.classifier);

    train(&mut a, &s, &t, &c, None).unwrap();
    train(&mut b, &s, &t, &c, None).unwrap();
    assert_eq!(a.aligned.store.flatten(), b.aligned.store.flatten());
}

#[test]
fn unlabeled_source_is_rejected() {
    let mut g = ChaCha8Rng::seed_from_u64(10);
    let c = cfg(10);
    let t = target(&mut g, 8);
    let mut state = TrainState::new(&c, 2).unwrap();
    assert!(matches!(
        train(&mut state, &t, &t, &c, None),
        Err(Error::Config(_))
    ));
    let s = source(&mut g, 8, 4);
    assert!(matches!(
        train(&mut state, &s, &t, &c, None),
        Err(Error::LabelOutOfRange { .. })
    ));
}
