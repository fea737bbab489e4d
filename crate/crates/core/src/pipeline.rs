//! End-to-end glue: standardize scenes, cut patches, train, infer.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::{
    extract_patches, standardize_bands, synth_pair, DatasetMeta, HsiCube, LabelMap, PatchBatch,
    SynthParams, SynthScene, UNKNOWN_SENTINEL,
};
use crate::metrics::Label;
use crate::encoder::save_checkpoint;
use crate::map::write_ppm;
use crate::trainer::{infer, train, Inference, TrainConfig, TrainState};
use crate::{Error, Result};

/// Patches and ground truth ready for training and scoring.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub source: PatchBatch,
    pub target: PatchBatch,
    /// Ground truth for every target pixel, when a label map was given.
    /// Unlabeled target pixels are scored but excluded from the metrics.
    pub truth: Option<Vec<Option<Label>>>,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
}

impl Prepared {
    /// Predictions and truth restricted to labeled target pixels.
    pub fn scored_pairs(&self, pred: &[Label]) -> Option<(Vec<Label>, Vec<Label>)> {
        let truth = self.truth.as_ref()?;
        let (p, t) = pred
            .iter()
            .zip(truth)
            .filter_map(|(&p, t)| t.map(|t| (p, t)))
            .unzip();
        Some((p, t))
    }
}

fn to_label(l: u16) -> Option<Label> {
    match l {
        0 => None,
        UNKNOWN_SENTINEL => Some(Label::Unknown),
        c => Some(Label::Known(c as usize - 1)),
    }
}

/// Standardizes each cube band-wise on its own statistics and extracts
/// labeled source patches and all target patches.
pub fn prepare(
    source: &HsiCube,
    source_labels: &LabelMap,
    target: &HsiCube,
    target_labels: Option<&LabelMap>,
    patch: usize,
) -> Result<Prepared> {
    if source.bands != target.bands {
        return Err(Error::shape("prepare bands", &[source.bands], &[target.bands]));
    }
    let classes = source_labels.classes();
    if let Some(t) = target_labels {
        if (t.height, t.width) != (target.height, target.width) {
            return Err(Error::shape(
                "target labels",
                &[target.height, target.width],
                &[t.height, t.width],
            ));
        }
        if t.classes() != classes {
            return Err(Error::Config(format!(
                "source has {classes} classes but target labels declare {}",
                t.classes()
            )));
        }
    }
    let s = standardize_bands(source)?;
    let t = standardize_bands(target)?;
    Ok(Prepared {
        source: extract_patches(&s, Some(source_labels), patch)?,
        target: extract_patches(&t, None, patch)?,
        truth: target_labels.map(|m| m.labels.iter().map(|&l| to_label(l)).collect()),
        classes,
        height: target.height,
        width: target.width,
    })
}

/// Synthetic scene of the reference benchmark: 32 bands, 64×64 pixels,
/// four known classes and one unknown, shift 0.3.
pub fn benchmark_scene(seed: u64) -> Result<SynthScene> {
    synth_pair(
        &DatasetMeta {
            known_classes: 4,
            unknown_present: true,
            seed,
        },
        &SynthParams::default(),
    )
}

pub struct RunOutput {
    pub state: TrainState,
    pub inference: Inference,
}

pub fn run(prepared: &Prepared, cfg: &TrainConfig, log: Option<&mut dyn Write>) -> Result<RunOutput> {
    let mut state = TrainState::new(cfg, prepared.classes)?;
    train(&mut state, &prepared.source, &prepared.target, cfg, log)?;
    let inference = evaluate(&state, prepared, cfg)?;
    Ok(RunOutput { state, inference })
}

pub fn evaluate(state: &TrainState, prepared: &Prepared, cfg: &TrainConfig) -> Result<Inference> {
    let mut inf = infer(state, &prepared.target, None, cfg)?;
    if let Some((p, t)) = prepared.scored_pairs(&inf.predictions) {
        inf.metrics = Some(crate::metrics::compute_metrics(&p, &t, prepared.classes)?);
    }
    Ok(inf)
}

/// Files written by [`write_evaluation`].
#[derive(Clone, Debug, PartialEq)]
pub struct EvalFiles {
    /// Absent when the target has no ground truth.
    pub metrics: Option<PathBuf>,
    pub gmm: PathBuf,
    pub map: PathBuf,
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Saves the training state as `checkpoint.json` + `checkpoint.bin` in `dir`.
pub fn write_checkpoint(dir: &Path, state: &TrainState, cfg: &TrainConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_checkpoint(&state.checkpoint(cfg), dir, "checkpoint")
}

/// Writes `metrics.json`, `gmm.json` and the classification map `map.ppm`.
pub fn write_evaluation(dir: &Path, prepared: &Prepared, inf: &Inference) -> Result<EvalFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics = match &inf.metrics {
        Some(m) => {
            let path = dir.join("metrics.json");
            write_json(&path, m)?;
            Some(path)
        }
        None => None,
    };
    let gmm = dir.join("gmm.json");
    write_json(&gmm, &inf.gmm.to_json())?;
    let map = dir.join("map.ppm");
    write_ppm(&map, prepared.width, prepared.height, &inf.predictions)?;
    Ok(EvalFiles { metrics, gmm, map })
}
