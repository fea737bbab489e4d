//! Hyperspectral cubes, label maps, patch extraction and mini-batch
//! sampling.

mod io;
mod synth;

pub use io::{
    cube_from_bytes, cube_to_bytes, labels_from_bytes, labels_to_bytes, load_cube, load_labels,
    save_cube, save_labels,
};
pub use synth::{synth_pair, SynthParams, SynthScene};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::Tensor;
use crate::{rng, Error, Result};

/// Label value marking ground-truth pixels of classes absent from the source.
pub const UNKNOWN_SENTINEL: u16 = u16::MAX;

/// Band-sequential cube: `values[(b * height + r) * width + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub name: String,
}

impl HsiCube {
    pub fn new(
        bands: usize,
        height: usize,
        width: usize,
        values: Vec<f64>,
        name: impl Into<String>,
    ) -> Result<Self> {
        let cube = HsiCube {
            bands,
            height,
            width,
            values,
            name: name.into(),
        };
        cube.validate()?;
        Ok(cube)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 {
            return Err(Error::Config("cube must have at least one band".into()));
        }
        let n = self.bands * self.height * self.width;
        if self.values.len() != n {
            return Err(Error::shape(
                "HsiCube",
                &[self.bands, self.height, self.width],
                &[self.values.len()],
            ));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Degenerate(format!("non-finite cube value at index {i}")));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn band(&self, b: usize) -> &[f64] {
        let n = self.pixels();
        &self.values[b * n..(b + 1) * n]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    /// Row-major. 0 = unlabeled, `1..=C` = class, [`UNKNOWN_SENTINEL`] = unknown.
    pub labels: Vec<u16>,
    pub class_names: Vec<String>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u16>, class_names: Vec<String>) -> Result<Self> {
        let map = LabelMap {
            height,
            width,
            labels,
            class_names,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.height * self.width {
            return Err(Error::shape(
                "LabelMap",
                &[self.height, self.width],
                &[self.labels.len()],
            ));
        }
        if let Some(i) = self.first_invalid() {
            return Err(Error::LabelOutOfRange {
                label: self.labels[i] as usize,
                classes: self.class_names.len(),
            });
        }
        Ok(())
    }

    fn first_invalid(&self) -> Option<usize> {
        let c = self.class_names.len();
        self.labels
            .iter()
            .position(|&l| l != UNKNOWN_SENTINEL && l as usize > c)
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    /// Per-pixel ground truth for scoring: `Some(k)` for known class `k`
    /// (0-based), `None` for unknown, and unlabeled pixels skipped.
    pub fn truth(&self) -> Vec<(usize, Option<usize>)> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != 0)
            .map(|(i, &l)| (i, (l != UNKNOWN_SENTINEL).then(|| l as usize - 1)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub known_classes: usize,
    pub unknown_present: bool,
    pub seed: u64,
}

impl DatasetMeta {
    pub fn validate(&self) -> Result<()> {
        if self.known_classes < 2 {
            return Err(Error::Config(format!(
                "need at least two known classes, got {}",
                self.known_classes
            )));
        }
        Ok(())
    }
}

/// `n` patches of `bands × p × p`, stored patch-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    pub patches: Vec<f64>,
    /// 0-based class indices; present iff `domain == Source`.
    pub labels: Option<Vec<usize>>,
    pub domain: Domain,
    pub patch_size: usize,
    pub bands: usize,
    /// Row-major pixel index of each patch center.
    pub pixels: Vec<usize>,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    fn patch_len(&self) -> usize {
        self.bands * self.patch_size * self.patch_size
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        let l = self.patch_len();
        &self.patches[i * l..(i + 1) * l]
    }

    /// Batch-last `[1, bands, p, p, idx.len()]` tensor of the selected patches.
    pub fn gather(&self, idx: &[usize]) -> Tensor {
        let (l, m) = (self.patch_len(), idx.len());
        let mut data = vec![0.0; l * m];
        for (j, &i) in idx.iter().enumerate() {
            for (e, &v) in self.patch(i).iter().enumerate() {
                data[e * m + j] = v;
            }
        }
        let p = self.patch_size;
        Tensor::from_parts(vec![1, self.bands, p, p, m], data)
    }

    pub fn labels_of(&self, idx: &[usize]) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect())
    }
}

/// Per-band standardization to zero mean and unit population variance.
pub fn standardize_bands(cube: &HsiCube) -> Result<HsiCube> {
    cube.validate()?;
    let n = cube.pixels() as f64;
    let mut out = cube.clone();
    let np = cube.pixels();
    for b in 0..cube.bands {
        let band = &mut out.values[b * np..(b + 1) * np];
        let mean = band.iter().sum::<f64>() / n;
        let var = band.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        // f32-exact data with var below this is constant up to rounding
        if !(var > 1e-24 * (1.0 + mean * mean)) {
            return Err(Error::DegenerateBand { band: b });
        }
        let sd = var.sqrt();
        for v in band.iter_mut() {
            *v = (*v - mean) / sd;
        }
    }
    Ok(out)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// One `bands × p × p` patch per labeled pixel (when `labels` is given) or
/// per pixel (when not). Out-of-bounds rows and columns reflect about the
/// edge pixel.
pub fn extract_patches(cube: &HsiCube, labels: Option<&LabelMap>, p: usize) -> Result<PatchBatch> {
    cube.validate()?;
    if p % 2 == 0 {
        return Err(Error::Config(format!("patch size must be odd, got {p}")));
    }
    if p > cube.height.min(cube.width) {
        return Err(Error::Config(format!(
            "patch size {p} exceeds the {}×{} scene",
            cube.height, cube.width
        )));
    }
    let (centers, class): (Vec<usize>, Option<Vec<usize>>) = match labels {
        Some(map) => {
            if (map.height, map.width) != (cube.height, cube.width) {
                return Err(Error::shape(
                    "extract_patches labels",
                    &[cube.height, cube.width],
                    &[map.height, map.width],
                ));
            }
            map.validate()?;
            let picked: Vec<(usize, usize)> = map
                .labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l != 0 && l != UNKNOWN_SENTINEL)
                .map(|(i, &l)| (i, l as usize - 1))
                .collect();
            (
                picked.iter().map(|x| x.0).collect(),
                Some(picked.iter().map(|x| x.1).collect()),
            )
        }
        None => ((0..cube.pixels()).collect(), None),
    };
    if centers.is_empty() {
        return Err(Error::Empty("no labeled pixels to extract".into()));
    }
    let r = (p / 2) as isize;
    let (h, w, np) = (cube.height, cube.width, cube.pixels());
    let mut patches = Vec::with_capacity(centers.len() * cube.bands * p * p);
    for &c in &centers {
        let (row, col) = ((c / w) as isize, (c % w) as isize);
        for b in 0..cube.bands {
            let band = &cube.values[b * np..(b + 1) * np];
            for dr in -r..=r {
                let rr = reflect(row + dr, h);
                for dc in -r..=r {
                    patches.push(band[rr * w + reflect(col + dc, w)]);
                }
            }
        }
    }
    Ok(PatchBatch {
        patches,
        domain: if class.is_some() {
            Domain::Source
        } else {
            Domain::Target
        },
        labels: class,
        patch_size: p,
        bands: cube.bands,
        pixels: centers,
    })
}

/// Index pairs `(source, target)` for one mini-batch.
pub type BatchIndices = (Vec<usize>, Vec<usize>);

/// Seeded mixed source/target mini-batch schedule.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n_source: usize,
    n_target: usize,
    half: usize,
    seed: u64,
}

pub fn batch_iter(
    source: &PatchBatch,
    target: &PatchBatch,
    batch_size: usize,
    seed: u64,
) -> Result<BatchSampler> {
    BatchSampler::new(source.len(), target.len(), batch_size, seed)
}

impl BatchSampler {
    pub fn new(n_source: usize, n_target: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 2 || batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch size must be even and at least 2, got {batch_size}"
            )));
        }
        if n_source == 0 || n_target == 0 {
            return Err(Error::Empty("batch sampler needs source and target samples".into()));
        }
        Ok(BatchSampler {
            n_source,
            n_target,
            half: batch_size / 2,
            seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n_source.div_ceil(self.half)
    }

    /// Source indices are a fresh permutation each epoch, cut into
    /// `batch_size / 2` chunks (the last one shorter when `n_source` is not a
    /// multiple). Target indices are drawn without replacement when the target
    /// set covers the epoch and uniformly with replacement otherwise; each
    /// target chunk matches its source chunk in length.
    pub fn epoch(&self, epoch: usize) -> Vec<BatchIndices> {
        let mut g = rng::stream(rng::derive(self.seed, epoch as u64), rng::tags::BATCH);
        let mut src: Vec<usize> = (0..self.n_source).collect();
        src.shuffle(&mut g);
        let tgt: Vec<usize> = if self.n_target >= self.n_source {
            let mut t: Vec<usize> = (0..self.n_target).collect();
            t.shuffle(&mut g);
            t.truncate(self.n_source);
            t
        } else {
            (0..self.n_source)
                .map(|_| g.random_range(0..self.n_target))
                .collect()
        };
        src.chunks(self.half)
            .zip(tgt.chunks(self.half))
            .map(|(s, t)| (s.to_vec(), t.to_vec()))
            .collect()
    }
}
