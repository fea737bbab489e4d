//! Synthetic source/target scene pairs.
//!
//! Each class has a spectral signature made of a few Gaussian bumps, all
//! centred inside a band range of its own (the bands are split evenly among
//! the known and unknown classes). A scene is a grid of square blocks, one
//! class per block; class abundances are box filtered so that block borders
//! mix neighbouring signatures, then white noise is added. The target scene
//! uses all classes (the extra ones are the unknowns) and every target band
//! goes through an affine map `a·x + b` with `|a - 1|` and `|b|` bounded by
//! `shift`.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetMeta, HsiCube, LabelMap, UNKNOWN_SENTINEL};
use crate::{rng, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub bands: usize,
    pub size: usize,
    pub shift: f64,
    pub unknown_classes: usize,
    /// Labeled source pixels kept per known class.
    pub labeled_per_class: usize,
    pub block: usize,
    /// Box-filter radius applied to class abundances.
    pub smooth: usize,
    pub noise: f64,
    pub bumps: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            bands: 32,
            size: 64,
            shift: 0.3,
            unknown_classes: 1,
            labeled_per_class: 64,
            block: 8,
            smooth: 1,
            noise: 0.05,
            bumps: 3,
        }
    }
}

impl SynthParams {
    pub fn validate(&self, meta: &DatasetMeta) -> Result<()> {
        meta.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.shift >= 0.0 && self.shift.is_finite()) {
            return bad("shift must be a finite nonnegative number");
        }
        if self.bands == 0 || self.size == 0 || self.block == 0 || self.bumps == 0 {
            return bad("bands, size, block and bumps must be positive");
        }
        if meta.unknown_present != (self.unknown_classes > 0) {
            return bad("unknown_present disagrees with unknown_classes");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be a finite nonnegative number");
        }
        let blocks = self.size.div_ceil(self.block).pow(2);
        if blocks < meta.known_classes + self.unknown_classes {
            return bad("scene has fewer blocks than classes");
        }
        if self.labeled_per_class == 0 {
            return bad("labeled_per_class must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub source: HsiCube,
    /// Sparse training labels.
    pub source_labels: LabelMap,
    /// Dense ground truth of the source scene.
    pub source_truth: LabelMap,
    pub target: HsiCube,
    /// Dense ground truth; unknown classes carry [`UNKNOWN_SENTINEL`].
    pub target_labels: LabelMap,
}

pub fn synth_pair(meta: &DatasetMeta, params: &SynthParams) -> Result<SynthScene> {
    params.validate(meta)?;
    let mut g = rng::stream(meta.seed, rng::tags::SYNTH);
    let (cs, cu, bands) = (meta.known_classes, params.unknown_classes, params.bands);
    let seg = bands as f64 / (cs + cu) as f64;
    let signatures: Vec<Vec<f64>> = (0..cs + cu)
        .map(|c| {
            let mut s = vec![0.0; bands];
            for _ in 0..params.bumps {
                let mu = (c as f64 + g.random_range(0.0..1.0)) * seg;
                let w = g.random_range(2.0..6.0);
                let a = g.random_range(0.3..1.0);
                for (k, v) in s.iter_mut().enumerate() {
                    let z = (k as f64 - mu) / w;
                    *v += a * (-0.5 * z * z).exp();
                }
            }
            s
        })
        .collect();

    let (src_class, src) = scene(&mut g, &signatures, cs, params);
    let (tgt_class, mut tgt) = scene(&mut g, &signatures, cs + cu, params);
    let np = params.size * params.size;
    for b in 0..bands {
        let a = 1.0 + params.shift * g.random_range(-1.0..1.0);
        let off = params.shift * g.random_range(-1.0..1.0);
        for v in &mut tgt[b * np..(b + 1) * np] {
            *v = a * *v + off;
        }
    }

    let mut sparse = vec![0u16; np];
    for c in 0..cs {
        let pool: Vec<usize> = (0..np).filter(|&i| src_class[i] == c).collect();
        for &i in pool.choose_multiple(&mut g, params.labeled_per_class) {
            sparse[i] = c as u16 + 1;
        }
    }
    let names: Vec<String> = (1..=cs).map(|c| format!("class{c}")).collect();
    let dense = |cls: &[usize]| -> Vec<u16> {
        cls.iter()
            .map(|&c| if c < cs { c as u16 + 1 } else { UNKNOWN_SENTINEL })
            .collect()
    };
    let (s, h) = (params.size, params.size);
    Ok(SynthScene {
        source: HsiCube::new(bands, h, s, src, "source")?,
        source_labels: LabelMap::new(h, s, sparse, names.clone())?,
        source_truth: LabelMap::new(h, s, dense(&src_class), names.clone())?,
        target: HsiCube::new(bands, h, s, tgt, "target")?,
        target_labels: LabelMap::new(h, s, dense(&tgt_class), names)?,
    })
}

/// Returns per-pixel class and band-sequential values.
fn scene(
    g: &mut impl Rng,
    signatures: &[Vec<f64>],
    classes: usize,
    params: &SynthParams,
) -> (Vec<usize>, Vec<f64>) {
    let (size, block, bands) = (params.size, params.block, params.bands);
    let nb = size.div_ceil(block);
    // every class gets an equal share of blocks, up to the remainder
    let mut blocks: Vec<usize> = (0..nb * nb).map(|i| i % classes).collect();
    blocks.shuffle(g);
    let class: Vec<usize> = (0..size * size)
        .map(|i| blocks[(i / size / block) * nb + (i % size) / block])
        .collect();

    let r = params.smooth as isize;
    let clamp = |v: isize| v.clamp(0, size as isize - 1) as usize;
    let np = size * size;
    let mut values = vec![0.0; bands * np];
    let mut abundance = vec![0.0; classes];
    let noise = Normal::new(0.0, params.noise).unwrap();
    for row in 0..size {
        for col in 0..size {
            abundance.iter_mut().for_each(|a| *a = 0.0);
            for dr in -r..=r {
                for dc in -r..=r {
                    let (rr, cc) = (clamp(row as isize + dr), clamp(col as isize + dc));
                    abundance[class[rr * size + cc]] += 1.0;
                }
            }
            let total = ((2 * r + 1) * (2 * r + 1)) as f64;
            let i = row * size + col;
            for (b, v) in (0..bands).map(|b| (b, b * np + i)) {
                values[v] = abundance
                    .iter()
                    .zip(signatures)
                    .map(|(a, s)| a / total * s[b])
                    .sum::<f64>();
            }
        }
    }
    for v in &mut values {
        *v += noise.sample(g);
    }
    (class, values)
}
