use std::path::{Path, PathBuf};

use osda_core::data::{DatasetMeta, SynthParams};
use osda_core::trainer::TrainConfig;
use osda_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything one invocation needs. Loaded from JSON, then overridden by
/// command-line flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub source_cube: Option<PathBuf>,
    pub source_labels: Option<PathBuf>,
    pub target_cube: Option<PathBuf>,
    pub target_labels: Option<PathBuf>,
    pub out: PathBuf,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            source_cube: None,
            source_labels: None,
            target_cube: None,
            target_labels: None,
            out: PathBuf::from("out"),
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub known_classes: usize,
    #[serde(flatten)]
    pub params: SynthParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            known_classes: 4,
            params: SynthParams::default(),
        }
    }
}

impl SynthConfig {
    pub fn meta(&self, seed: u64) -> DatasetMeta {
        DatasetMeta {
            known_classes: self.known_classes,
            unknown_present: self.params.unknown_classes > 0,
            seed,
        }
    }
}

/// Scene files; synthesised from [`SynthConfig`] when absent.
pub struct FileInputs<'a> {
    pub source_cube: &'a Path,
    pub source_labels: &'a Path,
    pub target_cube: &'a Path,
    pub target_labels: Option<&'a Path>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.params.validate(&self.synth.meta(self.train.seed))?;
        let given = [&self.source_cube, &self.source_labels, &self.target_cube]
            .iter()
            .filter(|p| p.is_some())
            .count();
        if given != 0 && given != 3 {
            return Err(Error::Config(
                "source_cube, source_labels and target_cube must be given together".into(),
            ));
        }
        if given == 0 && self.target_labels.is_some() {
            return Err(Error::Config("target_labels given without scene files".into()));
        }
        for p in self.files().into_iter().flat_map(|f| {
            [Some(f.source_cube), Some(f.source_labels), Some(f.target_cube), f.target_labels]
        }) {
            match p {
                Some(p) if !p.exists() => {
                    return Err(Error::Config(format!("no such file: {}", p.display())))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn files(&self) -> Option<FileInputs<'_>> {
        Some(FileInputs {
            source_cube: self.source_cube.as_deref()?,
            source_labels: self.source_labels.as_deref()?,
            target_cube: self.target_cube.as_deref()?,
            target_labels: self.target_labels.as_deref(),
        })
    }
}
