//! `osda`: synthesise scenes, train, evaluate and self-check.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use osda_core::data::{load_cube, load_labels, save_cube, save_labels, synth_pair, UNKNOWN_SENTINEL};
use osda_core::encoder::load_checkpoint;
use osda_core::pipeline::{self, Prepared};
use osda_core::trainer::{TrainConfig, TrainState};
use osda_core::verify::{run_suite, Tolerances};
use osda_core::{Error, Result};
use serde_json::json;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "osda", version, about = "Open-set domain adaptation for hyperspectral scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic source/target scene pair.
    Synth(Common),
    /// Train on a scene pair and save a checkpoint.
    Train(Common),
    /// Score the target scene with a trained checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Manifest written by `train`; defaults to `<out>/checkpoint.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operator.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Overrides both the operator and the composite tolerance.
        #[arg(long)]
        tolerance: Option<f64>,
    },
}

#[derive(Args, Clone, Default)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    source_cube: Option<PathBuf>,
    #[arg(long)]
    source_labels: Option<PathBuf>,
    #[arg(long)]
    target_cube: Option<PathBuf>,
    #[arg(long)]
    target_labels: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        self.apply(&mut c.train);
        if let Some(o) = &self.out {
            c.out = o.clone();
        }
        for (flag, slot) in [
            (&self.source_cube, &mut c.source_cube),
            (&self.source_labels, &mut c.source_labels),
            (&self.target_cube, &mut c.target_cube),
            (&self.target_labels, &mut c.target_labels),
        ] {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        c.validate()?;
        Ok(c)
    }

    fn apply(&self, t: &mut TrainConfig) {
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.alpha {
            t.alpha = v;
        }
        if let Some(v) = self.k {
            t.k = v;
        }
        if let Some(v) = self.patch {
            t.patch = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn print(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).expect("json value"));
}

fn prepare(c: &RunConfig) -> Result<Prepared> {
    let patch = c.train.patch;
    match c.files() {
        Some(f) => {
            let target_labels = f.target_labels.map(load_labels).transpose()?;
            pipeline::prepare(
                &load_cube(f.source_cube)?,
                &load_labels(f.source_labels)?,
                &load_cube(f.target_cube)?,
                target_labels.as_ref(),
                patch,
            )
        }
        None => {
            let s = synth_pair(&c.synth.meta(c.train.seed), &c.synth.params)?;
            pipeline::prepare(&s.source, &s.source_labels, &s.target, Some(&s.target_labels), patch)
        }
    }
}

fn synth(c: &RunConfig) -> Result<()> {
    let s = synth_pair(&c.synth.meta(c.train.seed), &c.synth.params)?;
    create_dir(&c.out)?;
    let paths = [
        c.out.join("source.hsc"),
        c.out.join("source_labels.hsl"),
        c.out.join("target.hsc"),
        c.out.join("target_labels.hsl"),
    ];
    save_cube(&s.source, &paths[0])?;
    save_labels(&s.source_labels, &paths[1])?;
    save_cube(&s.target, &paths[2])?;
    save_labels(&s.target_labels, &paths[3])?;
    let counts = |labels: &[u16]| {
        let mut m = serde_json::Map::new();
        for c in 1..=s.source_labels.classes() as u16 {
            let n = labels.iter().filter(|&&l| l == c).count();
            m.insert(format!("class{c}"), n.into());
        }
        let unk = labels.iter().filter(|&&l| l == UNKNOWN_SENTINEL).count();
        if unk > 0 {
            m.insert("unknown".into(), unk.into());
        }
        m
    };
    print(json!({
        "seed": c.train.seed,
        "bands": s.source.bands,
        "height": s.source.height,
        "width": s.source.width,
        "shift": c.synth.params.shift,
        "known_classes": c.synth.known_classes,
        "unknown_classes": c.synth.params.unknown_classes,
        "source_labeled": counts(&s.source_labels.labels),
        "target": counts(&s.target_labels.labels),
        "files": paths,
    }));
    Ok(())
}

fn train(c: &RunConfig) -> Result<()> {
    let prepared = prepare(c)?;
    create_dir(&c.out)?;
    let log_path = c.out.join("train_log.jsonl");
    let file = File::create(&log_path).map_err(|e| Error::Io {
        path: log_path.clone(),
        source: e,
    })?;
    let mut log = BufWriter::new(file);
    let mut state = TrainState::new(&c.train, prepared.classes)?;
    let result = osda_core::trainer::train(
        &mut state,
        &prepared.source,
        &prepared.target,
        &c.train,
        Some(&mut log),
    );
    log.flush().map_err(|e| Error::Io {
        path: log_path.clone(),
        source: e,
    })?;
    result?;
    let checkpoint = pipeline::write_checkpoint(&c.out, &state, &c.train)?;
    print(json!({
        "epochs": state.epoch,
        "steps": state.history.len(),
        "last": state.history.last(),
        "checkpoint": checkpoint,
        "log": log_path,
    }));
    Ok(())
}

fn eval(common: &Common, c: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| c.out.join("checkpoint.json"));
    if !path.exists() {
        return Err(Error::Config(format!("no such file: {}", path.display())));
    }
    let ckpt = load_checkpoint(&path)?;
    // Architecture and training settings come from the checkpoint; only the
    // command-line flags override them.
    let mut cfg: TrainConfig = serde_json::from_value(ckpt.manifest.meta["config"].clone())?;
    common.apply(&mut cfg);
    cfg.validate()?;
    let state = TrainState::from_checkpoint(&ckpt, &cfg)?;
    let run = RunConfig {
        train: cfg.clone(),
        ..c.clone()
    };
    let prepared = prepare(&run)?;
    if prepared.classes != state.classifier.classes() {
        return Err(Error::Config(format!(
            "checkpoint has {} classes but the scene has {}",
            state.classifier.classes(),
            prepared.classes
        )));
    }
    let inf = pipeline::evaluate(&state, &prepared, &cfg)?;
    let files = pipeline::write_evaluation(&c.out, &prepared, &inf)?;
    print(json!({
        "metrics": inf.metrics,
        "gmm": inf.gmm.to_json(),
        "unknown": inf.predictions.iter().filter(|&&l| l == osda_core::metrics::Label::Unknown).count(),
        "files": {
            "metrics": files.metrics,
            "gmm": files.gmm,
            "map": files.map,
        },
    }));
    Ok(())
}

fn gradcheck(seeds: u64, tolerance: Option<f64>) -> Result<bool> {
    if seeds == 0 {
        return Err(Error::Config("--seeds must be positive".into()));
    }
    let tol = match tolerance {
        Some(t) if !(t > 0.0 && t.is_finite()) => {
            return Err(Error::Config(format!("tolerance must be positive, got {t}")))
        }
        Some(t) => Tolerances::uniform(t),
        None => Tolerances::default(),
    };
    let results = run_suite(0..seeds, tol)?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    print(json!({
        "passed": failed.is_empty(),
        "failed": failed,
        "checks": results,
    }));
    Ok(failed.is_empty())
}

fn dispatch(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Synth(common) => synth(&common.resolve()?).map(|_| true),
        Command::Train(common) => train(&common.resolve()?).map(|_| true),
        Command::Eval { common, checkpoint } => {
            eval(&common, &common.resolve()?, checkpoint.as_deref()).map(|_| true)
        }
        Command::Gradcheck { seeds, tolerance } => gradcheck(seeds, tolerance),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    osda_core::heap::retain_freed_memory();
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 1 } else { 2 })
        }
    }
}
