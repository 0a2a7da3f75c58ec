//! Command-line front end. Every command resolves its configuration, runs,
//! and leaves a self-contained run directory with a `manifest.json` that
//! `rerun` can execute again.
//!
//! Exit status: 0 success, 2 usage, 3 configuration, 4 ingestion,
//! 5 numeric, 6 I/O, 7 incompatible checkpoint, 1 anything else.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::adapt::{
    ablate, adapt, apply_overrides, config_hash, config_keys, load_config, render_csv, render_table,
    table5_grid, train_source, AblationResult, AdaptConfig, Evaluator, LabeledImages, RunReport,
    SourceConfig, UnlabeledImages,
};
use crate::detector::{Checkpoint, Detector};
use crate::error::{Error, Result};
use crate::eval::EvalResult;
use crate::labelspace::{load_coco, Dataset, Taxonomy};
use crate::plot::{line_chart, Series};
use crate::raster::image_folder;
use crate::synthdocs::{domain_presets, generate_dataset};

#[derive(Parser)]
#[command(name = "dladapt", version, about = "Source-free domain adaptation for document layout detection")]
struct Cli {
    /// Root under which run directories are created when --out is not given.
    #[arg(long, global = true, env = "DLADAPT_RUNS", default_value = "runs")]
    runs_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file; keys are listed below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. --set consensus.boost=1.2
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run directory (default: <runs-root>/<command>-<hash>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic COCO-format dataset.
    SynthGen {
        /// `source` or `target`.
        #[arg(long)]
        preset: Option<String>,
        /// Number of pages.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Supervised training on a labeled source dataset.
    TrainSource {
        /// Dataset directory (with annotations.json) or COCO file.
        #[arg(long)]
        data: PathBuf,
        /// Labeled split evaluated after every epoch.
        #[arg(long)]
        holdout: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Adapt a source checkpoint to unlabeled target images.
    Adapt {
        #[arg(long)]
        source_ckpt: PathBuf,
        /// Target images: a folder of images or a dataset (annotations ignored).
        #[arg(long)]
        target: PathBuf,
        /// Labeled held-out target split for per-epoch evaluation.
        #[arg(long)]
        eval: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on a labeled dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the six-row component ablation.
    Ablate {
        #[arg(long)]
        source_ckpt: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        /// Comma-separated seeds shared by every row.
        #[arg(long, default_value = "0", value_delimiter = ',')]
        seeds: Vec<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Summarise run directories: tables, CSV and PNG plots.
    Report {
        /// A run directory, or a directory of run directories.
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute a run again from its manifest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub preset: String,
    pub pages: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            preset: "source".into(),
            pages: 200,
            seed: 0,
        }
    }
}

/// Commands without tunable settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoConfig {}

/// What a run directory records about how it was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved configuration.
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// Absolute input paths by role.
    pub inputs: BTreeMap<String, PathBuf>,
    /// Files written, relative to the run directory.
    pub outputs: Vec<String>,
    pub version: String,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))
    }
}

/// A fully resolved command: everything needed to execute it.
struct Invocation {
    command: String,
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: BTreeMap<String, PathBuf>,
}

impl Invocation {
    fn input(&self, role: &str) -> Result<&Path> {
        self.inputs
            .get(role)
            .map(PathBuf::as_path)
            .ok_or_else(|| Error::Config(format!("{}: missing input {role}", self.command)))
    }

    fn config<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::Config(e.to_string()))
    }

    fn default_dir(&self, root: &Path) -> PathBuf {
        let key = serde_json::json!([self.command, self.config, self.seeds, self.inputs]);
        root.join(format!("{}-{}", self.command, &config_hash(&key)[..12]))
    }
}

fn resolve<T: Serialize + DeserializeOwned + Default>(common: &Common, extra: &[String]) -> Result<T> {
    let base: T = match &common.config {
        Some(p) => load_config(p)?,
        None => T::default(),
    };
    let mut overrides = extra.to_vec();
    overrides.extend(common.set.iter().cloned());
    apply_overrides(&base, &overrides)
}

fn absolute(p: &Path) -> Result<PathBuf> {
    fs::canonicalize(p).map_err(|e| Error::io(p, e))
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable")
}

fn keys_help<T: Serialize + Default>() -> String {
    let keys = config_keys::<T>();
    if keys.is_empty() {
        return "Config keys: none".into();
    }
    let width = keys.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (file or --set KEY=VALUE) and defaults:\n");
    for (k, v) in keys {
        s.push_str(&format!("  {k:<width$}  {v}\n"));
    }
    s
}

/// Open a dataset from a COCO file, a directory holding `annotations.json`,
/// an `images/` directory next to one, or a bare folder of images.
fn open_dataset(path: &Path, fallback: Option<&Taxonomy>) -> Result<Dataset> {
    if path.is_file() {
        return load_coco(path);
    }
    for candidate in [path.join("annotations.json"), path.with_file_name("annotations.json")] {
        if candidate.is_file() && (candidate.parent() == Some(path) || path.ends_with("images")) {
            return load_coco(&candidate);
        }
    }
    match fallback {
        Some(t) => image_folder(path, t.clone()),
        None => Err(Error::Ingestion(format!("{}: no annotations.json found", path.display()))),
    }
}

fn write_file(dir: &Path, name: &str, bytes: &[u8], outputs: &mut Vec<String>) -> Result<()> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    outputs.push(name.to_string());
    Ok(())
}

fn save_report(report: &mut RunReport, dir: &Path, outputs: &mut Vec<String>) -> Result<()> {
    report.final_checkpoint = Some(PathBuf::from("checkpoint.bin"));
    report.write(dir)?;
    outputs.extend(["metrics.json".to_string(), "metrics.csv".to_string()]);
    Ok(())
}

fn execute(inv: &Invocation, dir: &Path) -> Result<Vec<String>> {
    let mut outputs = Vec::new();
    match inv.command.as_str() {
        "synth-gen" => {
            let cfg: SynthConfig = inv.config()?;
            let (source, target) = domain_presets();
            let spec = match cfg.preset.as_str() {
                "source" => source,
                "target" => target,
                other => return Err(Error::Config(format!("unknown preset {other:?} (source or target)"))),
            };
            generate_dataset(&spec, cfg.pages, cfg.seed, dir)?;
            outputs.extend(["annotations.json".to_string(), "images/".to_string()]);
            println!("wrote {} {} pages to {}", cfg.pages, cfg.preset, dir.display());
        }
        "train-source" => {
            let cfg: SourceConfig = inv.config()?;
            let size = cfg.detector.input_size;
            let train = LabeledImages::from_dataset(&open_dataset(inv.input("data")?, None)?, size)?;
            let holdout = match inv.inputs.get("holdout") {
                Some(p) => Some(LabeledImages::from_dataset(&open_dataset(p, None)?, size)?),
                None => None,
            };
            let (ckpt, mut report) = train_source(&train, &cfg, holdout.as_ref())?;
            ckpt.save(&dir.join("checkpoint.bin"))?;
            outputs.push("checkpoint.bin".into());
            save_report(&mut report, dir, &mut outputs)?;
            if let Some(m) = report.final_map50() {
                println!("held-out mAP@0.5 {:.2}", 100.0 * m);
            }
        }
        "adapt" => {
            let cfg: AdaptConfig = inv.config()?;
            let ckpt = Checkpoint::load(inv.input("source_ckpt")?)?;
            let size = ckpt.detector.input_size;
            // Only pixels cross into the loop.
            let target = open_dataset(inv.input("target")?, Some(&ckpt.taxonomy))?.without_annotations();
            let target = UnlabeledImages::from_dataset(&target, size)?;
            let held_out = match inv.inputs.get("eval") {
                Some(p) => Some(LabeledImages::from_dataset(&open_dataset(p, None)?, size)?),
                None => None,
            };
            let evaluator = held_out.as_ref().map(Evaluator::new);
            let (adapted, mut report) = adapt(&ckpt, &target, &cfg, evaluator.as_ref())?;
            adapted.save(&dir.join("checkpoint.bin"))?;
            outputs.push("checkpoint.bin".into());
            save_report(&mut report, dir, &mut outputs)?;
            if let (Some(e0), Some(m)) = (&report.initial_eval, report.final_map50()) {
                println!("target mAP@0.5 {:.2} -> {:.2}", 100.0 * e0.map50, 100.0 * m);
            }
        }
        "eval" => {
            let ckpt = Checkpoint::load(inv.input("checkpoint")?)?;
            let data = LabeledImages::from_dataset(&open_dataset(inv.input("data")?, None)?, ckpt.detector.input_size)?;
            if !data.taxonomy().same_categories(&ckpt.taxonomy) {
                return Err(Error::Config("dataset categories differ from the checkpoint's".into()));
            }
            let result = Evaluator::new(&data).evaluate(&Detector::new(ckpt.detector.clone())?, &ckpt.params)?;
            print!("{}", result.table());
            let json = serde_json::to_vec_pretty(&result).expect("serializable");
            write_file(dir, "eval.json", &json, &mut outputs)?;
        }
        "ablate" => {
            let cfg: AdaptConfig = inv.config()?;
            let ckpt = Checkpoint::load(inv.input("source_ckpt")?)?;
            let size = ckpt.detector.input_size;
            let target = open_dataset(inv.input("target")?, Some(&ckpt.taxonomy))?.without_annotations();
            let target = UnlabeledImages::from_dataset(&target, size)?;
            let held_out = LabeledImages::from_dataset(&open_dataset(inv.input("eval")?, None)?, size)?;
            let results = ablate(&ckpt, &target, &cfg, &table5_grid(), &inv.seeds, &Evaluator::new(&held_out))?;
            let table = render_table(&results);
            print!("{table}");
            let json = serde_json::to_vec_pretty(&results).expect("serializable");
            write_file(dir, "ablation.json", &json, &mut outputs)?;
            write_file(dir, "ablation.csv", render_csv(&results).as_bytes(), &mut outputs)?;
            write_file(dir, "ablation.md", table.as_bytes(), &mut outputs)?;
        }
        "report" => {
            let text = report(inv.input("runs")?, dir, &mut outputs)?;
            print!("{text}");
            write_file(dir, "report.txt", text.as_bytes(), &mut outputs)?;
        }
        other => return Err(Error::Config(format!("unknown command {other:?}"))),
    }
    Ok(outputs)
}

/// Summaries of every run directory under `runs`, with plots into `out`.
fn report(runs: &Path, out: &Path, outputs: &mut Vec<String>) -> Result<String> {
    let mut dirs = vec![runs.to_path_buf()];
    let mut entries: Vec<PathBuf> = fs::read_dir(runs)
        .map_err(|e| Error::io(runs, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    dirs.extend(entries);

    let mut text = String::new();
    let mut found = false;
    for dir in dirs {
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if dir.join("metrics.json").is_file() {
            found = true;
            let r = RunReport::read(&dir)?;
            text.push_str(&format!("== {name} ({})\n", r.kind));
            text.push_str(&run_summary(&r));
            let mut losses: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for e in &r.epochs {
                for (k, v) in &e.losses {
                    losses.entry(k.clone()).or_default().push((e.epoch as f64, *v));
                }
            }
            let series: Vec<Series> = losses.into_iter().map(|(name, points)| Series { name, points }).collect();
            let rel = format!("{name}/losses.png");
            let legend = line_chart(&series, &out.join(&rel))?;
            outputs.push(rel.clone());
            text.push_str(&format!("loss curves: {rel} ({})\n", legend_text(&legend)));
            let maps: Vec<(f64, f64)> = r
                .initial_eval
                .iter()
                .map(|e| (0.0, e.map50))
                .chain(r.epochs.iter().filter_map(|e| e.eval.as_ref().map(|v| (e.epoch as f64, v.map50))))
                .collect();
            if !maps.is_empty() {
                let rel = format!("{name}/map50.png");
                line_chart(&[Series { name: "mAP@0.5".into(), points: maps }], &out.join(&rel))?;
                outputs.push(rel.clone());
                text.push_str(&format!("mAP@0.5 per epoch: {rel}\n"));
            }
            text.push('\n');
        }
        if dir.join("eval.json").is_file() {
            found = true;
            let path = dir.join("eval.json");
            let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let e: EvalResult =
                serde_json::from_str(&raw).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
            text.push_str(&format!("== {name} (eval)\n{}\n", e.table()));
        }
        if dir.join("ablation.json").is_file() {
            found = true;
            let path = dir.join("ablation.json");
            let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let results: Vec<AblationResult> =
                serde_json::from_str(&raw).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
            text.push_str(&format!("== {name} (ablation)\n{}\n", render_table(&results)));
            let rel = format!("{name}/ablation.csv");
            write_file(out, &rel, render_csv(&results).as_bytes(), outputs)?;
        }
    }
    if !found {
        return Err(Error::Ingestion(format!("{}: no run outputs found", runs.display())));
    }
    Ok(text)
}

fn legend_text(legend: &[(String, &str)]) -> String {
    legend.iter().map(|(n, c)| format!("{n}={c}")).collect::<Vec<_>>().join(", ")
}

fn run_summary(r: &RunReport) -> String {
    let mut s = String::new();
    if let Some(e) = &r.initial_eval {
        s.push_str(&format!("start: mAP@0.5 {:.2}\n", 100.0 * e.map50));
    }
    for e in &r.epochs {
        s.push_str(&format!("epoch {:>2}  lr {:.2e}  loss {:.4}", e.epoch, e.learning_rate, e.losses.get("total").copied().unwrap_or(f64::NAN)));
        if let Some(p) = &e.pseudo {
            s.push_str(&format!(
                "  pseudo {:.2}/img ({:.0}% consensus, mean score {:.3})",
                p.per_image(),
                100.0 * p.consensus_fraction(),
                p.mean_score()
            ));
        }
        if let Some(v) = &e.eval {
            s.push_str(&format!("  mAP@0.5 {:.2}", 100.0 * v.map50));
        }
        s.push('\n');
    }
    if let Some(e) = r.epochs.iter().rev().find_map(|e| e.eval.as_ref()) {
        s.push_str(&e.table());
    }
    s
}

fn invocation(command: Command, runs_root: &Path) -> Result<(Invocation, PathBuf)> {
    let mut inputs = BTreeMap::new();
    let (inv, out) = match command {
        Command::SynthGen { preset, n, seed, common } => {
            let mut extra = Vec::new();
            if let Some(p) = preset {
                extra.push(format!("preset=\"{p}\""));
            }
            if let Some(n) = n {
                extra.push(format!("pages={n}"));
            }
            if let Some(s) = seed {
                extra.push(format!("seed={s}"));
            }
            let cfg: SynthConfig = resolve(&common, &extra)?;
            let inv = Invocation {
                command: "synth-gen".into(),
                seeds: vec![cfg.seed],
                config: to_json(&cfg),
                inputs,
            };
            (inv, common.out)
        }
        Command::TrainSource { data, holdout, common } => {
            let cfg: SourceConfig = resolve(&common, &[])?;
            inputs.insert("data".into(), absolute(&data)?);
            if let Some(h) = holdout {
                inputs.insert("holdout".into(), absolute(&h)?);
            }
            let inv = Invocation {
                command: "train-source".into(),
                seeds: vec![cfg.seed],
                config: to_json(&cfg),
                inputs,
            };
            (inv, common.out)
        }
        Command::Adapt { source_ckpt, target, eval, common } => {
            let cfg: AdaptConfig = resolve(&common, &[])?;
            inputs.insert("source_ckpt".into(), absolute(&source_ckpt)?);
            inputs.insert("target".into(), absolute(&target)?);
            if let Some(e) = eval {
                inputs.insert("eval".into(), absolute(&e)?);
            }
            let inv = Invocation {
                command: "adapt".into(),
                seeds: vec![cfg.seed],
                config: to_json(&cfg),
                inputs,
            };
            (inv, common.out)
        }
        Command::Eval { checkpoint, data, out } => {
            inputs.insert("checkpoint".into(), absolute(&checkpoint)?);
            inputs.insert("data".into(), absolute(&data)?);
            let inv = Invocation {
                command: "eval".into(),
                seeds: Vec::new(),
                config: to_json(&NoConfig {}),
                inputs,
            };
            (inv, out)
        }
        Command::Ablate { source_ckpt, target, eval, seeds, common } => {
            let cfg: AdaptConfig = resolve(&common, &[])?;
            inputs.insert("source_ckpt".into(), absolute(&source_ckpt)?);
            inputs.insert("target".into(), absolute(&target)?);
            inputs.insert("eval".into(), absolute(&eval)?);
            let inv = Invocation {
                command: "ablate".into(),
                seeds,
                config: to_json(&cfg),
                inputs,
            };
            (inv, common.out)
        }
        Command::Report { runs, out } => {
            inputs.insert("runs".into(), absolute(&runs)?);
            let out = out.or_else(|| Some(runs.join("report")));
            let inv = Invocation {
                command: "report".into(),
                seeds: Vec::new(),
                config: to_json(&NoConfig {}),
                inputs,
            };
            (inv, out)
        }
        Command::Rerun { manifest, out } => {
            let m = RunManifest::load(&manifest)?;
            let inv = Invocation {
                command: m.command,
                config: m.config,
                seeds: m.seeds,
                inputs: m.inputs,
            };
            (inv, out)
        }
    };
    let dir = out.unwrap_or_else(|| inv.default_dir(runs_root));
    Ok((inv, dir))
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let path = dir.join("manifest.json");
    let tmp = dir.join("manifest.json.tmp");
    let json = serde_json::to_vec_pretty(manifest).expect("serializable");
    fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
}

/// Run one command; returns the run directory.
fn run_command(command: Command, runs_root: &Path) -> Result<PathBuf> {
    let (inv, dir) = invocation(command, runs_root)?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let start = Instant::now();
    let outputs = execute(&inv, &dir)?;
    write_manifest(
        &dir,
        &RunManifest {
            command: inv.command,
            config: inv.config,
            seeds: inv.seeds,
            inputs: inv.inputs,
            outputs,
            version: env!("CARGO_PKG_VERSION").to_string(),
            duration_secs: start.elapsed().as_secs_f64(),
        },
    )?;
    log::info!("run directory: {}", dir.display());
    Ok(dir)
}

fn command_with_key_help() -> clap::Command {
    Cli::command()
        .mut_subcommand("synth-gen", |c| c.after_help(keys_help::<SynthConfig>()))
        .mut_subcommand("train-source", |c| c.after_help(keys_help::<SourceConfig>()))
        .mut_subcommand("adapt", |c| c.after_help(keys_help::<AdaptConfig>()))
        .mut_subcommand("ablate", |c| c.after_help(keys_help::<AdaptConfig>()))
        .mut_subcommand("eval", |c| c.after_help(keys_help::<NoConfig>()))
        .mut_subcommand("report", |c| c.after_help(keys_help::<NoConfig>()))
        .mut_subcommand("rerun", |c| c.after_help(keys_help::<NoConfig>()))
}

/// Parse `argv` (including the program name), run, and return the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match command_with_key_help().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run_command(cli.command, &cli.runs_root) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
