//! The `cvt` command line: argument parsing, layered configuration and the
//! subcommands. `main` only installs logging and forwards to [`run`].
//!
//! Configuration starts from a preset, then applies the `--config` file
//! (JSON, `key=value` lines with dotted keys, or an earlier `run.json`),
//! then flags. Keys that do not exist in the settings tree are rejected.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::eval::{
    ablation_csv, ablation_variants, camera_dropout_eval, eval_report, export_attention_maps, mean_std,
    run_ablation_suite, DISTANCE_THRESHOLDS,
};
use crate::gradcheck::{model_check, op_suite, CheckReport};
use crate::model::{init_params, ModelConfig};
use crate::scene::{Dataset, SceneConfig};
use crate::train::{load_checkpoint, metrics_csv, save_checkpoint, train_run, TrainConfig};

/// Largest accepted relative error for a single op.
pub const OP_TOLERANCE: f64 = 1e-6;
/// Largest accepted relative error for the full micro model.
pub const MODEL_TOLERANCE: f64 = 1e-5;

const RUN_FORMAT: &str = "cvt-run";

#[derive(Debug, Parser)]
#[command(
    name = "cvt",
    version,
    about = "Multi-camera map-view segmentation with cross-view attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Debug, Args, Serialize)]
struct Common {
    /// Directory receiving every file this run writes.
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    /// Seed of the subcommand's random choices.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bit-exact reruns, 0 uses every core.
    #[arg(long)]
    threads: Option<usize>,
    /// Settings file: JSON, key=value lines, or a previous run.json.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Render a synthetic dataset. `--seed` sets the dataset base seed.
    GenerateData {
        #[command(flatten)]
        common: Common,
        /// Total scenes, split 80/20 into training and validation.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model and save a checkpoint. `--seed` drives init and batch order.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; generated from the settings when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// IoU, distance curve and camera-dropout curve on the validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train and evaluate every ablation variant over three seeds starting at `--seed`.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// IoU with 0..n-1 cameras removed at random.
    DropoutTest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Export per-camera attention of latent cells as PGM images and CSV.
    VisualizeAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Index into the validation split.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Latent cell as `row,col`; repeatable. Defaults to the grid center.
        #[arg(long = "query", value_parser = parse_cell)]
        queries: Vec<(usize, usize)>,
    },
    /// Finite-difference check of every op and of the micro model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenerateData { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Ablate { common, .. }
            | Command::DropoutTest { common, .. }
            | Command::VisualizeAttention { common, .. }
            | Command::Gradcheck { common } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::GenerateData { .. } => "generate-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::DropoutTest { .. } => "dropout-test",
            Command::VisualizeAttention { .. } => "visualize-attention",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }
}

fn parse_cell(s: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = s.split_once(',').ok_or("expected row,col")?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((n(r)?, n(c)?))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Micro,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSettings {
    pub seed: u64,
    /// Total scenes, split 80/20.
    pub scenes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub seed: u64,
    pub dropout_trials: usize,
    pub distance_thresholds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSettings {
    pub seeds: Vec<u64>,
    /// Variant names to run; empty runs all.
    pub variants: Vec<String>,
    /// Scenes and epochs for each ablation run, which may be smaller than
    /// the main training budget.
    pub scenes: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

/// The full settings tree. Every key of a config file addresses a node of
/// this tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub preset: Preset,
    pub data: DataSettings,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub ablation: AblationSettings,
    pub gradcheck_seed: u64,
}

impl Settings {
    pub fn preset(preset: Preset) -> Settings {
        let (scene, model, scenes) = match preset {
            Preset::Desk => (SceneConfig::desk(), ModelConfig::desk(), 640),
            Preset::Micro => (SceneConfig::micro(), ModelConfig::micro(), 10),
        };
        let train = TrainConfig::default();
        Settings {
            preset,
            data: DataSettings { seed: 1, scenes },
            scene,
            model,
            ablation: AblationSettings {
                seeds: vec![0, 1, 2],
                variants: Vec::new(),
                scenes,
                epochs: train.epochs,
                batch_size: train.batch_size,
            },
            train,
            eval: EvalSettings {
                seed: 0,
                dropout_trials: 5,
                distance_thresholds: DISTANCE_THRESHOLDS.to_vec(),
            },
            gradcheck_seed: 0,
        }
    }

    /// Settings from the preset named in `text` (default desk), overlaid
    /// with every other key of `text`.
    pub fn from_config_text(text: &str) -> Result<Settings> {
        let overlay = parse_config(text)?;
        let preset = match overlay.get("preset") {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("preset: {e}")))?,
            None => Preset::default(),
        };
        let mut tree = serde_json::to_value(Settings::preset(preset)).expect("settings serialize");
        merge(&mut tree, Value::Object(overlay), "")?;
        let s: Settings = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let (m, rig) = (&self.model, &self.scene.rig);
        if (m.image_h, m.image_w) != (rig.image_h, rig.image_w) {
            return Err(Error::Config(format!(
                "model expects {}×{} images, the rig renders {}×{}",
                m.image_h, m.image_w, rig.image_h, rig.image_w
            )));
        }
        if rig.cameras.len() > m.num_cameras {
            return Err(Error::Config(format!(
                "rig has {} cameras, model knows {}",
                rig.cameras.len(),
                m.num_cameras
            )));
        }
        if (m.out_h, m.out_w, m.channels) != (self.scene.grid.h, self.scene.grid.w, self.scene.grid.channels) {
            return Err(Error::Config("model output does not match the map grid".into()));
        }
        if self.data.scenes < 2 || self.ablation.scenes < 2 {
            return Err(Error::Config(
                "at least two scenes are needed for a train/val split".into(),
            ));
        }
        Ok(())
    }
}

/// Parses JSON (a settings object or a `run.json`) or `key=value` lines into
/// a nested object.
fn parse_config(text: &str) -> Result<Map<String, Value>> {
    if text.trim_start().starts_with('{') {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config JSON: {e}")))?;
        let Value::Object(mut obj) = v else {
            return Err(Error::Config("config JSON must be an object".into()));
        };
        if obj.get("format").and_then(Value::as_str) == Some(RUN_FORMAT) {
            return match obj.remove("config") {
                Some(Value::Object(c)) => Ok(c),
                _ => Err(Error::Config("run.json has no config object".into())),
            };
        }
        return Ok(obj);
    }
    let mut root = Map::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, raw) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
        let raw = raw.trim();
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut parts: Vec<&str> = key.trim().split('.').collect();
        let last = parts.pop().expect("split yields one part");
        let mut node = &mut root;
        for p in parts {
            let entry = node.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
            node = match entry {
                Value::Object(m) => m,
                _ => return Err(Error::Config(format!("line {}: {key} nests under a value", n + 1))),
            };
        }
        node.insert(last.to_string(), value);
    }
    Ok(root)
}

/// Overlays `src` onto `dst`. Objects merge key by key; every key of `src`
/// must already exist in `dst`.
fn merge(dst: &mut Value, src: Value, path: &str) -> Result<()> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let here = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                let slot = d
                    .get_mut(&k)
                    .ok_or_else(|| Error::Config(format!("unknown key {here}")))?;
                merge(slot, v, &here)?;
            }
            Ok(())
        }
        (d, s) => {
            *d = s;
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    format: &'static str,
    version: &'static str,
    command: &'static str,
    seed: u64,
    threads: usize,
    args: &'a Command,
    config: &'a Settings,
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load_data(data: Option<&Path>, settings: &Settings, scenes: usize) -> Result<Dataset> {
    match data {
        Some(dir) => {
            let (ds, manifest) = Dataset::read(dir)?;
            let rig = &manifest.scene.rig;
            if (rig.image_h, rig.image_w) != (settings.model.image_h, settings.model.image_w) {
                return Err(Error::Config(format!(
                    "{} holds {}×{} images, the model expects {}×{}",
                    dir.display(),
                    rig.image_h,
                    rig.image_w,
                    settings.model.image_h,
                    settings.model.image_w
                )));
            }
            Ok(ds)
        }
        None => Dataset::generate_split(&settings.scene, settings.data.seed, scenes),
    }
}

/// Parses `args` (program name first), runs the subcommand, and returns the
/// process exit code: 0 on success, 1 on a domain error, 2 on a usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let msg = e.render().to_string();
            eprint!("{msg}");
            if !msg.contains("Usage:") {
                eprintln!("\n{}", <Cli as clap::CommandFactory>::command().render_usage());
            }
            return 2;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn resolve(command: &Command) -> Result<Settings> {
    let common = command.common();
    let mut s = match &common.config {
        Some(path) => Settings::from_config_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?,
        None => Settings::preset(Preset::Desk),
    };
    if let Some(seed) = common.seed {
        match command {
            Command::GenerateData { .. } => s.data.seed = seed,
            Command::Train { .. } => s.train.seed = seed,
            Command::Ablate { .. } => s.ablation.seeds = (0..3).map(|i| seed + i).collect(),
            Command::Gradcheck { .. } => s.gradcheck_seed = seed,
            _ => s.eval.seed = seed,
        }
    }
    match command {
        Command::GenerateData { count: Some(n), .. } => s.data.scenes = *n,
        Command::Train { epochs: Some(n), .. } => s.train.epochs = *n,
        Command::DropoutTest { trials: Some(n), .. } => s.eval.dropout_trials = *n,
        _ => {}
    }
    s.validate()?;
    Ok(s)
}

fn execute(command: &Command) -> Result<()> {
    let settings = resolve(command)?;
    let common = command.common();
    let out = &common.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let threads = common.threads.unwrap_or(0);
    let seed = match command {
        Command::GenerateData { .. } => settings.data.seed,
        Command::Train { .. } => settings.train.seed,
        Command::Ablate { .. } => settings.ablation.seeds[0],
        Command::Gradcheck { .. } => settings.gradcheck_seed,
        _ => settings.eval.seed,
    };
    let record = RunRecord {
        format: RUN_FORMAT,
        version: env!("CARGO_PKG_VERSION"),
        command: command.name(),
        seed,
        threads,
        args: command,
        config: &settings,
    };
    let json = serde_json::to_string_pretty(&record).map_err(|e| Error::format("run.json", e.to_string()))?;
    write_file(&out.join("run.json"), json)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(command, &settings, out))
}

fn dispatch(command: &Command, s: &Settings, out: &Path) -> Result<()> {
    match command {
        Command::GenerateData { .. } => {
            let ds = Dataset::generate_split(&s.scene, s.data.seed, s.data.scenes)?;
            ds.write(out, &s.scene, s.data.seed)?;
            log::info!(
                "wrote {} training and {} validation scenes",
                ds.train.len(),
                ds.val.len()
            );
            Ok(())
        }
        Command::Train { data, .. } => {
            let ds = load_data(data.as_deref(), s, s.data.scenes)?;
            let params = init_params(&s.model, s.train.seed)?;
            let metrics_path = out.join("metrics.csv");
            let outcome = train_run(&s.model, &s.train, &ds, params, |_| {})?;
            write_file(&metrics_path, metrics_csv(&outcome.history))?;
            save_checkpoint(
                &out.join("checkpoint"),
                &s.model,
                &outcome.params,
                Some(&outcome.optimizer),
            )
        }
        Command::Eval { checkpoint, data, .. } => {
            let ck = load_checkpoint(checkpoint, None)?;
            let s = Settings {
                model: ck.model.clone(),
                ..s.clone()
            };
            let ds = load_data(data.as_deref(), &s, s.data.scenes)?;
            let report = eval_report(
                &ck.params,
                &ck.model,
                &ds.val,
                &s.eval.distance_thresholds,
                s.eval.dropout_trials,
                s.eval.seed,
            )?;
            for (ch, c) in report.iou.iter().enumerate() {
                println!(
                    "channel {ch}: IoU {:.4}{}",
                    c.iou,
                    if c.empty { " (empty)" } else { "" }
                );
            }
            write_file(&out.join("eval.csv"), report.to_csv())?;
            let json = serde_json::to_string_pretty(&report).map_err(|e| Error::format("eval.json", e.to_string()))?;
            write_file(&out.join("eval.json"), json)
        }
        Command::Ablate { data, .. } => {
            let ds = load_data(data.as_deref(), s, s.ablation.scenes)?;
            let variants: Vec<_> = ablation_variants(&s.model)
                .into_iter()
                .filter(|v| s.ablation.variants.is_empty() || s.ablation.variants.contains(&v.name))
                .collect();
            if let Some(unknown) = s
                .ablation
                .variants
                .iter()
                .find(|n| !variants.iter().any(|v| &v.name == *n))
            {
                return Err(Error::Config(format!("unknown ablation variant {unknown}")));
            }
            let tc = TrainConfig {
                epochs: s.ablation.epochs,
                batch_size: s.ablation.batch_size,
                ..s.train.clone()
            };
            let csv_path = out.join("ablation.csv");
            let mut partial = Vec::new();
            let rows = run_ablation_suite(&variants, &tc, &ds, &s.ablation.seeds, |r| {
                log::info!(
                    "{} seed {}: vehicle {:.4} driveable {:.4}",
                    r.variant,
                    r.seed,
                    r.iou_vehicle,
                    r.iou_driveable
                );
                partial.push(r.clone());
                let _ = fs::write(&csv_path, ablation_csv(&partial));
            })?;
            write_file(&csv_path, ablation_csv(&rows))?;
            for v in &variants {
                let col = |f: fn(&crate::eval::AblationRow) -> f64| {
                    mean_std(&rows.iter().filter(|r| r.variant == v.name).map(f).collect::<Vec<_>>())
                };
                let ((mv, sv), (md, sd)) = (col(|r| r.iou_vehicle), col(|r| r.iou_driveable));
                println!("{:<28} vehicle {mv:.4} ± {sv:.4}  driveable {md:.4} ± {sd:.4}", v.name);
            }
            Ok(())
        }
        Command::DropoutTest { checkpoint, data, .. } => {
            let ck = load_checkpoint(checkpoint, None)?;
            let s = Settings {
                model: ck.model.clone(),
                ..s.clone()
            };
            let ds = load_data(data.as_deref(), &s, s.data.scenes)?;
            let cams = ds.val.iter().map(|x| x.num_cameras()).min().unwrap_or(0);
            let mut csv = String::from("dropped,trial,channel,iou\n");
            for m in 0..cams {
                let r = camera_dropout_eval(&ck.params, &ck.model, &ds.val, m, s.eval.dropout_trials, s.eval.seed)?;
                for (t, trial) in r.trials.iter().enumerate() {
                    for (ch, v) in trial.iter().enumerate() {
                        csv.push_str(&format!("{m},{t},{ch},{v}\n"));
                    }
                }
                let means: Vec<String> = r.mean.iter().map(|v| format!("{v:.4}")).collect();
                println!("dropped {m}: mean IoU {}", means.join(" "));
            }
            write_file(&out.join("dropout.csv"), csv)
        }
        Command::VisualizeAttention {
            checkpoint,
            data,
            sample,
            queries,
            ..
        } => {
            let ck = load_checkpoint(checkpoint, None)?;
            let s = Settings {
                model: ck.model.clone(),
                ..s.clone()
            };
            let ds = load_data(data.as_deref(), &s, s.data.scenes)?;
            let x = ds.val.get(*sample).ok_or_else(|| {
                Error::Config(format!(
                    "sample {sample} out of range: {} validation samples",
                    ds.val.len()
                ))
            })?;
            let queries = if queries.is_empty() {
                vec![(ck.model.latent_h / 2, ck.model.latent_w / 2)]
            } else {
                queries.clone()
            };
            let written = export_attention_maps(&ck.params, &ck.model, x, &queries, &out.join("attention"))?;
            log::info!("wrote {} files", written.len());
            Ok(())
        }
        Command::Gradcheck { .. } => {
            let mut reports = op_suite(s.gradcheck_seed)?;
            let ops = reports.len();
            reports.push(model_check(s.gradcheck_seed)?);
            let table = gradcheck_table(&reports, ops);
            print!("{table}");
            let _ = std::io::stdout().flush();
            write_file(&out.join("gradcheck.csv"), gradcheck_csv(&reports, ops))?;
            let failed: Vec<&str> = reports
                .iter()
                .enumerate()
                .filter(|(i, r)| r.max_rel_err >= if *i < ops { OP_TOLERANCE } else { MODEL_TOLERANCE })
                .map(|(_, r)| r.name.as_str())
                .collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::Contract(format!(
                    "gradient check failed for {}",
                    failed.join(", ")
                )))
            }
        }
    }
}

fn tolerance(i: usize, ops: usize) -> f64 {
    if i < ops {
        OP_TOLERANCE
    } else {
        MODEL_TOLERANCE
    }
}

fn gradcheck_table(reports: &[CheckReport], ops: usize) -> String {
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(0).max(4);
    let mut t = format!(
        "{:<width$}  {:>12}  {:>8}  {:>9}  result\n",
        "case", "max rel err", "checked", "tolerance"
    );
    for (i, r) in reports.iter().enumerate() {
        let tol = tolerance(i, ops);
        let verdict = if r.max_rel_err < tol { "ok" } else { "FAIL" };
        t.push_str(&format!(
            "{:<width$}  {:>12.3e}  {:>8}  {:>9.0e}  {verdict}\n",
            r.name, r.max_rel_err, r.checked, tol
        ));
    }
    t
}

fn gradcheck_csv(reports: &[CheckReport], ops: usize) -> String {
    let mut csv = String::from("case,max_rel_err,checked,tolerance\n");
    for (i, r) in reports.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.name,
            r.max_rel_err,
            r.checked,
            tolerance(i, ops)
        ));
    }
    csv
}
