//! Command-line front end: `synth`, `train`, `eval`, `ablate`, `gradcheck`
//! and `heatmap`.
//!
//! Every option can also come from a `key=value` config file given by
//! `--config` or the `AFFORD_CONFIG` environment variable; flags win.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use affordance_match::geometry::{read_actions, read_scene, GeometryError};
use affordance_match::gradcheck::{self, GradcheckConfig};
use affordance_match::losses::LossToggles;
use affordance_match::metrics::{evaluate, EvalOptions, EvalReport, Prediction};
use affordance_match::model::{MatcherInput, Model, ModelConfig, PreparedSample};
use affordance_match::synth::{self, read_split, signifiers_from_bytes, write_split, Sample, SynthConfig, SynthError};
use affordance_match::tensor::{ParamStore, Tensor};
use affordance_match::trainer::{self, ablation_csv, ablation_table, history_csv, TrainConfig, TrainError};

pub const CONFIG_ENV: &str = "AFFORD_CONFIG";
pub const MANIFEST: &str = "manifest.txt";
pub const MODEL_CONFIG: &str = "config.txt";
pub const CHECKPOINT: &str = "checkpoint.bin";

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad or inconsistent settings; exit code 2.
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {detail}")]
    Missing { path: String, detail: String },
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Infeasible(_) | SynthError::Config(_) => CliError::Usage(e.to_string()),
            SynthError::Io { path, source } => CliError::Missing {
                path,
                detail: source.to_string(),
            },
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Failed(other.to_string()),
        }
    }
}

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

/// Flat `key=value` settings. Keys use underscores.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings(BTreeMap<String, String>);

impl Settings {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut map = BTreeMap::new();
        for (k, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value", k + 1)))?;
            map.insert(key.trim().replace('-', "_"), value.trim().to_string());
        }
        Ok(Self(map))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Missing {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.replace('-', "_"), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|e| CliError::Usage(format!("{key} = {v:?}: {e}"))))
            .transpose()
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn synth_config(&self) -> Result<SynthConfig, CliError> {
        let d = SynthConfig::default();
        Ok(SynthConfig {
            seed: self.or("seed", d.seed)?,
            scene_count: self.or("scene_count", d.scene_count)?,
            val_count: self.or("val_count", d.val_count)?,
            regions: (self.or("regions_min", d.regions.0)?, self.or("regions_max", d.regions.1)?),
            signifiers: (
                self.or("signifiers_min", d.signifiers.0)?,
                self.or("signifiers_max", d.signifiers.1)?,
            ),
            noise_std: self.or("noise_std", d.noise_std)?,
            distractor_rate: self.or("distractor_rate", d.distractor_rate)?,
            points_per_region: self.or("points_per_region", d.points_per_region)?,
            ..d
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let mut m = ModelConfig::default();
        let e = &mut m.encoder;
        e.embed_dim = self.or("embed_dim", e.embed_dim)?;
        e.normalize = self.or("normalize", e.normalize)?;
        let c = &mut m.matcher;
        c.shared_dim = self.or("shared_dim", c.shared_dim)?;
        c.pair_dim = self.or("pair_dim", c.pair_dim)?;
        c.heads = self.or("heads", c.heads)?;
        c.similarity_threshold = self.or("similarity_threshold", c.similarity_threshold)?;
        c.scaled_attention = self.or("scaled_attention", c.scaled_attention)?;
        let w = &mut m.weights;
        w.alpha = self.or("alpha", w.alpha)?;
        w.beta = self.or("beta", w.beta)?;
        w.lambda = self.or("lambda", w.lambda)?;
        w.gamma = self.or("gamma", w.gamma)?;
        w.eta = self.or("eta", w.eta)?;
        if let Some(c) = self.raw("components") {
            m.toggles = LossToggles::parse(c).map_err(|e| CliError::Usage(e.to_string()))?;
        }
        m.options.clipped_dissim = self.or("clipped_dissim", false)?;
        m.options.scalar_align = self.or("scalar_align", false)?;
        m.input = match self.raw("matcher_input").unwrap_or("features") {
            "features" => MatcherInput::Features,
            "embeddings" => MatcherInput::Embeddings,
            other => return Err(CliError::Usage(format!("matcher_input = {other:?}"))),
        };
        m.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(m)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            epochs: self.or("epochs", d.epochs)?,
            batch_size: self.or("batch_size", d.batch_size)?,
            learning_rate: self.or("learning_rate", d.learning_rate)?,
            decay_factor: self.or("decay_factor", d.decay_factor)?,
            decay_every: self.or("decay_every", d.decay_every)?,
            momentum: self.get("momentum")?,
            clip_norm: self.or("clip_norm", d.clip_norm)?,
            seed: self.or("seed", d.seed)?,
            workers: self.or("workers", d.workers)?,
            eval_every_epoch: self.or("eval_every_epoch", d.eval_every_epoch)?,
            eval: EvalOptions {
                class_agnostic: self.or("class_agnostic", false)?,
                macro_average: self.or("macro_average", false)?,
            },
            model: self.model_config()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Parser)]
#[command(name = "affmatch", version, about = "Cross-modal affordance matching: data, training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// key=value config file; defaults to $AFFORD_CONFIG.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct SynthArgs {
    #[arg(long)]
    pub scene_count: Option<usize>,
    #[arg(long)]
    pub val_count: Option<usize>,
    #[arg(long)]
    pub regions_min: Option<usize>,
    #[arg(long)]
    pub regions_max: Option<usize>,
    #[arg(long)]
    pub signifiers_min: Option<usize>,
    #[arg(long)]
    pub signifiers_max: Option<usize>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub distractor_rate: Option<f64>,
    #[arg(long)]
    pub points_per_region: Option<usize>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub normalize: Option<bool>,
    #[arg(long)]
    pub shared_dim: Option<usize>,
    #[arg(long)]
    pub pair_dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub similarity_threshold: Option<f64>,
    #[arg(long)]
    pub scaled_attention: Option<bool>,
    /// `features` (backbone outputs) or `embeddings`.
    #[arg(long)]
    pub matcher_input: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Enabled loss components, e.g. `align+dissim`.
    #[arg(long)]
    pub components: Option<String>,
    #[arg(long)]
    pub clipped_dissim: Option<bool>,
    #[arg(long)]
    pub scalar_align: Option<bool>,
    #[arg(long)]
    pub class_agnostic: Option<bool>,
    #[arg(long)]
    pub macro_average: Option<bool>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub decay_factor: Option<f64>,
    #[arg(long)]
    pub decay_every: Option<usize>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub eval_every_epoch: Option<bool>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/val scene and signifier files.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        args: SynthArgs,
    },
    /// Train and write a checkpoint, history and final evaluation.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Evaluate a checkpoint, or a prediction CSV, on a data split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data_dir: PathBuf,
        /// `train` or `val`; ignored when the directory holds scenes directly.
        #[arg(long, default_value = "val")]
        split: String,
        /// CSV of `scene,signifier,region,confidence` rows to score instead.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Defaults to the checkpoint's directory, or the data directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        class_agnostic: Option<bool>,
        #[arg(long)]
        macro_average: Option<bool>,
    },
    /// Train once per component set and tabulate the results.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// `;`-separated component sets; defaults to the cumulative ladder.
        #[arg(long)]
        sets: Option<String>,
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Finite-difference check of every parameter group.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Embedding width `d` of the toy model.
        #[arg(long)]
        dims: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Perturb one group's analytic gradient.
        #[arg(long, hide = true)]
        corrupt_group: Option<String>,
    },
    /// Export D, the match map and the assignment of one scene.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene `.bin` file; its `.sig` sidecar must sit next to it.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

macro_rules! push_flags {
    ($settings:expr, $args:expr; $($field:ident),* $(,)?) => {
        $( if let Some(v) = &$args.$field { $settings.set(stringify!($field), v); } )*
    };
}

fn base_settings(common: &Common) -> Result<Settings, CliError> {
    let path = common
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut s = match path {
        Some(p) => Settings::load(&p)?,
        None => Settings::default(),
    };
    if let Some(seed) = common.seed {
        s.set("seed", seed);
    }
    Ok(s)
}

fn apply_synth(s: &mut Settings, a: &SynthArgs) {
    push_flags!(s, a; scene_count, val_count, regions_min, regions_max, signifiers_min, signifiers_max,
        noise_std, distractor_rate, points_per_region);
}

fn apply_model(s: &mut Settings, a: &ModelArgs) {
    push_flags!(s, a; embed_dim, normalize, shared_dim, pair_dim, heads, similarity_threshold,
        scaled_attention, matcher_input, alpha, beta, lambda, gamma, eta, components, clipped_dissim,
        scalar_align, class_agnostic, macro_average);
}

fn apply_train(s: &mut Settings, a: &TrainArgs) {
    push_flags!(s, a; epochs, batch_size, learning_rate, decay_factor, decay_every, momentum, clip_norm,
        workers, eval_every_epoch);
    apply_model(s, &a.model);
}

/// What a run records next to its outputs.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub subcommand: &'static str,
    pub settings: Settings,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub error: Option<String>,
    pub seconds: f64,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "subcommand={}", self.subcommand);
        let _ = writeln!(s, "status={}", if self.error.is_none() { "success" } else { "failure" });
        if let Some(e) = &self.error {
            let _ = writeln!(s, "error={}", e.replace('\n', " "));
        }
        let _ = writeln!(s, "version={}", env!("CARGO_PKG_VERSION"));
        if let Some(seed) = self.seed {
            let _ = writeln!(s, "seed={seed}");
        }
        let _ = writeln!(s, "duration_seconds={:.3}", self.seconds);
        for p in &self.inputs {
            let _ = writeln!(s, "input={}", p.display());
        }
        for p in &self.outputs {
            let _ = writeln!(s, "output={}", p.display());
        }
        for (k, v) in self.settings.entries() {
            let _ = writeln!(s, "config.{k}={v}");
        }
        s
    }
}

struct Run {
    manifest: RunManifest,
    dir: Option<PathBuf>,
    started: Instant,
}

impl Run {
    fn new(subcommand: &'static str) -> Self {
        Self {
            manifest: RunManifest {
                subcommand,
                settings: Settings::default(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                seed: None,
                error: None,
                seconds: 0.0,
            },
            dir: None,
            started: Instant::now(),
        }
    }

    fn finish(mut self, result: Result<(), CliError>) -> i32 {
        self.manifest.seconds = self.started.elapsed().as_secs_f64();
        let code = match &result {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                self.manifest.error = Some(e.to_string());
                e.exit_code()
            }
        };
        if let Some(dir) = &self.dir {
            if std::fs::create_dir_all(dir).is_ok() {
                if let Err(e) = std::fs::write(dir.join(MANIFEST), self.manifest.to_text()) {
                    eprintln!("error: writing manifest: {e}");
                    return if code == 0 { 1 } else { code };
                }
            }
        }
        code
    }
}

fn write(run: &mut Run, path: PathBuf, body: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(&path, body).map_err(|e| CliError::Missing {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    run.manifest.outputs.push(path);
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Missing {
        path: dir.display().to_string(),
        detail: e.to_string(),
    })
}

fn split_dir(data_dir: &Path, split: &str) -> PathBuf {
    let nested = data_dir.join(split);
    if nested.is_dir() {
        nested
    } else {
        data_dir.to_path_buf()
    }
}

fn require_dir(dir: &Path) -> Result<(), CliError> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::Missing {
            path: dir.display().to_string(),
            detail: "no such directory".into(),
        })
    }
}

fn load_prepared(dir: &Path, model: &ModelConfig) -> Result<Vec<PreparedSample>, CliError> {
    require_dir(dir)?;
    let (samples, _) = read_split(dir)?;
    samples
        .iter()
        .map(|s| PreparedSample::new(s, model.encoder.sub_widths).map_err(failed))
        .collect()
}

fn load_model(checkpoint: &Path, settings: &Settings) -> Result<(Model, Settings), CliError> {
    if !checkpoint.is_file() {
        return Err(CliError::Missing {
            path: checkpoint.display().to_string(),
            detail: "checkpoint not found".into(),
        });
    }
    let mut merged = match checkpoint.parent().map(|p| p.join(MODEL_CONFIG)) {
        Some(p) if p.is_file() => Settings::load(&p)?,
        _ => Settings::default(),
    };
    for (k, v) in settings.entries() {
        merged.set(k, v);
    }
    let cfg = merged.model_config()?;
    let params = ParamStore::load(checkpoint).map_err(failed)?;
    let model = Model { cfg, params };
    let reference = Model::init(model.cfg.clone(), 0).map_err(failed)?;
    for (name, t) in reference.params.iter() {
        let got = model.params.get(name).map_err(|e| CliError::Usage(format!("checkpoint: {e}")))?;
        if got.shape() != t.shape() {
            return Err(CliError::Usage(format!(
                "checkpoint parameter {name} has shape {:?}, configuration expects {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    Ok((model, merged))
}

fn cmd_synth(run: &mut Run, common: &Common, out_dir: &Path, args: &SynthArgs) -> Result<(), CliError> {
    run.dir = Some(out_dir.to_path_buf());
    let mut s = base_settings(common)?;
    apply_synth(&mut s, args);
    run.manifest.settings = s.clone();
    let cfg = s.synth_config()?;
    run.manifest.seed = Some(cfg.seed);
    let (train, val) = synth::generate_splits(&cfg)?;
    for (name, data) in [("train", &train), ("val", &val)] {
        let dir = out_dir.join(name);
        write_split(&dir, data, &cfg.actions)?;
        run.manifest.outputs.push(dir);
    }
    println!(
        "wrote {} train and {} val scenes to {}",
        train.len(),
        val.len(),
        out_dir.display()
    );
    Ok(())
}

fn train_settings(common: &Common, args: &TrainArgs) -> Result<(Settings, TrainConfig), CliError> {
    let mut s = base_settings(common)?;
    apply_train(&mut s, args);
    let cfg = s.train_config()?;
    Ok((s, cfg))
}

fn model_settings_text(s: &Settings) -> String {
    const MODEL_KEYS: [&str; 18] = [
        "embed_dim",
        "normalize",
        "shared_dim",
        "pair_dim",
        "heads",
        "similarity_threshold",
        "scaled_attention",
        "matcher_input",
        "alpha",
        "beta",
        "lambda",
        "gamma",
        "eta",
        "components",
        "clipped_dissim",
        "scalar_align",
        "class_agnostic",
        "macro_average",
    ];
    s.entries()
        .filter(|(k, _)| MODEL_KEYS.contains(k))
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect()
}

fn cmd_train(run: &mut Run, common: &Common, data_dir: &Path, out_dir: &Path, args: &TrainArgs) -> Result<(), CliError> {
    run.dir = Some(out_dir.to_path_buf());
    let (s, cfg) = train_settings(common, args)?;
    run.manifest.settings = s.clone();
    run.manifest.seed = Some(cfg.seed);
    let train_dir = split_dir(data_dir, "train");
    let val_dir = data_dir.join("val");
    let train = load_prepared(&train_dir, &cfg.model)?;
    let names = read_actions(&train_dir.join("actions.txt")).unwrap_or_default();
    run.manifest.inputs.push(train_dir);
    let val = if val_dir.is_dir() {
        run.manifest.inputs.push(val_dir.clone());
        load_prepared(&val_dir, &cfg.model)?
    } else {
        Vec::new()
    };
    ensure_dir(out_dir)?;
    let outcome = match trainer::train(&cfg, &train, &val) {
        Ok(o) => o,
        Err(TrainError::Diverged {
            epoch,
            step,
            diagnostic,
            last_good,
        }) => {
            let path = out_dir.join(CHECKPOINT);
            trainer::save_checkpoint(&last_good, &path).map_err(failed)?;
            run.manifest.outputs.push(path);
            return Err(CliError::Failed(format!(
                "diverged at epoch {epoch}, step {step}: {diagnostic}; last good checkpoint saved"
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let ckpt = out_dir.join(CHECKPOINT);
    trainer::save_checkpoint(&outcome.model, &ckpt).map_err(failed)?;
    run.manifest.outputs.push(ckpt);
    write(run, out_dir.join(MODEL_CONFIG), model_settings_text(&s))?;
    write(run, out_dir.join("history.csv"), history_csv(&outcome.history))?;
    if let Some(report) = outcome.final_eval() {
        write(
            run,
            out_dir.join("eval.csv"),
            format!("{}\n{}\n", EvalReport::csv_header(), report.csv_row()),
        )?;
        print!("{}", report.table(&names));
    }
    Ok(())
}

fn read_predictions(path: &Path, samples: &[PreparedSample]) -> Result<Vec<Vec<Prediction>>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Missing {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let mut out = vec![Vec::new(); samples.len()];
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (k == 0 && line.starts_with("scene")) {
            continue;
        }
        let bad = |detail: &str| CliError::Usage(format!("{} line {}: {detail}", path.display(), k + 1));
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 4 {
            return Err(bad("expected scene,signifier,region,confidence"));
        }
        let scene: usize = cols[0].parse().map_err(|_| bad("bad scene index"))?;
        let region: usize = cols[2].parse().map_err(|_| bad("bad region index"))?;
        let confidence: f64 = cols[3].parse().map_err(|_| bad("bad confidence"))?;
        let s = samples.get(scene).ok_or_else(|| bad("scene out of range"))?;
        let r = s.regions.get(region).ok_or_else(|| bad("region out of range"))?;
        out[scene].push(Prediction {
            mask: r.mask.clone(),
            confidence,
            action: r.action_descriptor_id,
        });
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    run: &mut Run,
    common: &Common,
    checkpoint: Option<&Path>,
    data_dir: &Path,
    split: &str,
    predictions: Option<&Path>,
    out_dir: Option<&Path>,
    flags: (Option<bool>, Option<bool>),
) -> Result<(), CliError> {
    let dir = out_dir
        .map(Path::to_path_buf)
        .or_else(|| checkpoint.and_then(|c| c.parent()).map(Path::to_path_buf))
        .unwrap_or_else(|| data_dir.to_path_buf());
    run.dir = Some(dir.clone());
    let mut s = base_settings(common)?;
    if let Some(v) = flags.0 {
        s.set("class_agnostic", v);
    }
    if let Some(v) = flags.1 {
        s.set("macro_average", v);
    }
    let data_path = split_dir(data_dir, split);
    run.manifest.inputs.push(data_path.clone());
    let (preds, samples, settings) = match predictions {
        Some(p) => {
            run.manifest.inputs.push(p.to_path_buf());
            let samples = load_prepared(&data_path, &ModelConfig::default())?;
            (read_predictions(p, &samples)?, samples, s)
        }
        None => {
            let ckpt = checkpoint.ok_or_else(|| CliError::Usage("--checkpoint or --predictions required".into()))?;
            run.manifest.inputs.push(ckpt.to_path_buf());
            let (model, merged) = load_model(ckpt, &s)?;
            let samples = load_prepared(&data_path, &model.cfg)?;
            let preds = samples
                .iter()
                .map(|x| model.predict(x).map(|(_, p)| p).map_err(failed))
                .collect::<Result<Vec<_>, _>>()?;
            (preds, samples, merged)
        }
    };
    run.manifest.settings = settings.clone();
    let opts = EvalOptions {
        class_agnostic: settings.or("class_agnostic", false)?,
        macro_average: settings.or("macro_average", false)?,
    };
    let gts: Vec<_> = samples.iter().map(|x| x.gt.clone()).collect();
    let report = evaluate(&preds, &gts, opts).map_err(failed)?;
    let names = read_actions(&data_path.join("actions.txt")).unwrap_or_default();
    print!("{}", report.table(&names));
    ensure_dir(&dir)?;
    write(
        run,
        dir.join("eval.csv"),
        format!("{}\n{}\n", EvalReport::csv_header(), report.csv_row()),
    )
}

fn cmd_ablate(
    run: &mut Run,
    common: &Common,
    data_dir: &Path,
    out_dir: &Path,
    sets: Option<&str>,
    args: &TrainArgs,
) -> Result<(), CliError> {
    run.dir = Some(out_dir.to_path_buf());
    let (mut s, cfg) = train_settings(common, args)?;
    if let Some(v) = sets {
        s.set("sets", v);
    }
    run.manifest.settings = s.clone();
    run.manifest.seed = Some(cfg.seed);
    let toggles = match s.raw("sets") {
        Some(list) => list
            .split(';')
            .map(str::trim)
            .filter(|x| !x.is_empty())
            .map(|x| LossToggles::parse(x).map_err(|e| CliError::Usage(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?,
        None => LossToggles::ladder(),
    };
    let train_dir = split_dir(data_dir, "train");
    let val_dir = data_dir.join("val");
    let train = load_prepared(&train_dir, &cfg.model)?;
    let val = load_prepared(&val_dir, &cfg.model)?;
    run.manifest.inputs.extend([train_dir, val_dir]);
    let rows = trainer::ablate(&cfg, &train, &val, &toggles)?;
    print!("{}", ablation_table(&rows));
    ensure_dir(out_dir)?;
    write(run, out_dir.join("ablation.csv"), ablation_csv(&rows))
}

fn cmd_gradcheck(
    run: &mut Run,
    common: &Common,
    dims: Option<usize>,
    samples: Option<usize>,
    tolerance: Option<f64>,
    out_dir: &Path,
    corrupt: Option<&str>,
) -> Result<(), CliError> {
    run.dir = Some(out_dir.to_path_buf());
    let mut s = base_settings(common)?;
    if let Some(d) = dims {
        s.set("dims", d);
    }
    if let Some(n) = samples {
        s.set("samples", n);
    }
    if let Some(t) = tolerance {
        s.set("tolerance", t);
    }
    run.manifest.settings = s.clone();
    let d = GradcheckConfig::default();
    let cfg = GradcheckConfig {
        seed: s.or("seed", d.seed)?,
        embed_dim: s.or("dims", d.embed_dim)?,
        samples: s.or("samples", d.samples)?,
        tolerance: s.or("tolerance", d.tolerance)?,
        ..d
    };
    if cfg.embed_dim == 0 || cfg.samples == 0 {
        return Err(CliError::Usage("dims and samples must be positive".into()));
    }
    run.manifest.seed = Some(cfg.seed);
    let report = gradcheck::run(&cfg, corrupt).map_err(failed)?;
    let table = report.table();
    print!("{table}");
    ensure_dir(out_dir)?;
    write(run, out_dir.join("gradcheck.txt"), &table)?;
    let bad: Vec<String> = report
        .failures()
        .map(|r| format!("{}.* ({})", r.group, r.objective.name()))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient check failed for {}", bad.join(", "))))
    }
}

/// Comma-separated rows with full precision.
pub fn matrix_csv(t: &Tensor) -> String {
    let mut out = String::new();
    for r in 0..t.rows() {
        let row: Vec<String> = t.row(r).iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Binary greyscale image, one pixel per entry, `round(255·v)` clamped.
pub fn matrix_pgm(t: &Tensor) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", t.cols(), t.rows()).into_bytes();
    out.extend(t.data().iter().map(|&v| (255.0 * v).round().clamp(0.0, 255.0) as u8));
    out
}

fn min_max(t: &Tensor) -> Tensor {
    let lo = t.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = t
        .data()
        .iter()
        .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect();
    Tensor::matrix(t.rows(), t.cols(), data)
}

fn cmd_heatmap(run: &mut Run, common: &Common, checkpoint: &Path, scene: &Path, out: &Path) -> Result<(), CliError> {
    run.dir = Some(out.to_path_buf());
    let s = base_settings(common)?;
    let (model, merged) = load_model(checkpoint, &s)?;
    run.manifest.settings = merged;
    run.manifest.inputs.extend([checkpoint.to_path_buf(), scene.to_path_buf()]);
    if !scene.is_file() {
        return Err(CliError::Missing {
            path: scene.display().to_string(),
            detail: "scene file not found".into(),
        });
    }
    let record = read_scene(scene).map_err(failed)?;
    let sig = scene.with_extension("sig");
    let bytes = std::fs::read(&sig).map_err(|e| CliError::Missing {
        path: sig.display().to_string(),
        detail: e.to_string(),
    })?;
    let (signifiers, gt_region) = signifiers_from_bytes(&bytes).map_err(|detail| CliError::Missing {
        path: sig.display().to_string(),
        detail,
    })?;
    if signifiers.rows() == 0 || record.regions.is_empty() {
        return Err(failed(GeometryError::EmptyInput("signifiers or regions")));
    }
    let sample = Sample {
        scene: record,
        signifiers,
        gt_region,
        latent: None,
    };
    let prepared = PreparedSample::new(&sample, model.cfg.encoder.sub_widths).map_err(failed)?;
    let state = model.match_state(&prepared).map_err(failed)?;
    ensure_dir(out)?;
    let probs = &state.assignment.probs;
    for (name, t, image) in [
        ("d", &state.d, state.d.clone()),
        ("match_map", &state.match_map, min_max(&state.match_map)),
        ("assignment", probs, probs.clone()),
    ] {
        write(run, out.join(format!("{name}.csv")), matrix_csv(t))?;
        write(run, out.join(format!("{name}.pgm")), matrix_pgm(&image))?;
    }
    println!(
        "wrote {}x{} heatmaps to {}",
        state.d.rows(),
        state.d.cols(),
        out.display()
    );
    Ok(())
}

/// Parses `args` and runs the subcommand, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match &cli.command {
        Command::Synth { common, out_dir, args } => {
            let mut r = Run::new("synth");
            let res = cmd_synth(&mut r, common, out_dir, args);
            r.finish(res)
        }
        Command::Train {
            common,
            data_dir,
            out_dir,
            args,
        } => {
            let mut r = Run::new("train");
            let res = cmd_train(&mut r, common, data_dir, out_dir, args);
            r.finish(res)
        }
        Command::Eval {
            common,
            checkpoint,
            data_dir,
            split,
            predictions,
            out_dir,
            class_agnostic,
            macro_average,
        } => {
            let mut r = Run::new("eval");
            let res = cmd_eval(
                &mut r,
                common,
                checkpoint.as_deref(),
                data_dir,
                split,
                predictions.as_deref(),
                out_dir.as_deref(),
                (*class_agnostic, *macro_average),
            );
            r.finish(res)
        }
        Command::Ablate {
            common,
            data_dir,
            out_dir,
            sets,
            args,
        } => {
            let mut r = Run::new("ablate");
            let res = cmd_ablate(&mut r, common, data_dir, out_dir, sets.as_deref(), args);
            r.finish(res)
        }
        Command::Gradcheck {
            common,
            dims,
            samples,
            tolerance,
            out_dir,
            corrupt_group,
        } => {
            let mut r = Run::new("gradcheck");
            let res = cmd_gradcheck(
                &mut r,
                common,
                *dims,
                *samples,
                *tolerance,
                out_dir,
                corrupt_group.as_deref(),
            );
            r.finish(res)
        }
        Command::Heatmap {
            common,
            checkpoint,
            scene,
            out,
        } => {
            let mut r = Run::new("heatmap");
            let res = cmd_heatmap(&mut r, common, checkpoint, scene, out);
            r.finish(res)
        }
    }
}
