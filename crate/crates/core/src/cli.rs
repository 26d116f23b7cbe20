//! Command-line front end. Every subcommand reads an optional JSON config,
//! applies flag overrides, writes its outputs under `--out` and records a
//! `manifest.json` there.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::costs::CostWeights;
use crate::error::{Error, Result};
use crate::eval::{emit_report, evaluate, parse_report_csv, Domain, EvalConfig, MetricsReport};
use crate::features::FeatureScaling;
use crate::irl::feature_expectation;
use crate::policy::{PolicyConfig, PolicyParams};
use crate::pretrain::{resume, PretrainConfig, PretrainState};
use crate::scenarios::{generate_scenes, kmeans_user_split, load_frames, save_frames, segment_frames, Frame, StyleParams};
use crate::transfer::{classify_frame, finetune, write_log_csv, FineTuneConfig, Structure, TrajectoryClass, UpdateTarget};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(name = "tilplan", version, about = "Train and adapt a style-aware motion planner on synthetic driving data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic driving datasets.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Label every frame of a dataset and compute per-class feature expectations.
    Classify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Split a dataset into per-user sets by k-means over trajectory features.
    ClusterUsers {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pre-train the policy by imitation on the expert dataset.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        expert: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a saved training state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint toward a user's style.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        expert: PathBuf,
        #[arg(long)]
        user: PathBuf,
        /// Initial cost weights (JSON); defaults otherwise.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        proportion: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_parser = parse_json_str::<Structure>)]
        structure: Option<Structure>,
        #[arg(long, value_parser = parse_json_str::<UpdateTarget>)]
        update: Option<UpdateTarget>,
    },
    /// Score a checkpoint on a dataset.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Demonstrations defining the style target; defaults to --dataset.
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, value_parser = parse_json_str::<Structure>)]
        structure: Option<Structure>,
        #[arg(long, value_parser = parse_json_str::<Domain>)]
        domain: Option<Domain>,
        #[arg(long)]
        model: Option<String>,
    },
    /// Merge report CSVs into one report.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
    },
}

/// Parses a bare enum name through its serde representation.
fn parse_json_str<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleMix {
    pub style: StyleParams,
    pub scenes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub mixes: Vec<StyleMix>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub seed: u64,
    pub datasets: Vec<DatasetSpec>,
}

impl Default for GenConfig {
    fn default() -> Self {
        let mix = |style, scenes| StyleMix { style, scenes };
        Self {
            seed: 0,
            datasets: vec![
                DatasetSpec {
                    name: "expert".into(),
                    mixes: vec![
                        mix(StyleParams::neutral(), 40),
                        mix(StyleParams::aggressive(), 40),
                        mix(StyleParams::gentle(), 40),
                    ],
                },
                DatasetSpec {
                    name: "user-pool".into(),
                    mixes: vec![mix(StyleParams::aggressive(), 20), mix(StyleParams::gentle(), 20)],
                },
                DatasetSpec {
                    name: "test".into(),
                    mixes: vec![mix(StyleParams::aggressive(), 20), mix(StyleParams::gentle(), 20)],
                },
            ],
        }
    }
}

/// Seed of the `j`-th mix of the `i`-th dataset.
fn mix_seed(seed: u64, dataset: usize, mix: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add((dataset * 1000 + mix) as u64)
}

pub fn generate_datasets(cfg: &GenConfig) -> Result<Vec<(String, Vec<Frame>)>> {
    let mut out = Vec::new();
    for (i, d) in cfg.datasets.iter().enumerate() {
        if d.name.is_empty() || d.name.contains(['/', '\\']) || d.name.starts_with('.') {
            return Err(Error::invalid(format!("bad dataset name {:?}", d.name)));
        }
        let mut frames = Vec::new();
        for (j, m) in d.mixes.iter().enumerate() {
            m.style.validate()?;
            for scene in generate_scenes(m.scenes, &m.style, mix_seed(cfg.seed, i, j))? {
                frames.extend(segment_frames(&scene)?);
            }
        }
        out.push((d.name.clone(), frames));
    }
    Ok(out)
}

/// Provenance of one generated dataset, written to `datasets.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub name: String,
    pub frames: usize,
    pub class_counts: BTreeMap<TrajectoryClass, usize>,
    pub mixes: Vec<StyleMix>,
    pub mix_seeds: Vec<u64>,
}

pub fn class_counts(frames: &[Frame]) -> BTreeMap<TrajectoryClass, usize> {
    let mut counts: BTreeMap<TrajectoryClass, usize> = TrajectoryClass::ALL.iter().map(|&c| (c, 0)).collect();
    for f in frames {
        *counts.entry(classify_frame(f)).or_default() += 1;
    }
    counts
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifyConfig {
    pub beta: FeatureScaling,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub users: usize,
    pub per_user: usize,
    pub seed: u64,
    pub beta: FeatureScaling,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            users: 2,
            per_user: 64,
            seed: 0,
            beta: FeatureScaling::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainJob {
    pub policy: PolicyConfig,
    /// Seed of the initial parameters; the training seed also drives
    /// shuffling.
    pub init_seed: u64,
    pub training: PretrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateJob {
    pub model: String,
    pub domain: Domain,
    pub structure: Structure,
    pub eval: EvalConfig,
}

impl Default for EvaluateJob {
    fn default() -> Self {
        Self {
            model: "model".into(),
            domain: Domain::Out,
            structure: Structure::Nn,
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    /// Sort rows by model then domain instead of input order.
    pub sort: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Provenance of one command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub config_sha256: String,
    pub seed: Option<u64>,
    /// Input role to file digest.
    pub inputs: BTreeMap<String, FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<FileDigest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("config {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

fn load_dataset(path: &Path) -> Result<Vec<Frame>> {
    load_frames(path).map_err(|e| e.context(path.display().to_string()))
}

/// Collects input digests and output paths, then writes the manifest.
struct Recorder {
    out: PathBuf,
    inputs: BTreeMap<String, FileDigest>,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    fn new(out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Ok(Self {
            out: out.to_path_buf(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.inputs.insert(role.to_string(), file_digest(path)?);
        Ok(())
    }

    fn output(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(p.clone());
        p
    }

    fn finish<C: Serialize>(self, command: &str, config: &C, seed: Option<u64>) -> Result<Manifest> {
        let config = serde_json::to_value(config)?;
        let manifest = Manifest {
            tool: "tilplan".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_sha256: sha256_hex(serde_json::to_string(&config)?.as_bytes()),
            config,
            seed,
            inputs: self.inputs,
            outputs: self.outputs.iter().map(|p| file_digest(p)).collect::<Result<_>>()?,
        };
        write_json(&self.out.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }
}

fn run_command(command: Command) -> Result<()> {
    match command {
        Command::Gen { common, seed } => {
            let mut cfg: GenConfig = load_config(common.config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let mut rec = Recorder::new(&common.out)?;
            let mut summary = Vec::new();
            for ((i, dataset), (name, frames)) in cfg.datasets.iter().enumerate().zip(generate_datasets(&cfg)?) {
                save_frames(rec.output(&format!("{name}.jsonl")), &frames)?;
                summary.push(DatasetSummary {
                    name,
                    frames: frames.len(),
                    class_counts: class_counts(&frames),
                    mixes: dataset.mixes.clone(),
                    mix_seeds: (0..dataset.mixes.len()).map(|j| mix_seed(cfg.seed, i, j)).collect(),
                });
            }
            write_json(&rec.output("datasets.json"), &serde_json::json!({ "seed": cfg.seed, "datasets": summary }))?;
            rec.finish("gen", &cfg, Some(cfg.seed))?;
        }
        Command::Classify { common, input } => {
            let cfg: ClassifyConfig = load_config(common.config.as_deref())?;
            let mut rec = Recorder::new(&common.out)?;
            rec.input("dataset", &input)?;
            let frames = load_dataset(&input)?;
            let mut csv = String::from("scene_id,frame_index,class\n");
            for f in &frames {
                let c = classify_frame(f);
                csv.push_str(&format!("{},{},{c}\n", f.scene_id, f.frame_index));
            }
            let path = rec.output("classes.csv");
            std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
            write_json(&rec.output("class_counts.json"), &class_counts(&frames))?;
            feature_expectation(&frames, &cfg.beta)?.save(&rec.output("target.json"))?;
            rec.finish("classify", &cfg, None)?;
        }
        Command::ClusterUsers { common, input, seed } => {
            let mut cfg: ClusterConfig = load_config(common.config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let mut rec = Recorder::new(&common.out)?;
            rec.input("dataset", &input)?;
            let frames = load_dataset(&input)?;
            let split = kmeans_user_split(&frames, cfg.users, cfg.per_user, &cfg.beta, cfg.seed)?;
            for (i, user) in split.users.iter().enumerate() {
                save_frames(rec.output(&format!("user_{i:02}.jsonl")), user)?;
            }
            write_json(&rec.output("centers.json"), &split.centers)?;
            rec.finish("cluster-users", &cfg, Some(cfg.seed))?;
        }
        Command::Pretrain {
            common,
            expert,
            seed,
            resume: resume_from,
        } => {
            let mut cfg: PretrainJob = load_config(common.config.as_deref())?;
            if let Some(s) = seed {
                cfg.init_seed = s;
                cfg.training.seed = s;
            }
            let mut rec = Recorder::new(&common.out)?;
            rec.input("expert", &expert)?;
            let state = match &resume_from {
                Some(p) => {
                    rec.input("resume", p)?;
                    PretrainState::load(p)?
                }
                None => PretrainState::new(PolicyParams::init(cfg.policy, cfg.init_seed)?, cfg.training.update_rule),
            };
            let frames = load_dataset(&expert)?;
            let state = resume(state, &frames, &cfg.training)?;
            state.params.save(&rec.output("policy.json"))?;
            state.save(&rec.output("state.json"))?;
            let mut csv = String::from("epoch,loss\n");
            for (i, l) in state.curve.iter().enumerate() {
                csv.push_str(&format!("{},{l}\n", i + 1));
            }
            let path = rec.output("loss.csv");
            std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
            rec.finish("pretrain", &cfg, Some(cfg.training.seed))?;
        }
        Command::Finetune {
            common,
            checkpoint,
            expert,
            user,
            weights,
            seed,
            alpha,
            proportion,
            steps,
            structure,
            update,
        } => {
            let mut cfg: FineTuneConfig = load_config(common.config.as_deref())?;
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.alpha = alpha.unwrap_or(cfg.alpha);
            cfg.expert_proportion = proportion.unwrap_or(cfg.expert_proportion);
            cfg.steps = steps.unwrap_or(cfg.steps);
            cfg.structure = structure.unwrap_or(cfg.structure);
            cfg.update_target = update.unwrap_or(cfg.update_target);
            cfg.validate()?;
            let mut rec = Recorder::new(&common.out)?;
            rec.input("checkpoint", &checkpoint)?;
            rec.input("expert", &expert)?;
            rec.input("user", &user)?;
            let w0 = match &weights {
                Some(p) => {
                    rec.input("weights", p)?;
                    read_json(p)?
                }
                None => CostWeights::default(),
            };
            let params = PolicyParams::load(&checkpoint)?;
            let result = finetune(&params, &w0, &load_dataset(&expert)?, &load_dataset(&user)?, &cfg)?;
            result.params.save(&rec.output("policy.json"))?;
            write_json(&rec.output("weights.json"), &result.weights)?;
            write_log_csv(&result.log, &rec.output("log.csv"))?;
            rec.finish("finetune", &cfg, Some(cfg.seed))?;
        }
        Command::Evaluate {
            common,
            checkpoint,
            dataset,
            target,
            weights,
            structure,
            domain,
            model,
        } => {
            let mut cfg: EvaluateJob = load_config(common.config.as_deref())?;
            cfg.structure = structure.unwrap_or(cfg.structure);
            cfg.domain = domain.unwrap_or(cfg.domain);
            if let Some(m) = model {
                cfg.model = m;
            }
            let mut rec = Recorder::new(&common.out)?;
            rec.input("checkpoint", &checkpoint)?;
            rec.input("dataset", &dataset)?;
            let frames = load_dataset(&dataset)?;
            let target_frames = match &target {
                Some(p) => {
                    rec.input("target", p)?;
                    load_dataset(p)?
                }
                None => frames.clone(),
            };
            let w = match &weights {
                Some(p) => {
                    rec.input("weights", p)?;
                    read_json(p)?
                }
                None => CostWeights::default(),
            };
            let params = PolicyParams::load(&checkpoint)?;
            let style = feature_expectation(&target_frames, &cfg.eval.beta)?;
            let report = evaluate(&cfg.model, cfg.domain, &params, &w, &frames, &style, cfg.structure, &cfg.eval)?;
            let path = rec.output("report.csv");
            emit_report(&[report], &path)?;
            rec.outputs.push(crate::eval::json_mirror_path(&path));
            rec.finish("evaluate", &cfg, None)?;
        }
        Command::Report { common, inputs } => {
            let cfg: ReportConfig = load_config(common.config.as_deref())?;
            let mut rec = Recorder::new(&common.out)?;
            let mut rows: Vec<MetricsReport> = Vec::new();
            for (i, p) in inputs.iter().enumerate() {
                rec.input(&format!("report_{i:02}"), p)?;
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                rows.extend(parse_report_csv(&text).map_err(|e| e.context(p.display().to_string()))?);
            }
            if cfg.sort {
                rows.sort_by(|a, b| (&a.model, a.domain.name()).cmp(&(&b.model, b.domain.name())));
            }
            let path = rec.output("report.csv");
            emit_report(&rows, &path)?;
            rec.outputs.push(crate::eval::json_mirror_path(&path));
            rec.finish("report", &cfg, None)?;
        }
    }
    Ok(())
}

/// Exit status for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Data(_) | Error::Parse { .. } | Error::Io { .. } | Error::Json(_) => EXIT_DATA,
        Error::Solver { .. } | Error::Training { .. } | Error::FitFailure(_) => EXIT_NUMERIC,
        Error::Context { .. } => unreachable!("root strips context"),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit status. Messages go to stdout/stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run_command(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
