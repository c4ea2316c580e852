//! Command-line entry point.
//!
//! Every subcommand reads one JSON config, writes its artifacts under
//! `--out` and finishes with a `manifest.json` recording the config text,
//! its SHA-256, the seed and the relative artifact paths. `--replay` re-runs
//! a manifest after checking the hash.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or configuration error,
//! 3 training divergence.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, TensorMap};
use crate::data::{apply_normalization, compute_stats, load_csv, load_schema, synth_generate, write_csv, write_schema};
use crate::data::{Dataset, GeneratorConfig};
use crate::dtw::build_transfer_map;
use crate::error::{Error, Result};
use crate::eval::{build_report, evaluate_model, run_cv, CvConfig, FoldReport, Metrics, Summary};
use crate::losses::LossWeights;
use crate::pipeline::{
    init_target_from_transition, prepare_split, scratch_target, train_target, train_teacher, train_transition,
    LabelScaler, ModelConfig, PreparedSplit, RunConfig, SourceModel, SourceTask, StageOverrides, TargetModel,
    TrainConfig, TransitionBundle,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

pub const MANIFEST: &str = "manifest.json";
pub const TEACHER_CKPT: &str = "teacher.ckpt.json";
pub const TRANSITION_CKPT: &str = "transition.ckpt.json";
pub const TARGET_INIT_CKPT: &str = "target_init.ckpt.json";
pub const TARGET_CKPT: &str = "target.ckpt.json";

/// Observation, outcome and schema files of one cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSet {
    pub observations: PathBuf,
    pub outcomes: PathBuf,
    pub schema: PathBuf,
}

impl FileSet {
    fn load(&self, base: &Path) -> Result<Dataset> {
        let schema = load_schema(&base.join(&self.schema))?;
        load_csv(&base.join(&self.observations), &base.join(&self.outcomes), &schema)
    }
}

/// Either CSV cohorts (paths relative to the config file) or a synthetic
/// generator.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: Option<FileSet>,
    pub target: Option<FileSet>,
    pub target_test: Option<FileSet>,
    pub synthetic: Option<GeneratorConfig>,
    /// With `synthetic`: the first `target_train` target patients form the
    /// training cohort and the rest the test cohort.
    pub target_train: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub stages: StageOverrides,
    pub source_task: SourceTask,
    pub cv: CvConfig,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            seed: self.seed,
            model: self.model,
            train: self.train,
            loss: self.loss,
            stages: self.stages,
            source_task: self.source_task,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// Train the target model from random initialisation.
    Scratch,
}

/// Record of one invocation, sufficient to re-execute it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subcommand: String,
    /// Config file content, verbatim.
    pub config: String,
    pub config_sha256: String,
    /// Directory that relative data paths in the config resolve against.
    pub config_dir: PathBuf,
    /// Seed the run used.
    pub seed: u64,
    /// `--seed` as given on the command line.
    pub seed_override: Option<u64>,
    pub ablation: Option<Ablation>,
    pub from: Option<PathBuf>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Parser)]
#[command(name = "emr-transfer", version, about = "Transfer learning across clinical cohorts with misaligned features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic source/target pair as CSV files.
    Simulate(RunArgs),
    /// Stage 1: train the teacher on the source cohort.
    TrainTeacher(RunArgs),
    /// Stage 2: train the transition model (`--from` a teacher run).
    TrainTransition(RunArgs),
    /// Match target-private features to source features by DTW.
    DtwMatch(RunArgs),
    /// Build the initial target model (`--from` a transition run).
    Transfer(RunArgs),
    /// Stage 3: fine-tune on the target cohort (`--from` a transfer run).
    TrainTarget(RunArgs),
    /// Full pipeline under patient-grouped cross-validation.
    RunCv(RunArgs),
    /// Test metrics of a trained target model (`--from` a train-target run).
    Evaluate(RunArgs),
}

impl Command {
    fn parts(&self) -> (&'static str, &RunArgs) {
        match self {
            Command::Simulate(a) => ("simulate", a),
            Command::TrainTeacher(a) => ("train-teacher", a),
            Command::TrainTransition(a) => ("train-transition", a),
            Command::DtwMatch(a) => ("dtw-match", a),
            Command::Transfer(a) => ("transfer", a),
            Command::TrainTarget(a) => ("train-target", a),
            Command::RunCv(a) => ("run-cv", a),
            Command::Evaluate(a) => ("evaluate", a),
        }
    }
}

#[derive(Debug, Clone, clap::Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long, required_unless_present = "replay", conflicts_with = "replay")]
    config: Option<PathBuf>,
    /// Re-execute the run recorded in a manifest.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Output directory; must be absent or empty unless `--force`.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed (and the cross-validation seed list).
    #[arg(long)]
    seed: Option<u64>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    force: bool,
    #[arg(long, value_enum)]
    ablation: Option<Ablation>,
    /// Output directory of the previous stage.
    #[arg(long)]
    from: Option<PathBuf>,
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::Fold { source, .. } => exit_code(source),
        _ => EXIT_DATA,
    }
}

/// Everything a subcommand needs.
struct Ctx {
    name: &'static str,
    config_text: String,
    config_dir: PathBuf,
    cfg: Config,
    run: RunConfig,
    seed_override: Option<u64>,
    ablation: Option<Ablation>,
    from: Option<PathBuf>,
}

impl Ctx {
    fn new(name: &'static str, args: &RunArgs) -> Result<Self> {
        let (config_text, config_dir, mut seed_override, mut ablation, mut from) = match (&args.config, &args.replay) {
            (Some(path), _) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
                let dir = fs::canonicalize(dir).map_err(|e| Error::io(dir, e))?;
                (text, dir, None, None, None)
            }
            (None, Some(path)) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                if m.subcommand != name {
                    return Err(Error::Config(format!("manifest records `{}`, not `{name}`", m.subcommand)));
                }
                let hash = sha256_hex(m.config.as_bytes());
                if hash != m.config_sha256 {
                    return Err(Error::Config(format!(
                        "{}: config hash {hash} does not match recorded {}",
                        path.display(),
                        m.config_sha256
                    )));
                }
                (m.config, m.config_dir, m.seed_override, m.ablation, m.from)
            }
            (None, None) => return Err(Error::Config("one of --config or --replay is required".into())),
        };
        seed_override = args.seed.or(seed_override);
        ablation = args.ablation.or(ablation);
        from = args.from.clone().or(from);
        let mut cfg = Config::parse(&config_text)?;
        if let Some(seed) = seed_override {
            cfg.seed = seed;
            cfg.cv.seeds = vec![seed];
        }
        let run = cfg.run_config();
        run.validate()?;
        Ok(Self {
            name,
            config_text,
            config_dir,
            cfg,
            run,
            seed_override,
            ablation,
            from,
        })
    }

    fn scratch(&self) -> bool {
        self.ablation == Some(Ablation::Scratch)
    }

    fn synthetic(&self) -> Result<Option<(Dataset, Dataset)>> {
        let d = &self.cfg.data;
        let Some(gen) = &d.synthetic else {
            if d.target_train.is_some() {
                return Err(Error::Config("data.target_train requires data.synthetic".into()));
            }
            return Ok(None);
        };
        if d.source.is_some() || d.target.is_some() || d.target_test.is_some() {
            return Err(Error::Config("data.synthetic excludes data.source/target/target_test".into()));
        }
        synth_generate(gen).map(Some)
    }

    /// Source, training target and optional test target cohorts.
    fn cohorts(&self, need_target: bool) -> Result<(Dataset, Option<Dataset>, Option<Dataset>)> {
        let d = &self.cfg.data;
        if let Some((source, target)) = self.synthetic()? {
            return match d.target_train {
                None => Ok((source, Some(target), None)),
                Some(n) if n > 0 && n < target.len() => {
                    let ids: Vec<usize> = (0..target.len()).collect();
                    let (train, test) = ids.split_at(n);
                    Ok((source, Some(target.select(train)), Some(target.select(test))))
                }
                Some(n) => Err(Error::Config(format!(
                    "data.target_train must be in 1..{}, got {n}",
                    target.len()
                ))),
            };
        }
        let base = &self.config_dir;
        let source = d
            .source
            .as_ref()
            .ok_or_else(|| Error::Config("data.source is required".into()))?
            .load(base)?;
        let target = match &d.target {
            Some(f) => Some(f.load(base)?),
            None if need_target => return Err(Error::Config("data.target is required".into())),
            None => None,
        };
        let test = d.target_test.as_ref().map(|f| f.load(base)).transpose()?;
        Ok((source, target, test))
    }

    /// Normalised split; without a test cohort the training cohort stands in.
    fn split(&self) -> Result<(PreparedSplit, bool)> {
        let (source, target, test) = self.cohorts(true)?;
        let target = target.expect("target required");
        let has_test = test.is_some();
        let test = test.unwrap_or_else(|| target.clone());
        Ok((prepare_split(&source, &target, &test)?, has_test))
    }

    fn from_file(&self, file: &str) -> Result<TensorMap> {
        let dir = self
            .from
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} needs --from <dir containing {file}>", self.name)))?;
        checkpoint::load(&dir.join(file))
    }
}

/// Output directory that records everything written to it.
struct Output {
    dir: PathBuf,
    artifacts: Vec<String>,
}

impl Output {
    fn open(dir: &Path, force: bool) -> Result<Self> {
        if dir.exists() && !force {
            let mut entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
            if entries.next().is_some() {
                return Err(Error::Config(format!(
                    "output directory {} is not empty; pass --force to overwrite",
                    dir.display()
                )));
            }
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.artifacts.push(rel.to_string());
        Ok(path)
    }

    fn write(&mut self, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(rel)?;
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))
    }

    fn checkpoint(&mut self, rel: &str, map: &TensorMap) -> Result<()> {
        self.write(rel, checkpoint::encode(map)?)
    }

    fn dataset(&mut self, dir: &str, ds: &Dataset) -> Result<()> {
        let obs = self.path(&format!("{dir}/observations.csv"))?;
        let outcomes = self.path(&format!("{dir}/outcomes.csv"))?;
        write_csv(ds, &obs, &outcomes)?;
        let schema = self.path(&format!("{dir}/schema.json"))?;
        write_schema(&ds.schema, &schema)
    }

    fn report(&mut self, metrics: &Metrics, seed: u64, best_epoch: Option<usize>) -> Result<()> {
        let summary = Summary::new(vec![FoldReport {
            seed,
            fold: 0,
            mse: metrics.mse,
            mad: metrics.mad,
            auroc: metrics.auroc,
            best_epoch,
        }]);
        self.write("report.json", serde_json::to_string_pretty(&summary)? + "\n")?;
        self.write("report.txt", summary.to_text("model"))
    }
}

fn execute(command: &Command) -> Result<()> {
    let (name, args) = command.parts();
    let ctx = Ctx::new(name, args)?;
    let mut out = Output::open(&args.out, args.force)?;
    match command {
        Command::Simulate(_) => simulate(&ctx, &mut out)?,
        Command::TrainTeacher(_) => teacher(&ctx, &mut out)?,
        Command::TrainTransition(_) => transition(&ctx, &mut out)?,
        Command::DtwMatch(_) => dtw_match(&ctx, &mut out)?,
        Command::Transfer(_) => transfer(&ctx, &mut out)?,
        Command::TrainTarget(_) => target(&ctx, &mut out)?,
        Command::RunCv(_) => cv(&ctx, &mut out)?,
        Command::Evaluate(_) => evaluate(&ctx, &mut out)?,
    }
    let manifest = Manifest {
        subcommand: name.to_string(),
        config_sha256: sha256_hex(ctx.config_text.as_bytes()),
        config: ctx.config_text,
        config_dir: ctx.config_dir,
        seed: ctx.run.seed,
        seed_override: ctx.seed_override,
        ablation: ctx.ablation,
        from: ctx.from,
        artifacts: out.artifacts,
    };
    let path = out.dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))
}

fn simulate(ctx: &Ctx, out: &mut Output) -> Result<()> {
    if ctx.cfg.data.synthetic.is_none() {
        return Err(Error::Config("simulate needs data.synthetic".into()));
    }
    let (source, target, test) = ctx.cohorts(true)?;
    out.dataset("source", &source)?;
    out.dataset("target", &target.expect("synthetic target"))?;
    if let Some(test) = test {
        out.dataset("target_test", &test)?;
    }
    Ok(())
}

fn teacher(ctx: &Ctx, out: &mut Output) -> Result<()> {
    let (source, _, _) = ctx.cohorts(false)?;
    let source = apply_normalization(&source, &compute_stats(&source)?);
    let run = train_teacher(&source, &ctx.run)?;
    let mut map = TensorMap::new();
    run.model.export("teacher", &mut map);
    out.checkpoint(TEACHER_CKPT, &map)?;
    out.write("teacher_log.csv", run.log.to_csv())
}

fn transition(ctx: &Ctx, out: &mut Output) -> Result<()> {
    let teacher = SourceModel::import("teacher", &ctx.from_file(TEACHER_CKPT)?)?;
    let (split, _) = ctx.split()?;
    let run = train_transition(&teacher, &split.source, &split.target_train, &split.alignment, &ctx.run)?;
    let mut map = TensorMap::new();
    run.bundle.export(&mut map);
    out.checkpoint(TRANSITION_CKPT, &map)?;
    out.write("transition_log.csv", run.log.to_csv())?;
    let mut acc = String::from("epoch,domain_accuracy\n");
    for (i, a) in run.domain_accuracy.iter().enumerate() {
        acc.push_str(&format!("{},{a}\n", i + 1));
    }
    out.write("domain_accuracy.csv", acc)
}

fn dtw_match(ctx: &Ctx, out: &mut Output) -> Result<()> {
    let (split, _) = ctx.split()?;
    let map = build_transfer_map(&split.source, &split.target_train, &split.alignment, ctx.run.seed)?;
    out.write("transfer_map.csv", map.to_csv()?)
}

fn initial_target(ctx: &Ctx, split: &PreparedSplit, out: &mut Output) -> Result<TargetModel> {
    let los = LabelScaler::fit(&split.target_train.los())?;
    if ctx.scratch() {
        return scratch_target(&split.target_train.schema, los, &ctx.run);
    }
    let encoder = TransitionBundle::import_encoder(&ctx.from_file(TRANSITION_CKPT)?)?;
    let map = build_transfer_map(&split.source, &split.target_train, &split.alignment, ctx.run.seed)?;
    out.write("transfer_map.csv", map.to_csv()?)?;
    init_target_from_transition(&encoder, &map, &split.target_train.schema, los, &ctx.run)
}

fn transfer(ctx: &Ctx, out: &mut Output) -> Result<()> {
    let (split, _) = ctx.split()?;
    let model = initial_target(ctx, &split, out)?;
    let mut map = TensorMap::new();
    model.export(&mut map);
    out.checkpoint(TARGET_INIT_CKPT, &map)
}

fn target(ctx: &Ctx, out: &mut Output) -> Result<()> {
    let (split, has_test) = ctx.split()?;
    let model = if ctx.scratch() {
        initial_target(ctx, &split, out)?
    } else {
        TargetModel::import(&ctx.from_file(TARGET_INIT_CKPT)?)?
    };
    let run = train_target(model, &split.target_train, &ctx.run)?;
    let mut map = TensorMap::new();
    run.model.export(&mut map);
    out.checkpoint(TARGET_CKPT, &map)?;
    out.write("curve.csv", run.log.curve_csv())?;
    out.write("target_log.csv", run.log.to_csv())?;
    if has_test {
        let metrics = evaluate_model(&run.model, &split.target_test)?;
        out.report(&metrics, ctx.run.seed, run.log.best_epoch)?;
    }
    Ok(())
}

fn evaluate(ctx: &Ctx, out: &mut Output) -> Result<()> {
    let model = TargetModel::import(&ctx.from_file(TARGET_CKPT)?)?;
    let (split, _) = ctx.split()?;
    let metrics = evaluate_model(&model, &split.target_test)?;
    out.report(&metrics, ctx.run.seed, None)
}

fn cv(ctx: &Ctx, out: &mut Output) -> Result<()> {
    let (source, target, test) = ctx.cohorts(true)?;
    let target = target.expect("target required");
    let runs = run_cv(&source, &target, test.as_ref(), &ctx.run, &ctx.cfg.cv, ctx.scratch())?;
    let report = build_report(&runs);
    out.write("report.json", report.to_json()? + "\n")?;
    out.write("report.txt", report.to_text())?;
    let mut sorted: Vec<_> = runs.iter().collect();
    sorted.sort_by_key(|r| (r.seed, r.fold));
    for r in sorted {
        let tag = format!("seed{}_fold{}", r.seed, r.fold);
        let o = &r.outcome;
        out.write(&format!("curves/{tag}_transfer.csv"), o.transfer.log.curve_csv())?;
        if let Some((scratch, _)) = &o.scratch {
            out.write(&format!("curves/{tag}_scratch.csv"), scratch.log.curve_csv())?;
        }
        out.write(&format!("logs/{tag}_transition.csv"), o.transition.log.to_csv())?;
        out.write(&format!("maps/{tag}_transfer_map.csv"), o.map.to_csv()?)?;
        let mut map = TensorMap::new();
        o.transfer.model.export(&mut map);
        out.checkpoint(&format!("checkpoints/{tag}_target.ckpt.json"), &map)?;
    }
    Ok(())
}
