//! Command-line pipeline: data generation, curation, both training
//! stages, evaluation, gradient checking, token analysis, and canned
//! experiment presets.
//!
//! [`dispatch`] is the whole surface: it parses `argv`, merges a flat
//! `key = value` config file underneath any explicit flags, and returns
//! a process exit code instead of exiting, so it can be driven from
//! tests as easily as from `main`.
//!
//! Exit codes:
//!
//! * `0` - success (including `--help`, `--version`, and `--list`);
//! * `1` - usage error: bad flags, unknown subcommand or preset, missing
//!   required inputs, malformed config file;
//! * `2` - runtime fault: I/O, corrupt data files, non-finite training
//!   math, a failed gradient check.
//!
//! The output directory resolves in this order: the `REDI_LAB_OUT`
//! environment variable (highest), the `--out-dir` flag, the config
//! file's `out_dir`, then `./redi-out`.

use crate::corpus::{self, CurationConfig};
use crate::evalkit::{self, EvalConfig};
use crate::fsio;
use crate::gradcheck::{self, GradCheckConfig};
use crate::objectives::Objective;
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::policy::{self, PolicyConfig, SampleConfig};
use crate::seeding::derive_seed;
use crate::task::{self, TeacherConfig};
use crate::trainer::{self, CollapseConfig, ProbeSet, RunConfig, RunSummary};
use crate::{Error, Result};
use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

/// Seed used when neither the flag nor the config file supplies one.
pub const DEFAULT_SEED: u64 = 17;

/// Stream tag separating teacher randomness from problem generation.
const STREAM_TEACHER: u64 = 0x7EAC;
/// Stream tags for recipe data and training seeds.
const STREAM_RECIPE_TRAIN: u64 = 0xDA7A;
const STREAM_RECIPE_EVAL: u64 = 0xE7A1;
const STREAM_RECIPE_STAGE1: u64 = 0x57A1;
const STREAM_RECIPE_STAGE2: u64 = 0x57A2;

/// Parses `argv` and runs the selected subcommand, returning the process
/// exit code. Never panics on bad input and never calls `exit` itself.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, std::env::var_os("REDI_LAB_OUT")) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}

/// Usage problems exit 1, everything else (I/O, corrupt data, numeric
/// faults, failed checks) exits 2.
fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Input(_) => 1,
        _ => 2,
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "redi-lab",
    version,
    about = "Desk-scale laboratory for two-stage preference-refinement training"
)]
struct Cli {
    /// Base seed; every other random stream is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` file supplying defaults for any flag below.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Where artifacts are written (REDI_LAB_OUT overrides this).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a problem set and noisy teacher solution traces.
    Generate(GenerateArgs),
    /// Split verified teacher records into SFT and preference data.
    Curate(CurateArgs),
    /// Stage 1: supervised training on curated correct traces.
    TrainSft(TrainSftArgs),
    /// Stage 2: preference refinement from a stage-1 checkpoint.
    TrainPref(TrainPrefArgs),
    /// Score a checkpoint on held-out problems with pass@k.
    Eval(EvalArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Token-level statistics for checkpoints against a baseline.
    Analyze(AnalyzeArgs),
    /// Expand and run a named multi-run experiment preset.
    Recipe(RecipeArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Number of problems.
    #[arg(long)]
    count: Option<usize>,
    /// Chain length of each problem.
    #[arg(long)]
    difficulty: Option<u32>,
    /// Modulus every intermediate value is reduced by.
    #[arg(long)]
    modulus: Option<i64>,
    /// Teacher per-step corruption probability.
    #[arg(long)]
    error_prob: Option<f64>,
    /// Teacher attempts per problem before giving up.
    #[arg(long)]
    max_attempts: Option<u32>,
}

#[derive(Args, Debug)]
struct CurateArgs {
    /// Teacher records to curate (default: <out-dir>/records.jsonl).
    #[arg(long)]
    records: Option<PathBuf>,
    #[arg(long)]
    max_prompt_len: Option<usize>,
    #[arg(long)]
    max_response_len: Option<usize>,
    /// Keep only pairs sharing at least this prefix fraction.
    #[arg(long)]
    min_overlap: Option<f64>,
    /// Comma-separated problem ids to drop before curation.
    #[arg(long)]
    denylist: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSONL training data (SFT examples or preference pairs).
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Peak learning rate of the warmup/decay schedule.
    #[arg(long)]
    lr: Option<f64>,
    /// Floor learning rate of the schedule.
    #[arg(long)]
    lr_min: Option<f64>,
    /// Fraction of total steps spent in linear warmup.
    #[arg(long)]
    warmup_frac: Option<f64>,
    /// Evaluate every N steps (0 disables periodic evaluation).
    #[arg(long)]
    eval_every: Option<usize>,
    /// Samples per problem during evaluation.
    #[arg(long)]
    eval_samples: Option<usize>,
    /// Held-out problems JSONL for evaluation.
    #[arg(long)]
    eval_problems: Option<PathBuf>,
    /// Checkpoint to start from (required for train-pref).
    #[arg(long)]
    init_ckpt: Option<PathBuf>,
    #[arg(long)]
    d_emb: Option<usize>,
    #[arg(long)]
    d_hid: Option<usize>,
    /// Context window of the policy.
    #[arg(long)]
    window: Option<usize>,
    /// "adamw" or "gd".
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_p: Option<f64>,
    /// Maximum sampled response length.
    #[arg(long)]
    max_len: Option<usize>,
    /// Force the reasoning-start token when sampling.
    #[arg(long)]
    think_first: bool,
    /// Return the recorded summary if the run already completed.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct TrainSftArgs {
    #[command(flatten)]
    common: TrainArgs,
    /// Divide each example's loss by its response length.
    #[arg(long)]
    length_normalized: bool,
}

#[derive(Args, Debug)]
struct TrainPrefArgs {
    #[command(flatten)]
    common: TrainArgs,
    /// Pairwise objective: dpo, simpo, symmetric, or redi.
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Rejected-trace weight for the asymmetric objective.
    #[arg(long)]
    alpha: Option<f64>,
    /// Reference checkpoint for dpo (defaults to --init-ckpt).
    #[arg(long)]
    ref_ckpt: Option<PathBuf>,
    #[arg(long)]
    collapse_window: Option<usize>,
    /// Nats the mean chosen log-prob must fall to count as collapse.
    #[arg(long)]
    collapse_drop: Option<f64>,
    /// Update-norm multiple of the trailing median to count as a surge.
    #[arg(long)]
    collapse_surge: Option<f64>,
    #[arg(long)]
    collapse_median_window: Option<usize>,
    /// Ignore the log-prob drop signal.
    #[arg(long)]
    disable_collapse_drop: bool,
    /// Ignore the update-norm surge signal.
    #[arg(long)]
    disable_collapse_surge: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Held-out problems JSONL.
    #[arg(long)]
    problems: Option<PathBuf>,
    /// Samples drawn per problem.
    #[arg(long)]
    samples: Option<usize>,
    /// Comma-separated k values, e.g. "1,4,16".
    #[arg(long)]
    ks: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Force the reasoning-start token when sampling.
    #[arg(long)]
    think_first: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Random instances per objective.
    #[arg(long)]
    trials: Option<usize>,
    /// Central-difference step size.
    #[arg(long)]
    step: Option<f64>,
    /// Maximum acceptable relative error.
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Baseline checkpoint the deltas are measured from.
    #[arg(long)]
    init_ckpt: Option<PathBuf>,
    /// Checkpoint to analyze; repeat for several.
    #[arg(long = "ckpt")]
    ckpts: Vec<PathBuf>,
    /// Preference pairs supplying the probe sequences.
    #[arg(long)]
    pref_data: Option<PathBuf>,
    /// Problems whose prompts seed fresh generations per checkpoint.
    #[arg(long)]
    problems: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RecipeArgs {
    /// Preset name; see --list.
    name: Option<String>,
    /// Print the available presets and exit.
    #[arg(long)]
    list: bool,
    /// Run the stage-2 variants on separate threads.
    #[arg(long)]
    parallel: bool,
}

// ---------------------------------------------------------------------
// Config file
// ---------------------------------------------------------------------

/// Every key the config file may define. Anything else is rejected so a
/// typo cannot silently fall back to a default.
const KNOWN_KEYS: &[&str] = &[
    "seed",
    "out_dir",
    "count",
    "difficulty",
    "modulus",
    "error_prob",
    "max_attempts",
    "records",
    "max_prompt_len",
    "max_response_len",
    "min_overlap",
    "denylist",
    "train_data",
    "batch_size",
    "epochs",
    "lr",
    "lr_min",
    "warmup_frac",
    "eval_every",
    "eval_samples",
    "eval_problems",
    "init_ckpt",
    "ref_ckpt",
    "d_emb",
    "d_hid",
    "window",
    "optimizer",
    "weight_decay",
    "temperature",
    "top_p",
    "max_len",
    "think_first",
    "length_normalized",
    "resume",
    "objective",
    "beta",
    "gamma",
    "alpha",
    "collapse_window",
    "collapse_drop",
    "collapse_surge",
    "collapse_median_window",
    "ckpt",
    "problems",
    "samples",
    "ks",
    "trials",
    "step",
    "tolerance",
    "pref_data",
];

/// Flat `key = value` defaults file. Explicit flags always win over it.
#[derive(Debug, Default)]
struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    fn empty() -> Self {
        FileConfig::default()
    }

    fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{} line {}: expected 'key = value', got '{line}'",
                    path.display(),
                    i + 1
                )));
            };
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!(
                    "{} line {}: unknown config key '{key}'",
                    path.display(),
                    i + 1
                )));
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(FileConfig { values })
    }

    fn string(&self, key: &str) -> Option<String> {
        self.values.get(key).cloned()
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.values.get(key).map(PathBuf::from)
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|_| {
                Error::Config(format!("config key '{key}': cannot parse '{raw}'"))
            }),
        }
    }
}

/// Flag beats config file beats built-in default.
fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Output directory resolution; the environment variable wins so batch
/// drivers can redirect a whole pipeline without touching its flags.
fn resolve_out_dir(env: Option<OsString>, flag: Option<PathBuf>, file: Option<PathBuf>) -> PathBuf {
    if let Some(v) = env {
        if !v.is_empty() {
            return PathBuf::from(v);
        }
    }
    flag.or(file).unwrap_or_else(|| PathBuf::from("redi-out"))
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Config(format!("expected an integer list entry, got '{t}'")))
        })
        .collect()
}

fn parse_u64_list(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Config(format!("expected an id list entry, got '{t}'")))
        })
        .collect()
}

// ---------------------------------------------------------------------
// Subcommand execution
// ---------------------------------------------------------------------

fn execute(cli: Cli, env_out: Option<OsString>) -> Result<()> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::empty(),
    };
    let seed = pick(cli.seed, file.parsed("seed")?, DEFAULT_SEED);
    let out_dir = resolve_out_dir(env_out, cli.out_dir, file.path("out_dir"));
    match cli.command {
        Command::Generate(a) => cmd_generate(a, seed, &out_dir, &file),
        Command::Curate(a) => cmd_curate(a, &out_dir, &file),
        Command::TrainSft(a) => cmd_train_sft(a, seed, &out_dir, &file),
        Command::TrainPref(a) => cmd_train_pref(a, seed, &out_dir, &file),
        Command::Eval(a) => cmd_eval(a, seed, &out_dir, &file),
        Command::Gradcheck(a) => cmd_gradcheck(a, seed, &out_dir, &file),
        Command::Analyze(a) => cmd_analyze(a, seed, &out_dir, &file),
        Command::Recipe(a) => cmd_recipe(a, seed, &out_dir),
    }
}

fn cmd_generate(a: GenerateArgs, seed: u64, out: &Path, f: &FileConfig) -> Result<()> {
    let count = pick(a.count, f.parsed("count")?, 200);
    let difficulty = pick(a.difficulty, f.parsed("difficulty")?, 1);
    let modulus = pick(a.modulus, f.parsed("modulus")?, 10);
    let error_prob = pick(a.error_prob, f.parsed("error_prob")?, 0.2);
    let max_attempts = pick(a.max_attempts, f.parsed("max_attempts")?, 4);

    let problems = task::generate_task_set(seed, count, difficulty, modulus)?;
    let teacher = TeacherConfig {
        per_step_error_prob: error_prob,
        max_attempts,
        seed: derive_seed(seed, STREAM_TEACHER),
    };
    let records = corpus::records_from_teacher(&problems, &teacher)?;
    fs::create_dir_all(out)?;
    corpus::save_problems_jsonl(&out.join("problems.jsonl"), &problems)?;
    corpus::save_records_jsonl(&out.join("records.jsonl"), &records)?;
    let correct = records.iter().filter(|r| r.is_correct()).count();
    println!(
        "wrote {} problems and {} teacher records ({} correct) to {}",
        problems.len(),
        records.len(),
        correct,
        out.display()
    );
    Ok(())
}

fn cmd_curate(a: CurateArgs, out: &Path, f: &FileConfig) -> Result<()> {
    let records_path = pick(a.records, f.path("records"), out.join("records.jsonl"));
    let cfg = CurationConfig {
        max_prompt_len: pick(a.max_prompt_len, f.parsed("max_prompt_len")?, 64),
        max_response_len: pick(a.max_response_len, f.parsed("max_response_len")?, 256),
    };
    let min_overlap = match (a.min_overlap, f.parsed("min_overlap")?) {
        (Some(v), _) | (None, Some(v)) => Some(v),
        (None, None) => None,
    };
    let denylist = match a.denylist.or_else(|| f.string("denylist")) {
        Some(raw) => parse_u64_list(&raw)?,
        None => Vec::new(),
    };

    let records = corpus::load_records_jsonl(&records_path)?;
    let records = corpus::apply_denylist(records, &denylist);
    let curated = corpus::curate(&records, &cfg)?;
    let pairs = match min_overlap {
        Some(t) => corpus::filter_by_overlap(curated.d_pref, t),
        None => curated.d_pref,
    };
    fs::create_dir_all(out)?;
    corpus::save_sft_jsonl(&out.join("sft.jsonl"), &curated.d_sft)?;
    corpus::save_pref_jsonl(&out.join("pref.jsonl"), &pairs)?;
    println!(
        "curated {} records into {} sft examples and {} preference pairs",
        records.len(),
        curated.d_sft.len(),
        pairs.len()
    );
    Ok(())
}

/// Fields shared by both training subcommands, assembled with the same
/// flag > config file > default precedence everywhere.
fn common_run_config(
    a: &TrainArgs,
    stage: u8,
    objective: Objective,
    seed: u64,
    out: &Path,
    f: &FileConfig,
) -> Result<RunConfig> {
    let train_data = a
        .train_data
        .clone()
        .or_else(|| f.path("train_data"))
        .ok_or_else(|| Error::Config("--train-data is required".into()))?;
    let opt_name = pick(a.optimizer.clone(), f.string("optimizer"), "adamw".into());
    let mut optimizer = match OptimizerKind::from_name(&opt_name)? {
        OptimizerKind::Gd => OptimizerConfig::plain_gd(),
        OptimizerKind::AdamW => OptimizerConfig::default(),
    };
    if let Some(wd) = a.weight_decay.or(f.parsed("weight_decay")?) {
        optimizer.weight_decay = wd;
    }
    let dp = PolicyConfig::default();
    let policy = PolicyConfig {
        vocab_size: dp.vocab_size,
        d_emb: pick(a.d_emb, f.parsed("d_emb")?, dp.d_emb),
        d_hid: pick(a.d_hid, f.parsed("d_hid")?, dp.d_hid),
        window: pick(a.window, f.parsed("window")?, dp.window),
    };
    let dd = SampleConfig::default();
    let decode = SampleConfig {
        temperature: pick(a.temperature, f.parsed("temperature")?, dd.temperature),
        top_p: pick(a.top_p, f.parsed("top_p")?, dd.top_p),
        max_len: pick(a.max_len, f.parsed("max_len")?, dd.max_len),
    };
    Ok(RunConfig {
        stage,
        objective,
        batch_size: pick(a.batch_size, f.parsed("batch_size")?, 32),
        epochs: pick(a.epochs, f.parsed("epochs")?, 3),
        seed,
        eval_every: pick(a.eval_every, f.parsed("eval_every")?, 0),
        eval_samples: pick(a.eval_samples, f.parsed("eval_samples")?, 4),
        eta_max: pick(a.lr, f.parsed("lr")?, 3e-3),
        eta_min: pick(a.lr_min, f.parsed("lr_min")?, 0.0),
        warmup_frac: pick(a.warmup_frac, f.parsed("warmup_frac")?, 0.0),
        policy,
        optimizer,
        decode,
        think_first: a.think_first || f.parsed::<bool>("think_first")?.unwrap_or(false),
        collapse: CollapseConfig::default(),
        train_data,
        eval_problems: a.eval_problems.clone().or_else(|| f.path("eval_problems")),
        init_checkpoint: a.init_ckpt.clone().or_else(|| f.path("init_ckpt")),
        reference_checkpoint: None,
        out_dir: out.to_path_buf(),
        resume: a.resume || f.parsed::<bool>("resume")?.unwrap_or(false),
    })
}

fn cmd_train_sft(a: TrainSftArgs, seed: u64, out: &Path, f: &FileConfig) -> Result<()> {
    let length_normalized =
        a.length_normalized || f.parsed::<bool>("length_normalized")?.unwrap_or(false);
    let objective = Objective::Sft { length_normalized };
    let cfg = common_run_config(&a.common, 1, objective, seed, out, f)?;
    let summary = trainer::run_stage1(&cfg)?;
    print_summary("stage-1 run", &summary);
    Ok(())
}

fn cmd_train_pref(a: TrainPrefArgs, seed: u64, out: &Path, f: &FileConfig) -> Result<()> {
    let init_ckpt = a
        .common
        .init_ckpt
        .clone()
        .or_else(|| f.path("init_ckpt"))
        .ok_or_else(|| {
            Error::Config(
                "train-pref requires --init-ckpt: stage-2 refinement starts from a \
                 stage-1 checkpoint"
                    .into(),
            )
        })?;
    let kind = a
        .objective
        .or_else(|| f.string("objective"))
        .ok_or_else(|| {
            Error::Config("--objective is required (dpo, simpo, symmetric, or redi)".into())
        })?;
    let objective = Objective::from_parts(
        &kind,
        a.beta.or(f.parsed("beta")?),
        a.gamma.or(f.parsed("gamma")?),
        a.alpha.or(f.parsed("alpha")?),
    )?;
    if !objective.is_pairwise() {
        return Err(Error::Config(format!(
            "train-pref needs a pairwise objective, got '{kind}'; use train-sft instead"
        )));
    }

    let defaults = CollapseConfig::default();
    let collapse = CollapseConfig {
        window: pick(a.collapse_window, f.parsed("collapse_window")?, defaults.window),
        logps_drop: if a.disable_collapse_drop {
            None
        } else {
            Some(pick(
                a.collapse_drop,
                f.parsed("collapse_drop")?,
                defaults.logps_drop.expect("default drop threshold"),
            ))
        },
        surge_factor: if a.disable_collapse_surge {
            None
        } else {
            Some(pick(
                a.collapse_surge,
                f.parsed("collapse_surge")?,
                defaults.surge_factor.expect("default surge threshold"),
            ))
        },
        median_window: pick(
            a.collapse_median_window,
            f.parsed("collapse_median_window")?,
            defaults.median_window,
        ),
    };

    let mut cfg = common_run_config(&a.common, 2, objective, seed, out, f)?;
    cfg.init_checkpoint = Some(init_ckpt);
    cfg.reference_checkpoint = a.ref_ckpt.clone().or_else(|| f.path("ref_ckpt"));
    cfg.collapse = collapse;
    let summary = trainer::run_stage2(&cfg)?;
    print_summary("stage-2 run", &summary);
    Ok(())
}

fn print_summary(label: &str, s: &RunSummary) {
    let best = s
        .best_eval
        .map(|v| format!("{v:.4}"))
        .unwrap_or_else(|| "-".into());
    let collapse = match &s.collapse {
        Some(e) => format!("collapsed at step {}", e.step),
        None => "no collapse".into(),
    };
    println!(
        "{label} ({}): {} steps, final loss {:.6}, best eval {best}, {collapse}",
        s.objective, s.steps, s.final_loss
    );
}

fn cmd_eval(a: EvalArgs, seed: u64, out: &Path, f: &FileConfig) -> Result<()> {
    let ckpt = a
        .ckpt
        .or_else(|| f.path("ckpt"))
        .ok_or_else(|| Error::Config("--ckpt is required".into()))?;
    let problems_path = a
        .problems
        .or_else(|| f.path("problems"))
        .ok_or_else(|| Error::Config("--problems is required".into()))?;
    let samples = pick(a.samples, f.parsed("samples")?, 4);
    let ks = parse_usize_list(&pick(a.ks, f.string("ks"), "1,4,16".into()))?;
    let dd = SampleConfig::default();
    let cfg = EvalConfig {
        samples,
        ks,
        decode: SampleConfig {
            temperature: pick(a.temperature, f.parsed("temperature")?, dd.temperature),
            top_p: pick(a.top_p, f.parsed("top_p")?, dd.top_p),
            max_len: pick(a.max_len, f.parsed("max_len")?, dd.max_len),
        },
        seed,
        think_first: a.think_first || f.parsed::<bool>("think_first")?.unwrap_or(false),
    };

    let params = policy::load_checkpoint(&ckpt)?;
    let problems = corpus::load_problems_jsonl(&problems_path)?;
    let (_, report) = evalkit::evaluate(&params, &problems, &cfg)?;
    fs::create_dir_all(out)?;
    evalkit::save_report(&out.join("eval_report.json"), &report)?;
    for p in &report.pass_at_k {
        println!("pass@{} = {:.4}", p.k, p.value);
    }
    let sem = report
        .pass1
        .sem
        .map(|v| format!("{v:.4}"))
        .unwrap_or_else(|| "-".into());
    println!(
        "pass@1 mean {:.4} (sem {sem}), well-formed rate {:.4}, mean response length {:.1}",
        report.pass1.mean, report.well_formed_rate, report.mean_response_len
    );
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs, seed: u64, out: &Path, f: &FileConfig) -> Result<()> {
    let cfg = GradCheckConfig {
        instances: pick(a.trials, f.parsed("trials")?, 100),
        seed,
        step: pick(a.step, f.parsed("step")?, 1e-5),
        ..GradCheckConfig::default()
    };
    let tolerance = pick(a.tolerance, f.parsed("tolerance")?, 1e-6);
    let report = gradcheck::run(&cfg, tolerance)?;
    fs::create_dir_all(out)?;
    let mut text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Contract(format!("gradcheck report serialization failed: {e}")))?;
    text.push('\n');
    fsio::write_atomic(&out.join("gradcheck.json"), text.as_bytes())?;
    for o in &report.objectives {
        println!(
            "{}: max rel err {:.3e} over {} comparisons",
            o.objective, o.max_rel_err, o.comparisons
        );
    }
    if report.passed {
        println!(
            "gradient check passed: max rel err {:.3e} < {:.1e}",
            report.max_rel_err, tolerance
        );
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "gradient check failed: max rel err {:.3e} >= {:.1e}",
            report.max_rel_err, tolerance
        )))
    }
}

fn cmd_analyze(a: AnalyzeArgs, seed: u64, out: &Path, f: &FileConfig) -> Result<()> {
    let init_path = a
        .init_ckpt
        .or_else(|| f.path("init_ckpt"))
        .ok_or_else(|| Error::Config("--init-ckpt is required".into()))?;
    let mut ckpts = a.ckpts;
    if ckpts.is_empty() {
        if let Some(p) = f.path("ckpt") {
            ckpts.push(p);
        }
    }
    if ckpts.is_empty() {
        return Err(Error::Config("at least one --ckpt is required".into()));
    }
    let pref_path = a
        .pref_data
        .or_else(|| f.path("pref_data"))
        .ok_or_else(|| Error::Config("--pref-data is required".into()))?;

    let initial = policy::load_checkpoint(&init_path)?;
    let pairs = corpus::load_pref_jsonl(&pref_path)?;
    let problems = match a.problems.or_else(|| f.path("problems")) {
        Some(p) => corpus::load_problems_jsonl(&p)?,
        None => Vec::new(),
    };
    let probes = ProbeSet::from_pref(&pairs, &problems, seed);
    let checkpoints = ckpts
        .iter()
        .map(|p| {
            let label = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "checkpoint".into());
            Ok((label, policy::load_checkpoint(p)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let stats = trainer::analyze_token_stats(&initial, &checkpoints, &probes)?;
    fs::create_dir_all(out)?;
    trainer::save_token_stats(&out.join("token_stats.json"), &stats)?;
    println!(
        "wrote token statistics for {} checkpoints to {}",
        stats.len(),
        out.join("token_stats.json").display()
    );
    Ok(())
}

fn cmd_recipe(a: RecipeArgs, seed: u64, out: &Path) -> Result<()> {
    if a.list {
        for (name, desc) in recipe_catalog() {
            println!("{name}: {desc}");
        }
        return Ok(());
    }
    let name = a
        .name
        .ok_or_else(|| Error::Config("pass a preset name, or --list to see them".into()))?;
    let plan = expand_recipe(&name, seed, out)?;
    println!(
        "recipe {}: 1 stage-1 run + {} stage-2 runs under {}",
        plan.name,
        plan.stage2.len(),
        out.join(&plan.name).display()
    );
    let outcomes = run_recipe(&plan, a.parallel)?;
    for (run_name, outcome) in &outcomes {
        match outcome {
            RunOutcome::Completed(s) => print_summary(run_name, s),
            RunOutcome::Aborted(msg) => println!("{run_name}: aborted ({msg})"),
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------
// Experiment presets
// ---------------------------------------------------------------------

/// A fully expanded preset: data synthesis settings plus every run
/// config, all derived deterministically from (name, seed, out root).
#[derive(Debug, Clone, PartialEq)]
pub struct RecipePlan {
    pub name: String,
    pub data_dir: PathBuf,
    pub train_count: usize,
    pub eval_count: usize,
    pub difficulty: u32,
    pub modulus: i64,
    pub error_prob: f64,
    pub max_attempts: u32,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub teacher_seed: u64,
    /// Overlap floor applied to the preference pairs, when set.
    pub min_overlap: Option<f64>,
    pub stage1: RunConfig,
    pub stage2: Vec<(String, RunConfig)>,
}

/// How a single run inside a recipe ended. A run whose training math
/// diverges is reported, not fatal: divergence is a result here.
#[derive(Debug)]
pub enum RunOutcome {
    Completed(RunSummary),
    Aborted(String),
}

/// The available presets with one-line descriptions.
pub fn recipe_catalog() -> &'static [(&'static str, &'static str)] {
    &[
        (
            "fig-dpo-beta-sweep",
            "stage-2 dpo at beta 0.001 / 0.01 / 0.1 from a shared sft checkpoint",
        ),
        (
            "fig-simpo",
            "stage-2 simpo at (beta 2, gamma 1) and (beta 10, gamma 5)",
        ),
        (
            "fig-redi-symmetric-vs-asymmetric",
            "symmetric vs alpha 0.8 refinement on high-overlap pairs over a learning-rate grid",
        ),
        (
            "alpha-ablation",
            "rejected-trace weight sweep: alpha 0.2 / 0.5 / 0.8 / 1.0",
        ),
    ]
}

/// Expands a preset name into a [`RecipePlan`]. Pure: the same
/// (name, seed, out root) always yields the identical plan.
pub fn expand_recipe(name: &str, seed: u64, out_root: &Path) -> Result<RecipePlan> {
    let known: Vec<&str> = recipe_catalog().iter().map(|(n, _)| *n).collect();
    if !known.contains(&name) {
        return Err(Error::Input(format!(
            "unknown preset '{name}'; available: {}",
            known.join(", ")
        )));
    }
    let root = out_root.join(name);
    let data_dir = root.join("data");
    let stage1 = RunConfig {
        stage: 1,
        objective: Objective::Sft {
            length_normalized: false,
        },
        batch_size: 16,
        epochs: 2,
        seed: derive_seed(seed, STREAM_RECIPE_STAGE1),
        eval_every: 0,
        eval_samples: 4,
        eta_max: 5e-3,
        eta_min: 0.0,
        warmup_frac: 0.1,
        policy: PolicyConfig::default(),
        optimizer: OptimizerConfig::default(),
        decode: SampleConfig::default(),
        think_first: true,
        collapse: CollapseConfig::default(),
        train_data: data_dir.join("sft.jsonl"),
        eval_problems: Some(data_dir.join("eval_problems.jsonl")),
        init_checkpoint: None,
        reference_checkpoint: None,
        out_dir: root.join("stage1"),
        resume: false,
    };
    let stage2_base = RunConfig {
        stage: 2,
        batch_size: 16,
        epochs: 1,
        seed: derive_seed(seed, STREAM_RECIPE_STAGE2),
        eta_max: 1e-3,
        train_data: data_dir.join("pref.jsonl"),
        init_checkpoint: Some(stage1.out_dir.join("checkpoint_final.bin")),
        ..stage1.clone()
    };
    let run = |name: String, objective: Objective| {
        let cfg = RunConfig {
            objective,
            out_dir: root.join(&name),
            ..stage2_base.clone()
        };
        (name, cfg)
    };

    let mut plan = RecipePlan {
        name: name.to_string(),
        data_dir,
        train_count: 240,
        eval_count: 60,
        difficulty: 1,
        modulus: 10,
        error_prob: 0.3,
        max_attempts: 4,
        train_seed: derive_seed(seed, STREAM_RECIPE_TRAIN),
        eval_seed: derive_seed(seed, STREAM_RECIPE_EVAL),
        teacher_seed: derive_seed(seed, STREAM_TEACHER),
        min_overlap: None,
        stage1,
        stage2: Vec::new(),
    };
    match name {
        "fig-dpo-beta-sweep" => {
            for beta in [0.001, 0.01, 0.1] {
                plan.stage2
                    .push(run(format!("dpo-beta-{beta}"), Objective::Dpo { beta }));
            }
        }
        "fig-simpo" => {
            for (beta, gamma) in [(2.0, 1.0), (10.0, 5.0)] {
                plan.stage2.push(run(
                    format!("simpo-beta-{beta}-gamma-{gamma}"),
                    Objective::Simpo { beta, gamma },
                ));
            }
        }
        "fig-redi-symmetric-vs-asymmetric" => {
            plan.train_count = 600;
            plan.difficulty = 8;
            plan.error_prob = 0.12;
            plan.max_attempts = 6;
            plan.min_overlap = Some(0.75);
            for lr in [1e-2, 3e-2] {
                for (label, objective) in [
                    ("symmetric", Objective::Symmetric),
                    ("redi-0.8", Objective::Redi { alpha: 0.8 }),
                ] {
                    let (name, mut cfg) = run(format!("{label}-lr-{lr}"), objective);
                    cfg.batch_size = 8;
                    cfg.epochs = 20;
                    cfg.eta_max = lr;
                    cfg.collapse = CollapseConfig {
                        surge_factor: None,
                        ..CollapseConfig::default()
                    };
                    plan.stage2.push((name, cfg));
                }
            }
        }
        "alpha-ablation" => {
            for alpha in [0.2, 0.5, 0.8, 1.0] {
                plan.stage2
                    .push(run(format!("alpha-{alpha}"), Objective::Redi { alpha }));
            }
        }
        _ => unreachable!("name validated above"),
    }
    Ok(plan)
}

/// Synthesizes the preset's data, trains stage 1, then every stage-2
/// variant (optionally on parallel threads). A variant whose training
/// diverges to non-finite loss is recorded as [`RunOutcome::Aborted`];
/// any other failure aborts the whole recipe.
pub fn run_recipe(plan: &RecipePlan, parallel: bool) -> Result<Vec<(String, RunOutcome)>> {
    fs::create_dir_all(&plan.data_dir)?;
    let train_problems =
        task::generate_task_set(plan.train_seed, plan.train_count, plan.difficulty, plan.modulus)?;
    let eval_problems =
        task::generate_task_set(plan.eval_seed, plan.eval_count, plan.difficulty, plan.modulus)?;
    let teacher = TeacherConfig {
        per_step_error_prob: plan.error_prob,
        max_attempts: plan.max_attempts,
        seed: plan.teacher_seed,
    };
    let records = corpus::records_from_teacher(&train_problems, &teacher)?;
    let curated = corpus::curate(&records, &CurationConfig::default())?;
    let pairs = match plan.min_overlap {
        Some(t) => corpus::filter_by_overlap(curated.d_pref, t),
        None => curated.d_pref,
    };
    if curated.d_sft.is_empty() || pairs.is_empty() {
        return Err(Error::DataIntegrity(format!(
            "recipe {} produced {} sft examples and {} pairs; teacher settings leave nothing to train on",
            plan.name,
            curated.d_sft.len(),
            pairs.len()
        )));
    }
    corpus::save_problems_jsonl(&plan.data_dir.join("problems.jsonl"), &train_problems)?;
    corpus::save_problems_jsonl(&plan.data_dir.join("eval_problems.jsonl"), &eval_problems)?;
    corpus::save_records_jsonl(&plan.data_dir.join("records.jsonl"), &records)?;
    corpus::save_sft_jsonl(&plan.data_dir.join("sft.jsonl"), &curated.d_sft)?;
    corpus::save_pref_jsonl(&plan.data_dir.join("pref.jsonl"), &pairs)?;

    let mut outcomes = Vec::with_capacity(1 + plan.stage2.len());
    outcomes.push((
        "stage1".to_string(),
        RunOutcome::Completed(trainer::run_stage1(&plan.stage1)?),
    ));

    let as_outcome = |res: Result<RunSummary>| match res {
        Ok(summary) => Ok(RunOutcome::Completed(summary)),
        Err(Error::NonFinite(msg)) => Ok(RunOutcome::Aborted(msg)),
        Err(e) => Err(e),
    };
    if parallel {
        let results: Vec<(String, Result<RunSummary>)> = std::thread::scope(|scope| {
            let handles: Vec<_> = plan
                .stage2
                .iter()
                .map(|(name, cfg)| (name.clone(), scope.spawn(move || trainer::run_stage2(cfg))))
                .collect();
            handles
                .into_iter()
                .map(|(name, h)| {
                    let res = h
                        .join()
                        .unwrap_or_else(|_| Err(Error::Contract("a run thread panicked".into())));
                    (name, res)
                })
                .collect()
        });
        for (name, res) in results {
            outcomes.push((name, as_outcome(res)?));
        }
    } else {
        for (name, cfg) in &plan.stage2 {
            outcomes.push((name.clone(), as_outcome(trainer::run_stage2(cfg))?));
        }
    }
    Ok(outcomes)
}
