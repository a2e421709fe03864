//! Command-line front end.
//!
//! Every subcommand writes its fully resolved configuration to
//! `<out-dir>/config.json` before doing any work, so a run can be replayed
//! from that file alone via `--config`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::compat_verifier::{check_compatibility, CompatCase, LossId};
use crate::data::{generate_phantoms, load_dataset, simulate_partial, DatasetManifest, PartialPolicy, PhantomSpec, Split};
use crate::error::{Error, Result};
use crate::eval::{self, run_ablation, supervision_study, AblationRow, DEFAULT_EVAL_SEED};
use crate::files;
use crate::label_model::{ClassSet, ClassSpace};
use crate::network::load_checkpoint;
use crate::trainer::{TrainConfig, TrainState, Trainer, SEED_ENV};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "partialseg", version, about = "Partially-supervised multi-label segmentation")]
pub struct Cli {
    /// Seed for the subcommand's random stream (overrides the config file and PARTIALSEG_SEED).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON configuration; the schema depends on the subcommand (see its config.json output).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for all outputs.
    #[arg(long, global = true, default_value = "partialseg-out")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a fully labeled synthetic cardiac phantom dataset.
    GenData(GenDataArgs),
    /// Drop training annotations from a fully labeled dataset.
    SimulatePartial(SimulateArgs),
    /// Train a model (stage 1, stage 2 or both).
    Train(TrainArgs),
    /// Write predicted label maps as a new dataset.
    Predict(PredictArgs),
    /// Dice report of a checkpoint.
    Eval(EvalArgs),
    /// Check whether a pixel loss is compatible across two annotation regimes.
    VerifyCompat(VerifyArgs),
    /// Train and evaluate ablation rows.
    Ablate(AblateArgs),
    /// Sweep the fraction of fully annotated training images.
    SupervisionStudy(StudyArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Number of phantoms (default 100).
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    /// Image side length in pixels.
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// `round-robin` (default), `random` or `full:<fraction>`.
    #[arg(long)]
    pub policy: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// `1`, `2` or `all`. Stage 2 alone needs `--init`.
    #[arg(long, default_value = "all")]
    pub stage: String,
    /// Checkpoint to start from instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Ablation row to train (`baseline`, `cond+cce+p`, `full`, ...).
    #[arg(long)]
    pub row: Option<String>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Also write RGB overlays of the predictions.
    #[arg(long)]
    pub overlays: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub loss: String,
    #[arg(long, default_value_t = 3)]
    pub m: usize,
    #[arg(long)]
    pub gt: usize,
    /// Annotated classes of the first regime, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub ann_a: Vec<usize>,
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub ann_b: Vec<usize>,
    #[arg(long, default_value_t = 0.01)]
    pub grid_step: f64,
    #[arg(long, default_value_t = 1e-9)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Rows separated by `;`, e.g. `baseline;cond+cce;full`. Defaults to the standard table.
    #[arg(long)]
    pub rows: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    /// Fully labeled dataset.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,1")]
    pub fractions: Vec<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GenDataConfig {
    spec: PhantomSpec,
    count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SimulateConfig {
    manifest: PathBuf,
    policy: PartialPolicy,
    seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EvalConfig {
    checkpoint: PathBuf,
    manifest: PathBuf,
    split: Split,
    seed: u64,
    overlays: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VerifyConfig {
    loss: LossId,
    m: usize,
    gt: usize,
    ann_a: Vec<usize>,
    ann_b: Vec<usize>,
    grid_step: f64,
    tolerance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AblateConfig {
    manifest: PathBuf,
    train: TrainConfig,
    rows: Vec<AblationRow>,
    eval_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StudyConfig {
    manifest: PathBuf,
    train: TrainConfig,
    fractions: Vec<f64>,
    partial_seed: u64,
    eval_seed: u64,
}

/// Parses `argv` and runs the subcommand, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let out = cli.out_dir.as_path();
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a, out),
        Command::SimulatePartial(a) => simulate(cli, a, out),
        Command::Train(a) => train(cli, a, out),
        Command::Predict(a) => {
            let cfg = eval_config(cli, &a.checkpoint, &a.manifest, &a.split, a.overlays)?;
            files::write_json(&out.join("config.json"), &cfg)?;
            let manifest = eval::predict(&cfg.checkpoint, &cfg.manifest, cfg.split, cfg.seed, out, cfg.overlays)?;
            println!("{}", out.join(crate::data::MANIFEST_FILE).display());
            log::info!("wrote {} records", manifest.records.len());
            Ok(())
        }
        Command::Eval(a) => {
            let cfg = eval_config(cli, &a.checkpoint, &a.manifest, &a.split, false)?;
            files::write_json(&out.join("config.json"), &cfg)?;
            let report = eval::evaluate(&cfg.checkpoint, &cfg.manifest, cfg.split, cfg.seed)?;
            report.write(out)?;
            println!("{}", json(&report)?);
            Ok(())
        }
        Command::VerifyCompat(a) => verify(cli, a, out),
        Command::Ablate(a) => ablate(cli, a, out),
        Command::SupervisionStudy(a) => study(cli, a, out),
    }
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: PathBuf::from("<stdout>"),
        source,
    })
}

fn load_config<T: DeserializeOwned>(cli: &Cli) -> Result<Option<T>> {
    match &cli.config {
        None => Ok(None),
        Some(p) => files::read_json(p).map(Some).map_err(|e| match e {
            Error::Json { path, source } => Error::Config(format!("{}: {source}", path.display())),
            other => Error::Config(other.to_string()),
        }),
    }
}

/// `--seed`, else `PARTIALSEG_SEED`, else `fallback`.
fn resolve_seed(cli: &Cli, fallback: u64) -> Result<u64> {
    if let Some(s) = cli.seed {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(fallback),
    }
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse()
}

fn gen_data(cli: &Cli, a: &GenDataArgs, out: &Path) -> Result<()> {
    let mut cfg = load_config::<GenDataConfig>(cli)?.unwrap_or(GenDataConfig {
        spec: PhantomSpec::default(),
        count: 100,
    });
    if let Some(c) = a.count {
        cfg.count = c;
    }
    cfg.spec.seed = resolve_seed(cli, cfg.spec.seed)?;
    if let Some(v) = a.val {
        cfg.spec.val_count = v;
    }
    if let Some(t) = a.test {
        cfg.spec.test_count = t;
    }
    if let Some(s) = a.size {
        cfg.spec.height = s;
        cfg.spec.width = s;
    }
    cfg.spec.validate()?;
    files::write_json(&out.join("config.json"), &cfg)?;
    let manifest = generate_phantoms(&cfg.spec, cfg.count, out)?;
    println!("{}", out.join(crate::data::MANIFEST_FILE).display());
    log::info!("generated {} phantoms", manifest.records.len());
    Ok(())
}

fn simulate(cli: &Cli, a: &SimulateArgs, out: &Path) -> Result<()> {
    let base = load_config::<SimulateConfig>(cli)?;
    let policy = match (&a.policy, &base) {
        (Some(p), _) => p.parse()?,
        (None, Some(c)) => c.policy,
        (None, None) => PartialPolicy::OneLabelRoundRobin,
    };
    let cfg = SimulateConfig {
        manifest: a.manifest.clone(),
        policy,
        seed: resolve_seed(cli, base.map_or(0, |c| c.seed))?,
    };
    let manifest = DatasetManifest::load(&cfg.manifest)?;
    let src = cfg.manifest.parent().unwrap_or(Path::new("."));
    files::write_json(&out.join("config.json"), &cfg)?;
    simulate_partial(&manifest, src, cfg.policy, cfg.seed, out)?;
    println!("{}", out.join(crate::data::MANIFEST_FILE).display());
    Ok(())
}

fn train_config(cli: &Cli, epochs: Option<usize>, steps: Option<usize>) -> Result<TrainConfig> {
    let mut cfg = load_config::<TrainConfig>(cli)?.unwrap_or_default();
    cfg.seed = resolve_seed(cli, cfg.seed)?;
    if let Some(e) = epochs {
        cfg.stage1_epochs = e;
    }
    if let Some(s) = steps {
        cfg.stage2_max_steps = s;
    }
    Ok(cfg)
}

fn train(cli: &Cli, a: &TrainArgs, out: &Path) -> Result<()> {
    let mut cfg = train_config(cli, a.epochs, a.steps)?;
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(row) = &a.row {
        cfg = AblationRow::parse(row)?.config(&cfg)?;
    }
    if let Some(l) = a.lambda {
        cfg.lambda_dual = l;
    }
    let (stage1, stage2) = match a.stage.as_str() {
        "1" => (true, false),
        "2" => (false, true),
        "all" => (true, true),
        other => return Err(Error::Config(format!("--stage must be 1, 2 or all, got {other:?}"))),
    };
    if !stage1 && a.init.is_none() {
        return Err(Error::Config("--stage 2 needs --init <stage-1 checkpoint>".into()));
    }
    cfg.validate()?;
    let dataset = load_dataset(&a.manifest)?;
    let trainer = Trainer::new(cfg, &dataset)?.with_run_dir(out)?;
    let mut state = trainer.init_state();
    if let Some(init) = &a.init {
        let (params, meta) = load_checkpoint(init)?;
        if meta.config != trainer.config().backbone {
            return Err(Error::Config(format!(
                "checkpoint {} was trained with a different backbone",
                init.display()
            )));
        }
        state = TrainState {
            step: meta.step,
            theta_p: params,
            ..state
        };
    }
    if stage1 {
        state = trainer.train_stage1(state)?;
    }
    if stage2 {
        state = trainer.train_stage2(state)?;
    }
    let run = crate::trainer::RunDir::create(out)?;
    let path = run.checkpoint(trainer.network(), trainer.config(), &state)?;
    run.write_history(&state.history)?;
    println!("{}", path.display());
    Ok(())
}

fn eval_config(cli: &Cli, checkpoint: &Path, manifest: &Path, split: &str, overlays: bool) -> Result<EvalConfig> {
    let base = load_config::<EvalConfig>(cli)?;
    Ok(EvalConfig {
        checkpoint: checkpoint.to_path_buf(),
        manifest: manifest.to_path_buf(),
        split: parse_split(split)?,
        seed: resolve_seed(cli, base.as_ref().map_or(DEFAULT_EVAL_SEED, |c| c.seed))?,
        overlays: overlays || base.is_some_and(|c| c.overlays),
    })
}

fn verify(cli: &Cli, a: &VerifyArgs, out: &Path) -> Result<()> {
    let cfg = VerifyConfig {
        loss: a.loss.parse()?,
        m: a.m,
        gt: a.gt,
        ann_a: a.ann_a.clone(),
        ann_b: a.ann_b.clone(),
        grid_step: a.grid_step,
        tolerance: a.tolerance,
    };
    if cli.config.is_some() {
        log::warn!("verify-compat takes no config file; ignoring --config");
    }
    let space = ClassSpace::with_classes(cfg.m)?;
    let ann_a: ClassSet = cfg.ann_a.iter().copied().collect();
    let ann_b: ClassSet = cfg.ann_b.iter().copied().collect();
    let mut case = CompatCase::from_regimes(cfg.loss, space, cfg.gt, &ann_a, &ann_b)
        .map_err(|e| Error::Config(e.to_string()))?;
    case.grid_step = cfg.grid_step;
    case.tolerance = cfg.tolerance;
    case.validate().map_err(|e| Error::Config(e.to_string()))?;
    files::write_json(&out.join("config.json"), &cfg)?;
    let report = check_compatibility(&case)?;
    files::write_json(&out.join("compat.json"), &report)?;
    println!("{}", json(&report)?);
    Ok(())
}

fn ablate(cli: &Cli, a: &AblateArgs, out: &Path) -> Result<()> {
    let train = train_config(cli, a.epochs, a.steps)?;
    let rows = match &a.rows {
        Some(r) => r.split(';').map(AblationRow::parse).collect::<Result<Vec<_>>>()?,
        None => AblationRow::standard(),
    };
    for row in &rows {
        row.config(&train)?;
    }
    let cfg = AblateConfig {
        manifest: a.manifest.clone(),
        train,
        rows,
        eval_seed: DEFAULT_EVAL_SEED,
    };
    files::write_json(&out.join("config.json"), &cfg)?;
    let dataset = load_dataset(&cfg.manifest)?;
    let table = run_ablation(&dataset, &cfg.train, &cfg.rows, cfg.eval_seed, Some(out))?;
    print!("{}", table.markdown());
    Ok(())
}

fn study(cli: &Cli, a: &StudyArgs, out: &Path) -> Result<()> {
    let train = train_config(cli, a.epochs, a.steps)?;
    if let Some(f) = a.fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::Config(format!("fraction {f} is outside [0, 1]")));
    }
    train.validate()?;
    let cfg = StudyConfig {
        manifest: a.manifest.clone(),
        partial_seed: train.seed,
        train,
        fractions: a.fractions.clone(),
        eval_seed: DEFAULT_EVAL_SEED,
    };
    files::write_json(&out.join("config.json"), &cfg)?;
    let dataset = load_dataset(&cfg.manifest)?;
    let points = supervision_study(&dataset, &cfg.train, &cfg.fractions, cfg.partial_seed, cfg.eval_seed, Some(out))?;
    println!("| full fraction | avg dice |");
    println!("|---|---|");
    for p in &points {
        println!("| {} | {:.4} |", p.full_fraction, p.report.mean_dice);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(run(["partialseg", "frobnicate"]), EXIT_CONFIG);
        assert_eq!(run(["partialseg", "eval", "--bogus"]), EXIT_CONFIG);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(["partialseg", "--help"]), EXIT_OK);
    }

    #[test]
    fn global_flags_after_subcommand() {
        let cli = Cli::try_parse_from(["partialseg", "gen-data", "--count", "3", "--seed", "9", "--out-dir", "x"]).unwrap();
        assert_eq!(cli.seed, Some(9));
        assert_eq!(cli.out_dir, PathBuf::from("x"));
    }

    #[test]
    fn bad_loss_name_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let code = run(["partialseg", "--out-dir", out, "verify-compat", "--loss", "dice", "--gt", "2"]);
        assert_eq!(code, EXIT_CONFIG);
    }
}
