//! `qvit`: training, evaluation, probes and BitOPs reports.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage, 3 I/O, 4 config schema,
//! 5 checkpoint format, 6 data format, 7 run directory locked.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use qvit::bitops::{self, BitAllocation, BitOpsError};
use qvit::checkpoint::{Checkpoint, CheckpointError};
use qvit::data::{DataError, Dataset, DatasetSpec, Split};
use qvit::trainer::{
    self, calibration_batch, MlpReference, RunDir, RunError, Stage, TrainConfig, TrainError,
    ALLOCATION_FILE, CHECKPOINT_FILE,
};
use qvit::vit::{ModelConfig, VitError};

#[derive(Parser)]
#[command(name = "qvit", version, about = "Mixed-precision quantization-aware training for small vision transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the float model described by a config.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-stage quantization-aware training from a float checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print top-1 accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// `train` or `eval` split of the checkpoint's dataset, or a dataset JSON file.
        #[arg(long, default_value = "eval")]
        data: String,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
    },
    /// Accuracy drop when each head of one layer is lowered in an 8-bit model.
    ProbeHeads {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long, default_value_t = 2)]
        low_bit: u8,
        #[arg(long, default_value = "eval")]
        data: String,
        /// Training images used to calibrate scales.
        #[arg(long)]
        calibration: Option<usize>,
    },
    /// Accuracy with MLP GELU outputs and/or fully-connected layers quantized low.
    ProbeMlp {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 3)]
        low_bit: u8,
        #[arg(long, value_enum, default_value_t = Reference::Float)]
        reference: Reference,
        #[arg(long, default_value = "eval")]
        data: String,
        #[arg(long)]
        calibration: Option<usize>,
    },
    /// Static BitOPs report for an architecture and allocation.
    #[command(group(ArgGroup::new("bits").required(true).args(["uniform", "alloc"])))]
    Bitops {
        /// `deit-t`, `deit-s`, `toy`, or a model config JSON file.
        #[arg(long)]
        arch: String,
        /// Interior bit-width; patch embedding and classifier stay at 8.
        #[arg(long)]
        uniform: Option<u8>,
        /// Allocation CSV with `quantizer` and `bit` columns.
        #[arg(long)]
        alloc: Option<PathBuf>,
        /// Compare against the budget of this uniform bit-width.
        #[arg(long)]
        budget: Option<u8>,
        /// Also write per-matmul rows as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Per-quantizer allocation and per-layer summary of a checkpoint.
    ReportBits {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Summary CSV path; defaults to `<out>` with a `_summary` suffix.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Reference {
    Float,
    EightBit,
}

#[derive(Debug)]
enum CliError {
    Io(String),
    Config(String),
    Checkpoint(String),
    Data(String),
    Locked(String),
    Other(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Io(_) => 3,
            CliError::Config(_) => 4,
            CliError::Checkpoint(_) => 5,
            CliError::Data(_) => 6,
            CliError::Locked(_) => 7,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Io(m)
            | CliError::Config(m)
            | CliError::Checkpoint(m)
            | CliError::Data(m)
            | CliError::Locked(m)
            | CliError::Other(m) => m,
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Checkpoint(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Mismatch(_) | TrainError::LayerOutOfRange { .. } => {
                CliError::Config(e.to_string())
            }
            TrainError::Data(d) => d.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Locked(_) => CliError::Locked(e.to_string()),
            RunError::Io { .. } => CliError::Io(e.to_string()),
        }
    }
}

impl From<BitOpsError> for CliError {
    fn from(e: BitOpsError) -> Self {
        match e {
            BitOpsError::Io(_) => CliError::Io(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<VitError> for CliError {
    fn from(e: VitError) -> Self {
        match e {
            VitError::Config(_) | VitError::MissingAllocation(_) | VitError::UnknownQuantizer(_) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Other(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    Ok(TrainConfig::from_json(&read_text(path)?)?)
}

fn print(value: &Value) {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value).expect("json value");
    // A closed pipe downstream (e.g. `| head`) is not an error for a report.
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

/// Train and eval splits named by `--data`, shaped for `model`.
fn resolve_data(ck: &Checkpoint, data: &str) -> Result<(Dataset, Dataset)> {
    let m = &ck.model.config;
    let (spec, split) = match data {
        "train" | "eval" => {
            let cfg = ck.train_config.as_ref().ok_or_else(|| {
                CliError::Config("checkpoint records no dataset; pass a dataset JSON file to --data".into())
            })?;
            let split = if data == "train" { Split::Train } else { Split::Eval };
            (cfg.data.clone(), split)
        }
        path => {
            let spec: DatasetSpec = serde_json::from_str(&read_text(Path::new(path))?)
                .map_err(|e| CliError::Config(format!("{path}: {e}")))?;
            (spec, Split::Eval)
        }
    };
    let load = |s| spec.load(s, m.in_channels, m.image_size, m.num_classes);
    Ok((load(Split::Train)?, load(split)?))
}

fn calibration_size(ck: &Checkpoint, flag: Option<usize>) -> usize {
    flag.or(ck.train_config.as_ref().map(|c| c.calibration_size)).unwrap_or(64)
}

fn metrics_summary(m: Option<&trainer::EpochMetrics>) -> Value {
    match m {
        Some(m) => serde_json::to_value(m).expect("metrics serialize"),
        None => Value::Null,
    }
}

fn pretrain(config: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let train = cfg.load_split(Split::Train)?;
    let eval = cfg.load_split(Split::Eval)?;
    let run = RunDir::create(out)?;
    let outcome = trainer::pretrain_float(&cfg, &train, &eval)?;
    let ck = Checkpoint {
        model: outcome.model.clone(),
        optimizer: Some(outcome.optimizer.clone()),
        epoch: cfg.epochs,
        seed: cfg.seed,
        stage: Stage::Float,
        eval_accuracy: outcome.final_eval_accuracy(),
        train_config: Some(cfg.clone()),
    };
    let path = run.file(CHECKPOINT_FILE);
    ck.save(&path)?;
    run.write_metrics(&outcome.metrics)?;
    print(&json!({
        "checkpoint": path,
        "train_accuracy": trainer::evaluate(&outcome.model, &train, cfg.eval_batch_size)?,
        "eval_accuracy": outcome.final_eval_accuracy(),
        "final_epoch": metrics_summary(outcome.metrics.last()),
    }));
    Ok(())
}

fn train(config: &Path, init: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let float = Checkpoint::load(init)?;
    let train = cfg.load_split(Split::Train)?;
    let eval = cfg.load_split(Split::Eval)?;
    let run = RunDir::create(out)?;
    let model = trainer::init_qat(&float.model, &cfg, &calibration_batch(&cfg, &train))?;
    let outcome = trainer::train_qat(model, &cfg, &train, &eval)?;
    let stage = outcome.metrics.last().map_or(Stage::Dive, |m| m.stage);
    let ck = Checkpoint {
        model: outcome.model.clone(),
        optimizer: Some(outcome.optimizer.clone()),
        epoch: cfg.epochs,
        seed: cfg.seed,
        stage,
        eval_accuracy: outcome.final_eval_accuracy(),
        train_config: Some(cfg.clone()),
    };
    let path = run.file(CHECKPOINT_FILE);
    ck.save(&path)?;
    run.write_metrics(&outcome.metrics)?;
    let alloc = outcome.model.get_allocation()?;
    bitops::write_allocation_csv(&outcome.model.config, &alloc, create(&run.file(ALLOCATION_FILE))?)?;
    let report = bitops::model_bitops(&outcome.model.config, &alloc)?.with_budget(cfg.budget());
    print(&json!({
        "checkpoint": path,
        "eval_accuracy": outcome.final_eval_accuracy(),
        "bitops": report.total,
        "budget": report.budget,
        "over_budget": report.over_budget,
    }));
    Ok(())
}

fn eval(ckpt: &Path, data: &str, batch_size: usize) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let (_, ds) = resolve_data(&ck, data)?;
    let accuracy = trainer::evaluate(&ck.model, &ds, batch_size.max(1))?;
    print(&json!({ "accuracy": accuracy, "count": ds.len() }));
    Ok(())
}

fn probe_heads(ckpt: &Path, layer: usize, low_bit: u8, data: &str, calibration: Option<usize>) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let (train, ds) = resolve_data(&ck, data)?;
    let calib = train.head(calibration_size(&ck, calibration)).0;
    let probe = trainer::probe_head_sensitivity(&ck.model, layer, low_bit, &calib, &ds, 256)?;
    print(&serde_json::to_value(&probe).expect("probe serializes"));
    Ok(())
}

fn probe_mlp(ckpt: &Path, low_bit: u8, reference: Reference, data: &str, calibration: Option<usize>) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let (train, ds) = resolve_data(&ck, data)?;
    let calib = train.head(calibration_size(&ck, calibration)).0;
    let reference = match reference {
        Reference::Float => MlpReference::Float,
        Reference::EightBit => MlpReference::EightBit,
    };
    let probe = trainer::probe_mlp_components(&ck.model, low_bit, reference, &calib, &ds, 256)?;
    print(&serde_json::to_value(&probe).expect("probe serializes"));
    Ok(())
}

fn arch(name: &str) -> Result<ModelConfig> {
    let cfg = match name {
        "deit-t" => ModelConfig::deit_tiny(),
        "deit-s" => ModelConfig::deit_small(),
        "toy" => ModelConfig::toy(),
        path => serde_json::from_str(&read_text(Path::new(path))?)
            .map_err(|e| CliError::Config(format!("{path}: {e}")))?,
    };
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

fn check_bits(bits: u8) -> Result<u8> {
    if (2..=8).contains(&bits) {
        Ok(bits)
    } else {
        Err(CliError::Config(format!("bit-width {bits} outside [2, 8]")))
    }
}

fn bitops_report(
    arch_name: &str,
    uniform: Option<u8>,
    alloc: Option<&Path>,
    budget: Option<u8>,
    csv: Option<&Path>,
) -> Result<()> {
    let cfg = arch(arch_name)?;
    let allocation = match (uniform, alloc) {
        (Some(n), _) => BitAllocation::uniform(&cfg, check_bits(n)?),
        (None, Some(path)) => {
            let f = File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            bitops::read_allocation_csv(f)?
        }
        (None, None) => unreachable!("clap requires one of --uniform/--alloc"),
    };
    let mut report = bitops::model_bitops(&cfg, &allocation)?;
    if let Some(n) = budget {
        report = report.with_budget(bitops::uniform_budget(&cfg, check_bits(n)?));
    }
    if let Some(path) = csv {
        report.write_csv(create(path)?)?;
    }
    print(&serde_json::to_value(&report).expect("report serializes"));
    Ok(())
}

fn report_bits(ckpt: &Path, out: &Path, summary: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let cfg = &ck.model.config;
    let alloc = ck.model.get_allocation()?;
    bitops::write_allocation_csv(cfg, &alloc, create(out)?)?;
    let summary_path = summary.map(Path::to_path_buf).unwrap_or_else(|| {
        let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        out.with_file_name(format!("{stem}_summary.csv"))
    });
    let rows = bitops::allocation_summary(cfg, &alloc)?;
    bitops::write_summary_csv(&rows, create(&summary_path)?)?;
    let report = bitops::model_bitops(cfg, &alloc)?;
    print(&json!({
        "allocation": out,
        "summary": summary_path,
        "quantizers": alloc.len(),
        "bitops": report.total,
    }));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { config, out } => pretrain(&config, &out),
        Command::Train { config, init, out } => train(&config, &init, &out),
        Command::Eval { ckpt, data, batch_size } => eval(&ckpt, &data, batch_size),
        Command::ProbeHeads {
            ckpt,
            layer,
            low_bit,
            data,
            calibration,
        } => probe_heads(&ckpt, layer, low_bit, &data, calibration),
        Command::ProbeMlp {
            ckpt,
            low_bit,
            reference,
            data,
            calibration,
        } => probe_mlp(&ckpt, low_bit, reference, &data, calibration),
        Command::Bitops {
            arch,
            uniform,
            alloc,
            budget,
            csv,
        } => bitops_report(&arch, uniform, alloc.as_deref(), budget, csv.as_deref()),
        Command::ReportBits { ckpt, out, summary } => report_bits(&ckpt, &out, summary.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
