//! Argument parsing and command implementations for the `qprobe` binary.

pub mod selftest;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use qprobe::decomposition::{decompose_network, summary_rows, Stat};
use qprobe::linalg::{Matrix, Rng, TensorArchive};
use qprobe::metrics::row_metrics;
use qprobe::network::{build_toy_mlp, build_toy_transformer, forward_reference, NetworkSpec};
use qprobe::quant::QuantConfig;
use qprobe::report;
use qprobe::scaling::{self, FitMode, FitOptions};
use qprobe::trainer::{lr_sweep, ptq_apply, train, TrainConfig};
use qprobe::{Error, Result};

/// Exit code for bad flags, unreadable or malformed input.
pub const EXIT_INPUT: u8 = 2;
/// Exit code for numerical failures (divergence, non-finite values).
pub const EXIT_NUMERICAL: u8 = 3;

pub fn exit_code(e: &Error) -> u8 {
    if e.is_input_error() {
        EXIT_INPUT
    } else {
        EXIT_NUMERICAL
    }
}

#[derive(Parser, Debug)]
#[command(name = "qprobe", version, about = "Quantization error analysis for toy networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Decompose the quantization error of a network module by module.
    Analyze(AnalyzeArgs),
    /// Train a model from a JSON config.
    Train(TrainArgs),
    /// Train once per learning rate and pick the best.
    Sweep(SweepArgs),
    /// Quantize a trained model and measure the loss increase.
    Ptq(PtqArgs),
    /// Row-wise outlier metrics of one activation matrix.
    Metrics(MetricsArgs),
    /// Fit per-optimizer scaling laws.
    FitScaling(FitArgs),
    /// Write the bundled scaling dataset as CSV.
    PaperData(PaperDataArgs),
    /// Run the built-in invariant checks.
    Selftest(SelftestArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Absmax,
    Quest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StatArg {
    Mean,
    Trunc,
}

impl StatArg {
    fn stat(self) -> Stat {
        match self {
            StatArg::Mean => Stat::Mean,
            StatArg::Trunc => Stat::TruncatedMeanTop1pct,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ToyArg {
    Mlp,
    Transformer,
}

#[derive(Args, Debug, Clone)]
pub struct QuantArgs {
    /// Bit width; 53 or more is lossless.
    #[arg(long, default_value_t = 4)]
    pub bits: u32,
    #[arg(long, value_enum, default_value_t = SchemeArg::Absmax)]
    pub scheme: SchemeArg,
}

impl QuantArgs {
    pub fn config(&self) -> Result<QuantConfig> {
        let c = match self.scheme {
            SchemeArg::Absmax => QuantConfig::absmax(self.bits),
            SchemeArg::Quest => QuantConfig::quest(self.bits),
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Network manifest (JSON). Without it a seeded toy network is built.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Tensor archive index; defaults to `<model stem>.weights.json`.
    #[arg(long, requires = "model")]
    pub weights: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ToyArg::Transformer, conflicts_with = "model")]
    pub toy: ToyArg,
    #[arg(long, default_value_t = 2, conflicts_with = "model")]
    pub depth: usize,
    #[arg(long, default_value_t = 16, conflicts_with = "model")]
    pub width: usize,
    #[arg(long, default_value_t = 2, conflicts_with = "model")]
    pub heads: usize,
    #[arg(long, default_value_t = 8, conflicts_with = "model")]
    pub seq_len: usize,
}

impl ModelArgs {
    /// The network and a seeded standard-normal input of shape
    /// `seq_len × input_width`.
    pub fn load(&self, seed: u64) -> Result<(NetworkSpec, Matrix)> {
        let mut rng = Rng::new(seed);
        let net = match &self.model {
            Some(path) => {
                check_readable(path)?;
                NetworkSpec::load(path, self.weights.as_deref())?
            }
            None => match self.toy {
                ToyArg::Mlp => build_toy_mlp(self.depth, self.width, self.seq_len, &mut rng)?,
                ToyArg::Transformer => {
                    build_toy_transformer(self.depth, self.width, self.heads, self.seq_len, true, &mut rng)?
                }
            },
        };
        let x = rng.normal_matrix(net.seq_len, net.input_width, 1.0);
        Ok((net, x))
    }
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub quant: QuantArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Summary statistic; both are written when omitted.
    #[arg(long, value_enum)]
    pub stat: Option<StatArg>,
    /// Output directory for `decomposition.csv` and `decomposition.svg`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training config: a path, or inline JSON starting with `{`.
    #[arg(long)]
    pub config: String,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: String,
    /// Comma-separated learning rates.
    #[arg(long, value_delimiter = ',', required = true)]
    pub lrs: Vec<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output JSON file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PtqArgs {
    #[arg(long)]
    pub config: String,
    /// Trained checkpoint; without it the config is trained first.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    pub weights: Option<PathBuf>,
    #[command(flatten)]
    pub quant: QuantArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub stat: Option<StatArg>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Tensor archive index holding the activations to measure.
    #[arg(long, conflicts_with = "model", requires = "tensor")]
    pub activations: Option<PathBuf>,
    /// Tensor name inside `--activations`.
    #[arg(long, requires = "activations")]
    pub tensor: Option<String>,
    /// Module whose reference output is measured (1-based; default last).
    #[arg(long, conflicts_with = "activations")]
    pub module: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output JSON file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// CSV with columns optimizer,n_params,tokens,loss,precision.
    #[arg(long, required_unless_present = "paper_data", conflicts_with = "paper_data")]
    pub data: Option<PathBuf>,
    /// Use the bundled dataset.
    #[arg(long)]
    pub paper_data: bool,
    /// Fit full precision first, then ρ with the other coefficients frozen.
    #[arg(long)]
    pub sequential: bool,
    /// Output directory for `fits.json` and `scaling.svg`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PaperDataArgs {
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SelftestArgs {
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn check_readable(path: &Path) -> Result<()> {
    read_text(path).map(|_| ())
}

fn read_config(arg: &str, seed: Option<u64>) -> Result<TrainConfig> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        read_text(Path::new(arg))?
    };
    let mut cfg = TrainConfig::from_json(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn stats(stat: Option<StatArg>) -> Vec<Stat> {
    match stat {
        Some(s) => vec![s.stat()],
        None => vec![Stat::Mean, Stat::TruncatedMeanTop1pct],
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn write_decomposition(dir: &Path, rows: &[qprobe::decomposition::SummaryRow], stat: Option<StatArg>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_file(&dir.join("decomposition.csv"), &report::decomposition_csv(rows)?)?;
    let label = stat.unwrap_or(StatArg::Mean).stat().label();
    write_file(&dir.join("decomposition.svg"), &report::decomposition_svg(rows, label))
}

/// Runs one command, writing human-readable progress to `log`.
pub fn run(cli: Cli, log: &mut dyn Write) -> Result<u8> {
    match cli.command {
        Command::Analyze(a) => analyze(a, log),
        Command::Train(a) => {
            let cfg = read_config(&a.config, a.seed)?;
            let rec = train(&cfg)?;
            rec.write(&a.out)?;
            let m = &rec.manifest;
            writeln!(
                log,
                "trained {} steps, val loss {:.6} -> {:.6}, wrote {}",
                m.steps_run,
                m.initial_val_loss,
                m.final_val_loss,
                a.out.display()
            )?;
            Ok(0)
        }
        Command::Sweep(a) => {
            let cfg = read_config(&a.config, a.seed)?;
            let res = lr_sweep(&cfg, &a.lrs)?;
            write_file(&a.out, &(serde_json::to_string_pretty(&res)? + "\n"))?;
            writeln!(log, "best lr {}", res.best_lr)?;
            Ok(0)
        }
        Command::Ptq(a) => ptq(a, log),
        Command::Metrics(a) => metrics(a, log),
        Command::FitScaling(a) => fit_scaling(a, log),
        Command::PaperData(a) => {
            let text = scaling::points_csv(&scaling::bundled_paper_data())?;
            match a.out {
                Some(p) => write_file(&p, &text)?,
                None => log.write_all(text.as_bytes())?,
            }
            Ok(0)
        }
        Command::Selftest(a) => {
            let fault = match a.inject_fault.as_deref() {
                None => None,
                Some("table5") => Some(selftest::Fault::AccountingFormula),
                Some(other) => return Err(Error::Config(format!("unknown fault {other:?}"))),
            };
            let results = selftest::run(fault);
            log.write_all(selftest::render(&results).as_bytes())?;
            Ok(if results.iter().all(|r| r.passed) { 0 } else { 1 })
        }
    }
}

fn analyze(a: AnalyzeArgs, log: &mut dyn Write) -> Result<u8> {
    let cfg = a.quant.config()?;
    let (net, x) = a.model.load(a.seed)?;
    let records = decompose_network(&net, &x, &cfg)?;
    let rows = summary_rows(&records, &stats(a.stat));
    write_decomposition(&a.out, &rows, a.stat)?;
    writeln!(log, "decomposed {} modules, wrote {}", records.len(), a.out.display())?;
    Ok(0)
}

#[derive(serde::Serialize)]
struct PtqSummary {
    quant: QuantConfig,
    val_before: f64,
    val_after: f64,
    delta: f64,
    final_module_r: Option<f64>,
}

fn ptq(a: PtqArgs, log: &mut dyn Write) -> Result<u8> {
    let cfg = read_config(&a.config, a.seed)?;
    let quant = a.quant.config()?;
    let net = match &a.model {
        Some(p) => {
            check_readable(p)?;
            NetworkSpec::load(p, a.weights.as_deref())?
        }
        None => train(&cfg)?.checkpoint,
    };
    let rep = ptq_apply(&cfg, &net, &quant)?;
    let rows = summary_rows(&rep.decomposition, &stats(a.stat));
    write_decomposition(&a.out, &rows, a.stat)?;
    rep.checkpoint.save(&a.out.join("quantized.json"))?;
    let summary = PtqSummary {
        quant,
        val_before: rep.val_before,
        val_after: rep.val_after,
        delta: rep.delta,
        final_module_r: rep.decomposition.last().map(|d| d.summary(Stat::Mean)).and_then(|r| r.r),
    };
    write_file(&a.out.join("ptq.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    writeln!(log, "val loss {:.6} -> {:.6} (delta {:.6})", rep.val_before, rep.val_after, rep.delta)?;
    Ok(0)
}

fn metrics(a: MetricsArgs, log: &mut dyn Write) -> Result<u8> {
    let x = match (&a.activations, &a.tensor) {
        (Some(index), Some(name)) => {
            check_readable(index)?;
            TensorArchive::read(index)?.require(name)?.clone()
        }
        _ => {
            let (net, input) = a.model.load(a.seed)?;
            let hs = forward_reference(&net, &input)?;
            let l = a.module.unwrap_or(net.len());
            if l == 0 || l > net.len() {
                return Err(Error::Config(format!("module {l} outside 1..={}", net.len())));
            }
            hs[l].clone()
        }
    };
    let text = report::metrics_json(&row_metrics(&x));
    match a.out {
        Some(p) => write_file(&p, &text)?,
        None => log.write_all(text.as_bytes())?,
    }
    Ok(0)
}

fn fit_scaling(a: FitArgs, log: &mut dyn Write) -> Result<u8> {
    let points = match &a.data {
        Some(p) => scaling::parse_points_csv(&read_text(p)?)?,
        None => scaling::bundled_paper_data(),
    };
    let opts = FitOptions {
        mode: if a.sequential { FitMode::Sequential } else { FitMode::Joint },
        ..FitOptions::default()
    };
    let fits = scaling::fit_all(&points, &opts)?;
    std::fs::create_dir_all(&a.out)?;
    write_file(&a.out.join("fits.json"), &report::fits_json(&fits))?;
    write_file(&a.out.join("scaling.svg"), &report::scaling_svg(&fits, &points))?;
    for f in &fits {
        let rho = f.rho_4bit.map_or("-".to_string(), |r| format!("{r:.3}"));
        writeln!(
            log,
            "{:<8} A'={:<10.4} alpha={:.4} E={:.4} rho_4bit={rho}",
            f.optimizer, f.a_prime, f.alpha, f.e_irreducible
        )?;
    }
    Ok(0)
}

/// Sizes the global worker pool from `QPROBE_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("QPROBE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("QPROBE_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}
