use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use rosa_core::bench::{bench_sam, to_csv, worst_ratio, BenchConfig};
use rosa_core::format::{read_symbol_stream, write_i32_tensor, write_symbol_stream, Header};
use rosa_core::gradcheck::run_suite;
use rosa_core::model::FusionMode;
use rosa_core::mqar::{csv_summary, run_and_save, ExperimentConfig, Precision};
use rosa_core::oracle::{collision_estimate, stability_estimate, BitSource};
use rosa_core::retrieval::{batch_retrieve, RetrievalConfig};
use rosa_core::symbolizer::SymbolStream;
use rosa_core::{Result, RosaError};

#[derive(Parser)]
#[command(
    name = "rosa",
    version,
    about = "Suffix-automaton retrieval tools and experiments"
)]
struct Cli {
    /// Worker threads for retrieval; 0 uses every core.
    #[arg(long, global = true, env = "ROSA_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one variant on associative recall.
    Mqar(MqarArgs),
    /// Run retrieval over query/key symbol files.
    Retrieve(RetrieveArgs),
    /// Time a single automaton against sequence length.
    BenchSam(BenchArgs),
    /// Compare every analytic gradient with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Estimate the symbol collision rate.
    CollisionStats {
        #[arg(long = "route-bits", short = 'm', default_value_t = 4)]
        m: u32,
        #[arg(long, default_value_t = 200_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Source::Balanced)]
        source: Source,
    },
    /// Estimate the two-view symbol mismatch rate under small noise.
    StabilityStats {
        #[arg(long = "route-bits", short = 'm', default_value_t = 4)]
        m: u32,
        #[arg(long, default_value_t = 0.01)]
        delta: f64,
        #[arg(long, default_value_t = 200_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a random symbol stream.
    GenSymbols {
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long)]
        time: usize,
        #[arg(long, default_value_t = 1)]
        routes: usize,
        #[arg(long = "route-bits", default_value_t = 4)]
        route_bits: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Balanced,
    Constant,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Full,
    Smoke,
}

#[derive(Args)]
struct MqarArgs {
    /// TOML file with any of the fields below; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    mode: Option<FusionMode>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long = "route-bits")]
    route_bits: Option<u32>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    train_sequences: Option<usize>,
    #[arg(long)]
    val_sequences: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_floor: Option<f64>,
    #[arg(long)]
    precision: Option<String>,
    /// JSONL metrics, one record per epoch.
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV summary of the run.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Save the trained parameters (manifest path).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long)]
    dry_run: bool,
}

/// The TOML counterpart of [`MqarArgs`].
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct MqarFile {
    preset: Option<String>,
    mode: Option<String>,
    dim: Option<usize>,
    seq_len: Option<usize>,
    window: Option<usize>,
    route_bits: Option<u32>,
    epochs: Option<usize>,
    seed: Option<u64>,
    pairs: Option<usize>,
    layers: Option<usize>,
    heads: Option<usize>,
    train_sequences: Option<usize>,
    val_sequences: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    lr_floor: Option<f64>,
    precision: Option<String>,
    workers: Option<usize>,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    keys: PathBuf,
    /// Directory receiving tau.bin, mask.bin and tau_cf.bin.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    max_match_len: Option<u32>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 10)]
    min_log2: u32,
    #[arg(long, default_value_t = 20)]
    max_log2: u32,
    #[arg(long, default_value_t = 9)]
    reps: usize,
    #[arg(long = "route-bits", default_value_t = 4)]
    route_bits: u32,
    /// Largest tolerated time ratio between consecutive doublings.
    #[arg(long, default_value_t = 2.5)]
    max_ratio: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Error(RosaError),
    Check(String),
}

impl From<RosaError> for Failure {
    fn from(e: RosaError) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(e.into())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Mqar(args) => mqar(args, cli.workers),
        Command::Retrieve(args) => retrieve(args, cli.workers.unwrap_or(1)),
        Command::BenchSam(args) => bench(args),
        Command::Gradcheck { seed } => gradcheck(seed),
        Command::CollisionStats {
            m,
            samples,
            seed,
            source,
        } => {
            check_bits(m)?;
            let src = match source {
                Source::Balanced => BitSource::Balanced,
                Source::Constant => BitSource::Constant,
            };
            let r = collision_estimate(m, samples, seed, src);
            println!("{}", serde_json::to_string(&r).map_err(RosaError::from)?);
            if r.pass {
                Ok(())
            } else {
                Err(Failure::Check(format!(
                    "collision estimate {} vs bound {}",
                    r.estimate, r.bound
                )))
            }
        }
        Command::StabilityStats {
            m,
            delta,
            samples,
            seed,
        } => {
            check_bits(m)?;
            if !(0.0..=1.0).contains(&delta) {
                return Err(RosaError::Config(format!("delta {delta} outside [0, 1]")).into());
            }
            let r = stability_estimate(m, delta, samples, seed);
            println!("{}", serde_json::to_string(&r).map_err(RosaError::from)?);
            if r.pass {
                Ok(())
            } else {
                Err(Failure::Check(format!(
                    "mismatch rate {} above δ·M = {}",
                    r.estimate, r.bound
                )))
            }
        }
        Command::GenSymbols {
            batch,
            time,
            routes,
            route_bits,
            seed,
            out,
        } => {
            check_bits(route_bits)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let alpha = 1u32 << route_bits;
            let syms = Array3::from_shape_simple_fn((batch, time, routes), || {
                rng.random_range(0..alpha) as u16
            });
            let stream = SymbolStream::new(syms, route_bits)?;
            let mut w = BufWriter::new(File::create(out)?);
            write_symbol_stream(&mut w, &stream)?;
            w.flush()?;
            Ok(())
        }
    }
}

fn check_bits(m: u32) -> Result<()> {
    if m == 0 || m > rosa_core::symbolizer::MAX_ROUTE_BITS {
        return Err(RosaError::Config(format!("route width {m} out of range")));
    }
    Ok(())
}

fn read_toml(path: &Path) -> Result<MqarFile> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| RosaError::Config(format!("{}: {e}", path.display())))
}

fn parse_precision(s: &str) -> Result<Precision> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        _ => Err(RosaError::Config(format!("unknown precision {s:?}"))),
    }
}

/// Flags, then the config file, then the preset defaults.
fn resolve_mqar(args: &MqarArgs, workers: Option<usize>) -> Result<ExperimentConfig> {
    let file = match &args.config {
        Some(p) => read_toml(p)?,
        None => MqarFile::default(),
    };
    let mode = match (args.mode, &file.mode) {
        (Some(m), _) => m,
        (None, Some(s)) => s.parse()?,
        (None, None) => FusionMode::PostAttn,
    };
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let preset = match (args.preset, file.preset.as_deref()) {
        (Some(p), _) => p,
        (None, Some("full")) | (None, None) => Preset::Full,
        (None, Some("smoke")) => Preset::Smoke,
        (None, Some(other)) => return Err(RosaError::Config(format!("unknown preset {other:?}"))),
    };
    let mut cfg = match preset {
        Preset::Full => ExperimentConfig::full(mode, seed),
        Preset::Smoke => ExperimentConfig::smoke(mode, seed),
    };
    macro_rules! pick {
        ($field:ident) => {
            args.$field.or(file.$field)
        };
    }
    if let Some(v) = pick!(dim) {
        cfg.model.dim = v;
    }
    if let Some(v) = pick!(seq_len) {
        cfg.data.seq_len = v;
    }
    if let Some(v) = pick!(window) {
        cfg.model.window = v;
    }
    if let Some(v) = pick!(route_bits) {
        cfg.model.route_bits = v;
    }
    if let Some(v) = pick!(epochs) {
        cfg.train.epochs = v;
    }
    if let Some(v) = pick!(pairs) {
        cfg.data.num_pairs = v;
    }
    if let Some(v) = pick!(layers) {
        cfg.model.layers = v;
    }
    if let Some(v) = pick!(heads) {
        cfg.model.heads = v;
    }
    if let Some(v) = pick!(train_sequences) {
        cfg.train.train_sequences = v;
    }
    if let Some(v) = pick!(val_sequences) {
        cfg.train.val_sequences = v;
    }
    if let Some(v) = pick!(batch_size) {
        cfg.train.batch_size = v;
        cfg.train.micro_batch = v;
    }
    if let Some(v) = pick!(lr) {
        cfg.train.lr_peak = v;
        cfg.train.lr_floor = cfg.train.lr_floor.min(v);
    }
    if let Some(v) = pick!(lr_floor) {
        cfg.train.lr_floor = v;
    }
    if let Some(p) = args.precision.as_deref().or(file.precision.as_deref()) {
        cfg.train.precision = parse_precision(p)?;
    }
    cfg.model.workers = workers.or(file.workers).unwrap_or(1);
    cfg.validate()?;
    Ok(cfg)
}

fn mqar(args: MqarArgs, workers: Option<usize>) -> Outcome {
    let cfg = resolve_mqar(&args, workers)?;
    if args.dry_run {
        println!(
            "{}",
            serde_json::to_string_pretty(&cfg).map_err(RosaError::from)?
        );
        return Ok(());
    }
    let mut jsonl = match &args.out {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let mut io_err: Option<std::io::Error> = None;
    let result = run_and_save(
        &cfg,
        &mut |m| {
            println!(
                "epoch {:>3}  loss {:.4}  val_acc {:6.2}%  ({:.1}s)",
                m.epoch, m.loss, m.val_acc, m.seconds
            );
            if let Some(w) = jsonl.as_mut() {
                let line = serde_json::json!({
                    "epoch": m.epoch,
                    "loss": m.loss,
                    "val_acc": m.val_acc,
                    "mode": m.mode,
                    "seed": m.seed,
                });
                if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                    io_err.get_or_insert(e);
                }
            }
        },
        args.checkpoint.as_deref(),
    );
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let history = match result {
        Ok(h) => h,
        Err(e @ RosaError::Divergence { .. }) => {
            if let Some(w) = jsonl.as_mut() {
                writeln!(
                    w,
                    "{}",
                    serde_json::json!({ "diverged": e.to_string(), "mode": cfg.model.mode, "seed": cfg.model.seed })
                )?;
            }
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    if let Some(p) = &args.csv {
        std::fs::write(p, csv_summary(&[history]))?;
    }
    Ok(())
}

fn retrieve(args: RetrieveArgs, workers: usize) -> Outcome {
    let q = read_symbol_stream(&mut BufReader::new(File::open(&args.queries)?))?;
    let k = read_symbol_stream(&mut BufReader::new(File::open(&args.keys)?))?;
    let cfg = RetrievalConfig {
        max_match_len: args.max_match_len,
        workers,
    };
    let out = batch_retrieve(&q, &k, cfg)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let (b, t, r) = out.dim();
    let header = Header::new(b, t, r, out.route_bits);
    let write = |name: &str, values: ndarray::ArrayD<i32>| -> Result<()> {
        let mut w = BufWriter::new(File::create(args.out_dir.join(name))?);
        write_i32_tensor(&mut w, header, &values)?;
        w.flush()?;
        Ok(())
    };
    write("tau.bin", out.tau.clone().into_dyn())?;
    write("mask.bin", out.mask().mapv(i32::from).into_dyn())?;
    write("tau_cf.bin", out.tau_cf.clone().into_dyn())?;
    let matched = out.tau.iter().filter(|&&x| x >= 0).count();
    println!("{b}x{t}x{r} cells, {matched} with a destination");
    Ok(())
}

fn bench(args: BenchArgs) -> Outcome {
    let cfg = BenchConfig {
        min_log2: args.min_log2,
        max_log2: args.max_log2,
        route_bits: args.route_bits,
        reps: args.reps,
        seed: 0,
    };
    check_bits(cfg.route_bits)?;
    let rows = bench_sam(&cfg)?;
    let csv = to_csv(&rows);
    print!("{csv}");
    if let Some(p) = &args.out {
        std::fs::write(p, &csv)?;
    }
    let worst = worst_ratio(&rows);
    if worst > args.max_ratio {
        return Err(Failure::Check(format!(
            "doubling ratio {worst:.3} exceeds {}",
            args.max_ratio
        )));
    }
    Ok(())
}

fn gradcheck(seed: u64) -> Outcome {
    let reports = run_suite(seed)?;
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{:<4} {:<40} max_err {:.3e}  tol {:.0e}  ({} entries)",
            if r.pass { "ok" } else { "FAIL" },
            r.group,
            r.max_err,
            r.tol,
            r.checked
        );
        if !r.pass {
            failed.push(r.group.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "{} groups out of tolerance: {}",
            failed.len(),
            failed.join(", ")
        )))
    }
}
