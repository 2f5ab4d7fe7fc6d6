use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use dcp_cli::config::{self, keys_help};
use dcp_core::error::{Error, Result};
use dcp_core::eval_bench::{
    emit_report_to_path, throughput_bench, verify, BenchConfig, BenchResult, ReportFormat,
};
use dcp_core::synth_data::{generate, split_eval_pairs, Dataset, SynthConfig};
use dcp_core::trainer::{run, Method, RunOptions, TrainConfig};

#[derive(Parser)]
#[command(
    name = "dcp",
    version,
    about = "Dynamic-class-pool training harness: synthetic data, training, verification, and throughput/memory benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic identity dataset file.
    GenData(GenDataArgs),
    /// Train with the pooled classifier or a softmax baseline.
    #[command(after_help = keys_help())]
    Train(TrainArgs),
    /// Verification metrics for a trained embedding net.
    Eval(EvalArgs),
    /// Measure steps/sec and classifier-state bytes over a method/n_id grid.
    Bench(BenchArgs),
    /// Re-emit a saved benchmark result in another format.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of identities.
    #[arg(long)]
    n_id: usize,
    /// Input dimension.
    #[arg(long, default_value_t = 64)]
    d_in: usize,
    /// Minimum images per identity.
    #[arg(long, default_value_t = 2)]
    k_min: usize,
    /// Maximum images per identity.
    #[arg(long, default_value_t = 20)]
    k_max: usize,
    /// Within-class noise scale.
    #[arg(long, default_value_t = 0.1)]
    noise_sigma: f64,
    /// Trailing images per identity reserved for evaluation.
    #[arg(long, default_value_t = 2)]
    holdout_per_id: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Long-tail (Zipf) per-identity counts instead of uniform.
    #[arg(long)]
    long_tail: bool,
    /// Output dataset file.
    #[arg(short, long)]
    out: PathBuf,
    /// Also write a CSV export here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset file produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Flat key=value config file (see the key list below).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set epochs=5 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory for checkpoints and report.json.
    #[arg(short, long)]
    out_dir: Option<PathBuf>,
    /// Trailing images per identity held out of training.
    #[arg(long, default_value_t = 0)]
    holdout_per_id: usize,
    /// Genuine verification pairs to score after training (0 = no eval).
    #[arg(long, default_value_t = 0)]
    eval_genuine: usize,
    /// Impostor verification pairs to score after training.
    #[arg(long, default_value_t = 0)]
    eval_impostor: usize,
    /// Seed for drawing the verification pairs.
    #[arg(long, default_value_t = 1)]
    pair_seed: u64,
    /// Progress line every N steps (0 = quiet).
    #[arg(long, default_value_t = 50)]
    log_every: usize,
    /// Worker threads for batch forward/backward (DCP_THREADS overrides).
    #[arg(long, default_value_t = 1)]
    threads: usize,

    // Direct flags for the most common keys; equivalent to --set.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    pool_frac: Option<f64>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    instance_batch: Option<usize>,
    #[arg(long)]
    identity_batch: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Embedding-net checkpoint (probe_net.dcpn from a training run).
    #[arg(long)]
    net: PathBuf,
    /// Trailing images per identity treated as held out.
    #[arg(long, default_value_t = 2)]
    holdout_per_id: usize,
    #[arg(long, default_value_t = 1000)]
    genuine: usize,
    #[arg(long, default_value_t = 5000)]
    impostor: usize,
    #[arg(long, default_value_t = 1)]
    pair_seed: u64,
    /// Write the result as JSON here (default: print to stdout).
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Methods to benchmark, comma-separated (dcp, fc, partial-fc).
    #[arg(long, default_value = "dcp,fc")]
    methods: String,
    /// Identity counts, comma-separated.
    #[arg(long, default_value = "1000,10000")]
    n_ids: String,
    #[arg(long, default_value_t = 1000)]
    pool_size: usize,
    #[arg(long, default_value_t = 32)]
    instance_batch: usize,
    #[arg(long, default_value_t = 16)]
    identity_batch: usize,
    /// Timed trials per grid point (after one warm-up trial).
    #[arg(long, default_value_t = 3)]
    trials: usize,
    /// Steps per trial (0 = calibrate to min-trial-secs).
    #[arg(long, default_value_t = 0)]
    steps: usize,
    #[arg(long, default_value_t = 0.2)]
    min_trial_secs: f64,
    /// Worker threads (DCP_THREADS overrides).
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output report path.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Report format: json | csv.
    #[arg(long, default_value = "json")]
    format: String,
}

#[derive(Args)]
struct ReportArgs {
    /// Benchmark result JSON produced by `dcp bench`.
    #[arg(long)]
    input: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    /// Output format: json | csv.
    #[arg(long, default_value = "csv")]
    format: String,
}

fn parse_format(s: &str) -> Result<ReportFormat> {
    match s {
        "json" => Ok(ReportFormat::Json),
        "csv" => Ok(ReportFormat::Csv),
        _ => Err(Error::Config(format!("format: expected json or csv, got `{s}`"))),
    }
}

fn env_threads(flag: usize) -> usize {
    match std::env::var("DCP_THREADS") {
        Ok(v) => v.parse().unwrap_or(flag).max(1),
        Err(_) => flag.max(1),
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_id: args.n_id,
        d_in: args.d_in,
        k_min: args.k_min,
        k_max: args.k_max,
        noise_sigma: args.noise_sigma,
        holdout_per_id: args.holdout_per_id,
        seed: args.seed,
        long_tail: args.long_tail,
    };
    let ds = generate(&cfg)?;
    ds.save(&args.out)?;
    if let Some(csv) = &args.csv {
        let mut w = std::io::BufWriter::new(std::fs::File::create(csv)?);
        ds.export_csv(&mut w)?;
    }
    println!(
        "wrote {} samples ({} identities, d_in {}) to {}",
        ds.n_total(),
        ds.n_id(),
        ds.d_in(),
        args.out.display()
    );
    Ok(())
}

fn build_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => config::load_config(path)?,
        None => TrainConfig::default(),
    };
    for pair in &args.set {
        let Some((key, value)) = pair.split_once('=') else {
            return Err(Error::Config(format!("--set expects KEY=VALUE, got `{pair}`")));
        };
        config::apply_kv(&mut cfg, key.trim(), value.trim())?;
    }
    if let Some(v) = &args.method {
        config::apply_kv(&mut cfg, "method", v)?;
    }
    if let Some(v) = args.epochs {
        config::apply_kv(&mut cfg, "epochs", &v.to_string())?;
    }
    if let Some(v) = args.seed {
        config::apply_kv(&mut cfg, "seed", &v.to_string())?;
    }
    if let Some(v) = args.lr {
        config::apply_kv(&mut cfg, "lr", &v.to_string())?;
    }
    if let Some(v) = args.k {
        config::apply_kv(&mut cfg, "k", &v.to_string())?;
    }
    if let Some(v) = args.pool_frac {
        config::apply_kv(&mut cfg, "pool_frac", &v.to_string())?;
    }
    if let Some(v) = args.pool_size {
        config::apply_kv(&mut cfg, "pool_size", &v.to_string())?;
    }
    if let Some(v) = args.instance_batch {
        config::apply_kv(&mut cfg, "instance_batch", &v.to_string())?;
    }
    if let Some(v) = args.identity_batch {
        config::apply_kv(&mut cfg, "identity_batch", &v.to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = build_train_config(&args)?;
    let ds = Dataset::load(&args.data)?.with_holdout(args.holdout_per_id);

    println!("# --- effective config ---");
    print!("{}", config::to_flat(&cfg));
    println!("# --- end effective config ---");

    let want_eval = args.eval_genuine > 0 && args.eval_impostor > 0;
    let pairs = if want_eval {
        if args.holdout_per_id < 2 {
            return Err(Error::Config(
                "evaluation pairs need --holdout-per-id >= 2".into(),
            ));
        }
        Some(split_eval_pairs(&ds, args.eval_genuine, args.eval_impostor, args.pair_seed)?)
    } else {
        None
    };

    let opts = RunOptions {
        out_dir: args.out_dir.as_deref(),
        log_every: args.log_every,
        eval_pairs: pairs.as_ref(),
        threads: env_threads(args.threads),
    };
    let report = run(&cfg, &ds, &opts)?;
    let last = report.epochs.last();
    println!(
        "done: {} steps over {} epochs in {:.1}s; classifier state {} bytes",
        report.total_steps,
        report.epochs.len(),
        report.wall_secs,
        report.classifier_state_bytes
    );
    if let Some(e) = last {
        println!("final epoch: ce {:.6} cos {:.6} total {:.6}", e.ce, e.cos, e.total);
    }
    if let Some(eval) = &report.eval {
        println!("verification auc {:.6}", eval.auc);
        for (far, tpr) in &eval.tpr_at_far {
            println!("  tpr@far={far:.0e}: {tpr:.6}");
        }
    }
    if let Some(dir) = &args.out_dir {
        println!("report: {}", dir.join("report.json").display());
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ds = Dataset::load(&args.data)?.with_holdout(args.holdout_per_id);
    let net = dcp_core::embed_net::EmbedNet::load(&args.net)?;
    let pairs = split_eval_pairs(&ds, args.genuine, args.impostor, args.pair_seed)?;
    let result = verify(&net, &ds, &pairs)?;
    let json = serde_json::to_string_pretty(&result)
        .map_err(|e| Error::Format(format!("result serialization: {e}")))?;
    match &args.out {
        Some(path) => {
            std::fs::write(path, json)?;
            println!("auc {:.6}; wrote {}", result.auc, path.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn parse_methods(s: &str) -> Result<Vec<Method>> {
    s.split(',')
        .map(|m| match m.trim() {
            "dcp" => Ok(Method::Dcp),
            "fc" => Ok(Method::Fc),
            "partial-fc" => Ok(Method::PartialFc),
            other => Err(Error::Config(format!("methods: unknown method `{other}`"))),
        })
        .collect()
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let format = parse_format(&args.format)?;
    let n_ids: Vec<usize> = args
        .n_ids
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("n_ids: expected integers, got `{p}`")))
        })
        .collect::<Result<_>>()?;
    let cfg = BenchConfig {
        methods: parse_methods(&args.methods)?,
        n_ids,
        pool_size: args.pool_size,
        instance_batch: args.instance_batch,
        identity_batch: args.identity_batch,
        trials: args.trials,
        steps_per_trial: args.steps,
        min_trial_secs: args.min_trial_secs,
        threads: env_threads(args.threads),
        seed: args.seed,
        ..BenchConfig::default()
    };
    let result = throughput_bench(&cfg)?;
    for row in &result.rows {
        println!(
            "{:<10} n_id {:>8}: {:>10.2} steps/s (std {:.2}), {:>12.0} images/s, {} bytes",
            row.method,
            row.n_id,
            row.steps_per_sec_mean,
            row.steps_per_sec_std,
            row.images_per_sec_mean,
            row.classifier_state_bytes
        );
    }
    if let Some(out) = &args.out {
        emit_report_to_path(&result, out, format)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let format = parse_format(&args.format)?;
    let text = std::fs::read_to_string(&args.input)?;
    let rows = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("cannot parse {}: {e}", args.input.display())))?;
    let result = BenchResult { rows };
    emit_report_to_path(&result, &args.out, format)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Cmd::GenData(args) => cmd_gen_data(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Bench(args) => cmd_bench(args),
        Cmd::Report(args) => cmd_report(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
