use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use assocda::data::{self, DomainDataset};
use assocda::gradcheck::{self, Fault};
use assocda::harness::{self, ExperimentReport};
use assocda::network;
use assocda::{ExperimentConfig, Matrix, MmdConfig};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "assocda",
    version,
    about = "Associative domain adaptation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured regimes and write reports, traces, embeddings and checkpoints.
    Train {
        config: PathBuf,
        /// Override a config entry, e.g. `--set regime=source_only`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Fraction of the source-only to target-only error gap closed by adaptation.
    Coverage {
        #[arg(allow_negative_numbers = true)]
        so: f64,
        #[arg(allow_negative_numbers = true)]
        to: f64,
        #[arg(allow_negative_numbers = true)]
        da: f64,
    },
    /// Write the embeddings of a dataset CSV under a checkpoint.
    DumpEmbeddings {
        checkpoint: PathBuf,
        dataset: PathBuf,
        out: PathBuf,
    },
    /// MMD² between the source and target rows of an embeddings CSV.
    Mmd {
        embeddings: PathBuf,
        #[arg(long, value_enum, default_value_t = EstimatorArg::Biased)]
        estimator: EstimatorArg,
        /// Use a single fixed RBF bandwidth instead of the median-heuristic mixture.
        #[arg(long)]
        bandwidth: Option<f64>,
    },
    /// Write the configured domain pair as dataset CSVs.
    GenData {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    WalkerSign,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Biased,
    Unbiased,
}

enum Failure {
    /// Exit code 2.
    Usage(String),
    /// Exit code 1.
    Runtime(String),
}

impl From<assocda::Error> for Failure {
    fn from(e: assocda::Error) -> Self {
        match e {
            assocda::Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, overrides } => cmd_train(&config, &overrides),
        Command::Gradcheck {
            seed,
            instances,
            inject_fault,
        } => cmd_gradcheck(seed, instances, inject_fault),
        Command::Coverage { so, to, da } => cmd_coverage(so, to, da),
        Command::DumpEmbeddings {
            checkpoint,
            dataset,
            out,
        } => cmd_dump_embeddings(&checkpoint, &dataset, &out),
        Command::Mmd {
            embeddings,
            estimator,
            bandwidth,
        } => cmd_mmd(&embeddings, estimator, bandwidth),
        Command::GenData {
            config,
            overrides,
            out,
        } => cmd_gen_data(&config, &overrides, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    for o in overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: &str) -> CmdResult {
    fs::write(path, contents)
        .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

#[derive(Serialize)]
struct TrainOutput<'a> {
    config: &'a ExperimentConfig,
    experiment: &'a ExperimentReport,
}

fn cmd_train(config: &Path, overrides: &[String]) -> CmdResult {
    let cfg = load_config(config, overrides)?;
    let pair = data::gen_pair(&cfg.pair_spec())?;
    let outcome = harness::run_experiment(
        &pair,
        &cfg.mlp_spec(),
        &cfg.train_config(),
        &cfg.regimes,
        &cfg.mmd,
    )?;

    fs::create_dir_all(&cfg.outdir)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", cfg.outdir.display())))?;
    let report = &outcome.report;
    let json = serde_json::to_string_pretty(&TrainOutput {
        config: &cfg,
        experiment: report,
    })
    .map_err(|e| Failure::Runtime(e.to_string()))?;
    write(&cfg.outdir.join("report.json"), &(json + "\n"))?;

    for run in &report.runs {
        let name = run.regime.as_str();
        let params = &outcome.models[&run.regime];
        write(
            &cfg.outdir.join(format!("trace_{name}.csv")),
            &harness::trace_csv(&run.loss_trace),
        )?;
        write(
            &cfg.outdir.join(format!("embeddings_{name}.csv")),
            &harness::embeddings_csv(params, &[&pair.source_test, &pair.target_test])?,
        )?;
        network::save_checkpoint(params, &cfg.outdir.join(format!("checkpoint_{name}")))?;
    }

    println!(
        "{:<12} {:>10} {:>10} {:>14}",
        "regime", "target_err", "source_err", "embedding_mmd"
    );
    for run in &report.runs {
        let mmd = run
            .final_embedding_mmd
            .map_or_else(|| "-".to_string(), |m| format!("{m:.6}"));
        println!(
            "{:<12} {:>10.2} {:>10.2} {:>14}",
            run.regime.as_str(),
            run.final_target_error_pct,
            run.final_source_error_pct,
            mmd
        );
    }
    for (name, cov) in [
        ("da_assoc", report.coverage_da_assoc),
        ("da_mmd", report.coverage_da_mmd),
    ] {
        if let Some(c) = cov {
            println!("coverage {name}: {c:.4}");
        }
    }
    println!("wrote {}", cfg.outdir.display());
    Ok(())
}

fn cmd_gradcheck(seed: u64, instances: usize, fault: Option<FaultArg>) -> CmdResult {
    if instances == 0 {
        return Err(Failure::Usage("--instances must be at least 1".into()));
    }
    let fault = match fault {
        Some(FaultArg::WalkerSign) => Fault::WalkerSignFlip,
        None => Fault::None,
    };
    let reports = gradcheck::check_all(seed, instances, fault)?;
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{:<16} max_rel_err {:.3e}  ({} coordinates)  {}",
            r.component.as_str(),
            r.max_relative_error,
            r.coordinates,
            if r.passed() { "ok" } else { "FAIL" }
        );
        if !r.passed() {
            failed.push(r);
        }
    }
    if failed.is_empty() {
        return Ok(());
    }
    let mut msg = String::from("gradient check failed");
    for r in failed {
        let _ = write!(msg, "; {}", r.component.as_str());
        if let Some(w) = &r.worst {
            let _ = write!(
                msg,
                " at instance {} {}[{}]: analytic {:e} vs numeric {:e}",
                w.instance, w.tensor, w.coordinate, w.analytic, w.numeric
            );
        }
    }
    Err(Failure::Runtime(msg))
}

fn cmd_coverage(so: f64, to: f64, da: f64) -> CmdResult {
    if !(so.is_finite() && to.is_finite() && da.is_finite()) {
        return Err(Failure::Usage("error rates must be finite".into()));
    }
    match harness::coverage(so, to, da) {
        Some(c) => println!("{c:.4}"),
        None => println!("undefined"),
    }
    Ok(())
}

fn cmd_dump_embeddings(checkpoint: &Path, dataset: &Path, out: &Path) -> CmdResult {
    let params = network::load_checkpoint(checkpoint)?;
    let text = fs::read_to_string(dataset)
        .map_err(|e| Failure::Runtime(format!("cannot read {}: {e}", dataset.display())))?;
    let ds = DomainDataset::from_csv(&text, Some(params.spec.num_classes))?;
    if ds.dim() != params.spec.input_dim {
        return Err(Failure::Runtime(format!(
            "dataset has {} features but the checkpoint expects {}",
            ds.dim(),
            params.spec.input_dim
        )));
    }
    write(out, &harness::embeddings_csv(&params, &[&ds])?)
}

/// Splits an embeddings CSV into its source and target rows.
fn read_embeddings(path: &Path) -> Result<(Matrix, Matrix), Failure> {
    let bad = |msg: String| Failure::Runtime(format!("{}: {msg}", path.display()));
    let text = fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| bad("empty file".into()))?
        .split(',')
        .collect();
    if header.len() < 4 || header[..3] != ["sample_id", "domain", "label"] {
        return Err(bad("expected header sample_id,domain,label,e0,...".into()));
    }
    let dim = header.len() - 3;
    let (mut source, mut target) = (Vec::new(), Vec::new());
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(bad(format!("row {} has {} fields", n + 1, fields.len())));
        }
        let dest = match fields[1] {
            "source" => &mut source,
            "target" => &mut target,
            other => return Err(bad(format!("row {}: unknown domain {other:?}", n + 1))),
        };
        for f in &fields[3..] {
            dest.push(
                f.parse::<f64>()
                    .map_err(|_| bad(format!("row {}: bad value {f:?}", n + 1)))?,
            );
        }
    }
    let source = Matrix::from_vec(source.len() / dim, dim, source)?;
    let target = Matrix::from_vec(target.len() / dim, dim, target)?;
    Ok((source, target))
}

fn cmd_mmd(path: &Path, estimator: EstimatorArg, bandwidth: Option<f64>) -> CmdResult {
    let (source, target) = read_embeddings(path)?;
    let mut cfg = match bandwidth {
        Some(b) => MmdConfig::single(b),
        None => MmdConfig::default(),
    };
    cfg.estimator = match estimator {
        EstimatorArg::Biased => assocda::Estimator::Biased,
        EstimatorArg::Unbiased => assocda::Estimator::Unbiased,
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let r = assocda::mmd2(&source, &target, &cfg, false)?;
    println!("mmd2 {:?}", r.mmd_squared);
    let bw: Vec<String> = r
        .bandwidths_used
        .iter()
        .map(|b| format!("{b:.6}"))
        .collect();
    println!("bandwidths {}", bw.join(","));
    Ok(())
}

fn cmd_gen_data(config: &Path, overrides: &[String], out: &Path) -> CmdResult {
    let cfg = load_config(config, overrides)?;
    let pair = data::gen_pair(&cfg.pair_spec())?;
    fs::create_dir_all(out)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out.display())))?;
    for (name, ds) in [
        ("source", &pair.source),
        ("target", &pair.target),
        ("source_test", &pair.source_test),
        ("target_test", &pair.target_test),
    ] {
        write(&out.join(format!("{name}.csv")), &ds.to_csv())?;
    }
    Ok(())
}
