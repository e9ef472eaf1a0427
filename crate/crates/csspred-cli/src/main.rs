//! Command-line driver for the sparsity-predictor simulator.
//!
//! Every run is controlled by a TOML config plus a few overrides; all
//! artifacts land in the output directory with deterministic bytes, so
//! identical configs and seeds produce identical files.
//!
//! Exit codes: 0 success, 2 configuration error, 3 tuning found no
//! schedule within the error budget, 1 any other runtime failure.

mod config;

use clap::{Parser, Subcommand};
use config::{ConfigFile, WorkloadSource};
use csspred::costmodel::compare_reports;
use csspred::harness::{
    compare_csv, gen_workload, run_compare, run_predict, run_sweep, run_tune, sweep_csv,
    workload_from_tensors, Workload, WorkloadSpec,
};
use csspred::io::{read_quant8, write_lotensor, write_mask_text, write_quant8};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "csspred", version, about = "Cross-stage attention sparsity simulator")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the workload seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for output artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic workload and save its tensors.
    GenWorkload,
    /// Predict masks, execute sparse attention, save metrics and costs.
    Predict,
    /// Run the predictor and baselines at matched density.
    Compare,
    /// Evaluate a list of threshold schedules.
    Sweep,
    /// Search the schedule grid under an error budget.
    Tune,
    /// Summarize cost artifacts from a previous predict run.
    Report,
}

enum CliError {
    Config(String),
    Infeasible(String),
    Runtime(String),
}

impl From<csspred::Error> for CliError {
    fn from(e: csspred::Error) -> Self {
        match e {
            csspred::Error::InvalidConfig(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        // A second build_global in the same process is harmless; the pool
        // from the first call stays in effect.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Infeasible(m)) => {
            eprintln!("tune infeasible: {m}");
            ExitCode::from(3)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<ConfigFile, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config <file> is required".into()))?;
    ConfigFile::load(path).map_err(CliError::Config)
}

fn ensure_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

fn read_tensor_file(path: &Path) -> Result<csspred::qtensor::QuantTensor8, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::Config(format!("cannot open {}: {e}", path.display())))?;
    read_quant8(&mut BufReader::new(file))
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Build the workload from the configured source. Tensor-file workloads
/// use the same directory layout gen-workload writes.
fn load_workload(cfg: &ConfigFile, spec: &WorkloadSpec) -> Result<Workload, CliError> {
    match cfg.workload_source().map_err(CliError::Config)? {
        WorkloadSource::GaussianSynthetic => Ok(gen_workload(spec)?),
        WorkloadSource::TensorFiles(dir) => {
            let x = read_tensor_file(&dir.join("x.qt8"))?;
            let mut weights = Vec::with_capacity(spec.heads);
            for i in 0..spec.heads {
                let wq = read_tensor_file(&dir.join(format!("head{i}.wq.qt8")))?;
                let wk = read_tensor_file(&dir.join(format!("head{i}.wk.qt8")))?;
                let wv = read_tensor_file(&dir.join(format!("head{i}.wv.qt8")))?;
                weights.push((wq, wk, wv));
            }
            workload_from_tensors(spec, x, weights)
                .map_err(|e| CliError::Config(format!("workload tensors: {e}")))
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::GenWorkload => cmd_gen_workload(cli),
        Cmd::Predict => cmd_predict(cli),
        Cmd::Compare => cmd_compare(cli),
        Cmd::Sweep => cmd_sweep(cli),
        Cmd::Tune => cmd_tune(cli),
        Cmd::Report => cmd_report(cli),
    }
}

fn cmd_gen_workload(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let spec = cfg.require_workload(cli.seed).map_err(CliError::Config)?;
    if cfg.workload_source().map_err(CliError::Config)? != WorkloadSource::GaussianSynthetic {
        return Err(CliError::Config(
            "gen-workload only generates; set workload.source = \"gaussian-synthetic\"".into(),
        ));
    }
    let w = gen_workload(&spec)?;
    ensure_out(&cli.out)?;

    let mut buf = Vec::new();
    write_quant8(&mut buf, &w.x)?;
    write_bytes(&cli.out.join("x.qt8"), &buf)?;
    for (i, head) in w.heads.iter().enumerate() {
        for (name, tensor) in [("wq", &head.wq), ("wk", &head.wk), ("wv", &head.wv)] {
            let mut buf = Vec::new();
            write_quant8(&mut buf, tensor)?;
            write_bytes(&cli.out.join(format!("head{i}.{name}.qt8")), &buf)?;
        }
        for (name, codes) in [("wq", &head.wq_codes), ("wk", &head.wk_codes)] {
            let mut buf = Vec::new();
            write_lotensor(&mut buf, codes)?;
            write_bytes(&cli.out.join(format!("head{i}.{name}.lo1")), &buf)?;
        }
    }
    let spec_json = serde_json::to_string_pretty(&spec).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_bytes(&cli.out.join("workload.json"), spec_json.as_bytes())?;
    println!(
        "gen-workload: seq_len {} model_dim {} heads {} seed {} -> {}",
        spec.seq_len,
        spec.model_dim,
        spec.heads,
        spec.seed,
        cli.out.display()
    );
    Ok(())
}

fn cmd_predict(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let spec = cfg.require_workload(cli.seed).map_err(CliError::Config)?;
    let css = cfg.css_config();
    let weights = cfg.cost_weights();
    let w = load_workload(&cfg, &spec)?;
    let out = run_predict(&w, &css, &weights)?;
    ensure_out(&cli.out)?;

    for (i, run) in out.head_runs.iter().enumerate() {
        let mut buf = Vec::new();
        write_mask_text(&mut buf, &run.prediction.mask)?;
        write_bytes(&cli.out.join(format!("mask_head{i}.txt")), &buf)?;
    }
    let metrics = serde_json::json!({
        "pruning_ratio": out.metrics.pruning_ratio,
        "kv_coverage": out.metrics.kv_coverage,
        "recall": out.metrics.recall,
        "rel_error": out.metrics.rel_error,
        "cost_reduction_pct": out.cost_reduction_pct,
    });
    write_bytes(
        &cli.out.join("metrics.json"),
        serde_json::to_string_pretty(&metrics)
            .map_err(|e| CliError::Runtime(e.to_string()))?
            .as_bytes(),
    )?;
    write_bytes(&cli.out.join("cost_css.csv"), out.cost.to_csv().as_bytes())?;
    write_bytes(&cli.out.join("cost_dense.csv"), out.cost_dense.to_csv().as_bytes())?;
    let summary = serde_json::json!({
        "css": out.cost.summary_json(),
        "dense": out.cost_dense.summary_json(),
        "reduction": compare_reports(&out.cost, &out.cost_dense),
    });
    write_bytes(
        &cli.out.join("summary.json"),
        serde_json::to_string_pretty(&summary)
            .map_err(|e| CliError::Runtime(e.to_string()))?
            .as_bytes(),
    )?;
    println!(
        "predict: density {:.4} recall {:.4} rel_error {:.6} cost_reduction {:.2}%",
        out.density, out.metrics.recall, out.metrics.rel_error, out.cost_reduction_pct
    );
    Ok(())
}

fn cmd_compare(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let spec = cfg.require_workload(cli.seed).map_err(CliError::Config)?;
    let kinds = cfg.predictors().map_err(CliError::Config)?;
    let css = cfg.css_config();
    let weights = cfg.cost_weights();
    let w = load_workload(&cfg, &spec)?;
    let out = run_compare(&w, &css, &weights, &kinds)?;
    ensure_out(&cli.out)?;
    write_bytes(&cli.out.join("compare.csv"), compare_csv(&out).as_bytes())?;
    let rows_json = serde_json::json!({
        "dense_units": out.dense_units,
        "dense_mem_bits": out.dense_mem_bits,
        "rows": out.rows,
    });
    write_bytes(
        &cli.out.join("compare.json"),
        serde_json::to_string_pretty(&rows_json)
            .map_err(|e| CliError::Runtime(e.to_string()))?
            .as_bytes(),
    )?;
    for r in &out.rows {
        println!(
            "compare: {:>12} density {:.4} recall {:.4} rel_error {:.6} total_units {:.0} reduction {:.2}%",
            r.predictor, r.density, r.metrics.recall, r.metrics.rel_error, r.total_units,
            r.cost_reduction_pct
        );
    }
    Ok(())
}

fn cmd_sweep(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let spec = cfg.require_workload(cli.seed).map_err(CliError::Config)?;
    let css = cfg.css_config();
    // No [sweep] section: enumerate the whole tuning grid.
    let schedules = match cfg.sweep.as_ref() {
        Some(s) => s.etas.clone(),
        None => csspred::tune::grid_candidates(css.rounds)
            .map_err(|e| CliError::Config(e.to_string()))?,
    };
    if schedules.is_empty() {
        return Err(CliError::Config("sweep.etas must list at least one schedule".into()));
    }
    let weights = cfg.cost_weights();
    let w = load_workload(&cfg, &spec)?;
    let rows = run_sweep(&w, &css, &weights, &schedules)?;
    ensure_out(&cli.out)?;
    write_bytes(&cli.out.join("sweep.csv"), sweep_csv(&rows).as_bytes())?;
    println!("sweep: {} schedules -> {}", rows.len(), cli.out.join("sweep.csv").display());
    Ok(())
}

fn cmd_tune(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let spec = cfg.require_workload(cli.seed).map_err(CliError::Config)?;
    if cfg.workload_source().map_err(CliError::Config)? != WorkloadSource::GaussianSynthetic {
        return Err(CliError::Config(
            "tune regenerates its workload ladder per rung and needs \
             workload.source = \"gaussian-synthetic\""
                .into(),
        ));
    }
    let budget = cfg
        .tune
        .as_ref()
        .map(|t| t.to_budget())
        .unwrap_or_else(|| Ok(csspred::tune::TuneBudget::conservative()))
        .map_err(CliError::Config)?;
    let css = cfg.css_config();
    let weights = cfg.cost_weights();
    let out = run_tune(&spec, &css, &weights, &budget)?;
    ensure_out(&cli.out)?;
    write_bytes(
        &cli.out.join("tune.json"),
        serde_json::to_string_pretty(&out)
            .map_err(|e| CliError::Runtime(e.to_string()))?
            .as_bytes(),
    )?;
    println!(
        "tune: chosen {:?} rel_error {:.6} cost_reduction {:.2}% feasible {} (referee agrees: {})",
        out.search.chosen,
        out.search.rel_error,
        out.search.cost_reduction_pct,
        out.search.feasible,
        out.agree
    );
    if !out.search.feasible {
        return Err(CliError::Infeasible(format!(
            "no schedule met rel_error <= {}; best was {:?} at {:.6}",
            out.max_rel_error, out.search.chosen, out.search.rel_error
        )));
    }
    Ok(())
}

fn cmd_report(cli: &Cli) -> Result<(), CliError> {
    // Report works from artifacts alone; config (if given) only supplies
    // the cost weights used to re-derive units.
    let weights = match &cli.config {
        Some(_) => load_config(cli)?.cost_weights(),
        None => Default::default(),
    };
    let css_path = cli.out.join("cost_css.csv");
    let dense_path = cli.out.join("cost_dense.csv");
    let css_text = std::fs::read_to_string(&css_path).map_err(|e| {
        CliError::Runtime(format!("cannot read {} (run predict first): {e}", css_path.display()))
    })?;
    let dense_text = std::fs::read_to_string(&dense_path).map_err(|e| {
        CliError::Runtime(format!("cannot read {}: {e}", dense_path.display()))
    })?;
    let css = csspred::costmodel::CostReport::from_csv(&css_text, weights.clone())?;
    let dense = csspred::costmodel::CostReport::from_csv(&dense_text, weights)?;
    let reduction = compare_reports(&css, &dense);
    println!("report for {}", cli.out.display());
    for stage in csspred::costmodel::Stage::ALL {
        println!(
            "  {:<12} {:>16.0} units  {:>14} mem bits",
            stage.name(),
            css.stage_weighted(stage),
            css.mem_bits_in(stage)
        );
    }
    println!("  dense total  {:>16.0} units  {:>14} mem bits", dense.total_weighted(), dense.mem_bits_total());
    println!("  {reduction}");
    if let Ok(text) = std::fs::read_to_string(cli.out.join("metrics.json")) {
        println!("  metrics: {}", text.trim().replace('\n', " "));
    }
    Ok(())
}
