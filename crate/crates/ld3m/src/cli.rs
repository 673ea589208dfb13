//! The `ld3m` command-line surface: pretrain, distill, probe, eval, decode,
//! and report subcommands, plus the exit-code contract.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage or configuration error,
//! 3 pretraining gate failure, 4 numeric abort, 5 corrupt input file.

use crate::config::RunConfig;
use crate::diagnostics::{decompose_paths, probe_grad_norms, probe_snr, SNR_WINDOW};
use crate::diffusion::SampleMode;
use crate::distill::{run_distillation, train_experts, Algorithm, ChainModeCfg, DistilledSet};
use crate::error::{Error, Result};
use crate::eval::{
    baseline_init_only, baseline_random_real, compare_conditions, decode_distilled,
    Condition, EvalResult,
};
use crate::io;
use crate::models::{denoising_mse_at, ModelBundle};
use crate::schedule::SigmaPolicy;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::rc::Rc;

const EXIT_CODES_HELP: &str = "EXIT CODES:\n  \
    0  success\n  \
    1  internal error\n  \
    2  usage or configuration error (missing/invalid config)\n  \
    3  pretraining gate failure (reconstruction MSE over threshold)\n  \
    4  numeric abort (non-finite loss or gradients)\n  \
    5  corrupt input file (bad magic, truncated payload, shape mismatch)\n\n\
    The LD3M_SEED environment variable overrides global_seed.";

#[derive(Parser)]
#[command(
    name = "ld3m",
    about = "Latent dataset distillation through a frozen diffusion prior",
    after_help = EXIT_CODES_HELP
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArg {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the corpus and pretrain the frozen model stack.
    Pretrain {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Learn a distilled set through the frozen reverse chain.
    Distill {
        #[command(flatten)]
        config: ConfigArg,
        /// Override the configured iteration count.
        #[arg(long)]
        iterations: Option<usize>,
        /// Override the chain mode: standard | ld3m | no_diffusion.
        #[arg(long)]
        mode: Option<String>,
        /// Reuse identical noise draws every iteration (debugging aid).
        #[arg(long)]
        freeze_noise: bool,
    },
    /// Measure gradient norms across chain lengths and modes.
    Probe {
        #[command(flatten)]
        config: ConfigArg,
        /// Comma-separated chain lengths, e.g. 10,20,30.
        #[arg(long = "t-grid", default_value = "10,20,30,40,50,60,70,80,90")]
        t_grid: String,
        /// Comma-separated modes, e.g. standard,ld3m.
        #[arg(long, default_value = "standard,ld3m")]
        modes: String,
        /// Also emit the per-step skip/chain path decomposition.
        #[arg(long)]
        paths: bool,
        /// Injected-noise policy for the probe chain (default: none).
        #[arg(long, default_value = "zero")]
        sigma_policy: String,
    },
    /// Evaluate distilled-set files against the shared baselines.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        /// Distilled-set files to evaluate (repeatable).
        #[arg(long = "set", required = true)]
        sets: Vec<PathBuf>,
    },
    /// Decode a distilled set into PGM images plus a JSON manifest.
    Decode {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        set: PathBuf,
        /// Output directory for images (default: <output_dir>/decoded).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a finished run: gradient-norm SNR and loss statistics.
    Report {
        #[command(flatten)]
        config: ConfigArg,
        /// Run directory (default: the config's output_dir).
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

/// Map an error to its exit code.
fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Gate { .. } => 3,
        Error::NumericAbort(_) | Error::Degenerate(_) | Error::Replay { .. } | Error::Domain(_) => {
            4
        }
        Error::Corrupt(_) => 5,
        _ => 1,
    }
}

/// Entry point used by the binary and by tests; never calls `process::exit`.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if exit_code(&e) == 2 {
                eprintln!("usage: ld3m <pretrain|distill|probe|eval|decode|report> --config <FILE>");
            }
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Pretrain { config } => cmd_pretrain(&RunConfig::load(&config.config)?),
        Cmd::Distill {
            config,
            iterations,
            mode,
            freeze_noise,
        } => {
            let mut cfg = RunConfig::load(&config.config)?;
            if let Some(n) = iterations {
                cfg.distill.iterations = n;
            }
            if let Some(m) = mode {
                cfg.distill.mode = ChainModeCfg::parse(&m)?;
            }
            if freeze_noise {
                cfg.distill.freeze_noise = true;
            }
            cmd_distill(&cfg)
        }
        Cmd::Probe {
            config,
            t_grid,
            modes,
            paths,
            sigma_policy,
        } => {
            let cfg = RunConfig::load(&config.config)?;
            let grid = parse_grid(&t_grid)?;
            let modes = parse_modes(&modes)?;
            let policy = parse_sigma(&sigma_policy)?;
            cmd_probe(&cfg, &grid, &modes, paths, policy)
        }
        Cmd::Eval { config, sets } => cmd_eval(&RunConfig::load(&config.config)?, &sets),
        Cmd::Decode { config, set, out } => {
            cmd_decode(&RunConfig::load(&config.config)?, &set, out)
        }
        Cmd::Report { config, run } => cmd_report(&RunConfig::load(&config.config)?, run),
    }
}

fn parse_grid(text: &str) -> Result<Vec<usize>> {
    let grid: Vec<usize> = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad chain length '{s}' in --t-grid")))
        })
        .collect::<Result<_>>()?;
    if grid.is_empty() || grid.contains(&0) {
        return Err(Error::Config("--t-grid needs positive chain lengths".into()));
    }
    Ok(grid)
}

fn parse_modes(text: &str) -> Result<Vec<SampleMode>> {
    text.split(',').map(|s| SampleMode::parse(s.trim())).collect()
}

fn parse_sigma(text: &str) -> Result<SigmaPolicy> {
    match text {
        "zero" => Ok(SigmaPolicy::Zero),
        "beta" => Ok(SigmaPolicy::Beta),
        "scaled" => Ok(SigmaPolicy::Scaled),
        other => Err(Error::Config(format!("unknown sigma policy '{other}'"))),
    }
}

// ----- artifact paths within a run directory -----

pub fn bundle_path(dir: &Path) -> PathBuf {
    dir.join("bundle.json")
}

pub fn experts_path(dir: &Path) -> PathBuf {
    dir.join("experts.bin")
}

pub fn set_path(dir: &Path) -> PathBuf {
    dir.join("distilled.ld3m")
}

fn load_bundle(dir: &Path) -> Result<Rc<ModelBundle>> {
    let path = bundle_path(dir);
    let text = std::fs::read_to_string(&path).map_err(|_| {
        Error::Config(format!(
            "bundle not found at {}; run `ld3m pretrain` first",
            path.display()
        ))
    })?;
    let bundle: ModelBundle = serde_json::from_str(&text)
        .map_err(|e| Error::Corrupt(format!("bundle {}: {e}", path.display())))?;
    Ok(Rc::new(bundle))
}

fn echo_config(cfg: &RunConfig, dir: &Path, stage: &str) -> Result<()> {
    io::write_json(&dir.join(format!("config.{stage}.json")), cfg)
}

// ----- subcommands -----

#[derive(Serialize)]
struct GateMetrics {
    recon_mse: f64,
    recon_gate: f64,
    pass: bool,
    denoiser_mse_mid_step: f64,
    zero_predictor_mse_mid_step: f64,
}

/// Corpus generation plus pretraining of the frozen stack; writes the bundle,
/// gate metrics, and (for trajectory matching) the expert buffer.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.output_dir();
    let _lock = io::DirLock::acquire(&dir)?;
    let corpus = cfg.build_corpus()?;
    let schedule = cfg.build_schedule()?;
    let bundle = cfg.pretrain_bundle(&corpus)?;

    let mid = (schedule.steps() / 2).max(1);
    let metrics = GateMetrics {
        recon_mse: bundle.meta.recon_mse,
        recon_gate: cfg.model.recon_gate,
        pass: bundle.meta.recon_mse <= cfg.model.recon_gate,
        denoiser_mse_mid_step: denoising_mse_at(
            Some((&bundle.denoiser, &bundle.class_embed, cfg.model.gamma_embed_dim)),
            &bundle.encoder,
            &corpus,
            &schedule,
            mid,
            cfg.seed(),
        ),
        zero_predictor_mse_mid_step: denoising_mse_at(
            None,
            &bundle.encoder,
            &corpus,
            &schedule,
            mid,
            cfg.seed(),
        ),
    };
    io::write_json(&dir.join("gate_metrics.json"), &metrics)?;
    let bundle_json = serde_json::to_string(&bundle)?;
    io::atomic_write(&bundle_path(&dir), bundle_json.as_bytes())?;
    echo_config(cfg, &dir, "pretrain")?;

    if cfg.distill.algorithm == Algorithm::Mtt {
        let buffer = train_experts(
            &corpus,
            cfg.distill.witness_arch,
            cfg.experts.num_experts,
            cfg.experts.epochs,
            cfg.experts.lr,
            cfg.experts.batch,
            cfg.seed(),
        )?;
        io::save_experts(&experts_path(&dir), &buffer)?;
    }

    if !metrics.pass {
        return Err(Error::Gate {
            metric: "recon_mse",
            value: metrics.recon_mse,
            threshold: cfg.model.recon_gate,
        });
    }
    println!(
        "pretrained: recon_mse {:.5} (gate {:.5}), denoiser mse {:.4} vs zero {:.4}",
        metrics.recon_mse,
        metrics.recon_gate,
        metrics.denoiser_mse_mid_step,
        metrics.zero_predictor_mse_mid_step
    );
    Ok(())
}

/// One distillation run; writes the set file, loss curve, and timing CSV.
pub fn cmd_distill(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.output_dir();
    let bundle = load_bundle(&dir)?;
    let _lock = io::DirLock::acquire(&dir)?;
    let corpus = cfg.build_corpus()?;
    let schedule = cfg.build_schedule()?;
    let experts = if cfg.distill.algorithm == Algorithm::Mtt {
        Some(io::load_experts(&experts_path(&dir))?)
    } else {
        None
    };
    echo_config(cfg, &dir, "distill")?;

    let run = match run_distillation(
        &cfg.distill,
        &corpus,
        &bundle,
        &schedule,
        experts.as_ref(),
        cfg.model.recon_gate,
    ) {
        Ok(run) => run,
        Err(e @ Error::NumericAbort(_)) => {
            let dump = dir.join("dump.json");
            io::write_json(
                &dump,
                &serde_json::json!({
                    "error": e.to_string(),
                    "algorithm": cfg.distill.algorithm.id(),
                    "mode": cfg.distill.mode.id(),
                    "seed": cfg.seed(),
                }),
            )?;
            eprintln!("diagnostics dump: {}", dump.display());
            return Err(e);
        }
        Err(e) => return Err(e),
    };

    let meta = io::SetMeta {
        seed: cfg.seed(),
        mode: cfg.distill.mode.id().into(),
        t: schedule.steps(),
        algorithm: cfg.distill.algorithm.id().into(),
        iterations: cfg.distill.iterations,
        ipc: cfg.distill.ipc,
        num_classes: run.set.num_classes,
        d_latent: run.set.z.cols(),
        d_embed: run.set.c.cols(),
        num_samples: run.set.num_samples(),
        denoiser_calls: run.denoiser_calls,
    };
    io::save_set(&set_path(&dir), &run.set, &meta)?;
    io::atomic_write(&dir.join("loss.csv"), io::loss_csv(&run.curve).as_bytes())?;
    io::atomic_write(&dir.join("timing.csv"), io::timing_csv(&run.curve).as_bytes())?;
    println!(
        "distilled {} samples over {} iterations ({} mode); final loss {:.6}",
        run.set.num_samples(),
        cfg.distill.iterations,
        cfg.distill.mode.id(),
        run.curve.last().map_or(f64::NAN, |s| s.loss)
    );
    Ok(())
}

/// Gradient-norm probe over a grid of chain lengths and modes.
pub fn cmd_probe(
    cfg: &RunConfig,
    t_grid: &[usize],
    modes: &[SampleMode],
    paths: bool,
    policy: SigmaPolicy,
) -> Result<()> {
    let dir = cfg.output_dir();
    let bundle = load_bundle(&dir)?;
    let _lock = io::DirLock::acquire(&dir)?;
    let report = probe_grad_norms(
        &bundle,
        cfg.schedule_family(policy),
        t_grid,
        modes,
        cfg.seed(),
    )?;
    io::atomic_write(&dir.join("probe.csv"), io::probe_csv(&report).as_bytes())?;
    io::write_json(
        &dir.join("probe.json"),
        &serde_json::json!({
            "seed": report.seed,
            "rows": report.rows,
            "config": {
                "t_grid": t_grid,
                "modes": modes.iter().map(|m| m.id()).collect::<Vec<_>>(),
                "sigma_policy": policy,
                "beta_start": cfg.schedule.beta_start,
                "beta_end": cfg.schedule.beta_end,
            },
        }),
    )?;
    for row in &report.rows {
        println!(
            "T={:<3} {:<8} |dL/dZ| = {:.6e}",
            row.t_max,
            row.mode.id(),
            row.grad_norm_z
        );
    }
    if paths {
        let schedule = cfg.schedule_family(policy)(cfg.schedule.t);
        let decomposition = decompose_paths(&bundle, &schedule, cfg.seed())?;
        io::atomic_write(&dir.join("paths.csv"), io::paths_csv(&decomposition).as_bytes())?;
        io::write_json(&dir.join("paths.json"), &decomposition)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalArtifact {
    conditions: Vec<(String, io::SetMeta, EvalResult)>,
    baseline_random_real: EvalResult,
    baseline_init_only: EvalResult,
    reference_diffusion_gain_points: f64,
}

fn condition_label(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Evaluate distilled-set files plus the shared baselines.
pub fn cmd_eval(cfg: &RunConfig, sets: &[PathBuf]) -> Result<()> {
    let dir = cfg.output_dir();
    let bundle = load_bundle(&dir)?;
    let _lock = io::DirLock::acquire(&dir)?;
    let corpus = cfg.build_corpus()?;
    let schedule = cfg.build_schedule()?;

    let mut loaded: Vec<(String, DistilledSet, io::SetMeta)> = Vec::new();
    for path in sets {
        let (ds, meta) = io::load_set(path)?;
        if ds.z.cols() != bundle.meta.d_latent
            || ds.c.cols() != bundle.meta.d_embed
            || ds.num_classes != corpus.num_classes
        {
            return Err(Error::Corrupt(format!(
                "{}: set dimensions do not match the bundle",
                path.display()
            )));
        }
        loaded.push((condition_label(path), ds, meta));
    }

    let conditions: Vec<Condition<'_>> = loaded
        .iter()
        .map(|(label, ds, meta)| {
            Ok(Condition {
                label: label.clone(),
                set: ds,
                mode: ChainModeCfg::parse(&meta.mode)?,
            })
        })
        .collect::<Result<_>>()?;
    let table = compare_conditions(
        &conditions,
        &bundle,
        &schedule,
        cfg.distill.noise_coef,
        &corpus,
        &cfg.eval,
    )?;

    let ipc = loaded.first().map_or(cfg.distill.ipc, |(_, ds, _)| ds.ipc);
    let random_real = baseline_random_real(&corpus, ipc, &cfg.eval)?;
    let init_only = baseline_init_only(
        &corpus,
        &bundle,
        &schedule,
        cfg.distill.mode,
        cfg.distill.noise_coef,
        ipc,
        cfg.seed(),
        &cfg.eval,
    )?;

    let mut csv = String::from("condition,arch,mean,std,num_seeds\n");
    for row in &table.rows {
        csv.push_str(io::eval_csv(&row.label, &row.result).lines().skip(1).map(|l| format!("{l}\n")).collect::<String>().as_str());
    }
    csv.push_str(
        io::eval_csv("baseline_random_real", &random_real)
            .lines()
            .skip(1)
            .map(|l| format!("{l}\n"))
            .collect::<String>()
            .as_str(),
    );
    csv.push_str(
        io::eval_csv("baseline_init_only", &init_only)
            .lines()
            .skip(1)
            .map(|l| format!("{l}\n"))
            .collect::<String>()
            .as_str(),
    );
    io::atomic_write(&dir.join("eval.csv"), csv.as_bytes())?;
    io::atomic_write(&dir.join("comparison.csv"), io::comparison_csv(&table).as_bytes())?;
    io::atomic_write(
        &dir.join("comparison_detail.csv"),
        io::comparison_detail_csv(&table).as_bytes(),
    )?;

    let artifact = EvalArtifact {
        conditions: loaded
            .iter()
            .zip(&table.rows)
            .map(|((label, _, meta), row)| (label.clone(), meta.clone(), row.result.clone()))
            .collect(),
        baseline_random_real: random_real,
        baseline_init_only: init_only,
        reference_diffusion_gain_points: table.reference_diffusion_gain_points,
    };
    io::write_json(&dir.join("eval.json"), &artifact)?;
    for row in &table.rows {
        println!(
            "{:<24} mean acc {:.4} (delta {:+.4})",
            row.label, row.result.mean_over_archs, row.delta_vs_first
        );
    }
    println!(
        "{:<24} mean acc {:.4}",
        "baseline_init_only", artifact.baseline_init_only.mean_over_archs
    );
    Ok(())
}

/// Decode every synthetic sample to a PGM image plus a manifest.
pub fn cmd_decode(cfg: &RunConfig, set: &Path, out: Option<PathBuf>) -> Result<()> {
    let dir = cfg.output_dir();
    let bundle = load_bundle(&dir)?;
    let (ds, meta) = io::load_set(set)?;
    let schedule = cfg.build_schedule()?;
    let mode = ChainModeCfg::parse(&meta.mode)?;
    let images = decode_distilled(
        &ds,
        &bundle,
        &schedule,
        mode,
        cfg.distill.noise_coef,
        meta.seed,
    )?;
    let out_dir = out.unwrap_or_else(|| dir.join("decoded"));
    std::fs::create_dir_all(&out_dir)?;
    let side = bundle.meta.side;
    let mut files = Vec::with_capacity(ds.num_samples());
    for i in 0..ds.num_samples() {
        let name = format!("sample_{i:03}_class{}.pgm", ds.labels[i]);
        io::save_pgm(&out_dir.join(&name), side, images.row(i))?;
        files.push(name);
    }
    io::write_json(
        &out_dir.join("manifest.json"),
        &serde_json::json!({
            "files": files,
            "labels": ds.labels,
            "side": side,
            "mode": meta.mode,
            "t": meta.t,
            "algorithm": meta.algorithm,
            "iterations": meta.iterations,
        }),
    )?;
    println!("decoded {} images into {}", ds.num_samples(), out_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct RunSummary {
    iterations: usize,
    final_loss: f64,
    mean_loss_last_tenth: f64,
    snr_window: usize,
    mean_snr: Option<f64>,
}

/// Summarize a finished distillation run from its loss curve.
pub fn cmd_report(cfg: &RunConfig, run: Option<PathBuf>) -> Result<()> {
    let dir = run.unwrap_or_else(|| cfg.output_dir());
    let loss_path = dir.join("loss.csv");
    let text = std::fs::read_to_string(&loss_path).map_err(|_| {
        Error::Config(format!(
            "loss curve not found at {}; run `ld3m distill` first",
            loss_path.display()
        ))
    })?;
    let mut losses = Vec::new();
    let mut grad_norms = Vec::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(Error::Corrupt(format!("malformed loss.csv line: {line}")));
        }
        losses.push(
            cols[1]
                .parse::<f64>()
                .map_err(|_| Error::Corrupt("bad loss value".into()))?,
        );
        grad_norms.push(
            cols[2]
                .parse::<f64>()
                .map_err(|_| Error::Corrupt("bad gradient norm".into()))?,
        );
    }
    if grad_norms.len() < 2 {
        return Err(Error::Config(
            "loss curve too short for a report (need at least 2 iterations)".into(),
        ));
    }
    let window = SNR_WINDOW.min(grad_norms.len());
    let report = probe_snr(&grad_norms, window)?;
    io::atomic_write(&dir.join("snr.csv"), io::snr_csv(&report).as_bytes())?;

    let tail = (losses.len() / 10).max(1);
    let summary = RunSummary {
        iterations: losses.len(),
        final_loss: *losses.last().unwrap(),
        mean_loss_last_tenth: losses[losses.len() - tail..].iter().sum::<f64>() / tail as f64,
        snr_window: window,
        mean_snr: report.mean_snr(),
    };
    io::write_json(&dir.join("report.json"), &summary)?;
    println!(
        "report: {} iterations, final loss {:.6}, mean SNR {}",
        summary.iterations,
        summary.final_loss,
        summary
            .mean_snr
            .map_or("undefined".into(), |v| format!("{v:.3}"))
    );
    Ok(())
}
