//! Short gradient-matching distillation run through the skip-connected
//! chain, evaluated against the zero-iteration baseline.

use ld3m::config::RunConfig;
use ld3m::diffusion::NoiseCoef;
use ld3m::distill::{run_distillation, Algorithm, ChainModeCfg, DistillConfig};
use ld3m::eval::{baseline_init_only, evaluate_distilled, EvalProtocol};
use ld3m::models::WitnessArch;
use ld3m::schedule::SigmaPolicy;
use std::rc::Rc;
use std::time::Instant;

fn main() -> ld3m::Result<()> {
    let cfg = RunConfig::default().resolve();
    let corpus = cfg.build_corpus()?;
    println!("pretraining the frozen stack...");
    let bundle = Rc::new(cfg.pretrain_bundle(&corpus)?);
    let schedule = cfg.schedule_family(SigmaPolicy::Scaled)(10);

    let dcfg = DistillConfig {
        algorithm: Algorithm::Dc,
        mode: ChainModeCfg::Ld3m,
        lr_latent: Some(0.5),
        iterations: 200,
        seed: cfg.seed(),
        ..Default::default()
    };
    println!("distilling {} iterations of gradient matching...", dcfg.iterations);
    let start = Instant::now();
    let run = run_distillation(&dcfg, &corpus, &bundle, &schedule, None, cfg.model.recon_gate)?;
    println!(
        "distilled in {:?}; loss {:.4} -> {:.4}",
        start.elapsed(),
        run.curve.first().map_or(f64::NAN, |s| s.loss),
        run.curve.last().map_or(f64::NAN, |s| s.loss),
    );

    let protocol = EvalProtocol {
        archs: vec![WitnessArch::MlpS, WitnessArch::MixerS],
        num_seeds: 3,
        ..Default::default()
    };
    let baseline = baseline_init_only(
        &corpus,
        &bundle,
        &schedule,
        ChainModeCfg::Ld3m,
        NoiseCoef::Variance,
        dcfg.ipc,
        cfg.seed(),
        &protocol,
    )?;
    let distilled = evaluate_distilled(
        &run.set,
        &bundle,
        &schedule,
        ChainModeCfg::Ld3m,
        NoiseCoef::Variance,
        &corpus,
        &protocol,
    )?;
    println!("\n{:<14} {:>10} {:>10}", "architecture", "baseline", "distilled");
    for (b, d) in baseline.rows.iter().zip(&distilled.rows) {
        println!("{:<14} {:>10.4} {:>10.4}", b.arch.id(), b.mean, d.mean);
    }
    println!(
        "{:<14} {:>10.4} {:>10.4}  ({:+.1} accuracy points)",
        "mean",
        baseline.mean_over_archs,
        distilled.mean_over_archs,
        100.0 * (distilled.mean_over_archs - baseline.mean_over_archs)
    );
    Ok(())
}
