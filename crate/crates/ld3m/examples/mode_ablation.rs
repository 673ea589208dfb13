//! Ablation of the synthesis channel: distill briefly with no diffusion at
//! all, with the standard reverse process, and with the skip-connected one,
//! then evaluate all three under one protocol.

use ld3m::config::RunConfig;
use ld3m::diffusion::NoiseCoef;
use ld3m::distill::{run_distillation, Algorithm, ChainModeCfg, DistillConfig};
use ld3m::eval::{compare_conditions, Condition, EvalProtocol};
use ld3m::models::WitnessArch;
use ld3m::schedule::SigmaPolicy;
use std::rc::Rc;

fn main() -> ld3m::Result<()> {
    let cfg = RunConfig::default().resolve();
    let corpus = cfg.build_corpus()?;
    println!("pretraining the frozen stack...");
    let bundle = Rc::new(cfg.pretrain_bundle(&corpus)?);
    let schedule = cfg.schedule_family(SigmaPolicy::Scaled)(10);

    let distill_with = |mode: ChainModeCfg| -> ld3m::Result<_> {
        let dcfg = DistillConfig {
            algorithm: Algorithm::Dc,
            mode,
            lr_latent: Some(0.5),
            iterations: 150,
            seed: cfg.seed(),
            ..Default::default()
        };
        Ok(run_distillation(&dcfg, &corpus, &bundle, &schedule, None, cfg.model.recon_gate)?.set)
    };
    println!("distilling under each mode...");
    let no_diff = distill_with(ChainModeCfg::NoDiffusion)?;
    let standard = distill_with(ChainModeCfg::Standard)?;
    let skip = distill_with(ChainModeCfg::Ld3m)?;

    let conditions = vec![
        Condition { label: "no_diffusion".into(), set: &no_diff, mode: ChainModeCfg::NoDiffusion },
        Condition { label: "standard".into(), set: &standard, mode: ChainModeCfg::Standard },
        Condition { label: "ld3m".into(), set: &skip, mode: ChainModeCfg::Ld3m },
    ];
    let protocol = EvalProtocol {
        archs: vec![WitnessArch::MlpS, WitnessArch::MlpD],
        num_seeds: 3,
        ..Default::default()
    };
    let table = compare_conditions(
        &conditions,
        &bundle,
        &schedule,
        NoiseCoef::Variance,
        &corpus,
        &protocol,
    )?;
    println!("\n{:<14} {:>10} {:>8}", "condition", "mean acc", "delta");
    for row in &table.rows {
        println!(
            "{:<14} {:>10.4} {:>+8.4}",
            row.label, row.result.mean_over_archs, row.delta_vs_first
        );
    }
    println!(
        "(reference full-scale gain of diffusion over autoencoder-only: {:.1} points)",
        table.reference_diffusion_gain_points
    );
    Ok(())
}
