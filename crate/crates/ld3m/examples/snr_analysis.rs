//! Stability of the optimization signal: rolling signal-to-noise ratio of
//! the gradient norms across distillation iterations, standard versus
//! skip-connected reverse process.

use ld3m::config::RunConfig;
use ld3m::diagnostics::probe_snr;
use ld3m::distill::{run_distillation, Algorithm, ChainModeCfg, DistillConfig};
use ld3m::schedule::SigmaPolicy;
use std::rc::Rc;

fn main() -> ld3m::Result<()> {
    let cfg = RunConfig::default().resolve();
    let corpus = cfg.build_corpus()?;
    println!("pretraining the frozen stack...");
    let bundle = Rc::new(cfg.pretrain_bundle(&corpus)?);
    let schedule = cfg.schedule_family(SigmaPolicy::Scaled)(30);

    for mode in [ChainModeCfg::Standard, ChainModeCfg::Ld3m] {
        let dcfg = DistillConfig {
            algorithm: Algorithm::Dc,
            mode,
            lr_latent: Some(0.5),
            iterations: 80,
            batch_real: 128,
            seed: cfg.seed(),
            ..Default::default()
        };
        let run = run_distillation(&dcfg, &corpus, &bundle, &schedule, None, cfg.model.recon_gate)?;
        let norms: Vec<f64> = run.curve.iter().map(|s| s.grad_norm_z).collect();
        let report = probe_snr(&norms, 25)?;
        println!(
            "{:<10} mean |dL/dZ| {:.3e}, rolling SNR {}",
            mode.id(),
            norms.iter().sum::<f64>() / norms.len() as f64,
            report
                .mean_snr()
                .map_or("undefined".into(), |v| format!("{v:.2}")),
        );
    }
    println!("(higher SNR = steadier gradient signal across iterations)");
    Ok(())
}
