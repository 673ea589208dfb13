//! Compare peak retained activation storage with and without per-step
//! checkpointing of the reverse chain, and verify the gradients agree.

use ld3m::config::RunConfig;
use ld3m::diffusion::{sample_chain, ChainOptions, SampleMode};
use ld3m::schedule::SigmaPolicy;
use ld3m::{RngStream, Tape};
use std::rc::Rc;

fn main() -> ld3m::Result<()> {
    let mut cfg = RunConfig::default().resolve();
    cfg.model.ae_epochs = 20;
    cfg.model.denoiser_epochs = 20;
    let corpus = cfg.build_corpus()?;
    let bundle = Rc::new(cfg.pretrain_bundle(&corpus)?);

    for t_max in [10usize, 30] {
        let schedule = cfg.schedule_family(SigmaPolicy::Scaled)(t_max);
        let run = |checkpoint: bool| -> ld3m::Result<(f64, usize)> {
            let mut tape = Tape::new();
            let mut rng = RngStream::from_seed(7);
            let mut init = RngStream::from_seed(11);
            let z = tape.leaf(init.fill_normal(&[4, 16]), true);
            let c = tape.leaf(init.fill_normal(&[4, 8]), true);
            let opts = ChainOptions {
                mode: SampleMode::Ld3m,
                checkpoint,
                ..Default::default()
            };
            let out = sample_chain(&mut tape, &mut rng, z, c, &bundle, &schedule, &opts)?;
            let target = tape.constant(init.fill_uniform(0.0, 1.0, &[4, 144]));
            let loss = tape.mse(out.decoded, target)?;
            tape.backward(loss)?;
            Ok((tape.grad(z).unwrap().l2_norm(), tape.stats().peak()))
        };
        let (g_plain, peak_plain) = run(false)?;
        let (g_ck, peak_ck) = run(true)?;
        println!(
            "T={t_max:>2}: peak activations {peak_plain:>8} plain vs {peak_ck:>7} checkpointed \
             ({:.1}x less), |dL/dZ| {g_plain:.6e} vs {g_ck:.6e}",
            peak_plain as f64 / peak_ck as f64
        );
    }
    Ok(())
}
