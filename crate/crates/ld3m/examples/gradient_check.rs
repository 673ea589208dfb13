//! Finite-difference verification of the tape: every distillation loss in
//! isolation, then the full skip-connected chain end to end.

use ld3m::diagnostics::{fd_check, FdProblem};
use ld3m::diffusion::{sample_chain, ChainOptions, SampleMode};
use ld3m::distill::{loss_dc, loss_dm};
use ld3m::models::{build_mlp_witness, Act, BundleMeta, Mlp, ModelBundle};
use ld3m::schedule::{default_schedule, SigmaPolicy};
use ld3m::RngStream;
use std::rc::Rc;

fn main() -> ld3m::Result<()> {
    let mut rng = RngStream::from_seed(31);
    let s0 = rng.fill_normal(&[4, 2]);
    let real = rng.fill_normal(&[6, 2]);
    let s_labels = vec![0usize, 1, 0, 1];
    let r_labels = vec![0usize, 1, 0, 1, 0, 1];

    let witness = build_mlp_witness(&[2, 2], Act::Tanh, 5);
    let (r, sl, rl) = (real.clone(), s_labels.clone(), r_labels.clone());
    let dc = fd_check(
        &FdProblem {
            inputs: vec![s0.clone()],
            build: Box::new(move |t, l| loss_dc(t, l[0], &sl, &r, &rl, &witness)),
        },
        1e-5,
        1e-4,
    )?;
    println!("gradient matching:      max relative error {:.2e}", dc.max_rel_err);

    let feature_net = build_mlp_witness(&[2, 2], Act::Tanh, 6);
    let (r, sl, rl) = (real, s_labels, r_labels);
    let dm = fd_check(
        &FdProblem {
            inputs: vec![s0],
            build: Box::new(move |t, l| loss_dm(t, l[0], &sl, &r, &rl, &feature_net)),
        },
        1e-5,
        1e-4,
    )?;
    println!("distribution matching:  max relative error {:.2e}", dm.max_rel_err);

    // Full chain through a small smooth stack.
    let mut net_rng = RngStream::from_seed(2024);
    let bundle = Rc::new(ModelBundle::new(
        Mlp::new(&[16, 12, 4], Act::Tanh, &mut net_rng),
        Mlp::new(&[4, 12, 16], Act::Tanh, &mut net_rng),
        Mlp::new(&[4 + 4 + 8, 16, 4], Act::Tanh, &mut net_rng),
        net_rng.fill_normal(&[3, 4]),
        BundleMeta {
            image_dim: 16,
            side: 4,
            num_classes: 3,
            d_latent: 4,
            d_embed: 4,
            gamma_embed_dim: 8,
            recon_mse: 0.0,
            seed: 2024,
        },
    ));
    let schedule = default_schedule(4, SigmaPolicy::Zero);
    let mut in_rng = RngStream::from_seed(11);
    let z0 = in_rng.fill_normal(&[3, 4]);
    let c0 = in_rng.fill_normal(&[3, 4]);
    let target = in_rng.fill_uniform(0.0, 1.0, &[3, 16]);
    let chain = fd_check(
        &FdProblem {
            inputs: vec![z0, c0],
            build: Box::new(move |tape, leaves| {
                let mut chain_rng = RngStream::from_seed(99);
                let out = sample_chain(
                    tape,
                    &mut chain_rng,
                    leaves[0],
                    leaves[1],
                    &bundle,
                    &schedule,
                    &ChainOptions::with_mode(SampleMode::Ld3m),
                )?;
                let t = tape.constant(target.clone());
                tape.mse(out.decoded, t)
            }),
        },
        1e-5,
        1e-4,
    )?;
    println!(
        "full chain (T=4):       max relative error {:.2e} over {} coordinates",
        chain.max_rel_err, chain.coords_checked
    );
    Ok(())
}
