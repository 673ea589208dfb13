//! Decode a freshly initialized distilled set into PGM images, using both
//! the plain autoencoder path and the skip-connected chain.

use ld3m::config::RunConfig;
use ld3m::diffusion::NoiseCoef;
use ld3m::distill::{init_distilled, ChainModeCfg, InitSource};
use ld3m::eval::decode_distilled;
use ld3m::io::save_pgm;
use ld3m::schedule::SigmaPolicy;
use std::rc::Rc;

fn main() -> ld3m::Result<()> {
    let mut cfg = RunConfig::default().resolve();
    cfg.model.ae_epochs = 30;
    cfg.model.denoiser_epochs = 30;
    let corpus = cfg.build_corpus()?;
    let bundle = Rc::new(cfg.pretrain_bundle(&corpus)?);
    let schedule = cfg.schedule_family(SigmaPolicy::Scaled)(10);

    let ds = init_distilled(&corpus, &bundle, 2, InitSource::RealImages, cfg.seed())?;
    let out = std::path::Path::new("target/ld3m-examples/decoded");
    std::fs::create_dir_all(out)?;
    for (label, mode) in [
        ("ae", ChainModeCfg::NoDiffusion),
        ("chain", ChainModeCfg::Ld3m),
    ] {
        let images = decode_distilled(&ds, &bundle, &schedule, mode, NoiseCoef::Variance, 7)?;
        for i in 0..ds.num_samples() {
            let name = format!("{label}_sample{i}_class{}.pgm", ds.labels[i]);
            save_pgm(&out.join(name), corpus.side, images.row(i))?;
        }
    }
    println!(
        "wrote {} PGM images to {}",
        2 * ds.num_samples(),
        out.display()
    );
    Ok(())
}
