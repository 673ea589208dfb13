//! Pretrain the frozen generative stack on the synthetic corpus: the
//! autoencoder first, then the noise predictor and class embedder, with the
//! reconstruction gate and denoising quality printed at the end.

use ld3m::config::RunConfig;
use ld3m::models::denoising_mse_at;
use std::time::Instant;

fn main() -> ld3m::Result<()> {
    let mut cfg = RunConfig::default().resolve();
    // Desk-size budgets so the example finishes in a few seconds.
    cfg.model.ae_epochs = 30;
    cfg.model.denoiser_epochs = 30;

    let corpus = cfg.build_corpus()?;
    println!(
        "corpus: {} classes, {} train / {} test images of {}x{}",
        corpus.num_classes,
        corpus.train_len(),
        corpus.test_len(),
        corpus.side,
        corpus.side
    );

    let start = Instant::now();
    let bundle = cfg.pretrain_bundle(&corpus)?;
    println!(
        "pretrained in {:?}: reconstruction MSE {:.5} (gate {:.3})",
        start.elapsed(),
        bundle.meta.recon_mse,
        cfg.model.recon_gate
    );

    let schedule = cfg.build_schedule()?;
    for t in [2, 5, 9] {
        let trained = denoising_mse_at(
            Some((&bundle.denoiser, &bundle.class_embed, bundle.meta.gamma_embed_dim)),
            &bundle.encoder,
            &corpus,
            &schedule,
            t,
            cfg.seed(),
        );
        let zero = denoising_mse_at(None, &bundle.encoder, &corpus, &schedule, t, cfg.seed());
        println!("denoising MSE at step {t}: trained {trained:.4} vs zero predictor {zero:.4}");
    }
    Ok(())
}
