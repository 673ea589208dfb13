//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured values (failures panic with the same context). Run with
//! `cargo test --test acceptance -- --nocapture` to see the lines.

use ld3m::config::RunConfig;
use ld3m::corpus::ToyCorpus;
use ld3m::diagnostics::{fd_check, probe_grad_norms, probe_snr, FdProblem};
use ld3m::diffusion::{
    reverse_step_ld3m, sample_chain, ChainOptions, ChainState, NoiseCoef, SampleMode,
};
use ld3m::distill::{
    loss_dc, loss_dm, loss_mtt_with_template, run_distillation, Algorithm, ChainModeCfg,
    DistillConfig, DistilledSet, ExpertBuffer,
};
use ld3m::error::Result;
use ld3m::eval::{
    baseline_init_only, compare_conditions, evaluate_distilled, Condition, EvalProtocol,
};
use ld3m::models::{build_mlp_witness, Act, ModelBundle, WitnessArch};
use ld3m::schedule::{default_schedule, SigmaPolicy};
use ld3m::{DiffArray, RngStream, Tape};
use std::rc::Rc;
use std::sync::OnceLock;
use std::time::Instant;

// ----- shared fixtures (built once, thread-safe storage) -----

fn default_config() -> RunConfig {
    RunConfig::default().resolve()
}

fn corpus() -> &'static ToyCorpus {
    static CORPUS: OnceLock<ToyCorpus> = OnceLock::new();
    CORPUS.get_or_init(|| default_config().build_corpus().expect("default corpus"))
}

fn bundle() -> Rc<ModelBundle> {
    static BUNDLE_JSON: OnceLock<String> = OnceLock::new();
    let json = BUNDLE_JSON.get_or_init(|| {
        let cfg = default_config();
        let bundle = cfg.pretrain_bundle(corpus()).expect("default bundle");
        assert!(
            bundle.meta.recon_mse <= cfg.model.recon_gate,
            "default bundle fails its own reconstruction gate: {}",
            bundle.meta.recon_mse
        );
        serde_json::to_string(&bundle).expect("bundle serializes")
    });
    Rc::new(serde_json::from_str(json).expect("bundle deserializes"))
}

fn experts() -> &'static ExpertBuffer {
    static EXPERTS: OnceLock<ExpertBuffer> = OnceLock::new();
    EXPERTS.get_or_init(|| {
        let cfg = default_config();
        ld3m::distill::train_experts(
            corpus(),
            cfg.distill.witness_arch,
            cfg.experts.num_experts,
            cfg.experts.epochs,
            cfg.experts.lr,
            cfg.experts.batch,
            cfg.seed(),
        )
        .expect("expert buffer")
    })
}

fn norms_for(report: &ld3m::diagnostics::GradProbeReport, mode: SampleMode) -> Vec<f64> {
    report
        .rows_for(mode)
        .iter()
        .map(|r| r.grad_norm_z)
        .collect()
}

const FULL_GRID: [usize; 9] = [10, 20, 30, 40, 50, 60, 70, 80, 90];

// ----- criterion 1 -----

#[test]
fn criterion_1_vanishing_gradient_trend() {
    let start = Instant::now();
    let bundle = bundle();
    let report = probe_grad_norms(
        &bundle,
        |t| default_schedule(t, SigmaPolicy::Zero),
        &FULL_GRID,
        &[SampleMode::Standard],
        42,
    )
    .unwrap();
    let norms = norms_for(&report, SampleMode::Standard);
    let non_increasing = norms.windows(2).filter(|w| w[1] <= w[0]).count();
    let ratio = norms[0] / norms[8];
    let elapsed = start.elapsed();
    assert!(
        non_increasing >= 7,
        "criterion 1 FAIL: only {non_increasing}/8 adjacent pairs non-increasing: {norms:?}"
    );
    assert!(
        ratio >= 5.0,
        "criterion 1 FAIL: norm(T=10)/norm(T=90) = {ratio:.2} < 5"
    );
    assert!(
        elapsed.as_secs() <= 120,
        "criterion 1 FAIL: probe took {elapsed:?} > 2 minutes"
    );
    println!(
        "criterion 1 PASS: standard-mode decay ratio {ratio:.1} (>= 5), \
         non-increasing {non_increasing}/8 pairs, {elapsed:?}"
    );
}

// ----- criterion 2 -----

#[test]
fn criterion_2_gradient_retention_of_skip_connection() {
    let start = Instant::now();
    let bundle = bundle();
    let grid = [10usize, 90];
    for seed in [1u64, 2, 3, 4, 5] {
        let report = probe_grad_norms(
            &bundle,
            |t| default_schedule(t, SigmaPolicy::Zero),
            &grid,
            &[SampleMode::Standard, SampleMode::Ld3m],
            seed,
        )
        .unwrap();
        let std = norms_for(&report, SampleMode::Standard);
        let skip = norms_for(&report, SampleMode::Ld3m);
        let retention_std = std[1] / std[0];
        let retention_skip = skip[1] / skip[0];
        assert!(
            retention_skip >= retention_std,
            "criterion 2 FAIL (seed {seed}): retention {retention_skip:.3e} < {retention_std:.3e}"
        );
        assert!(
            skip[1] >= 3.0 * std[1],
            "criterion 2 FAIL (seed {seed}): ld3m norm(90) {:.3e} < 3x standard {:.3e}",
            skip[1],
            std[1]
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() <= 120, "criterion 2 FAIL: {elapsed:?} > 2 minutes");
    println!(
        "criterion 2 PASS: skip-connection retention dominates on 5/5 seeds, \
         ld3m norm(T=90) >= 3x standard, {elapsed:?}"
    );
}

// ----- criterion 3 -----

#[test]
fn criterion_3_degeneration_identity() {
    let bundle = bundle();
    for t_max in [1usize, 5, 10] {
        let schedule = default_schedule(t_max, SigmaPolicy::Beta);
        let run = |opts: &ChainOptions| -> Vec<u64> {
            let mut tape = Tape::new();
            let mut rng = RngStream::from_seed(4242);
            let mut init_rng = RngStream::from_seed(7);
            let z = tape.leaf(init_rng.fill_normal(&[4, 16]), true);
            let c = tape.leaf(init_rng.fill_normal(&[4, 8]), true);
            let out = sample_chain(&mut tape, &mut rng, z, c, &bundle, &schedule, opts).unwrap();
            tape.value(out.z0).data().iter().map(|x| x.to_bits()).collect()
        };
        let standard = run(&ChainOptions::with_mode(SampleMode::Standard));
        let degenerate = run(&ChainOptions {
            mode: SampleMode::Ld3m,
            skip_scale: 0.0,
            ..Default::default()
        });
        assert_eq!(
            standard, degenerate,
            "criterion 3 FAIL: zero-skip sampler diverges from standard at T = {t_max}"
        );
    }
    println!("criterion 3 PASS: skip weight 0 reproduces the standard sampler bit-for-bit at T in {{1, 5, 10}}");
}

// ----- criterion 4 -----

#[test]
fn criterion_4_checkpointing_equivalence_and_memory() {
    let bundle = bundle();
    let schedule = default_schedule(10, SigmaPolicy::Scaled);
    let mut best_ratio = f64::INFINITY;
    for seed in [11u64, 12, 13, 14, 15] {
        let run = |checkpoint: bool| -> (DiffArray, DiffArray, usize) {
            let mut tape = Tape::new();
            let mut rng = RngStream::from_seed(seed);
            let mut init_rng = RngStream::from_seed(seed ^ 0xff);
            let z = tape.leaf(init_rng.fill_normal(&[4, 16]), true);
            let c = tape.leaf(init_rng.fill_normal(&[4, 8]), true);
            let opts = ChainOptions {
                mode: SampleMode::Ld3m,
                checkpoint,
                ..Default::default()
            };
            let out = sample_chain(&mut tape, &mut rng, z, c, &bundle, &schedule, &opts).unwrap();
            let target = tape.constant(init_rng.fill_uniform(0.0, 1.0, &[4, 144]));
            let loss = tape.mse(out.decoded, target).unwrap();
            tape.backward(loss).unwrap();
            (
                tape.grad(z).unwrap().clone(),
                tape.grad(c).unwrap().clone(),
                tape.stats().peak(),
            )
        };
        let (gz_plain, gc_plain, peak_plain) = run(false);
        let (gz_ck, gc_ck, peak_ck) = run(true);

        let rel = |a: &DiffArray, b: &DiffArray| -> f64 {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs() / x.abs().max(1e-30))
                .fold(0.0, f64::max)
        };
        let rz = rel(&gz_plain, &gz_ck);
        let rc = rel(&gc_plain, &gc_ck);
        assert!(
            rz <= 1e-6 && rc <= 1e-6,
            "criterion 4 FAIL (seed {seed}): rel diff Z {rz:.2e}, c {rc:.2e}"
        );
        let ratio = peak_plain as f64 / peak_ck as f64;
        best_ratio = best_ratio.min(ratio);
        assert!(
            ratio >= 5.0,
            "criterion 4 FAIL (seed {seed}): peak activations {peak_plain} vs {peak_ck} ({ratio:.2}x < 5x)"
        );
    }
    println!(
        "criterion 4 PASS: checkpointed gradients match within 1e-6 on 5 seeds; \
         peak retained activations reduced >= {best_ratio:.1}x"
    );
}

// ----- criterion 5 -----

#[test]
fn criterion_5_gradient_oracle_suite() {
    let start = Instant::now();
    let mut rng = RngStream::from_seed(31);
    let s0 = rng.fill_normal(&[4, 2]);
    let real = rng.fill_normal(&[6, 2]);
    let s_labels = vec![0usize, 1, 0, 1];
    let r_labels = vec![0usize, 1, 0, 1, 0, 1];

    // (a) each loss in isolation.
    let witness = build_mlp_witness(&[2, 2], Act::Tanh, 5);
    let (real_c, sl, rl) = (real.clone(), s_labels.clone(), r_labels.clone());
    let dc = fd_check(
        &FdProblem {
            inputs: vec![s0.clone()],
            build: Box::new(move |tape, leaves| {
                loss_dc(tape, leaves[0], &sl, &real_c, &rl, &witness)
            }),
        },
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(dc.pass, "criterion 5 FAIL: DC max rel err {}", dc.max_rel_err);

    let feature_net = build_mlp_witness(&[2, 2], Act::Tanh, 6);
    let (real_c, sl, rl) = (real.clone(), s_labels.clone(), r_labels.clone());
    let dm = fd_check(
        &FdProblem {
            inputs: vec![s0.clone()],
            build: Box::new(move |tape, leaves| {
                loss_dm(tape, leaves[0], &sl, &real_c, &rl, &feature_net)
            }),
        },
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(dm.pass, "criterion 5 FAIL: DM max rel err {}", dm.max_rel_err);

    let template = build_mlp_witness(&[2, 3, 2], Act::Tanh, 7);
    let start_params: Vec<DiffArray> = template.param_arrays().into_iter().cloned().collect();
    let end_params: Vec<DiffArray> = build_mlp_witness(&[2, 3, 2], Act::Tanh, 8)
        .param_arrays()
        .into_iter()
        .cloned()
        .collect();
    let buffer = ExpertBuffer {
        arch: WitnessArch::MlpS,
        input_dim: 2,
        num_classes: 2,
        snapshots: vec![vec![start_params, end_params]],
    };
    let sl = s_labels.clone();
    let mtt = fd_check(
        &FdProblem {
            inputs: vec![s0],
            build: Box::new(move |tape, leaves| {
                loss_mtt_with_template(tape, leaves[0], &sl, &buffer, &template, 0, 0, 1, 1, 0.1)
            }),
        },
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(mtt.pass, "criterion 5 FAIL: MTT max rel err {}", mtt.max_rel_err);

    // (b) the full skip-connected chain at T = 4, d_latent = 4.
    let chain = {
        let mut net_rng = RngStream::from_seed(2024);
        let encoder = ld3m::models::Mlp::new(&[16, 12, 4], Act::Tanh, &mut net_rng);
        let decoder = ld3m::models::Mlp::new(&[4, 12, 16], Act::Tanh, &mut net_rng);
        let denoiser = ld3m::models::Mlp::new(&[4 + 4 + 8, 16, 4], Act::Tanh, &mut net_rng);
        let table = net_rng.fill_normal(&[3, 4]);
        let small = Rc::new(ModelBundle::new(
            encoder,
            decoder,
            denoiser,
            table,
            ld3m::models::BundleMeta {
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
        fd_check(
            &FdProblem {
                inputs: vec![z0, c0],
                build: Box::new(move |tape, leaves| {
                    let mut chain_rng = RngStream::from_seed(99);
                    let out = sample_chain(
                        tape,
                        &mut chain_rng,
                        leaves[0],
                        leaves[1],
                        &small,
                        &schedule,
                        &ChainOptions::with_mode(SampleMode::Ld3m),
                    )?;
                    let t = tape.constant(target.clone());
                    tape.mse(out.decoded, t)
                }),
            },
            1e-5,
            1e-4,
        )
        .unwrap()
    };
    assert!(
        chain.pass,
        "criterion 5 FAIL: chain max rel err {}",
        chain.max_rel_err
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() <= 60, "criterion 5 FAIL: {elapsed:?} > 1 minute");
    println!(
        "criterion 5 PASS: finite differences agree (DC {:.1e}, DM {:.1e}, MTT {:.1e}, chain {:.1e}), {elapsed:?}",
        dc.max_rel_err, dm.max_rel_err, mtt.max_rel_err, chain.max_rel_err
    );
}

// ----- criterion 6 -----

#[test]
fn criterion_6_loss_unit_identities() {
    // DC on identical batches is 0; exactly negated gradients give 2.
    let corpus = corpus();
    let witness = ld3m::models::build_witness(WitnessArch::MlpS, 144, 4, 5);
    let idx: Vec<usize> = (0..4)
        .flat_map(|class| corpus.train_class_indices(class).into_iter().take(3))
        .collect();
    let (x, y) = corpus.train_batch(&idx);
    let mut tape = Tape::new();
    let s = tape.leaf(x.clone(), true);
    let zero = loss_dc(&mut tape, s, &y, &x, &y, &witness).unwrap();
    let zero_val = tape.value(zero).item();
    assert!(
        zero_val.abs() <= 1e-10,
        "criterion 6 FAIL: DC identical batches = {zero_val:e}"
    );

    let mut logistic = build_mlp_witness(&[1, 2], Act::Relu, 0);
    logistic.set_param_arrays(&[
        DiffArray::matrix(2, 1, vec![0.0, 0.0]).unwrap(),
        DiffArray::vector(vec![0.0, 0.0]),
    ]);
    let col = DiffArray::new(vec![3, 1], vec![0.7, -1.3, 2.0]).unwrap();
    let mut tape = Tape::new();
    let s = tape.leaf(col.clone(), true);
    let anti = loss_dc(&mut tape, s, &[1, 0, 1], &col, &[0, 1, 0], &logistic).unwrap();
    let anti_val = tape.value(anti).item();
    assert!(
        (anti_val - 2.0).abs() <= 1e-10,
        "criterion 6 FAIL: DC antiparallel = {anti_val}"
    );

    // DM with equal per-class means is 0.
    let mut tape = Tape::new();
    let s = tape.leaf(x.clone(), true);
    let dm = loss_dm(&mut tape, s, &y, &x, &y, &witness).unwrap();
    let dm_val = tape.value(dm).item();
    assert!(dm_val.abs() <= 1e-12, "criterion 6 FAIL: DM equal means = {dm_val:e}");

    // Trajectory loss with no inner steps is exactly 1.
    let template = build_mlp_witness(&[1, 2], Act::Relu, 0);
    let buffer = ExpertBuffer {
        arch: WitnessArch::MlpS,
        input_dim: 1,
        num_classes: 2,
        snapshots: vec![vec![
            vec![
                DiffArray::matrix(2, 1, vec![0.5, -0.25]).unwrap(),
                DiffArray::vector(vec![0.1, -0.2]),
            ],
            vec![
                DiffArray::matrix(2, 1, vec![0.9, -0.65]).unwrap(),
                DiffArray::vector(vec![0.3, -0.4]),
            ],
        ]],
    };
    let mut tape = Tape::new();
    let s = tape.leaf(DiffArray::new(vec![2, 1], vec![0.8, -1.0]).unwrap(), true);
    let mtt =
        loss_mtt_with_template(&mut tape, s, &[0, 1], &buffer, &template, 0, 0, 0, 1, 0.5).unwrap();
    let mtt_val = tape.value(mtt).item();
    assert_eq!(mtt_val, 1.0, "criterion 6 FAIL: MTT with N_syn = 0 is {mtt_val}");

    println!("criterion 6 PASS: DC identities 0 and 2, DM equal-means 0, MTT zero-step exactly 1");
}

// ----- criterion 7 -----

fn acceptance_distill(algorithm: Algorithm, lr: f64) -> Result<DistilledSet> {
    let cfg = DistillConfig {
        algorithm,
        mode: ChainModeCfg::Ld3m,
        lr_latent: Some(lr),
        iterations: 500,
        seed: 42,
        ..Default::default()
    };
    let run = run_distillation(
        &cfg,
        corpus(),
        &bundle(),
        &default_schedule(10, SigmaPolicy::Scaled),
        Some(experts()),
        0.02,
    )?;
    Ok(run.set)
}

#[test]
fn criterion_7_distillation_efficacy() {
    let start = Instant::now();
    let corpus = corpus();
    let bundle = bundle();
    let schedule = default_schedule(10, SigmaPolicy::Scaled);
    let protocol = EvalProtocol::default();

    let baseline = baseline_init_only(
        corpus,
        &bundle,
        &schedule,
        ChainModeCfg::Ld3m,
        NoiseCoef::Variance,
        1,
        42,
        &protocol,
    )
    .unwrap();

    let dc = acceptance_distill(Algorithm::Dc, 0.5).unwrap();
    let dc_result = evaluate_distilled(
        &dc,
        &bundle,
        &schedule,
        ChainModeCfg::Ld3m,
        NoiseCoef::Variance,
        corpus,
        &protocol,
    )
    .unwrap();
    let dc_margin = dc_result.mean_over_archs - baseline.mean_over_archs;
    assert!(
        dc_margin >= 0.05,
        "criterion 7 FAIL: DC margin {:.4} < 0.05 (DC {:.4} vs baseline {:.4})",
        dc_margin,
        dc_result.mean_over_archs,
        baseline.mean_over_archs
    );

    let dm = acceptance_distill(Algorithm::Dm, 0.1).unwrap();
    let dm_result = evaluate_distilled(
        &dm,
        &bundle,
        &schedule,
        ChainModeCfg::Ld3m,
        NoiseCoef::Variance,
        corpus,
        &protocol,
    )
    .unwrap();
    assert!(
        dm_result.mean_over_archs > baseline.mean_over_archs,
        "criterion 7 FAIL: DM {:.4} does not exceed baseline {:.4}",
        dm_result.mean_over_archs,
        baseline.mean_over_archs
    );

    let mtt = acceptance_distill(Algorithm::Mtt, 10.0).unwrap();
    let mtt_result = evaluate_distilled(
        &mtt,
        &bundle,
        &schedule,
        ChainModeCfg::Ld3m,
        NoiseCoef::Variance,
        corpus,
        &protocol,
    )
    .unwrap();
    assert!(
        mtt_result.mean_over_archs > baseline.mean_over_archs,
        "criterion 7 FAIL: MTT {:.4} does not exceed baseline {:.4}",
        mtt_result.mean_over_archs,
        baseline.mean_over_archs
    );

    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() <= 1800,
        "criterion 7 FAIL: {elapsed:?} > 30 minutes"
    );
    println!(
        "criterion 7 PASS: baseline {:.4}; DC {:.4} (+{:.1} points), DM {:.4} (+{:.1}), MTT {:.4} (+{:.1}); {elapsed:?}",
        baseline.mean_over_archs,
        dc_result.mean_over_archs,
        100.0 * dc_margin,
        dm_result.mean_over_archs,
        100.0 * (dm_result.mean_over_archs - baseline.mean_over_archs),
        mtt_result.mean_over_archs,
        100.0 * (mtt_result.mean_over_archs - baseline.mean_over_archs),
    );
}

// ----- criterion 8 -----

#[test]
fn criterion_8_ablation_pipeline_at_t50() {
    let corpus = corpus();
    let bundle = bundle();
    let schedule = default_schedule(50, SigmaPolicy::Scaled);
    let distill_at = |mode: ChainModeCfg| -> DistilledSet {
        let cfg = DistillConfig {
            algorithm: Algorithm::Dc,
            mode,
            lr_latent: Some(0.5),
            iterations: 100,
            seed: 42,
            ..Default::default()
        };
        run_distillation(&cfg, corpus, &bundle, &schedule, None, 0.02)
            .unwrap()
            .set
    };
    let no_diff = distill_at(ChainModeCfg::NoDiffusion);
    let standard = distill_at(ChainModeCfg::Standard);
    let skip = distill_at(ChainModeCfg::Ld3m);
    let conditions = vec![
        Condition {
            label: "no_diffusion".into(),
            set: &no_diff,
            mode: ChainModeCfg::NoDiffusion,
        },
        Condition {
            label: "standard".into(),
            set: &standard,
            mode: ChainModeCfg::Standard,
        },
        Condition {
            label: "ld3m".into(),
            set: &skip,
            mode: ChainModeCfg::Ld3m,
        },
    ];
    let protocol = EvalProtocol {
        num_seeds: 3,
        ..Default::default()
    };
    let table = compare_conditions(
        &conditions,
        &bundle,
        &schedule,
        NoiseCoef::Variance,
        corpus,
        &protocol,
    )
    .unwrap();
    assert_eq!(table.rows.len(), 3, "criterion 8 FAIL: incomplete table");
    let labels: Vec<&str> = table.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(
        labels,
        ["no_diffusion", "standard", "ld3m"],
        "criterion 8 FAIL: row order not preserved"
    );
    // The ordering is reported, not asserted: the reference margin is
    // model-specific.
    println!(
        "criterion 8 PASS: T=50 ablation table complete; measured means: \
         no_diffusion {:.4}, standard {:.4}, ld3m {:.4} (reference full-scale gain {:.1} points)",
        table.rows[0].result.mean_over_archs,
        table.rows[1].result.mean_over_archs,
        table.rows[2].result.mean_over_archs,
        table.reference_diffusion_gain_points
    );
}

// ----- criterion 9 -----

#[test]
fn criterion_9_markov_and_determinism() {
    // Markov invariance: the skip-connected step through the trained bundle
    // depends only on (z_t, z_T, t, c, eps); fabricated history is inert.
    let bundle = bundle();
    let schedule = default_schedule(6, SigmaPolicy::Zero);
    let eps = DiffArray::zeros(&[2, 16]);
    let step_out = |junk: bool| -> Vec<f64> {
        let mut tape = Tape::new();
        let mut rng = RngStream::from_seed(5);
        if junk {
            for _ in 0..9 {
                let h = tape.leaf(rng.fill_normal(&[2, 16]), true);
                let _ = tape.tanh(h);
            }
        } else {
            let _ = rng.fill_normal(&[2, 16]);
        }
        let mut fixed = RngStream::from_seed(77);
        let z_t = tape.leaf(fixed.fill_normal(&[2, 16]), true);
        let anchor = tape.leaf(fixed.fill_normal(&[2, 16]), true);
        let c = tape.leaf(fixed.fill_normal(&[2, 8]), false);
        let state = ChainState {
            t: 3,
            z: z_t,
            anchor: Some(anchor),
        };
        let next = reverse_step_ld3m(
            &mut tape,
            &state,
            bundle.as_ref(),
            c,
            &schedule,
            &eps,
            NoiseCoef::Variance,
            1.0,
        )
        .unwrap();
        tape.value(next.z).data().to_vec()
    };
    assert_eq!(
        step_out(false),
        step_out(true),
        "criterion 9 FAIL: fabricated history changed the reverse step"
    );

    // Full-pipeline determinism: two runs from one config produce
    // byte-identical deterministic artifacts (timing files excluded by
    // design: they hold wall-clock measurements).
    let run_pipeline = |dir: &std::path::Path| -> (Vec<u8>, Vec<u8>, Vec<u8>) {
        let cfg_path = dir.join("config.json");
        let out = dir.join("out");
        std::fs::write(
            &cfg_path,
            format!(
                r#"{{ "global_seed": 42, "output_dir": {:?},
                     "corpus": {{ "source": "synthetic", "per_class_train": 60, "per_class_test": 30 }},
                     "model": {{ "ae_epochs": 15, "denoiser_epochs": 15, "denoiser_hidden": [64, 64], "recon_gate": 0.1 }},
                     "distill": {{ "iterations": 5, "batch_real": 64, "lr_latent": 0.3 }},
                     "eval": {{ "archs": ["mlp-s"], "num_seeds": 2, "train_steps": 40 }} }}"#,
                out.display().to_string()
            ),
        )
        .unwrap();
        let cfg = cfg_path.to_str().unwrap();
        assert_eq!(ld3m::cli::main_with_args(["ld3m", "pretrain", "--config", cfg]), 0);
        assert_eq!(ld3m::cli::main_with_args(["ld3m", "distill", "--config", cfg]), 0);
        let set = ld3m::cli::set_path(&out);
        assert_eq!(
            ld3m::cli::main_with_args([
                "ld3m",
                "eval",
                "--config",
                cfg,
                "--set",
                set.to_str().unwrap()
            ]),
            0
        );
        (
            std::fs::read(out.join("loss.csv")).unwrap(),
            std::fs::read(out.join("eval.csv")).unwrap(),
            std::fs::read(&set).unwrap(),
        )
    };
    let tmp_a = tempfile::tempdir().unwrap();
    let tmp_b = tempfile::tempdir().unwrap();
    let (loss_a, eval_a, set_a) = run_pipeline(tmp_a.path());
    let (loss_b, eval_b, set_b) = run_pipeline(tmp_b.path());
    assert_eq!(loss_a, loss_b, "criterion 9 FAIL: loss.csv differs across runs");
    assert_eq!(eval_a, eval_b, "criterion 9 FAIL: eval.csv differs across runs");
    assert_eq!(set_a, set_b, "criterion 9 FAIL: set files differ across runs");
    println!(
        "criterion 9 PASS: reverse step is Markovian on the trained bundle; \
         pipeline CSVs and set files byte-identical across two runs"
    );
}

// ----- additional measured property (not a numbered criterion) -----

#[test]
fn snr_of_gradient_norms_ld3m_vs_standard() {
    // Stability of gradient norms across distillation iterations at T = 50:
    // median rolling SNR of the skip-connected mode is at least that of the
    // standard mode over 5 seeds (a measured regression bound).
    let corpus = corpus();
    let bundle = bundle();
    let schedule = default_schedule(50, SigmaPolicy::Scaled);
    let snr_for = |mode: ChainModeCfg, seed: u64| -> f64 {
        let cfg = DistillConfig {
            algorithm: Algorithm::Dc,
            mode,
            lr_latent: Some(0.5),
            iterations: 60,
            batch_real: 128,
            seed,
            ..Default::default()
        };
        let run = run_distillation(&cfg, corpus, &bundle, &schedule, None, 0.02).unwrap();
        let norms: Vec<f64> = run.curve.iter().map(|s| s.grad_norm_z).collect();
        probe_snr(&norms, 25).unwrap().mean_snr().unwrap_or(0.0)
    };
    let mut deltas = Vec::new();
    for seed in [1u64, 2, 3, 4, 5] {
        deltas.push(snr_for(ChainModeCfg::Ld3m, seed) - snr_for(ChainModeCfg::Standard, seed));
    }
    deltas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert!(
        deltas[2] >= 0.0,
        "median SNR delta {:.3} < 0 (ld3m less stable than standard)",
        deltas[2]
    );
    println!(
        "SNR property PASS: median (ld3m - standard) gradient-norm SNR delta {:+.3} over 5 seeds",
        deltas[2]
    );
}
