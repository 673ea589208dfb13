//! Distillation losses (gradient matching, distribution matching, trajectory
//! matching), expert-trajectory machinery, and the outer loop that learns the
//! synthetic latent codes through the frozen diffusion chain.

use crate::array::DiffArray;
use crate::corpus::ToyCorpus;
use crate::diffusion::{sample_chain, ChainOptions, NoiseCoef, SampleMode};
use crate::error::{Error, Result};
use crate::models::{build_witness, embed_class, ModelBundle, WitnessArch, WitnessNet};
use crate::rng::{mix_seed, RngStream};
use crate::schedule::NoiseSchedule;
use crate::tape::{Tape, Var};
use serde::{Deserialize, Serialize};
use std::rc::Rc;
use std::time::Instant;

/// The learnable synthetic set: latent codes, conditioning codes, labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DistilledSet {
    /// Latent codes, one row per synthetic sample.
    pub z: DiffArray,
    /// Conditioning codes, one row per synthetic sample.
    pub c: DiffArray,
    pub labels: Vec<usize>,
    pub ipc: usize,
    pub num_classes: usize,
}

impl DistilledSet {
    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    /// Bitwise payload equality (used for duplicate detection).
    pub fn payload_eq(&self, other: &DistilledSet) -> bool {
        let bits = |a: &DiffArray| a.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.labels == other.labels && bits(&self.z) == bits(&other.z) && bits(&self.c) == bits(&other.c)
    }
}

/// Distillation objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Dc,
    Dm,
    Mtt,
}

impl Algorithm {
    pub fn id(&self) -> &'static str {
        match self {
            Algorithm::Dc => "dc",
            Algorithm::Dm => "dm",
            Algorithm::Mtt => "mtt",
        }
    }

    /// Default latent/conditioning learning rate for this objective.
    pub fn default_lr(&self) -> f64 {
        match self {
            Algorithm::Dc => 1e-3,
            Algorithm::Dm => 1e-2,
            Algorithm::Mtt => 10.0,
        }
    }
}

/// How synthetic images are produced from the latent codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainModeCfg {
    Standard,
    Ld3m,
    /// Ablation: decode the latents directly, skipping the reverse process.
    NoDiffusion,
}

impl ChainModeCfg {
    pub fn id(&self) -> &'static str {
        match self {
            ChainModeCfg::Standard => "standard",
            ChainModeCfg::Ld3m => "ld3m",
            ChainModeCfg::NoDiffusion => "no_diffusion",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(ChainModeCfg::Standard),
            "ld3m" => Ok(ChainModeCfg::Ld3m),
            "no_diffusion" => Ok(ChainModeCfg::NoDiffusion),
            other => Err(Error::Config(format!("unknown chain mode '{other}'"))),
        }
    }

    pub fn sample_mode(&self) -> Option<SampleMode> {
        match self {
            ChainModeCfg::Standard => Some(SampleMode::Standard),
            ChainModeCfg::Ld3m => Some(SampleMode::Ld3m),
            ChainModeCfg::NoDiffusion => None,
        }
    }
}

/// Latent initialization strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitSource {
    #[default]
    RealImages,
    Gaussian,
}

/// Optional augmentation of the real batch, off by default. Augmentation
/// policy is orthogonal to the distillation losses themselves; this hook
/// covers the basic flip/crop transforms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Augment {
    /// Mirror each image horizontally with probability 1/2.
    pub flip: bool,
    /// Random shift up to this many pixels in each direction, zero-padded.
    pub crop_pad: usize,
}

impl Augment {
    pub fn is_active(&self) -> bool {
        self.flip || self.crop_pad > 0
    }

    /// Apply to a batch of flattened `side x side` images.
    pub fn apply(&self, images: &DiffArray, side: usize, rng: &mut RngStream) -> DiffArray {
        if !self.is_active() {
            return images.clone();
        }
        let rows = images.rows();
        let mut out = DiffArray::zeros(images.shape());
        for i in 0..rows {
            let src = images.row(i);
            let flip = self.flip && rng.gen_index(2) == 1;
            let (dr, dc) = if self.crop_pad > 0 {
                let span = 2 * self.crop_pad + 1;
                (
                    rng.gen_index(span) as isize - self.crop_pad as isize,
                    rng.gen_index(span) as isize - self.crop_pad as isize,
                )
            } else {
                (0, 0)
            };
            let dst = &mut out.data_mut()[i * side * side..(i + 1) * side * side];
            for r in 0..side {
                for c in 0..side {
                    let sr = r as isize + dr;
                    let sc = c as isize + dc;
                    if sr < 0 || sc < 0 || sr >= side as isize || sc >= side as isize {
                        continue;
                    }
                    let sc = if flip { side - 1 - sc as usize } else { sc as usize };
                    dst[r * side + c] = src[sr as usize * side + sc];
                }
            }
        }
        out
    }
}

/// Trajectory-matching hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct MttParams {
    pub n_syn: usize,
    pub m_exp: usize,
    pub max_start_epoch: usize,
    pub inner_lr: f64,
}

impl Default for MttParams {
    fn default() -> Self {
        MttParams {
            n_syn: 10,
            m_exp: 2,
            max_start_epoch: 3,
            inner_lr: 0.02,
        }
    }
}

/// Configuration of one distillation run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub algorithm: Algorithm,
    pub mode: ChainModeCfg,
    /// Learning rate for Z and c; `None` resolves to the per-algorithm default.
    pub lr_latent: Option<f64>,
    pub momentum: f64,
    pub iterations: usize,
    pub batch_real: usize,
    pub witness_arch: WitnessArch,
    pub ipc: usize,
    pub init: InitSource,
    /// Reuse the same per-step noise draws every iteration (debugging aid).
    pub freeze_noise: bool,
    pub checkpoint: bool,
    pub noise_coef: NoiseCoef,
    pub augment: Augment,
    pub seed: u64,
    pub mtt: MttParams,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            algorithm: Algorithm::Dc,
            mode: ChainModeCfg::Ld3m,
            lr_latent: None,
            momentum: 0.5,
            iterations: 500,
            batch_real: 256,
            witness_arch: WitnessArch::MlpS,
            ipc: 1,
            init: InitSource::RealImages,
            freeze_noise: false,
            checkpoint: true,
            noise_coef: NoiseCoef::Variance,
            augment: Augment::default(),
            seed: 42,
            mtt: MttParams::default(),
        }
    }
}

impl DistillConfig {
    pub fn lr(&self) -> f64 {
        self.lr_latent.unwrap_or_else(|| self.algorithm.default_lr())
    }
}

/// Initialize the distilled set from encoded real images or Gaussian draws.
pub fn init_distilled(
    corpus: &ToyCorpus,
    bundle: &ModelBundle,
    ipc: usize,
    source: InitSource,
    seed: u64,
) -> Result<DistilledSet> {
    let num_classes = corpus.num_classes;
    let d_latent = bundle.meta.d_latent;
    let d_embed = bundle.meta.d_embed;
    let m = num_classes * ipc;
    let mut rng = RngStream::new(mix_seed(seed, 0x1417), 0);

    let (z, c) = match source {
        InitSource::RealImages => {
            let mut rows = Vec::with_capacity(m * corpus.image_dim());
            let mut c_rows = Vec::with_capacity(m * d_embed);
            for class in 0..num_classes {
                let pool = corpus.train_class_indices(class);
                if pool.len() < ipc {
                    return Err(Error::Contract(format!(
                        "class {class} has {} train images, need at least {ipc}",
                        pool.len()
                    )));
                }
                let picks = rng.choose_without_replacement(pool.len(), ipc);
                for p in picks {
                    rows.extend_from_slice(corpus.train_images.row(pool[p]));
                    c_rows.extend_from_slice(embed_class(&bundle.class_embed, class)?.data());
                }
            }
            let selected = DiffArray::new(vec![m, corpus.image_dim()], rows)?;
            let z = bundle.encode_plain(&selected);
            (z, DiffArray::new(vec![m, d_embed], c_rows)?)
        }
        InitSource::Gaussian => {
            // Scale draws to the encoder's empirical output spread.
            let latents = bundle.encode_plain(&corpus.train_images);
            let z_std = column_std(&latents);
            let c_std = column_std(&bundle.class_embed);
            let z = rng.fill_normal(&[m, d_latent]).map(|x| x * z_std);
            let c = rng.fill_normal(&[m, d_embed]).map(|x| x * c_std);
            (z, c)
        }
    };

    let labels = (0..num_classes)
        .flat_map(|class| std::iter::repeat_n(class, ipc))
        .collect();
    Ok(DistilledSet {
        z,
        c,
        labels,
        ipc,
        num_classes,
    })
}

fn column_std(a: &DiffArray) -> f64 {
    let n = a.len() as f64;
    let mean: f64 = a.data().iter().sum::<f64>() / n;
    (a.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Gradient-matching loss: mean per-layer cosine distance between the
/// witness's cross-entropy gradients on the synthetic and real batches.
///
/// Differentiable with respect to `s_images` through the synthetic-side
/// gradient program; the real side enters as constants. Averaging over
/// layers keeps the value in `[0, 2]`.
pub fn loss_dc(
    tape: &mut Tape,
    s_images: Var,
    s_labels: &[usize],
    real_images: &DiffArray,
    real_labels: &[usize],
    witness: &WitnessNet,
) -> Result<Var> {
    if s_labels.is_empty() || real_labels.is_empty() {
        return Err(Error::Contract("gradient matching needs nonempty batches".into()));
    }
    let params = witness.param_leaves(tape, false);
    let (_, grads_s) = witness.grad_program(tape, &params, s_images, s_labels)?;
    let real = tape.constant(real_images.clone());
    let (_, grads_t) = witness.grad_program(tape, &params, real, real_labels)?;

    let layers = witness.num_affine_layers();
    let mut acc: Option<Var> = None;
    for l in 0..layers {
        let (gw_s, gb_s) = (grads_s[2 * l], grads_s[2 * l + 1]);
        let (gw_t, gb_t) = (grads_t[2 * l], grads_t[2 * l + 1]);

        let norm2 = |tape: &mut Tape, w: Var, b: Var| -> Result<Var> {
            let sw = tape.sum_sq(w)?;
            let sb = tape.sum_sq(b)?;
            tape.add(sw, sb)
        };
        let n2_s = norm2(tape, gw_s, gb_s)?;
        let n2_t = norm2(tape, gw_t, gb_t)?;
        if tape.value(n2_s).item() == 0.0 || tape.value(n2_t).item() == 0.0 {
            return Err(Error::Degenerate(format!(
                "zero-norm witness gradient in layer {l}"
            )));
        }
        let dw = tape.dot(gw_s, gw_t)?;
        let db = tape.dot(gb_s, gb_t)?;
        let dot = tape.add(dw, db)?;
        let ns = tape.sqrt(n2_s);
        let nt = tape.sqrt(n2_t);
        let denom = tape.mul(ns, nt)?;
        let cos = tape.div(dot, denom)?;
        let neg = tape.neg(cos);
        let dist = tape.offset(neg, 1.0);
        acc = Some(match acc {
            None => dist,
            Some(a) => tape.add(a, dist)?,
        });
    }
    Ok(tape.scale(acc.expect("at least one layer"), 1.0 / layers as f64))
}

/// Per-class selector matrix averaging rows of one class.
fn class_mean_selector(labels: &[usize], num_classes: usize) -> Result<DiffArray> {
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        counts[y] += 1;
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::Contract(
            "every class must be present in the batch".into(),
        ));
    }
    let mut sel = DiffArray::zeros(&[num_classes, labels.len()]);
    for (i, &y) in labels.iter().enumerate() {
        sel.data_mut()[y * labels.len() + i] = 1.0 / counts[y] as f64;
    }
    Ok(sel)
}

/// Distribution-matching loss: summed squared distance between per-class
/// mean features of the synthetic and real batches.
pub fn loss_dm(
    tape: &mut Tape,
    s_images: Var,
    s_labels: &[usize],
    real_images: &DiffArray,
    real_labels: &[usize],
    feature_net: &WitnessNet,
) -> Result<Var> {
    let num_classes = feature_net.num_classes();
    let sel_s = class_mean_selector(s_labels, num_classes)?;
    let sel_t = class_mean_selector(real_labels, num_classes)?;

    let params = feature_net.param_leaves(tape, false);
    let feats_s = feature_net.features_with_params(tape, &params, s_images)?;
    let real = tape.constant(real_images.clone());
    let feats_t = feature_net.features_with_params(tape, &params, real)?;

    let sel_s = tape.constant(sel_s);
    let sel_t = tape.constant(sel_t);
    let mean_s = tape.matmul(sel_s, feats_s)?;
    let mean_t = tape.matmul(sel_t, feats_t)?;
    let diff = tape.sub(mean_s, mean_t)?;
    tape.sum_sq(diff)
}

/// Parameter snapshots of witnesses trained on the real corpus.
#[derive(Debug, Clone)]
pub struct ExpertBuffer {
    pub arch: WitnessArch,
    pub input_dim: usize,
    pub num_classes: usize,
    /// `snapshots[expert][epoch]` with epoch 0 = initialization.
    pub snapshots: Vec<Vec<Vec<DiffArray>>>,
}

impl ExpertBuffer {
    pub fn num_experts(&self) -> usize {
        self.snapshots.len()
    }

    /// Number of recorded epochs past initialization.
    pub fn epochs(&self) -> usize {
        self.snapshots.first().map_or(0, |t| t.len() - 1)
    }

    pub fn params_at(&self, expert: usize, epoch: usize) -> &[DiffArray] {
        &self.snapshots[expert][epoch]
    }

    /// Template witness whose layer structure matches the snapshots.
    pub fn template(&self) -> WitnessNet {
        build_witness(self.arch, self.input_dim, self.num_classes, 0)
    }
}

/// Train independently seeded witnesses on the real corpus with plain SGD,
/// snapshotting parameters after every epoch.
pub fn train_experts(
    corpus: &ToyCorpus,
    arch: WitnessArch,
    num_experts: usize,
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<ExpertBuffer> {
    let mut snapshots = Vec::with_capacity(num_experts);
    for e in 0..num_experts {
        let mut w = build_witness(arch, corpus.image_dim(), corpus.num_classes, mix_seed(seed, e as u64));
        let mut rng = RngStream::new(mix_seed(seed, 0xb0f + e as u64), 1);
        let mut trajectory = vec![w.param_arrays().into_iter().cloned().collect::<Vec<_>>()];
        let n = corpus.train_len();
        let batch = batch.min(n).max(1);
        let mut order: Vec<usize> = (0..n).collect();
        for _epoch in 0..epochs {
            rng.shuffle(&mut order);
            for chunk in order.chunks(batch) {
                let (x, y) = corpus.train_batch(chunk);
                w.sgd_step(&x, &y, lr)?;
            }
            trajectory.push(w.param_arrays().into_iter().cloned().collect());
        }
        snapshots.push(trajectory);
    }
    Ok(ExpertBuffer {
        arch,
        input_dim: corpus.image_dim(),
        num_classes: corpus.num_classes,
        snapshots,
    })
}

/// Trajectory-matching loss: run `n_syn` differentiable SGD steps on the
/// synthetic batch from the expert's epoch-`start_epoch` parameters, then
/// measure the squared distance to the expert's parameters `m_exp` epochs
/// later, normalized by the expert's own displacement.
#[allow(clippy::too_many_arguments)]
pub fn loss_mtt(
    tape: &mut Tape,
    s_images: Var,
    s_labels: &[usize],
    buffer: &ExpertBuffer,
    expert: usize,
    start_epoch: usize,
    n_syn: usize,
    m_exp: usize,
    inner_lr: f64,
) -> Result<Var> {
    let witness = buffer.template();
    loss_mtt_with_template(
        tape,
        s_images,
        s_labels,
        buffer,
        &witness,
        expert,
        start_epoch,
        n_syn,
        m_exp,
        inner_lr,
    )
}

/// [`loss_mtt`] with an explicit witness template (layer structure matching
/// the buffer's snapshots).
#[allow(clippy::too_many_arguments)]
pub fn loss_mtt_with_template(
    tape: &mut Tape,
    s_images: Var,
    s_labels: &[usize],
    buffer: &ExpertBuffer,
    witness: &WitnessNet,
    expert: usize,
    start_epoch: usize,
    n_syn: usize,
    m_exp: usize,
    inner_lr: f64,
) -> Result<Var> {
    if expert >= buffer.num_experts() {
        return Err(Error::Contract(format!("expert {expert} out of range")));
    }
    if start_epoch + m_exp > buffer.epochs() {
        return Err(Error::Contract(format!(
            "trajectory window {start_epoch}+{m_exp} exceeds {} recorded epochs",
            buffer.epochs()
        )));
    }
    let theta_start = buffer.params_at(expert, start_epoch);
    let theta_end = buffer.params_at(expert, start_epoch + m_exp);

    // Expert displacement, accumulated in the same order as the tape path.
    let mut denom = 0.0;
    for (a, b) in theta_start.iter().zip(theta_end) {
        let mut part = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            let d = x - y;
            part += d * d;
        }
        denom += part;
    }
    if denom == 0.0 {
        return Err(Error::Degenerate(
            "expert trajectory has zero displacement".into(),
        ));
    }

    let mut theta_hat: Vec<Var> = theta_start
        .iter()
        .map(|p| tape.constant(p.clone()))
        .collect();
    for _ in 0..n_syn {
        let (_, grads) = witness.grad_program(tape, &theta_hat, s_images, s_labels)?;
        let mut next = Vec::with_capacity(theta_hat.len());
        for (&p, &g) in theta_hat.iter().zip(&grads) {
            let step = tape.scale(g, inner_lr);
            next.push(tape.sub(p, step)?);
        }
        theta_hat = next;
    }

    let mut num: Option<Var> = None;
    for (p, target) in theta_hat.iter().zip(theta_end) {
        let t_const = tape.constant(target.clone());
        let d = tape.sub(*p, t_const)?;
        let part = tape.sum_sq(d)?;
        num = Some(match num {
            None => part,
            Some(acc) => tape.add(acc, part)?,
        });
    }
    Ok(tape.scale(num.expect("witness has parameters"), 1.0 / denom))
}

/// Momentum state of the outer optimizer.
#[derive(Debug, Clone)]
pub struct OptState {
    vz: DiffArray,
    vc: DiffArray,
}

impl OptState {
    pub fn new(ds: &DistilledSet) -> OptState {
        OptState {
            vz: DiffArray::zeros(ds.z.shape()),
            vc: DiffArray::zeros(ds.c.shape()),
        }
    }
}

/// Per-iteration record: loss, gradient norms, wall-clock.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepStats {
    pub iter: usize,
    pub loss: f64,
    pub grad_norm_z: f64,
    pub grad_norm_c: f64,
    pub wall_ms: f64,
}

/// Class-stratified sample of `k` train indices, without replacement within
/// each class.
fn stratified_batch(corpus: &ToyCorpus, k: usize, rng: &mut RngStream) -> Vec<usize> {
    let per = (k / corpus.num_classes).max(1);
    let mut out = Vec::with_capacity(per * corpus.num_classes);
    for class in 0..corpus.num_classes {
        let pool = corpus.train_class_indices(class);
        let take = per.min(pool.len());
        for p in rng.choose_without_replacement(pool.len(), take) {
            out.push(pool[p]);
        }
    }
    out
}

/// One outer-loop update of `(Z, c)`: synthesize images via the configured
/// mode, evaluate the configured loss against a freshly seeded witness, and
/// apply one SGD-with-momentum step. Diffusion steps run checkpointed when
/// `cfg.checkpoint` is set.
#[allow(clippy::too_many_arguments)]
pub fn distill_step(
    ds: &mut DistilledSet,
    cfg: &DistillConfig,
    bundle: &Rc<ModelBundle>,
    schedule: &NoiseSchedule,
    corpus: &ToyCorpus,
    experts: Option<&ExpertBuffer>,
    iter_index: usize,
    opt: &mut OptState,
) -> Result<StepStats> {
    if !bundle.frozen() {
        return Err(Error::Contract("bundle must be frozen during distillation".into()));
    }
    let start = Instant::now();
    let root = RngStream::from_seed(cfg.seed);
    let noise_label = if cfg.freeze_noise { 0 } else { iter_index as u64 };
    let mut chain_rng = root.substream(mix_seed(0xc4a1, noise_label));
    let mut pick_rng = root.substream(mix_seed(0x91c4, iter_index as u64));
    let witness_seed = mix_seed(cfg.seed, iter_index as u64);

    let mut tape = Tape::new();
    let z = tape.leaf(ds.z.clone(), true);
    let c = tape.leaf(ds.c.clone(), true);

    let s_images = match cfg.mode.sample_mode() {
        Some(mode) => {
            let opts = ChainOptions {
                mode,
                checkpoint: cfg.checkpoint,
                noise_coef: cfg.noise_coef,
                ..Default::default()
            };
            sample_chain(&mut tape, &mut chain_rng, z, c, bundle, schedule, &opts)?.decoded
        }
        None => {
            let bundle_ref = Rc::clone(bundle);
            let outs = tape.run_segment(&[z], &mut chain_rng, cfg.checkpoint, move |tp, ins, _| {
                Ok(vec![bundle_ref.decoder.forward_tape(tp, ins[0])?])
            })?;
            outs[0]
        }
    };

    let loss = match cfg.algorithm {
        Algorithm::Dc | Algorithm::Dm => {
            let witness = build_witness(
                cfg.witness_arch,
                corpus.image_dim(),
                corpus.num_classes,
                witness_seed,
            );
            let k = cfg.batch_real.min(corpus.train_len());
            let idx = stratified_batch(corpus, k, &mut pick_rng);
            let (real_x, real_y) = corpus.train_batch(&idx);
            let real_x = cfg.augment.apply(&real_x, corpus.side, &mut pick_rng);
            match cfg.algorithm {
                Algorithm::Dc => {
                    loss_dc(&mut tape, s_images, &ds.labels, &real_x, &real_y, &witness)?
                }
                _ => loss_dm(&mut tape, s_images, &ds.labels, &real_x, &real_y, &witness)?,
            }
        }
        Algorithm::Mtt => {
            let buffer = experts.ok_or_else(|| {
                Error::Contract("trajectory matching requires an expert buffer".into())
            })?;
            let expert = pick_rng.gen_index(buffer.num_experts());
            let max_start = cfg.mtt.max_start_epoch.min(buffer.epochs().saturating_sub(cfg.mtt.m_exp));
            let start_epoch = pick_rng.gen_index(max_start + 1);
            loss_mtt(
                &mut tape,
                s_images,
                &ds.labels,
                buffer,
                expert,
                start_epoch,
                cfg.mtt.n_syn,
                cfg.mtt.m_exp,
                cfg.mtt.inner_lr,
            )?
        }
    };

    let loss_val = tape.value(loss).item();
    if !loss_val.is_finite() {
        return Err(Error::NumericAbort(format!(
            "loss became non-finite at iteration {iter_index}"
        )));
    }
    tape.backward(loss)?;
    let gz = tape
        .grad(z)
        .cloned()
        .unwrap_or_else(|| DiffArray::zeros(ds.z.shape()));
    let gc = tape
        .grad(c)
        .cloned()
        .unwrap_or_else(|| DiffArray::zeros(ds.c.shape()));
    if !gz.all_finite() || !gc.all_finite() {
        return Err(Error::NumericAbort(format!(
            "gradients became non-finite at iteration {iter_index}"
        )));
    }

    let lr = cfg.lr();
    let m = cfg.momentum;
    for ((p, v), g) in ds
        .z
        .data_mut()
        .iter_mut()
        .zip(opt.vz.data_mut())
        .zip(gz.data())
    {
        *v = m * *v + g;
        *p -= lr * *v;
    }
    for ((p, v), g) in ds
        .c
        .data_mut()
        .iter_mut()
        .zip(opt.vc.data_mut())
        .zip(gc.data())
    {
        *v = m * *v + g;
        *p -= lr * *v;
    }

    Ok(StepStats {
        iter: iter_index,
        loss: loss_val,
        grad_norm_z: gz.l2_norm(),
        grad_norm_c: gc.l2_norm(),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Result of a full distillation run.
#[derive(Debug, Clone)]
pub struct DistillRun {
    pub set: DistilledSet,
    pub curve: Vec<StepStats>,
    pub denoiser_calls: u64,
}

/// Iterate `distill_step` for the configured number of iterations.
///
/// Gates: the bundle's recorded reconstruction MSE must not exceed
/// `recon_gate`, and trajectory matching requires an expert buffer.
pub fn run_distillation(
    cfg: &DistillConfig,
    corpus: &ToyCorpus,
    bundle: &Rc<ModelBundle>,
    schedule: &NoiseSchedule,
    experts: Option<&ExpertBuffer>,
    recon_gate: f64,
) -> Result<DistillRun> {
    if bundle.meta.recon_mse > recon_gate {
        return Err(Error::Gate {
            metric: "recon_mse",
            value: bundle.meta.recon_mse,
            threshold: recon_gate,
        });
    }
    if cfg.algorithm == Algorithm::Mtt && experts.is_none() {
        return Err(Error::Contract(
            "trajectory matching requires a pretrained expert buffer".into(),
        ));
    }
    if corpus.min_train_per_class() < 10 * cfg.ipc {
        return Err(Error::Contract(format!(
            "corpus has {} train images in its smallest class; distillation at \
             ipc = {} needs at least {}",
            corpus.min_train_per_class(),
            cfg.ipc,
            10 * cfg.ipc
        )));
    }
    let mut ds = init_distilled(corpus, bundle, cfg.ipc, cfg.init, cfg.seed)?;
    let mut opt = OptState::new(&ds);
    bundle.reset_denoiser_calls();
    let mut curve = Vec::with_capacity(cfg.iterations);
    for iter_index in 0..cfg.iterations {
        let stats = distill_step(
            &mut ds, cfg, bundle, schedule, corpus, experts, iter_index, &mut opt,
        )?;
        curve.push(stats);
    }
    Ok(DistillRun {
        set: ds,
        curve,
        denoiser_calls: bundle.denoiser_calls(),
    })
}
