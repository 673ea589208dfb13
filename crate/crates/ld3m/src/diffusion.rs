//! Forward noising and the reverse denoising chain, differentiable end to end.
//!
//! Two reverse updates are provided. The standard step refines the state from
//! the predicted mean alone, so gradients reaching the initial latent must
//! traverse every step's Jacobian and decay as the chain grows. The modified
//! step blends the predicted mean with the fixed initial state `z_T` using a
//! linearly decaying weight `t/T`, which gives every step a direct gradient
//! path back to the learnable latents.

use crate::array::DiffArray;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::schedule::NoiseSchedule;
use crate::tape::{Tape, Var};
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// Noise-prediction network interface used by the reverse process.
pub trait Denoiser {
    fn predict_noise(&self, tape: &mut Tape, c: Var, z_t: Var, gamma_t: f64) -> Result<Var>;
}

/// A frozen generative stack the sampler can drive end to end.
pub trait ChainModel: Denoiser {
    fn decode(&self, tape: &mut Tape, z0: Var) -> Result<Var>;

    /// Whether the model's parameters are frozen for sampling.
    fn is_frozen(&self) -> bool {
        true
    }
}

/// Which reverse update the sampler applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Standard,
    Ld3m,
}

impl SampleMode {
    pub fn id(&self) -> &'static str {
        match self {
            SampleMode::Standard => "standard",
            SampleMode::Ld3m => "ld3m",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(SampleMode::Standard),
            "ld3m" => Ok(SampleMode::Ld3m),
            other => Err(Error::Config(format!("unknown sample mode '{other}'"))),
        }
    }
}

/// Whether the injected noise is scaled by sigma^2 (as the update rule is
/// written here) or by sigma (the usual ancestral-sampling convention).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseCoef {
    #[default]
    Variance,
    StdDev,
}

impl NoiseCoef {
    fn apply(&self, sigma2: f64) -> f64 {
        match self {
            NoiseCoef::Variance => sigma2,
            NoiseCoef::StdDev => sigma2.sqrt(),
        }
    }
}

/// State of a sampling chain after step `t`.
#[derive(Debug, Clone, Copy)]
pub struct ChainState {
    /// Step index in `[0, T]`; `t = T` is the fully noised state.
    pub t: usize,
    pub z: Var,
    /// The fixed initial state reused by every skip term of one phase.
    pub anchor: Option<Var>,
}

/// Which steps have their skip term treated as a constant during backward.
///
/// Detaching never changes forward values; it only prunes gradient paths,
/// which is how the per-step path decomposition isolates edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SkipDetach {
    #[default]
    None,
    /// Detach the skip term at this step only.
    Only(usize),
    /// Detach the skip term at every step except this one.
    AllExcept(usize),
    /// Detach the skip term at every step `s <= t`.
    UpTo(usize),
}

impl SkipDetach {
    fn applies(&self, step: usize) -> bool {
        match *self {
            SkipDetach::None => false,
            SkipDetach::Only(t) => step == t,
            SkipDetach::AllExcept(t) => step != t,
            SkipDetach::UpTo(t) => step <= t,
        }
    }
}

/// Sampler configuration beyond the schedule itself.
#[derive(Debug, Clone)]
pub struct ChainOptions {
    pub mode: SampleMode,
    /// Wrap each step (and the decode) in a replayable segment.
    pub checkpoint: bool,
    pub noise_coef: NoiseCoef,
    /// Multiplier on the skip weight `t/T`; zero degenerates to the
    /// standard sampler.
    pub skip_scale: f64,
    /// Diagnostic: treat the predicted mean at this step as a constant.
    pub detach_mu_at: Option<usize>,
    /// Diagnostic: skip-term detachment pattern.
    pub detach_skip: SkipDetach,
}

impl Default for ChainOptions {
    fn default() -> Self {
        ChainOptions {
            mode: SampleMode::Ld3m,
            checkpoint: true,
            noise_coef: NoiseCoef::Variance,
            skip_scale: 1.0,
            detach_mu_at: None,
            detach_skip: SkipDetach::None,
        }
    }
}

impl ChainOptions {
    pub fn with_mode(mode: SampleMode) -> Self {
        ChainOptions {
            mode,
            ..Default::default()
        }
    }
}

/// Noise a latent to the end of the forward process:
/// `z_T = sqrt(gamma_T) * z + sqrt(1 - gamma_T) * noise`.
pub fn forward_diffuse(
    tape: &mut Tape,
    z: Var,
    schedule: &NoiseSchedule,
    noise: &DiffArray,
) -> Result<ChainState> {
    if !tape.value(z).same_shape(noise) {
        return Err(Error::Shape {
            op: "forward_diffuse",
            lhs: tape.value(z).shape().to_vec(),
            rhs: noise.shape().to_vec(),
        });
    }
    let gamma_t = schedule.gamma_final();
    let signal = tape.scale(z, gamma_t.sqrt());
    let scaled_noise = noise.map(|x| x * (1.0 - gamma_t).sqrt());
    let noise_leaf = tape.constant(scaled_noise);
    let z_t = tape.add(signal, noise_leaf)?;
    Ok(ChainState {
        t: schedule.steps(),
        z: z_t,
        anchor: Some(z_t),
    })
}

fn predict_mean_coeffs(
    tape: &mut Tape,
    denoiser: &dyn Denoiser,
    c: Var,
    z_t: Var,
    alpha_t: f64,
    gamma_t: f64,
) -> Result<Var> {
    if gamma_t >= 1.0 {
        return Err(Error::Domain(format!(
            "predicted mean undefined at gamma_t = {gamma_t} (division by sqrt(1 - gamma_t))"
        )));
    }
    let eps_hat = denoiser.predict_noise(tape, c, z_t, gamma_t)?;
    let coef = (1.0 - alpha_t) / (1.0 - gamma_t).sqrt();
    let scaled = tape.scale(eps_hat, coef);
    let centered = tape.sub(z_t, scaled)?;
    Ok(tape.scale(centered, 1.0 / alpha_t.sqrt()))
}

/// Predicted mean of the reverse transition at step `t`:
/// `mu = (z_t - ((1 - alpha_t) / sqrt(1 - gamma_t)) * eps_hat) / sqrt(alpha_t)`.
pub fn predict_mean(
    tape: &mut Tape,
    denoiser: &dyn Denoiser,
    c: Var,
    z_t: Var,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    if t < 1 || t > schedule.steps() {
        return Err(Error::Contract(format!(
            "predict_mean: step {t} outside 1..={}",
            schedule.steps()
        )));
    }
    predict_mean_coeffs(tape, denoiser, c, z_t, schedule.alpha(t), schedule.gamma(t))
}

fn add_step_noise(tape: &mut Tape, mean: Var, eps: &DiffArray, coef: f64) -> Result<Var> {
    if coef == 0.0 {
        return Ok(mean);
    }
    if !tape.value(mean).same_shape(eps) {
        return Err(Error::Shape {
            op: "reverse_step",
            lhs: tape.value(mean).shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    let scaled = tape.constant(eps.map(|x| x * coef));
    tape.add(mean, scaled)
}

/// Standard reverse update: `z_{t-1} = mu + sigma_t^2 * eps_t`.
pub fn reverse_step_standard(
    tape: &mut Tape,
    state: &ChainState,
    denoiser: &dyn Denoiser,
    c: Var,
    schedule: &NoiseSchedule,
    eps: &DiffArray,
    noise_coef: NoiseCoef,
) -> Result<ChainState> {
    if state.t < 1 {
        return Err(Error::Contract("reverse step underflow: t = 0".into()));
    }
    let t = state.t;
    let mu = predict_mean(tape, denoiser, c, state.z, t, schedule)?;
    let z = add_step_noise(tape, mu, eps, noise_coef.apply(schedule.sigma2(t)))?;
    Ok(ChainState {
        t: t - 1,
        z,
        anchor: state.anchor,
    })
}

/// Skip-connected reverse update:
/// `z_{t-1} = (1 - t/T) * mu + (t/T) * z_T + sigma_t^2 * eps_t`.
///
/// The skip term always reads the chain's fixed anchor `z_T`, never an
/// intermediate state, so the update stays a pure function of
/// `(z_t, z_T, t, c, eps_t)`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step_ld3m(
    tape: &mut Tape,
    state: &ChainState,
    denoiser: &dyn Denoiser,
    c: Var,
    schedule: &NoiseSchedule,
    eps: &DiffArray,
    noise_coef: NoiseCoef,
    skip_scale: f64,
) -> Result<ChainState> {
    if state.t < 1 {
        return Err(Error::Contract("reverse step underflow: t = 0".into()));
    }
    let anchor = state.anchor.ok_or_else(|| {
        Error::Contract("skip-connected step requires the z_T anchor to be set".into())
    })?;
    let t = state.t;
    let mu = predict_mean(tape, denoiser, c, state.z, t, schedule)?;
    let w = skip_scale * t as f64 / schedule.steps() as f64;
    let mean = blend_mean(tape, mu, anchor, w)?;
    let z = add_step_noise(tape, mean, eps, noise_coef.apply(schedule.sigma2(t)))?;
    Ok(ChainState {
        t: t - 1,
        z,
        anchor: state.anchor,
    })
}

fn blend_mean(tape: &mut Tape, mu: Var, anchor: Var, w: f64) -> Result<Var> {
    let mu_term = tape.scale(mu, 1.0 - w);
    let skip_term = tape.scale(anchor, w);
    tape.add(mu_term, skip_term)
}

/// Output handles of one full sampling phase.
#[derive(Debug, Clone, Copy)]
pub struct ChainOutput {
    pub z0: Var,
    pub decoded: Var,
    pub anchor: Var,
}

/// Run the full chain: noise `z` to `z_T`, apply `T` reverse steps of the
/// selected mode, then decode. `z_T` is drawn once and reused as the anchor
/// of every skip term; each step and the decode run as graph segments
/// (replayable when `opts.checkpoint` is set). The result is differentiable
/// with respect to `z` and `c` only; model parameters never enter the tape
/// as gradient-carrying leaves.
pub fn sample_chain<M>(
    tape: &mut Tape,
    rng: &mut RngStream,
    z: Var,
    c: Var,
    model: &Rc<M>,
    schedule: &NoiseSchedule,
    opts: &ChainOptions,
) -> Result<ChainOutput>
where
    M: ChainModel + 'static,
{
    if !model.is_frozen() {
        return Err(Error::Contract(
            "sampling requires a frozen model bundle".into(),
        ));
    }
    let t_max = schedule.steps();
    let shape = tape.value(z).shape().to_vec();
    let fwd_noise = rng.fill_normal(&shape);
    let state = forward_diffuse(tape, z, schedule, &fwd_noise)?;
    let anchor = state.anchor.expect("forward_diffuse sets the anchor");

    let mut cur = state.z;
    for t in (1..=t_max).rev() {
        let alpha_t = schedule.alpha(t);
        let gamma_t = schedule.gamma(t);
        let coef = opts.noise_coef.apply(schedule.sigma2(t));
        let mode = opts.mode;
        let skip_w = opts.skip_scale * t as f64 / t_max as f64;
        let detach_mu = opts.detach_mu_at == Some(t);
        let detach_skip = opts.detach_skip.applies(t);
        let model_ref = Rc::clone(model);

        let outs = tape.run_segment(
            &[cur, anchor, c],
            rng,
            opts.checkpoint,
            move |tp, ins, r| {
                let (z_t, anchor_in, c_in) = (ins[0], ins[1], ins[2]);
                let mut mu =
                    predict_mean_coeffs(tp, model_ref.as_ref(), c_in, z_t, alpha_t, gamma_t)?;
                if detach_mu {
                    mu = tp.detach(mu);
                }
                let mean = match mode {
                    SampleMode::Standard => mu,
                    SampleMode::Ld3m => {
                        let skip_src = if detach_skip {
                            tp.detach(anchor_in)
                        } else {
                            anchor_in
                        };
                        blend_mean(tp, mu, skip_src, skip_w)?
                    }
                };
                let out = if coef != 0.0 {
                    let shape = tp.value(mean).shape().to_vec();
                    let eps = r.fill_normal(&shape);
                    add_step_noise(tp, mean, &eps, coef)?
                } else {
                    mean
                };
                Ok(vec![out])
            },
        )?;
        cur = outs[0];
    }

    let model_ref = Rc::clone(model);
    let outs = tape.run_segment(&[cur], rng, opts.checkpoint, move |tp, ins, _| {
        Ok(vec![model_ref.decode(tp, ins[0])?])
    })?;
    Ok(ChainOutput {
        z0: cur,
        decoded: outs[0],
        anchor,
    })
}

/// Sinusoidal feature rows for the scalar noise level `gamma_t`.
///
/// `dim/2` sine/cosine pairs at geometric frequencies, tiled over `rows`.
pub fn gamma_embedding(gamma_t: f64, dim: usize, rows: usize) -> DiffArray {
    let half = dim / 2;
    let mut row = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = std::f64::consts::PI * (1u64 << i) as f64;
        row.push((freq * gamma_t).sin());
        row.push((freq * gamma_t).cos());
    }
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        data.extend_from_slice(&row);
    }
    DiffArray::new(vec![rows, dim], data).expect("gamma embedding shape")
}
