//! The generative stack (encoder, decoder, noise predictor, class embedder),
//! witness networks for the distillation losses, and their training routines.
//!
//! All networks are MLPs over flattened images. Witness networks additionally
//! expose a *gradient program*: their cross-entropy parameter gradients
//! written out as tape operations, so a loss defined on those gradients stays
//! differentiable with respect to the images that produced them.

use crate::array::DiffArray;
use crate::corpus::ToyCorpus;
use crate::diffusion::{gamma_embedding, ChainModel, Denoiser};
use crate::error::{Error, Result};
use crate::rng::{mix_seed, RngStream};
use crate::schedule::NoiseSchedule;
use crate::tape::{Tape, Var};
use serde::{Deserialize, Serialize};
use std::cell::Cell;
use std::rc::Rc;

/// Hidden-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Act {
    Relu,
    Tanh,
}

/// Multi-layer perceptron with a linear output layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    weights: Vec<DiffArray>,
    biases: Vec<DiffArray>,
    act: Act,
}

/// Kaiming-uniform fan-in initialization: U(+-sqrt(6 / fan_in)), zero biases.
fn kaiming_weight(rows: usize, cols: usize, rng: &mut RngStream) -> DiffArray {
    let bound = (6.0 / cols as f64).sqrt();
    rng.fill_uniform(-bound, bound, &[rows, cols])
}

impl Mlp {
    pub fn new(sizes: &[usize], act: Act, rng: &mut RngStream) -> Mlp {
        assert!(sizes.len() >= 2, "MLP needs input and output sizes");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            weights.push(kaiming_weight(pair[1], pair[0], rng));
            biases.push(DiffArray::zeros(&[pair[1]]));
        }
        Mlp {
            sizes: sizes.to_vec(),
            weights,
            biases,
            act,
        }
    }

    /// Like [`Mlp::new`] but with a zero-initialized output layer, so the
    /// untrained network predicts exactly zero.
    pub fn new_zero_final(sizes: &[usize], act: Act, rng: &mut RngStream) -> Mlp {
        let mut mlp = Mlp::new(sizes, act, rng);
        let last = mlp.weights.len() - 1;
        mlp.weights[last] = DiffArray::zeros(mlp.weights[last].shape());
        mlp
    }

    pub fn in_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Parameter arrays in update order: W0, b0, W1, b1, ...
    pub fn param_arrays(&self) -> Vec<&DiffArray> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(usize, &mut DiffArray)) {
        let mut idx = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            f(idx, w);
            idx += 1;
            f(idx, b);
            idx += 1;
        }
    }

    /// Enter the parameters on a tape in update order.
    pub fn param_leaves(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.param_arrays()
            .into_iter()
            .map(|p| tape.leaf(p.clone(), requires_grad))
            .collect()
    }

    /// Forward pass with explicit parameter vars (in update order).
    pub fn forward_with_params(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        if params.len() != 2 * self.weights.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter vars, got {}",
                2 * self.weights.len(),
                params.len()
            )));
        }
        let mut h = x;
        let last = self.weights.len() - 1;
        for l in 0..self.weights.len() {
            h = tape.linear(h, params[2 * l], params[2 * l + 1])?;
            if l < last {
                h = match self.act {
                    Act::Relu => tape.relu(h),
                    Act::Tanh => tape.tanh(h),
                };
            }
        }
        Ok(h)
    }

    /// Forward pass entering the parameters as constants.
    pub fn forward_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let params = self.param_leaves(tape, false);
        self.forward_with_params(tape, &params, x)
    }

    /// Tape-free forward pass for pure inference.
    pub fn forward_plain(&self, x: &DiffArray) -> DiffArray {
        let mut h = x.clone();
        let last = self.weights.len() - 1;
        for l in 0..self.weights.len() {
            let w = &self.weights[l];
            let b = &self.biases[l];
            let (batch, n) = (h.rows(), h.cols());
            let m = w.rows();
            debug_assert_eq!(n, w.cols());
            let mut out = vec![0.0; batch * m];
            for i in 0..batch {
                let xr = h.row(i);
                for j in 0..m {
                    let mut acc = b.data()[j];
                    for (xi, wi) in xr.iter().zip(w.row(j)) {
                        acc += xi * wi;
                    }
                    out[i * m + j] = acc;
                }
            }
            let shape = if h.shape().len() == 1 {
                vec![m]
            } else {
                vec![batch, m]
            };
            h = DiffArray::new(shape, out).expect("mlp forward shape");
            if l < last {
                h = match self.act {
                    Act::Relu => h.map(|v| v.max(0.0)),
                    Act::Tanh => h.map(f64::tanh),
                };
            }
        }
        h
    }
}

/// Adam with bias correction; one instance per trained network.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<DiffArray>,
    v: Vec<DiffArray>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[Vec<usize>]) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|s| DiffArray::zeros(s)).collect(),
            v: shapes.iter().map(|s| DiffArray::zeros(s)).collect(),
        }
    }

    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn apply(&mut self, idx: usize, param: &mut DiffArray, grad: &DiffArray) {
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let m = &mut self.m[idx];
        let v = &mut self.v[idx];
        for ((p, g), (mi, vi)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
            *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

// ----- the frozen generative stack -----

/// Dimensions and gate metrics recorded alongside a trained bundle.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BundleMeta {
    pub image_dim: usize,
    pub side: usize,
    pub num_classes: usize,
    pub d_latent: usize,
    pub d_embed: usize,
    pub gamma_embed_dim: usize,
    pub recon_mse: f64,
    pub seed: u64,
}

/// Trained autoencoder, noise predictor, and class embedder, frozen for
/// distillation.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelBundle {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub denoiser: Mlp,
    /// One embedding row per class.
    pub class_embed: DiffArray,
    pub meta: BundleMeta,
    frozen: bool,
    #[serde(skip)]
    denoiser_calls: Cell<u64>,
}

impl ModelBundle {
    pub fn new(
        encoder: Mlp,
        decoder: Mlp,
        denoiser: Mlp,
        class_embed: DiffArray,
        meta: BundleMeta,
    ) -> ModelBundle {
        ModelBundle {
            encoder,
            decoder,
            denoiser,
            class_embed,
            meta,
            frozen: true,
            denoiser_calls: Cell::new(0),
        }
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn denoiser_calls(&self) -> u64 {
        self.denoiser_calls.get()
    }

    pub fn reset_denoiser_calls(&self) {
        self.denoiser_calls.set(0);
    }

    pub fn encode_plain(&self, images: &DiffArray) -> DiffArray {
        self.encoder.forward_plain(images)
    }

    pub fn decode_plain(&self, latents: &DiffArray) -> DiffArray {
        self.decoder.forward_plain(latents)
    }

    /// Fingerprint over every parameter, for frozen-contract checks.
    pub fn param_checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut mix = |arr: &DiffArray| {
            for x in arr.data() {
                h ^= x.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for p in self.encoder.param_arrays() {
            mix(p);
        }
        for p in self.decoder.param_arrays() {
            mix(p);
        }
        for p in self.denoiser.param_arrays() {
            mix(p);
        }
        mix(&self.class_embed);
        h
    }
}

impl Denoiser for ModelBundle {
    fn predict_noise(&self, tape: &mut Tape, c: Var, z_t: Var, gamma_t: f64) -> Result<Var> {
        self.denoiser_calls.set(self.denoiser_calls.get() + 1);
        let rows = tape.value(z_t).rows();
        let emb = tape.constant(gamma_embedding(gamma_t, self.meta.gamma_embed_dim, rows));
        let zc = tape.concat_cols(z_t, c)?;
        let inp = tape.concat_cols(zc, emb)?;
        self.denoiser.forward_tape(tape, inp)
    }
}

impl ChainModel for ModelBundle {
    fn decode(&self, tape: &mut Tape, z0: Var) -> Result<Var> {
        self.decoder.forward_tape(tape, z0)
    }

    fn is_frozen(&self) -> bool {
        self.frozen
    }
}

/// Row lookup in the class-embedding table.
pub fn embed_class(table: &DiffArray, label: usize) -> Result<DiffArray> {
    if label >= table.rows() {
        return Err(Error::Contract(format!(
            "class label {label} out of range for {} classes",
            table.rows()
        )));
    }
    Ok(DiffArray::vector(table.row(label).to_vec()))
}

/// Convex combination of embedding rows.
pub fn embed_soft(table: &DiffArray, weights: &[f64]) -> Result<DiffArray> {
    if weights.len() != table.rows() {
        return Err(Error::Contract(format!(
            "{} weights for {} classes",
            weights.len(),
            table.rows()
        )));
    }
    let d = table.cols();
    let mut out = vec![0.0; d];
    for (k, &wk) in weights.iter().enumerate() {
        for (o, &t) in out.iter_mut().zip(table.row(k)) {
            *o += wk * t;
        }
    }
    Ok(DiffArray::vector(out))
}

// ----- witness networks -----

/// Small from-scratch architectures for distillation and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WitnessArch {
    /// 2 hidden layers of 64.
    #[serde(rename = "mlp-s")]
    MlpS,
    /// 3 hidden layers of 96.
    #[serde(rename = "mlp-m")]
    MlpM,
    /// 4 hidden layers of 64.
    #[serde(rename = "mlp-d")]
    MlpD,
    /// Two MLP blocks with a fixed feature-group permutation between them.
    #[serde(rename = "mixer-s")]
    MixerS,
}

impl WitnessArch {
    pub fn id(&self) -> &'static str {
        match self {
            WitnessArch::MlpS => "mlp-s",
            WitnessArch::MlpM => "mlp-m",
            WitnessArch::MlpD => "mlp-d",
            WitnessArch::MixerS => "mixer-s",
        }
    }

    pub fn parse(s: &str) -> Result<WitnessArch> {
        match s {
            "mlp-s" => Ok(WitnessArch::MlpS),
            "mlp-m" => Ok(WitnessArch::MlpM),
            "mlp-d" => Ok(WitnessArch::MlpD),
            "mixer-s" => Ok(WitnessArch::MixerS),
            other => Err(Error::Config(format!("unknown architecture id '{other}'"))),
        }
    }

    pub fn all() -> [WitnessArch; 4] {
        [
            WitnessArch::MlpS,
            WitnessArch::MlpM,
            WitnessArch::MlpD,
            WitnessArch::MixerS,
        ]
    }
}

#[derive(Debug, Clone)]
enum WitnessLayer {
    Affine {
        w: DiffArray,
        b: DiffArray,
        act: Option<Act>,
    },
    Permute(Rc<Vec<usize>>),
}

/// A freshly sampled network whose gradients, features, or trajectories
/// define a distillation loss.
#[derive(Debug, Clone)]
pub struct WitnessNet {
    arch: WitnessArch,
    layers: Vec<WitnessLayer>,
    input_dim: usize,
    num_classes: usize,
}

/// Stride permutation interleaving `groups` feature groups.
fn group_permutation(n: usize, groups: usize) -> Vec<usize> {
    let per = n / groups;
    (0..n)
        .map(|j| {
            let (g, k) = (j % groups, j / groups);
            g * per + k
        })
        .collect()
}

/// Deterministically construct a witness from (architecture, seed).
pub fn build_witness(arch: WitnessArch, input_dim: usize, num_classes: usize, seed: u64) -> WitnessNet {
    let mut rng = RngStream::from_seed(seed);
    let mut layers = Vec::new();
    let affine = |inp: usize, out: usize, act: Option<Act>, rng: &mut RngStream| {
        WitnessLayer::Affine {
            w: kaiming_weight(out, inp, rng),
            b: DiffArray::zeros(&[out]),
            act,
        }
    };
    match arch {
        WitnessArch::MlpS => {
            layers.push(affine(input_dim, 64, Some(Act::Relu), &mut rng));
            layers.push(affine(64, 64, Some(Act::Relu), &mut rng));
            layers.push(affine(64, num_classes, None, &mut rng));
        }
        WitnessArch::MlpM => {
            layers.push(affine(input_dim, 96, Some(Act::Relu), &mut rng));
            layers.push(affine(96, 96, Some(Act::Relu), &mut rng));
            layers.push(affine(96, 96, Some(Act::Relu), &mut rng));
            layers.push(affine(96, num_classes, None, &mut rng));
        }
        WitnessArch::MlpD => {
            layers.push(affine(input_dim, 64, Some(Act::Relu), &mut rng));
            for _ in 0..3 {
                layers.push(affine(64, 64, Some(Act::Relu), &mut rng));
            }
            layers.push(affine(64, num_classes, None, &mut rng));
        }
        WitnessArch::MixerS => {
            layers.push(affine(input_dim, 96, Some(Act::Relu), &mut rng));
            layers.push(WitnessLayer::Permute(Rc::new(group_permutation(96, 8))));
            layers.push(affine(96, 96, Some(Act::Relu), &mut rng));
            layers.push(affine(96, num_classes, None, &mut rng));
        }
    }
    WitnessNet {
        arch,
        layers,
        input_dim,
        num_classes,
    }
}

/// Plain MLP witness with explicit layer dims, for oracles and checks that
/// need a smooth (tanh) or minimal (logistic) network.
pub fn build_mlp_witness(dims: &[usize], act: Act, seed: u64) -> WitnessNet {
    assert!(dims.len() >= 2);
    let mut rng = RngStream::from_seed(seed);
    let mut layers = Vec::new();
    for (i, pair) in dims.windows(2).enumerate() {
        let is_last = i + 2 == dims.len();
        layers.push(WitnessLayer::Affine {
            w: kaiming_weight(pair[1], pair[0], &mut rng),
            b: DiffArray::zeros(&[pair[1]]),
            act: if is_last { None } else { Some(act) },
        });
    }
    WitnessNet {
        arch: WitnessArch::MlpS,
        layers,
        input_dim: dims[0],
        num_classes: *dims.last().unwrap(),
    }
}

/// One record of the forward trace used to emit the gradient program.
enum TraceRec {
    Affine {
        a_in: Var,
        z: Var,
        h: Var,
        act: Option<Act>,
        w_var: Var,
    },
    Permute(Rc<Vec<usize>>),
}

impl WitnessNet {
    pub fn arch(&self) -> WitnessArch {
        self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_hidden_layers(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, WitnessLayer::Affine { act: Some(_), .. }))
            .count()
    }

    pub fn num_affine_layers(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, WitnessLayer::Affine { .. }))
            .count()
    }

    /// Parameter arrays in order W0, b0, W1, b1, ... over affine layers.
    pub fn param_arrays(&self) -> Vec<&DiffArray> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let WitnessLayer::Affine { w, b, .. } = l {
                out.push(w);
                out.push(b);
            }
        }
        out
    }

    pub fn set_param_arrays(&mut self, arrays: &[DiffArray]) {
        let mut it = arrays.iter();
        for l in &mut self.layers {
            if let WitnessLayer::Affine { w, b, .. } = l {
                *w = it.next().expect("param count").clone();
                *b = it.next().expect("param count").clone();
            }
        }
        assert!(it.next().is_none(), "param count");
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for p in self.param_arrays() {
            out.extend_from_slice(p.data());
        }
        out
    }

    pub fn param_leaves(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.param_arrays()
            .into_iter()
            .map(|p| tape.leaf(p.clone(), requires_grad))
            .collect()
    }

    fn forward_trace(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
    ) -> Result<(Var, Vec<TraceRec>)> {
        if params.len() != 2 * self.num_affine_layers() {
            return Err(Error::Contract(format!(
                "expected {} witness parameter vars, got {}",
                2 * self.num_affine_layers(),
                params.len()
            )));
        }
        let mut trace = Vec::new();
        let mut h = x;
        let mut p = 0;
        for layer in &self.layers {
            match layer {
                WitnessLayer::Affine { act, .. } => {
                    let (w_var, b_var) = (params[p], params[p + 1]);
                    p += 2;
                    let a_in = h;
                    let z = tape.linear(a_in, w_var, b_var)?;
                    let out = match act {
                        Some(Act::Relu) => tape.relu(z),
                        Some(Act::Tanh) => tape.tanh(z),
                        None => z,
                    };
                    trace.push(TraceRec::Affine {
                        a_in,
                        z,
                        h: out,
                        act: *act,
                        w_var,
                    });
                    h = out;
                }
                WitnessLayer::Permute(perm) => {
                    h = tape.permute_cols(h, Rc::clone(perm))?;
                    trace.push(TraceRec::Permute(Rc::clone(perm)));
                }
            }
        }
        Ok((h, trace))
    }

    pub fn forward_with_params(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        Ok(self.forward_trace(tape, params, x)?.0)
    }

    /// Activations entering the final affine layer (the feature map).
    pub fn features_with_params(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let (_, trace) = self.forward_trace(tape, params, x)?;
        for rec in trace.iter().rev() {
            if let TraceRec::Affine { a_in, .. } = rec {
                return Ok(*a_in);
            }
        }
        Err(Error::Contract("witness has no affine layer".into()))
    }

    /// Cross-entropy loss and parameter gradients, emitted as tape ops.
    ///
    /// Both outputs are differentiable with respect to `x` (and `params`,
    /// when those are gradient-carrying), which is what gradient-matching
    /// losses and unrolled inner SGD require. The returned gradient vars are
    /// ordered like `param_arrays`.
    pub fn grad_program(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        labels: &[usize],
    ) -> Result<(Var, Vec<Var>)> {
        let (logits, trace) = self.forward_trace(tape, params, x)?;
        let batch = tape.value(logits).rows();
        if labels.len() != batch {
            return Err(Error::Contract(format!(
                "{} labels for a batch of {batch}",
                labels.len()
            )));
        }
        let loss = tape.cross_entropy_logits(logits, labels)?;

        // delta at the logits: (softmax - onehot) / B.
        let cols = self.num_classes;
        let mut hot = DiffArray::zeros(&[batch, cols]);
        for (i, &y) in labels.iter().enumerate() {
            hot.data_mut()[i * cols + y] = 1.0;
        }
        let hot = tape.constant(hot);
        let probs = tape.softmax(logits);
        let diff = tape.sub(probs, hot)?;
        let mut delta = tape.scale(diff, 1.0 / batch as f64);

        let mut grads_rev: Vec<(Var, Var)> = Vec::new();
        for rec in trace.iter().rev() {
            match rec {
                TraceRec::Permute(perm) => {
                    let mut inverse = vec![0usize; perm.len()];
                    for (j, &p) in perm.iter().enumerate() {
                        inverse[p] = j;
                    }
                    delta = tape.permute_cols(delta, Rc::new(inverse))?;
                }
                TraceRec::Affine {
                    a_in,
                    z,
                    h,
                    act,
                    w_var,
                } => {
                    let delta_z = match act {
                        None => delta,
                        Some(Act::Relu) => {
                            let mask = tape.relu_mask(*z);
                            tape.mul(delta, mask)?
                        }
                        Some(Act::Tanh) => {
                            // act'(z) = 1 - tanh(z)^2, built from the stored
                            // activation so second-order paths stay exact.
                            let hh = tape.mul(*h, *h)?;
                            let neg = tape.neg(hh);
                            let deriv = tape.offset(neg, 1.0);
                            tape.mul(delta, deriv)?
                        }
                    };
                    let delta_t = tape.transpose(delta_z)?;
                    let gw = tape.matmul(delta_t, *a_in)?;
                    let gb = tape.sum_rows(delta_z)?;
                    grads_rev.push((gw, gb));
                    delta = tape.matmul(delta_z, *w_var)?;
                }
            }
        }
        let mut grads = Vec::with_capacity(2 * grads_rev.len());
        for (gw, gb) in grads_rev.into_iter().rev() {
            grads.push(gw);
            grads.push(gb);
        }
        Ok((loss, grads))
    }

    pub fn forward_plain(&self, x: &DiffArray) -> DiffArray {
        let mut h = x.clone();
        for layer in &self.layers {
            match layer {
                WitnessLayer::Affine { w, b, act } => {
                    let (batch, n) = (h.rows(), h.cols());
                    let m = w.rows();
                    debug_assert_eq!(n, w.cols());
                    let mut out = vec![0.0; batch * m];
                    for i in 0..batch {
                        let xr = h.row(i);
                        for j in 0..m {
                            let mut acc = b.data()[j];
                            for (xi, wi) in xr.iter().zip(w.row(j)) {
                                acc += xi * wi;
                            }
                            out[i * m + j] = acc;
                        }
                    }
                    h = DiffArray::new(vec![batch, m], out).expect("witness forward shape");
                    match act {
                        Some(Act::Relu) => h = h.map(|v| v.max(0.0)),
                        Some(Act::Tanh) => h = h.map(f64::tanh),
                        None => {}
                    }
                }
                WitnessLayer::Permute(perm) => {
                    let (rows, cols) = (h.rows(), h.cols());
                    let mut out = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let r = h.row(i);
                        for (j, &p) in perm.iter().enumerate() {
                            out[i * cols + j] = r[p];
                        }
                    }
                    h = DiffArray::new(vec![rows, cols], out).expect("permute shape");
                }
            }
        }
        h
    }

    /// Fraction of rows whose argmax logit matches the label.
    pub fn accuracy(&self, images: &DiffArray, labels: &[usize]) -> f64 {
        let logits = self.forward_plain(images);
        let mut correct = 0usize;
        for (i, &y) in labels.iter().enumerate() {
            let row = logits.row(i);
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == y {
                correct += 1;
            }
        }
        correct as f64 / labels.len().max(1) as f64
    }

    /// One plain-SGD cross-entropy step on a batch; returns the loss.
    pub fn sgd_step(&mut self, images: &DiffArray, labels: &[usize], lr: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let params = self.param_leaves(&mut tape, true);
        let logits = self.forward_with_params(&mut tape, &params, x)?;
        let loss = tape.cross_entropy_logits(logits, labels)?;
        let loss_val = tape.value(loss).item();
        if !loss_val.is_finite() {
            return Err(Error::NumericAbort("witness training loss is not finite".into()));
        }
        tape.backward(loss)?;
        let grads: Vec<DiffArray> = params
            .iter()
            .map(|&p| tape.grad(p).cloned().unwrap_or_else(|| DiffArray::zeros(tape.value(p).shape())))
            .collect();
        let mut idx = 0;
        for l in &mut self.layers {
            if let WitnessLayer::Affine { w, b, .. } = l {
                for (pw, gw) in w.data_mut().iter_mut().zip(grads[idx].data()) {
                    *pw -= lr * gw;
                }
                for (pb, gb) in b.data_mut().iter_mut().zip(grads[idx + 1].data()) {
                    *pb -= lr * gb;
                }
                idx += 2;
            }
        }
        Ok(loss_val)
    }
}

// ----- pretraining -----

/// Train the autoencoder on the corpus; returns (encoder, decoder, test MSE).
pub fn pretrain_autoencoder(
    corpus: &ToyCorpus,
    d_latent: usize,
    hidden: &[usize],
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<(Mlp, Mlp, f64)> {
    let image_dim = corpus.image_dim();
    if d_latent > image_dim {
        return Err(Error::Config(format!(
            "d_latent {d_latent} exceeds image dim {image_dim}"
        )));
    }
    let mut rng = RngStream::new(mix_seed(seed, 0xae), 0);
    let mut enc_sizes = vec![image_dim];
    enc_sizes.extend_from_slice(hidden);
    enc_sizes.push(d_latent);
    let mut dec_sizes = vec![d_latent];
    dec_sizes.extend(hidden.iter().rev());
    dec_sizes.push(image_dim);
    let mut encoder = Mlp::new(&enc_sizes, Act::Tanh, &mut rng);
    let mut decoder = Mlp::new(&dec_sizes, Act::Tanh, &mut rng);

    let shapes: Vec<Vec<usize>> = encoder
        .param_arrays()
        .iter()
        .chain(decoder.param_arrays().iter())
        .map(|p| p.shape().to_vec())
        .collect();
    let mut adam = Adam::new(lr, &shapes);

    let n = corpus.train_len();
    let batch = batch.min(n).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    for _epoch in 0..epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let (x, _) = corpus.train_batch(chunk);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let eparams = encoder.param_leaves(&mut tape, true);
            let dparams = decoder.param_leaves(&mut tape, true);
            let z = encoder.forward_with_params(&mut tape, &eparams, xv)?;
            let recon = decoder.forward_with_params(&mut tape, &dparams, z)?;
            let loss = tape.mse(recon, xv)?;
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::NumericAbort("autoencoder training diverged".into()));
            }
            tape.backward(loss)?;
            let all_params: Vec<Var> = eparams.iter().chain(dparams.iter()).copied().collect();
            let grads: Vec<DiffArray> = all_params
                .iter()
                .map(|&p| {
                    tape.grad(p)
                        .cloned()
                        .unwrap_or_else(|| DiffArray::zeros(tape.value(p).shape()))
                })
                .collect();
            adam.begin_step();
            let enc_count = 2 * encoder.num_layers();
            encoder.visit_params_mut(|i, p| adam.apply(i, p, &grads[i]));
            decoder.visit_params_mut(|i, p| adam.apply(enc_count + i, p, &grads[enc_count + i]));
        }
    }

    let recon = decoder.forward_plain(&encoder.forward_plain(&corpus.test_images));
    let mse = mean_sq_err(&recon, &corpus.test_images);
    Ok((encoder, decoder, mse))
}

pub fn mean_sq_err(a: &DiffArray, b: &DiffArray) -> f64 {
    debug_assert!(a.same_shape(b));
    let n = a.len() as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

/// Orthonormal rows via Gram-Schmidt on Gaussian draws.
fn orthonormal_rows(rows: usize, cols: usize, rng: &mut RngStream) -> DiffArray {
    assert!(rows <= cols, "cannot orthonormalize {rows} rows in {cols} dims");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while basis.len() < rows {
        let mut v = rng.fill_normal(&[cols]).into_data();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= dot * bi;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            for vi in &mut v {
                *vi /= norm;
            }
            basis.push(v);
        }
    }
    let data: Vec<f64> = basis.into_iter().flatten().collect();
    DiffArray::new(vec![rows, cols], data).expect("orthonormal shape")
}

/// Train the noise predictor and the class embedder jointly.
///
/// Minimizes `E || eps - f(z_t, c_y, gamma_t) ||^2` over uniform per-sample
/// steps, with `z_t` built from the frozen encoder's latents. Returns the
/// trained denoiser and embedding table.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_denoiser(
    encoder: &Mlp,
    corpus: &ToyCorpus,
    schedule: &NoiseSchedule,
    d_embed: usize,
    hidden: &[usize],
    gamma_embed_dim: usize,
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<(Mlp, DiffArray)> {
    if schedule.steps() < 1 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    let d_latent = encoder.out_dim();
    let num_classes = corpus.num_classes;
    let mut rng = RngStream::new(mix_seed(seed, 0xde), 0);

    let mut table = orthonormal_rows(num_classes, d_embed, &mut rng);
    let mut sizes = vec![d_latent + d_embed + gamma_embed_dim];
    sizes.extend_from_slice(hidden);
    sizes.push(d_latent);
    let mut denoiser = Mlp::new_zero_final(&sizes, Act::Tanh, &mut rng);

    let latents = encoder.forward_plain(&corpus.train_images);

    let mut shapes: Vec<Vec<usize>> = denoiser.param_arrays().iter().map(|p| p.shape().to_vec()).collect();
    shapes.push(table.shape().to_vec());
    let mut adam = Adam::new(lr, &shapes);

    let n = corpus.train_len();
    let batch = batch.min(n).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let t_max = schedule.steps();
    for _epoch in 0..epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let bsz = chunk.len();
            // Per-sample step, noised latent, and gamma features (all
            // constant with respect to the trained parameters).
            let mut zt = Vec::with_capacity(bsz * d_latent);
            let mut eps = Vec::with_capacity(bsz * d_latent);
            let mut gemb = Vec::with_capacity(bsz * gamma_embed_dim);
            let mut sel = DiffArray::zeros(&[bsz, num_classes]);
            for (row, &i) in chunk.iter().enumerate() {
                let t = 1 + rng.gen_index(t_max);
                let g = schedule.gamma(t);
                let z0 = latents.row(i);
                for &z in z0 {
                    let e = rng.normal_scalar();
                    eps.push(e);
                    zt.push(g.sqrt() * z + (1.0 - g).sqrt() * e);
                }
                gemb.extend_from_slice(gamma_embedding(g, gamma_embed_dim, 1).data());
                sel.data_mut()[row * num_classes + corpus.train_labels[i]] = 1.0;
            }

            let mut tape = Tape::new();
            let zt = tape.constant(DiffArray::new(vec![bsz, d_latent], zt)?);
            let eps = tape.constant(DiffArray::new(vec![bsz, d_latent], eps)?);
            let gemb = tape.constant(DiffArray::new(vec![bsz, gamma_embed_dim], gemb)?);
            let sel = tape.constant(sel);
            let table_var = tape.leaf(table.clone(), true);
            let c = tape.matmul(sel, table_var)?;
            let zc = tape.concat_cols(zt, c)?;
            let inp = tape.concat_cols(zc, gemb)?;
            let dparams = denoiser.param_leaves(&mut tape, true);
            let pred = denoiser.forward_with_params(&mut tape, &dparams, inp)?;
            let loss = tape.mse(pred, eps)?;
            if !tape.value(loss).item().is_finite() {
                return Err(Error::NumericAbort("denoiser training diverged".into()));
            }
            tape.backward(loss)?;

            let grads: Vec<DiffArray> = dparams
                .iter()
                .chain(std::iter::once(&table_var))
                .map(|&p| {
                    tape.grad(p)
                        .cloned()
                        .unwrap_or_else(|| DiffArray::zeros(tape.value(p).shape()))
                })
                .collect();
            adam.begin_step();
            let den_count = 2 * denoiser.num_layers();
            denoiser.visit_params_mut(|i, p| adam.apply(i, p, &grads[i]));
            adam.apply(den_count, &mut table, &grads[den_count]);
        }
    }
    Ok((denoiser, table))
}

/// Mean denoising MSE of a predictor over the test split at a fixed step.
pub fn denoising_mse_at(
    bundle_denoiser: Option<(&Mlp, &DiffArray, usize)>,
    encoder: &Mlp,
    corpus: &ToyCorpus,
    schedule: &NoiseSchedule,
    t: usize,
    seed: u64,
) -> f64 {
    let mut rng = RngStream::new(mix_seed(seed, 0xee), 0);
    let latents = encoder.forward_plain(&corpus.test_images);
    let d_latent = latents.cols();
    let g = schedule.gamma(t);
    let n = corpus.test_len();
    let mut sum = 0.0;
    let mut count = 0.0;
    for i in 0..n {
        let z0 = latents.row(i);
        let mut zt = Vec::with_capacity(d_latent);
        let mut eps = Vec::with_capacity(d_latent);
        for &z in z0 {
            let e = rng.normal_scalar();
            eps.push(e);
            zt.push(g.sqrt() * z + (1.0 - g).sqrt() * e);
        }
        let pred: Vec<f64> = match bundle_denoiser {
            Some((mlp, table, gamma_dim)) => {
                let c = table.row(corpus.test_labels[i]);
                let gemb = gamma_embedding(g, gamma_dim, 1);
                let mut inp = zt.clone();
                inp.extend_from_slice(c);
                inp.extend_from_slice(gemb.data());
                mlp.forward_plain(&DiffArray::vector(inp)).into_data()
            }
            None => vec![0.0; d_latent],
        };
        for (p, e) in pred.iter().zip(&eps) {
            sum += (p - e) * (p - e);
            count += 1.0;
        }
    }
    sum / count
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_toy_corpus;
    use crate::schedule::{default_schedule, make_linear_schedule, SigmaPolicy};

    fn test_corpus() -> ToyCorpus {
        generate_toy_corpus(4, 60, 30, 12, 0.12, 42).unwrap()
    }

    #[test]
    fn corpus_is_learnable_by_small_witness() {
        // A depth-2 MLP trained 200 SGD steps must exceed 95% test accuracy.
        let corpus = generate_toy_corpus(4, 200, 60, 12, 0.12, 42).unwrap();
        let mut w = build_witness(WitnessArch::MlpS, corpus.image_dim(), 4, 99);
        let mut rng = RngStream::from_seed(123);
        for _ in 0..200 {
            let idx: Vec<usize> = (0..64).map(|_| rng.gen_index(corpus.train_len())).collect();
            let (x, y) = corpus.train_batch(&idx);
            w.sgd_step(&x, &y, 0.05).unwrap();
        }
        let acc = w.accuracy(&corpus.test_images, &corpus.test_labels);
        assert!(acc >= 0.95, "test accuracy {acc}");
    }

    #[test]
    fn linear_autoencoder_is_identity_capable() {
        // Overparameterized sanity run: d_latent = image_dim, no hidden
        // layer, isotropic inputs.
        let mut rng = RngStream::from_seed(7);
        let small = ToyCorpus {
            train_images: rng.fill_uniform(0.0, 1.0, &[100, 64]),
            train_labels: (0..100).map(|i| i % 4).collect(),
            test_images: rng.fill_uniform(0.0, 1.0, &[40, 64]),
            test_labels: (0..40).map(|i| i % 4).collect(),
            side: 8,
            num_classes: 4,
        };
        let (_e, _d, mse) = pretrain_autoencoder(&small, 64, &[], 2000, 2e-2, 100, 7).unwrap();
        assert!(mse <= 1e-4, "linear AE recon mse {mse}");
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let corpus = test_corpus();
        let (e0, d0, mse0) = pretrain_autoencoder(&corpus, 16, &[96], 0, 2e-3, 128, 11).unwrap();
        // Rebuild the same nets directly from the same derived seed.
        let mut rng = RngStream::new(mix_seed(11, 0xae), 0);
        let e_ref = Mlp::new(&[144, 96, 16], Act::Tanh, &mut rng);
        let d_ref = Mlp::new(&[16, 96, 144], Act::Tanh, &mut rng);
        for (a, b) in e0.param_arrays().iter().zip(e_ref.param_arrays()) {
            assert_eq!(*a, b);
        }
        for (a, b) in d0.param_arrays().iter().zip(d_ref.param_arrays()) {
            assert_eq!(*a, b);
        }
        let recon = d_ref.forward_plain(&e_ref.forward_plain(&corpus.test_images));
        assert_eq!(mse0, mean_sq_err(&recon, &corpus.test_images));
    }

    #[test]
    fn default_autoencoder_meets_recon_gate() {
        let corpus = generate_toy_corpus(4, 200, 60, 12, 0.12, 42).unwrap();
        let (_e, _d, mse) = pretrain_autoencoder(&corpus, 16, &[96], 60, 2e-3, 128, 42).unwrap();
        assert!(mse <= 0.02, "default recon mse {mse}");
    }

    #[test]
    fn trained_denoiser_beats_zero_predictor() {
        let corpus = test_corpus();
        let (enc, _dec, _) = pretrain_autoencoder(&corpus, 16, &[96], 40, 2e-3, 128, 42).unwrap();
        let sched = default_schedule(10, SigmaPolicy::Scaled);
        let (den, table) =
            pretrain_denoiser(&enc, &corpus, &sched, 8, &[64, 64, 64], 16, 40, 2e-3, 128, 42)
                .unwrap();
        for t in [2usize, 5, 9] {
            let zero = denoising_mse_at(None, &enc, &corpus, &sched, t, 5);
            let trained = denoising_mse_at(Some((&den, &table, 16)), &enc, &corpus, &sched, t, 5);
            assert!(trained < zero, "t={t}: trained {trained} vs zero {zero}");
        }
    }

    #[test]
    fn untrained_denoiser_loss_is_latent_dim_scale() {
        // At gamma -> 1 the zero-initialized predictor scores the plain
        // expectation of the squared Gaussian noise: 1 per element.
        let corpus = test_corpus();
        let (enc, _dec, _) = pretrain_autoencoder(&corpus, 16, &[96], 10, 2e-3, 128, 42).unwrap();
        let near_one = make_linear_schedule(3, 1e-4, 1e-3, SigmaPolicy::Zero).unwrap();
        let (den, table) =
            pretrain_denoiser(&enc, &corpus, &near_one, 8, &[64, 64], 16, 0, 2e-3, 128, 1).unwrap();
        let mse = denoising_mse_at(Some((&den, &table, 16)), &enc, &corpus, &near_one, 3, 5);
        assert!((0.9..=1.1).contains(&mse), "per-element mse {mse}");
    }

    #[test]
    fn denoiser_pretraining_is_reproducible() {
        let corpus = test_corpus();
        let (enc, _d, _) = pretrain_autoencoder(&corpus, 16, &[96], 5, 2e-3, 128, 42).unwrap();
        let sched = default_schedule(10, SigmaPolicy::Scaled);
        let run = || {
            pretrain_denoiser(&enc, &corpus, &sched, 8, &[64, 64], 16, 3, 2e-3, 128, 31).unwrap()
        };
        let (a, ta) = run();
        let (b, tb) = run();
        assert_eq!(ta, tb);
        for (x, y) in a.param_arrays().iter().zip(b.param_arrays()) {
            assert_eq!(*x, y);
        }
    }

    #[test]
    fn embed_class_examples() {
        let table =
            DiffArray::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(embed_class(&table, 1).unwrap().data(), &[3.0, 4.0]);
        assert!(embed_class(&table, 3).is_err());
        // Uniform weights over two classes: midpoint of the rows.
        let mid = embed_soft(&table, &[0.5, 0.5, 0.0]).unwrap();
        assert_eq!(mid.data(), &[2.0, 3.0]);
        assert!(embed_soft(&table, &[1.0]).is_err());
    }

    #[test]
    fn witness_construction_is_deterministic() {
        let a = build_witness(WitnessArch::MixerS, 144, 4, 1234);
        let b = build_witness(WitnessArch::MixerS, 144, 4, 1234);
        assert_eq!(a.params_flat(), b.params_flat());
        let c = build_witness(WitnessArch::MixerS, 144, 4, 1235);
        assert_ne!(a.params_flat(), c.params_flat());
    }

    #[test]
    fn witness_depth_table() {
        let s = build_witness(WitnessArch::MlpS, 144, 4, 0);
        let d = build_witness(WitnessArch::MlpD, 144, 4, 0);
        assert_eq!(s.num_hidden_layers(), 2);
        assert_eq!(d.num_hidden_layers(), 4);
    }

    #[test]
    fn witness_logits_are_finite_with_class_shape() {
        let corpus = test_corpus();
        let (x, _) = corpus.train_batch(&[0, 1, 2, 10, 50]);
        for arch in WitnessArch::all() {
            let w = build_witness(arch, corpus.image_dim(), 4, 7);
            let logits = w.forward_plain(&x);
            assert_eq!(logits.shape(), &[5, 4]);
            assert!(logits.all_finite());
        }
    }

    #[test]
    fn grad_program_matches_tape_backward() {
        // Dual route: the explicit gradient program must agree with the
        // tape's own adjoints of the same cross-entropy.
        let mut rng = RngStream::from_seed(5);
        let x0 = rng.fill_uniform(0.0, 1.0, &[6, 20]);
        let labels = vec![0usize, 1, 2, 3, 1, 0];
        for (arch, dims) in [
            (Some(WitnessArch::MlpS), vec![]),
            (Some(WitnessArch::MixerS), vec![]),
            (None, vec![20usize, 10, 4]),
        ] {
            let w = match arch {
                Some(a) => build_witness(a, 20, 4, 77),
                None => build_mlp_witness(&dims, Act::Tanh, 77),
            };

            let mut t_ref = Tape::new();
            let x = t_ref.constant(x0.clone());
            let params = w.param_leaves(&mut t_ref, true);
            let logits = w.forward_with_params(&mut t_ref, &params, x).unwrap();
            let loss = t_ref.cross_entropy_logits(logits, &labels).unwrap();
            t_ref.backward(loss).unwrap();

            let mut t_prog = Tape::new();
            let xp = t_prog.constant(x0.clone());
            let params_p = w.param_leaves(&mut t_prog, false);
            let (_, grads) = w.grad_program(&mut t_prog, &params_p, xp, &labels).unwrap();

            for (p, g) in params.iter().zip(&grads) {
                let want = t_ref.grad(*p).unwrap();
                let got = t_prog.value(*g);
                let diff = want.max_abs_diff(got).unwrap();
                assert!(diff < 1e-12, "grad program mismatch {diff}");
            }
        }
    }

    #[test]
    fn bundle_counts_denoiser_calls_and_checksums() {
        let mut rng = RngStream::from_seed(9);
        let enc = Mlp::new(&[16, 8], Act::Tanh, &mut rng);
        let dec = Mlp::new(&[8, 16], Act::Tanh, &mut rng);
        let den = Mlp::new(&[8 + 4 + 16, 12, 8], Act::Tanh, &mut rng);
        let table = orthonormal_rows(3, 4, &mut rng);
        let bundle = ModelBundle::new(
            enc,
            dec,
            den,
            table,
            BundleMeta {
                image_dim: 16,
                side: 4,
                num_classes: 3,
                d_latent: 8,
                d_embed: 4,
                gamma_embed_dim: 16,
                recon_mse: 0.0,
                seed: 9,
            },
        );
        let sum_before = bundle.param_checksum();
        assert!(bundle.frozen());
        assert_eq!(bundle.denoiser_calls(), 0);

        let mut tape = Tape::new();
        let z = tape.leaf(DiffArray::matrix(2, 8, vec![0.1; 16]).unwrap(), true);
        let c = tape.constant(DiffArray::matrix(2, 4, vec![0.2; 8]).unwrap());
        let _ = bundle.predict_noise(&mut tape, c, z, 0.5).unwrap();
        assert_eq!(bundle.denoiser_calls(), 1);
        assert_eq!(bundle.param_checksum(), sum_before);
    }

    #[test]
    fn orthonormal_embedding_rows() {
        let mut rng = RngStream::from_seed(3);
        let t = orthonormal_rows(4, 8, &mut rng);
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = t.row(i).iter().zip(t.row(j)).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10);
            }
        }
    }
}
