//! Run configuration: one JSON document drives corpus generation,
//! pretraining, distillation, and evaluation deterministically.

use crate::corpus::{corpus_from_idx, generate_toy_corpus, ToyCorpus};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::eval::EvalProtocol;
use crate::models::{pretrain_autoencoder, pretrain_denoiser, BundleMeta, ModelBundle};
use crate::schedule::{
    make_linear_schedule, NoiseSchedule, SigmaPolicy, DEFAULT_BETA_END, DEFAULT_BETA_START,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable overriding `global_seed`.
pub const SEED_ENV_VAR: &str = "LD3M_SEED";

fn d_num_classes() -> usize {
    4
}
fn d_per_class_train() -> usize {
    200
}
fn d_per_class_test() -> usize {
    60
}
fn d_side() -> usize {
    12
}
fn d_noise_level() -> f64 {
    0.12
}
fn d_per_class_cap() -> usize {
    1000
}

/// Where training data comes from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSpec {
    /// Procedurally rendered class patterns with additive pixel noise.
    Synthetic {
        #[serde(default = "d_num_classes")]
        num_classes: usize,
        #[serde(default = "d_per_class_train")]
        per_class_train: usize,
        #[serde(default = "d_per_class_test")]
        per_class_test: usize,
        #[serde(default = "d_side")]
        side: usize,
        #[serde(default = "d_noise_level")]
        noise_level: f64,
    },
    /// External IDX-format image/label files, downsampled to `side x side`.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default = "d_side")]
        side: usize,
        #[serde(default = "d_num_classes")]
        num_classes: usize,
        #[serde(default = "d_per_class_cap")]
        per_class_train: usize,
        #[serde(default = "d_per_class_cap")]
        per_class_test: usize,
    },
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec::Synthetic {
            num_classes: d_num_classes(),
            per_class_train: d_per_class_train(),
            per_class_test: d_per_class_test(),
            side: d_side(),
            noise_level: d_noise_level(),
        }
    }
}

/// Noise-schedule parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma_policy: SigmaPolicy,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            t: 10,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            sigma_policy: SigmaPolicy::Scaled,
        }
    }
}

/// Model dimensions and pretraining budgets.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub d_latent: usize,
    pub d_embed: usize,
    pub gamma_embed_dim: usize,
    pub ae_hidden: Vec<usize>,
    pub denoiser_hidden: Vec<usize>,
    pub ae_epochs: usize,
    pub ae_lr: f64,
    pub denoiser_epochs: usize,
    pub denoiser_lr: f64,
    pub batch: usize,
    /// Reconstruction-MSE gate: distillation refuses bundles above this.
    pub recon_gate: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            d_latent: 16,
            d_embed: 8,
            gamma_embed_dim: 16,
            ae_hidden: vec![96],
            denoiser_hidden: vec![64, 64, 64],
            ae_epochs: 60,
            ae_lr: 2e-3,
            denoiser_epochs: 60,
            denoiser_lr: 2e-3,
            batch: 128,
            recon_gate: 0.02,
        }
    }
}

/// Expert-trajectory pretraining for trajectory matching.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertSpec {
    pub num_experts: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for ExpertSpec {
    fn default() -> Self {
        ExpertSpec {
            num_experts: 5,
            epochs: 20,
            lr: 0.1,
            batch: 128,
        }
    }
}

/// The complete, self-contained run description.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub global_seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub corpus: CorpusSpec,
    pub schedule: ScheduleSpec,
    pub model: ModelSpec,
    pub experts: ExpertSpec,
    pub distill: DistillConfig,
    pub eval: EvalProtocol,
}

impl RunConfig {
    /// Parse a config file, apply the seed env override, and resolve every
    /// derived default so the result is fully explicit.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
        Ok(cfg.resolve())
    }

    /// Fill derived fields: env seed override, per-section seeds from the
    /// global seed, and the per-algorithm learning-rate default.
    pub fn resolve(mut self) -> RunConfig {
        if let Ok(v) = std::env::var(SEED_ENV_VAR) {
            if let Ok(seed) = v.parse::<u64>() {
                self.global_seed = Some(seed);
            }
        }
        let seed = self.global_seed.unwrap_or(42);
        self.global_seed = Some(seed);
        if self.output_dir.is_none() {
            self.output_dir = Some(PathBuf::from("ld3m-out"));
        }
        self.distill.seed = seed;
        self.eval.seed = seed;
        self.distill.lr_latent = Some(self.distill.lr());
        self
    }

    pub fn seed(&self) -> u64 {
        self.global_seed.unwrap_or(42)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("ld3m-out"))
    }

    pub fn build_corpus(&self) -> Result<ToyCorpus> {
        match &self.corpus {
            CorpusSpec::Synthetic {
                num_classes,
                per_class_train,
                per_class_test,
                side,
                noise_level,
            } => generate_toy_corpus(
                *num_classes,
                *per_class_train,
                *per_class_test,
                *side,
                *noise_level,
                self.seed(),
            ),
            CorpusSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                side,
                num_classes,
                per_class_train,
                per_class_test,
            } => corpus_from_idx(
                train_images,
                train_labels,
                test_images,
                test_labels,
                *side,
                *num_classes,
                *per_class_train,
                *per_class_test,
            ),
        }
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(
            self.schedule.t,
            self.schedule.beta_start,
            self.schedule.beta_end,
            self.schedule.sigma_policy,
        )
    }

    /// Schedule family sharing this config's endpoints across chain lengths.
    pub fn schedule_family(&self, policy: SigmaPolicy) -> impl Fn(usize) -> NoiseSchedule {
        let (beta_start, beta_end) = (self.schedule.beta_start, self.schedule.beta_end);
        move |t| {
            make_linear_schedule(t, beta_start, beta_end, policy)
                .expect("valid family endpoints")
        }
    }

    /// Run the full pretraining recipe: autoencoder, then noise predictor and
    /// class embedder, assembled into a frozen bundle.
    pub fn pretrain_bundle(&self, corpus: &ToyCorpus) -> Result<ModelBundle> {
        let seed = self.seed();
        let schedule = self.build_schedule()?;
        let (encoder, decoder, recon_mse) = pretrain_autoencoder(
            corpus,
            self.model.d_latent,
            &self.model.ae_hidden,
            self.model.ae_epochs,
            self.model.ae_lr,
            self.model.batch,
            seed,
        )?;
        let (denoiser, class_embed) = pretrain_denoiser(
            &encoder,
            corpus,
            &schedule,
            self.model.d_embed,
            &self.model.denoiser_hidden,
            self.model.gamma_embed_dim,
            self.model.denoiser_epochs,
            self.model.denoiser_lr,
            self.model.batch,
            seed,
        )?;
        Ok(ModelBundle::new(
            encoder,
            decoder,
            denoiser,
            class_embed,
            BundleMeta {
                image_dim: corpus.image_dim(),
                side: corpus.side,
                num_classes: corpus.num_classes,
                d_latent: self.model.d_latent,
                d_embed: self.model.d_embed,
                gamma_embed_dim: self.model.gamma_embed_dim,
                recon_mse,
                seed,
            },
        ))
    }
}
