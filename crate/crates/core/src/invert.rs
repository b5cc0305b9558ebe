//! Learning pseudo-words in the frozen text-embedding space: optimize
//! override vectors against the frozen generative bundle with the noise
//! prediction objective, plus the published variants — multiple vectors,
//! progressive vector introduction, L2 regularization toward the coarse
//! descriptor, per-image tokens — and the two extensions, pivotal tuning
//! of the denoiser around a fixed pseudo-word and bipartite image editing.

use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::codec::{LATENT_CHANNELS, LATENT_SIZE};
use crate::data::{ConceptSet, MAX_CONCEPT_IMAGES};
use crate::diffusion::GuidanceConfig;
use crate::error::{Error, Result};
use crate::model::{FrozenModel, PromptSetup};
use crate::nn::Params;
use crate::ops;
use crate::optim::{zero_grads, AdamState};
use crate::rng;
use crate::tensor::Tensor;
use crate::text::{sample_template, PseudoWord, TemplateMode, TEXT_DIM, UNK_ID};

pub const DEFAULT_PLACEHOLDER: &str = "<concept-0>";
/// Learning-rate presets (pre-scaling), mirroring the published variants.
pub const BASE_LR: f32 = 5e-3;
pub const HIGH_LR: f32 = 2e-2;
pub const LOW_LR: f32 = 1e-4;
/// Default scale multiplier (2 devices x batch 4) giving 0.005 -> 0.04.
pub const DEFAULT_LR_SCALING: f32 = 8.0;
pub const DEFAULT_INVERT_STEPS: usize = 5000;
pub const DEFAULT_INVERT_BATCH: usize = 4;
pub const DEFAULT_SECOND_VECTOR_STEP: usize = 2000;
pub const DEFAULT_THIRD_VECTOR_STEP: usize = 4000;
/// Regularization weight when the descriptor penalty is enabled.
pub const DEFAULT_REG_LAMBDA: f32 = 0.01;

#[derive(Debug, Clone)]
pub struct InversionConfig {
    pub placeholder: String,
    /// Total pseudo-word vectors to learn (1..=3).
    pub num_vectors: usize,
    /// Introduce vectors progressively at the step thresholds below.
    pub progressive: bool,
    pub second_vector_step: usize,
    pub third_vector_step: usize,
    /// Weight of the L2 pull toward the descriptor embedding (0 = off).
    pub reg_lambda: f32,
    /// Give each training image its own single-vector token.
    pub per_image_tokens: bool,
    pub base_lr: f32,
    pub lr_scaling: f32,
    pub steps: usize,
    pub batch_size: usize,
    pub template_mode: TemplateMode,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> InversionConfig {
        InversionConfig {
            placeholder: DEFAULT_PLACEHOLDER.into(),
            num_vectors: 1,
            progressive: false,
            second_vector_step: DEFAULT_SECOND_VECTOR_STEP,
            third_vector_step: DEFAULT_THIRD_VECTOR_STEP,
            reg_lambda: 0.0,
            per_image_tokens: false,
            base_lr: BASE_LR,
            lr_scaling: DEFAULT_LR_SCALING,
            steps: DEFAULT_INVERT_STEPS,
            batch_size: DEFAULT_INVERT_BATCH,
            template_mode: TemplateMode::Object,
            seed: 0,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.num_vectors) {
            return Err(Error::invalid(format!(
                "inversion: num_vectors {} outside 1..=3",
                self.num_vectors
            )));
        }
        if self.progressive && self.num_vectors < 2 {
            return Err(Error::invalid(
                "inversion: progressive introduction needs num_vectors >= 2",
            ));
        }
        if self.steps < 1 {
            return Err(Error::invalid("inversion: steps must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("inversion: batch_size must be >= 1"));
        }
        if !(self.reg_lambda >= 0.0 && self.reg_lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "inversion: reg_lambda {} must be finite and >= 0",
                self.reg_lambda
            )));
        }
        if !(self.base_lr > 0.0 && self.lr_scaling > 0.0) {
            return Err(Error::invalid(
                "inversion: base_lr and lr_scaling must be positive",
            ));
        }
        if self.progressive && self.second_vector_step >= self.third_vector_step {
            return Err(Error::invalid(
                "inversion: vector introduction steps must increase",
            ));
        }
        Ok(())
    }

    /// Effective Adam learning rate after device/batch scaling.
    pub fn effective_lr(&self) -> f32 {
        self.base_lr * self.lr_scaling
    }

    pub fn hash(&self) -> String {
        let text = format!(
            "placeholder={}\nnum_vectors={}\nprogressive={}\nsecond={}\nthird={}\nreg_lambda={}\nper_image_tokens={}\nbase_lr={}\nlr_scaling={}\nsteps={}\nbatch_size={}\ntemplate_mode={:?}\nseed={}\n",
            self.placeholder,
            self.num_vectors,
            self.progressive,
            self.second_vector_step,
            self.third_vector_step,
            self.reg_lambda,
            self.per_image_tokens,
            self.base_lr,
            self.lr_scaling,
            self.steps,
            self.batch_size,
            self.template_mode,
            self.seed
        );
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        format!("{:x}", h.finalize())
    }
}

/// Number of pseudo-word vectors active at `step`. Without progressive
/// introduction every configured vector is active from step 0.
pub fn progressive_vector_count(step: usize, cfg: &InversionConfig) -> usize {
    if !cfg.progressive {
        return cfg.num_vectors;
    }
    let by_schedule = if step < cfg.second_vector_step {
        1
    } else if step < cfg.third_vector_step {
        2
    } else {
        3
    };
    by_schedule.min(cfg.num_vectors)
}

/// Everything a finished inversion run produced. The pseudo-word is the
/// artifact; the rest supports audits and reporting.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct InversionRun {
    pub pseudo_word: PseudoWord,
    /// Per-image tokens (training-time only; discarded at sampling).
    pub per_image_words: Vec<PseudoWord>,
    /// Optimized objective per step (noise-prediction loss + penalty).
    pub losses: Vec<f32>,
    /// Step at which each pseudo-word vector became active.
    pub introduced_at: Vec<usize>,
    /// Bit-exact copies of each vector at its introduction.
    pub initial_vectors: Vec<Vec<f32>>,
    /// Total vectors that received optimizer updates.
    pub optimized_vectors: usize,
}

/// Resolve a one-word coarse descriptor to its base-vocabulary token id.
fn descriptor_id(model: &FrozenModel, descriptor: &str) -> Result<usize> {
    let ids = model.vocab.tokenize(descriptor);
    if ids.len() != 1 || ids[0] == UNK_ID || ids[0] >= model.vocab.base_size() {
        return Err(Error::Vocab(format!(
            "coarse descriptor {descriptor:?} must be a single known vocabulary word"
        )));
    }
    Ok(ids[0])
}

/// Clean latents for every concept image, flattened for cheap per-step
/// batch assembly (the codec pass happens once, not per step).
fn latent_bank(model: &FrozenModel, concept: &ConceptSet) -> Result<(Vec<f32>, usize)> {
    let z = model.encode_images(&concept.images_tensor()?)?;
    let stride = LATENT_CHANNELS * LATENT_SIZE * LATENT_SIZE;
    Ok((z.to_vec(), stride))
}

fn latent_batch(bank: &[f32], stride: usize, idx: &[usize]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(idx.len() * stride);
    for &i in idx {
        data.extend_from_slice(&bank[i * stride..(i + 1) * stride]);
    }
    Tensor::from_vec(
        &[idx.len(), LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE],
        data,
        false,
    )
}

fn word_from_vectors(
    placeholder: &str,
    vectors: &[Tensor],
    descriptor: &str,
    config_hash: &str,
    base_checksum: &str,
) -> PseudoWord {
    PseudoWord {
        placeholder: placeholder.to_string(),
        vectors: vectors.iter().map(|v| v.to_vec()).collect(),
        coarse_descriptor: descriptor.to_string(),
        config_hash: config_hash.to_string(),
        base_checksum: base_checksum.to_string(),
    }
}

/// Optimize pseudo-word vectors for `concept` against the frozen model.
/// Only override vectors receive updates; the model itself is untouched
/// (its weight checksums are identical before and after).
pub fn textual_invert(
    model: &FrozenModel,
    concept: &ConceptSet,
    cfg: &InversionConfig,
) -> Result<InversionRun> {
    cfg.validate()?;
    if concept.is_empty() {
        return Err(Error::Corpus("inversion: empty concept set".into()));
    }
    if concept.len() > MAX_CONCEPT_IMAGES {
        return Err(Error::Corpus(format!(
            "inversion: {} images exceeds the maximum {MAX_CONCEPT_IMAGES}",
            concept.len()
        )));
    }
    let desc_id = descriptor_id(model, &concept.descriptor)?;
    let desc_row = model.table.base_row(desc_id)?;
    let desc_const = Tensor::from_vec(&[TEXT_DIM], desc_row.clone(), false)?;
    let lr = cfg.effective_lr();

    let (bank, stride) = latent_bank(model, concept)?;
    let n_images = concept.len();

    let mut setup = PromptSetup::bare(model);
    let new_vector = || Tensor::from_vec(&[TEXT_DIM], desc_row.clone(), true);

    // Main pseudo-word vectors; under progressive introduction later ones
    // join at their threshold steps, initialized from the descriptor row.
    let mut vectors: Vec<Tensor> = Vec::new();
    let mut optims: Vec<AdamState> = Vec::new();
    let mut introduced_at: Vec<usize> = Vec::new();
    let mut initial_vectors: Vec<Vec<f32>> = Vec::new();

    // Per-image tokens are all active from step 0 and absorb image-
    // specific content during training only.
    let mut image_words: Vec<String> = Vec::new();
    let mut image_vectors: Vec<Tensor> = Vec::new();
    let mut image_optims: Vec<AdamState> = Vec::new();
    if cfg.per_image_tokens {
        for i in 0..n_images {
            let ph = format!("<img-{i}>");
            let v = new_vector()?;
            setup.install(&ph, vec![v.clone()])?;
            image_words.push(ph);
            image_vectors.push(v);
            image_optims.push(AdamState::new(lr));
        }
    }

    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let active = progressive_vector_count(step, cfg);
        while vectors.len() < active {
            let v = new_vector()?;
            initial_vectors.push(v.to_vec());
            introduced_at.push(step);
            vectors.push(v);
            optims.push(AdamState::new(lr));
            setup.install(&cfg.placeholder, vectors.clone())?;
        }

        let mut r = rng::stream(cfg.seed, "invert-step", step as u64);
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| r.gen_range(0..n_images))
            .collect();
        let prompts: Vec<String> = idx
            .iter()
            .map(|&i| {
                let p = sample_template(cfg.template_mode, &cfg.placeholder, &mut r);
                if cfg.per_image_tokens {
                    format!("{p} with {}", image_words[i])
                } else {
                    p
                }
            })
            .collect();
        let t: Vec<usize> = (0..cfg.batch_size)
            .map(|_| r.gen_range(1..=model.schedule.t_max()))
            .collect();
        let eps = Tensor::randn(
            &[cfg.batch_size, LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE],
            &mut r,
        );

        let z0 = latent_batch(&bank, stride, &idx)?;
        let step_result = (|| -> Result<f32> {
            let codes = model.encode_prompts_with(&setup, &prompts)?;
            let mut loss = model.denoise_loss(&z0, &codes, &t, &eps)?;
            if cfg.reg_lambda > 0.0 {
                let mut reg = ops::mse(&vectors[0], &desc_const)?;
                for v in &vectors[1..] {
                    reg = reg.add(&ops::mse(v, &desc_const)?)?;
                }
                let scaled = reg.mul_scalar(cfg.reg_lambda / vectors.len() as f32)?;
                loss = loss.add(&scaled)?;
            }
            loss.backward()?;
            for (v, opt) in vectors.iter().zip(&mut optims) {
                opt.step(&[v])?;
            }
            for (v, opt) in image_vectors.iter().zip(&mut image_optims) {
                // only images drawn this step have gradients
                if v.grad().is_some() {
                    opt.step(&[v])?;
                }
            }
            let all: Vec<&Tensor> = vectors.iter().chain(image_vectors.iter()).collect();
            zero_grads(&all);
            loss.item()
        })();
        let loss = step_result.map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged {
                step,
                detail: e.to_string(),
            },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("inversion loss {loss}"),
            });
        }
        losses.push(loss);
    }

    let base_checksum = model.table.checksum();
    let hash = cfg.hash();
    let pseudo_word = word_from_vectors(
        &cfg.placeholder,
        &vectors,
        &concept.descriptor,
        &hash,
        &base_checksum,
    );
    let per_image_words = image_words
        .iter()
        .zip(&image_vectors)
        .map(|(ph, v)| {
            word_from_vectors(
                ph,
                std::slice::from_ref(v),
                &concept.descriptor,
                &hash,
                &base_checksum,
            )
        })
        .collect::<Vec<_>>();
    let optimized_vectors = vectors.len() + image_vectors.len();
    Ok(InversionRun {
        pseudo_word,
        per_image_words,
        losses,
        introduced_at,
        initial_vectors,
        optimized_vectors,
    })
}

// ---------------------------------------------------------------------------
// Pivotal tuning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PivotalTuneConfig {
    pub lr: f32,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PivotalTuneConfig {
    fn default() -> PivotalTuneConfig {
        PivotalTuneConfig {
            lr: 1e-5,
            steps: 500,
            batch_size: 4,
            seed: 0,
        }
    }
}

pub struct PivotalRun {
    /// New frozen bundle with the fine-tuned denoiser; the input model
    /// is untouched (copy-on-write).
    pub model: FrozenModel,
    pub losses: Vec<f32>,
}

/// Fine-tune a copy of the denoiser around a fixed, already-learned
/// pseudo-word (the pivot), minimizing the noise-prediction loss on the
/// concept set with the prompt "a photo of <pivot>". The pseudo-word
/// vectors are installed as constants and never receive gradients.
pub fn pivotal_tune(
    model: &FrozenModel,
    pivot: &PseudoWord,
    concept: &ConceptSet,
    cfg: &PivotalTuneConfig,
) -> Result<PivotalRun> {
    pivot.validate()?;
    if concept.is_empty() {
        return Err(Error::Corpus("pivotal tuning: empty concept set".into()));
    }
    if !(cfg.lr > 0.0) || cfg.steps < 1 || cfg.batch_size < 1 {
        return Err(Error::invalid(
            "pivotal tuning: lr, steps, and batch_size must be positive",
        ));
    }

    let tuned = model.deep_clone(true)?;
    let setup = PromptSetup::with_words(&tuned, &[pivot])?;
    let prompt = format!("a photo of {}.", pivot.placeholder);
    let code = tuned
        .encode_prompts_with(&setup, &[prompt])?
        .detach();
    let codes = code.gather_rows(&vec![0; cfg.batch_size])?;

    let (bank, stride) = latent_bank(&tuned, concept)?;
    let params = tuned.denoiser.params();
    let refs: Vec<&Tensor> = params.iter().collect();
    let mut opt = AdamState::new(cfg.lr);

    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut r = rng::stream(cfg.seed, "pivotal-step", step as u64);
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| r.gen_range(0..concept.len()))
            .collect();
        let t: Vec<usize> = (0..cfg.batch_size)
            .map(|_| r.gen_range(1..=tuned.schedule.t_max()))
            .collect();
        let eps = Tensor::randn(
            &[cfg.batch_size, LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE],
            &mut r,
        );
        let z0 = latent_batch(&bank, stride, &idx)?;
        let loss = (|| -> Result<f32> {
            let loss = tuned.denoise_loss(&z0, &codes, &t, &eps)?;
            loss.backward()?;
            opt.step(&refs)?;
            zero_grads(&refs);
            loss.item()
        })()
        .map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged {
                step,
                detail: e.to_string(),
            },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("pivotal loss {loss}"),
            });
        }
        losses.push(loss);
    }

    Ok(PivotalRun {
        model: tuned.deep_clone(false)?,
        losses,
    })
}

// ---------------------------------------------------------------------------
// Bipartite editing
// ---------------------------------------------------------------------------

pub struct EditOutcome {
    /// Decoded edited image(s), [B, 3, 32, 32] in [0, 1].
    pub image: Tensor,
    /// Clean latents of the input image(s).
    pub source_latent: Tensor,
    /// Terminal latent recovered by inversion under the source prompt.
    pub inverted_latent: Tensor,
    /// Clean latents after re-sampling under the target prompt.
    pub edited_latent: Tensor,
}

/// Deterministically edit an image: invert it to its terminal latent
/// under `src_prompt`, then sample back down under `tgt_prompt` with the
/// same latent held fixed. With `tgt_prompt == src_prompt` this is the
/// DDIM reconstruction of the input.
pub fn bipartite_edit(
    model: &FrozenModel,
    setup: Option<&PromptSetup>,
    image: &Tensor,
    src_prompt: &str,
    tgt_prompt: &str,
    guidance: &GuidanceConfig,
    steps: usize,
) -> Result<EditOutcome> {
    let z0 = model.encode_images(image)?.detach();
    let x_t = model.invert_latents(setup, &z0, src_prompt, steps, guidance)?;
    let z_edit = model.sample_from(setup, &x_t, tgt_prompt, steps, guidance)?;
    let out = model.decode_latents(&z_edit)?;
    Ok(EditOutcome {
        image: out,
        source_latent: z0,
        inverted_latent: x_t,
        edited_latent: z_edit,
    })
}
