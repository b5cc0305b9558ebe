//! Two-stage pretraining: first the image codec on pixel reconstruction,
//! then the conditional denoiser, text encoder, and base embedding table
//! jointly on noise prediction. Produces the frozen bundle that all
//! concept-inversion work treats as fixed.
//!
//! Every step draws its batch, caption dropout, timesteps, and noise from
//! a stateless per-step stream, so training to step N, checkpointing, and
//! resuming to 2N is bit-identical to training straight to 2N.

use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::codec::{LatentCodec, LATENT_CHANNELS, LATENT_SIZE};
use crate::data::{to_tensor, CaptionedImage};
use crate::error::{Error, Result};
use crate::model::{read_f32_blob, write_f32_blob, FrozenModel};
use crate::nn::{copy_params, Params};
use crate::ops;
use crate::optim::{zero_grads, AdamSnapshot, AdamState};
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_CODEC_STEPS: usize = 1500;
pub const DEFAULT_DIFFUSION_STEPS: usize = 6000;
pub const DEFAULT_PRETRAIN_BATCH: usize = 16;
pub const DEFAULT_CAPTION_DROPOUT: f32 = 0.10;
pub const DEFAULT_CODEC_LR: f32 = 2e-3;
pub const DEFAULT_DIFFUSION_LR: f32 = 2e-4;
/// Images used to estimate the latent scale at the stage boundary.
const SCALE_SAMPLE: usize = 128;

const STATE_MAGIC: &[u8] = b"tinv-trainstate\n";
const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub seed: u64,
    pub codec_steps: usize,
    pub codec_lr: f32,
    pub diffusion_steps: usize,
    pub diffusion_lr: f32,
    pub batch_size: usize,
    pub caption_dropout: f32,
    /// Noise schedule baked into the trained bundle.
    pub t_max: usize,
    pub beta_start: f32,
    pub beta_end: f32,
}

impl Default for PretrainConfig {
    fn default() -> PretrainConfig {
        let (t_max, beta_start, beta_end) = crate::model::default_schedule_constants();
        PretrainConfig {
            seed: 0,
            codec_steps: DEFAULT_CODEC_STEPS,
            codec_lr: DEFAULT_CODEC_LR,
            diffusion_steps: DEFAULT_DIFFUSION_STEPS,
            diffusion_lr: DEFAULT_DIFFUSION_LR,
            batch_size: DEFAULT_PRETRAIN_BATCH,
            caption_dropout: DEFAULT_CAPTION_DROPOUT,
            t_max,
            beta_start,
            beta_end,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("pretrain: batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.caption_dropout) {
            return Err(Error::invalid(format!(
                "pretrain: caption_dropout {} outside [0, 1)",
                self.caption_dropout
            )));
        }
        if !(self.codec_lr > 0.0 && self.diffusion_lr > 0.0) {
            return Err(Error::invalid("pretrain: learning rates must be positive"));
        }
        // reuse the schedule builder's own range checks
        crate::schedule::make_schedule(self.t_max, self.beta_start, self.beta_end)?;
        Ok(())
    }

    /// Hash of the resolved configuration; stamped into checkpoints and
    /// training state so mismatched resumes are rejected.
    pub fn hash(&self) -> String {
        let text = format!(
            "seed={}\ncodec_steps={}\ncodec_lr={}\ndiffusion_steps={}\ndiffusion_lr={}\nbatch_size={}\ncaption_dropout={}\nt_max={}\nbeta_start={}\nbeta_end={}\n",
            self.seed,
            self.codec_steps,
            self.codec_lr,
            self.diffusion_steps,
            self.diffusion_lr,
            self.batch_size,
            self.caption_dropout,
            self.t_max,
            self.beta_start,
            self.beta_end
        );
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        format!("{:x}", h.finalize())
    }
}

/// Loss curves for both stages, one value per optimization step.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub codec_losses: Vec<f32>,
    pub diffusion_losses: Vec<f32>,
}

pub struct Pretrainer {
    pub model: FrozenModel,
    cfg: PretrainConfig,
    corpus: Vec<CaptionedImage>,
    adam_codec: AdamState,
    adam_diffusion: AdamState,
    /// Frozen copy of the codec used to produce stage-2 latents without
    /// building a backward graph through the codec.
    eval_codec: Option<LatentCodec>,
    pub codec_step: usize,
    pub diffusion_step: usize,
    pub log: TrainLog,
}

fn diverged(stage: &str, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } | Error::Diverged { .. } => Error::Diverged {
            step,
            detail: format!("{stage} stage: {e}"),
        },
        other => other,
    }
}

impl Pretrainer {
    pub fn new(corpus: &[CaptionedImage], cfg: &PretrainConfig) -> Result<Pretrainer> {
        cfg.validate()?;
        if corpus.is_empty() {
            return Err(Error::Corpus("pretrain: empty corpus".into()));
        }
        let mut model =
            FrozenModel::with_schedule(cfg.seed, true, cfg.t_max, cfg.beta_start, cfg.beta_end)?;
        model.config_hash = cfg.hash();
        Ok(Pretrainer {
            model,
            cfg: cfg.clone(),
            corpus: corpus.to_vec(),
            adam_codec: AdamState::new(cfg.codec_lr),
            adam_diffusion: AdamState::new(cfg.diffusion_lr),
            eval_codec: None,
            codec_step: 0,
            diffusion_step: 0,
            log: TrainLog::default(),
        })
    }

    fn batch_images(&self, idx: &[usize]) -> Result<Tensor> {
        let pixels: Vec<Vec<u8>> = idx.iter().map(|&i| self.corpus[i].pixels.clone()).collect();
        to_tensor(&pixels)
    }

    fn codec_params(&self) -> Vec<Tensor> {
        self.model.codec.params()
    }

    fn diffusion_params(&self) -> Vec<Tensor> {
        let mut p = self.model.table.params();
        p.extend(self.model.encoder.params());
        p.extend(self.model.denoiser.params());
        p
    }

    /// Advance the codec stage by up to `steps` optimization steps.
    pub fn run_codec_stage(&mut self, steps: usize) -> Result<()> {
        let params = self.codec_params();
        let refs: Vec<&Tensor> = params.iter().collect();
        let end = (self.codec_step + steps).min(self.cfg.codec_steps);
        while self.codec_step < end {
            let step = self.codec_step;
            let mut r = rng::stream(self.cfg.seed, "codec-step", step as u64);
            let idx: Vec<usize> = (0..self.cfg.batch_size)
                .map(|_| r.gen_range(0..self.corpus.len()))
                .collect();
            let x = self.batch_images(&idx)?;
            let loss = (|| -> Result<f32> {
                let z = self.model.codec.encode(&x)?;
                let y = self.model.codec.decode(&z)?;
                let loss = ops::mse(&y, &x)?;
                loss.backward()?;
                self.adam_codec.step(&refs)?;
                zero_grads(&refs);
                loss.item()
            })()
            .map_err(|e| diverged("codec", step, e))?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("codec loss {loss}"),
                });
            }
            self.log.codec_losses.push(loss);
            self.codec_step += 1;
        }
        if self.codec_step == self.cfg.codec_steps && self.eval_codec.is_none() {
            self.finish_codec_stage()?;
        }
        Ok(())
    }

    /// Stage boundary: freeze a codec copy for latent production and set
    /// the latent scale so diffusion sees roughly unit-variance inputs.
    fn finish_codec_stage(&mut self) -> Result<()> {
        let mut r = rng::stream(self.cfg.seed, "codec-freeze", 0);
        let frozen = LatentCodec::new(&mut r, false);
        copy_params(&self.model.codec, &frozen)?;

        let n = self.corpus.len().min(SCALE_SAMPLE);
        let pixels: Vec<Vec<u8>> = self.corpus[..n].iter().map(|c| c.pixels.clone()).collect();
        let z = frozen.encode(&to_tensor(&pixels)?)?;
        let std = z.with_data(|d| {
            let mean = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
            let var =
                d.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d.len() as f64;
            var.sqrt()
        });
        self.model.latent_scale = (1.0 / std.max(1e-6)) as f32;
        self.eval_codec = Some(frozen);
        Ok(())
    }

    /// Advance the joint denoiser/text stage by up to `steps` steps.
    pub fn run_diffusion_stage(&mut self, steps: usize) -> Result<()> {
        if self.codec_step < self.cfg.codec_steps {
            return Err(Error::invalid(
                "pretrain: codec stage must finish before the diffusion stage",
            ));
        }
        let codec = self
            .eval_codec
            .as_ref()
            .ok_or_else(|| Error::invalid("pretrain: missing frozen codec"))?;
        let params = self.diffusion_params();
        let refs: Vec<&Tensor> = params.iter().collect();
        let t_max = self.model.schedule.t_max();
        let end = (self.diffusion_step + steps).min(self.cfg.diffusion_steps);
        while self.diffusion_step < end {
            let step = self.diffusion_step;
            let mut r = rng::stream(self.cfg.seed, "diffusion-step", step as u64);
            let idx: Vec<usize> = (0..self.cfg.batch_size)
                .map(|_| r.gen_range(0..self.corpus.len()))
                .collect();
            let captions: Vec<String> = idx
                .iter()
                .map(|&i| {
                    if r.gen::<f32>() < self.cfg.caption_dropout {
                        String::new()
                    } else {
                        self.corpus[i].caption.clone()
                    }
                })
                .collect();
            let t: Vec<usize> = (0..self.cfg.batch_size)
                .map(|_| r.gen_range(1..=t_max))
                .collect();
            let eps = Tensor::randn(
                &[self.cfg.batch_size, LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE],
                &mut r,
            );
            let x = self.batch_images(&idx)?;
            let loss = (|| -> Result<f32> {
                let z0 = codec
                    .encode(&x)?
                    .mul_scalar(self.model.latent_scale)?
                    .detach();
                let codes = self.model.encode_prompts(&captions)?;
                let loss = self.model.denoise_loss(&z0, &codes, &t, &eps)?;
                loss.backward()?;
                self.adam_diffusion.step(&refs)?;
                zero_grads(&refs);
                loss.item()
            })()
            .map_err(|e| diverged("diffusion", step, e))?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("diffusion loss {loss}"),
                });
            }
            self.log.diffusion_losses.push(loss);
            self.diffusion_step += 1;
        }
        Ok(())
    }

    pub fn finished(&self) -> bool {
        self.codec_step == self.cfg.codec_steps && self.diffusion_step == self.cfg.diffusion_steps
    }

    /// Frozen (non-trainable) copy of the current model.
    pub fn frozen_model(&self) -> Result<FrozenModel> {
        self.model.deep_clone(false)
    }

    // -- training-state persistence ------------------------------------------

    /// Serialize everything needed for a bit-exact resume: model weights,
    /// both optimizers' moments, step counters, and the loss curves.
    pub fn save_state(&self, path: &Path) -> Result<()> {
        let ioe = |e: std::io::Error| Error::io(path.display().to_string(), e);
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(ioe)?);
        w.write_all(STATE_MAGIC).map_err(ioe)?;
        w.write_all(&STATE_VERSION.to_le_bytes()).map_err(ioe)?;
        let hash = self.cfg.hash();
        w.write_all(&(hash.len() as u32).to_le_bytes()).map_err(ioe)?;
        w.write_all(hash.as_bytes()).map_err(ioe)?;
        w.write_all(&(self.codec_step as u64).to_le_bytes()).map_err(ioe)?;
        w.write_all(&(self.diffusion_step as u64).to_le_bytes()).map_err(ioe)?;
        w.write_all(&self.model.latent_scale.to_le_bytes()).map_err(ioe)?;

        let mut named = Vec::new();
        self.model.named_params("model", &mut named);
        let mut blobs: Vec<(String, Vec<usize>, Vec<f32>)> = named
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.to_vec()))
            .collect();
        // One optimizer step per trainer step, so the Adam step counters
        // equal codec_step / diffusion_step and are not stored separately.
        // Moment buffers only exist once a stage has taken a step.
        for (label, snap) in [
            ("adam_codec", self.adam_codec.snapshot()),
            ("adam_diffusion", self.adam_diffusion.snapshot()),
        ] {
            for (i, (m, v)) in snap
                .first_moment
                .iter()
                .zip(&snap.second_moment)
                .enumerate()
            {
                blobs.push((format!("{label}.m.{i}"), snap.shapes[i].clone(), m.clone()));
                blobs.push((format!("{label}.v.{i}"), snap.shapes[i].clone(), v.clone()));
            }
        }
        blobs.push((
            "log.codec".into(),
            vec![self.log.codec_losses.len()],
            self.log.codec_losses.clone(),
        ));
        blobs.push((
            "log.diffusion".into(),
            vec![self.log.diffusion_losses.len()],
            self.log.diffusion_losses.clone(),
        ));

        w.write_all(&(blobs.len() as u32).to_le_bytes()).map_err(ioe)?;
        for (name, shape, data) in &blobs {
            write_f32_blob(&mut w, name, shape, data).map_err(ioe)?;
        }
        Ok(())
    }

    /// Rebuild a trainer from a state file. The corpus and config must be
    /// the ones the state was saved under (checked via the config hash).
    pub fn load_state(
        corpus: &[CaptionedImage],
        cfg: &PretrainConfig,
        path: &Path,
    ) -> Result<Pretrainer> {
        let ioe = |e: std::io::Error| Error::io(path.display().to_string(), e);
        let fmt = |detail: String| Error::Format {
            path: path.display().to_string(),
            detail,
        };
        let mut rdr = std::io::BufReader::new(std::fs::File::open(path).map_err(ioe)?);
        let mut magic = vec![0u8; STATE_MAGIC.len()];
        rdr.read_exact(&mut magic).map_err(ioe)?;
        if magic != STATE_MAGIC {
            return Err(fmt("not a training-state file".into()));
        }
        let mut u32b = [0u8; 4];
        let mut u64b = [0u8; 8];
        rdr.read_exact(&mut u32b).map_err(ioe)?;
        if u32::from_le_bytes(u32b) != STATE_VERSION {
            return Err(fmt("unsupported training-state version".into()));
        }
        rdr.read_exact(&mut u32b).map_err(ioe)?;
        let mut hash = vec![0u8; u32::from_le_bytes(u32b) as usize];
        rdr.read_exact(&mut hash).map_err(ioe)?;
        if hash != cfg.hash().as_bytes() {
            return Err(Error::invalid(
                "pretrain resume: configuration differs from the saved run",
            ));
        }
        rdr.read_exact(&mut u64b).map_err(ioe)?;
        let codec_step = u64::from_le_bytes(u64b) as usize;
        rdr.read_exact(&mut u64b).map_err(ioe)?;
        let diffusion_step = u64::from_le_bytes(u64b) as usize;
        let mut f32b = [0u8; 4];
        rdr.read_exact(&mut f32b).map_err(ioe)?;
        let latent_scale = f32::from_le_bytes(f32b);

        rdr.read_exact(&mut u32b).map_err(ioe)?;
        let n_blobs = u32::from_le_bytes(u32b) as usize;
        let mut by_name = std::collections::BTreeMap::new();
        for _ in 0..n_blobs {
            let blob = read_f32_blob(&mut rdr)
                .map_err(ioe)?
                .ok_or_else(|| fmt("blob name not UTF-8".into()))?;
            if !blob.checksum_ok {
                return Err(Error::ChecksumMismatch {
                    what: format!("training-state blob {} in {}", blob.name, path.display()),
                });
            }
            if by_name.insert(blob.name.clone(), blob).is_some() {
                return Err(fmt("duplicate blob".into()));
            }
        }

        let mut trainer = Pretrainer::new(corpus, cfg)?;
        trainer.codec_step = codec_step;
        trainer.diffusion_step = diffusion_step;
        trainer.model.latent_scale = latent_scale;

        let mut named = Vec::new();
        trainer.model.named_params("model", &mut named);
        for (name, t) in &named {
            let blob = by_name
                .remove(name)
                .ok_or_else(|| fmt(format!("missing blob {name}")))?;
            if blob.shape != t.shape() {
                return Err(fmt(format!("blob {name} shape mismatch")));
            }
            t.update_data(|dst| dst.copy_from_slice(&blob.data))?;
        }

        fn restore_adam(
            by_name: &mut std::collections::BTreeMap<String, crate::model::RawBlob>,
            fmt: &dyn Fn(String) -> Error,
            label: &str,
            n_params: usize,
            steps_taken: usize,
            lr: f32,
        ) -> Result<AdamState> {
            if steps_taken == 0 {
                return Ok(AdamState::new(lr));
            }
            let mut snap = AdamSnapshot {
                step_count: steps_taken as u64,
                shapes: Vec::new(),
                first_moment: Vec::new(),
                second_moment: Vec::new(),
            };
            for i in 0..n_params {
                let m = by_name
                    .remove(&format!("{label}.m.{i}"))
                    .ok_or_else(|| fmt(format!("missing blob {label}.m.{i}")))?;
                let v = by_name
                    .remove(&format!("{label}.v.{i}"))
                    .ok_or_else(|| fmt(format!("missing blob {label}.v.{i}")))?;
                if v.shape != m.shape {
                    return Err(fmt(format!("moment shape mismatch at {label}.{i}")));
                }
                snap.shapes.push(m.shape);
                snap.first_moment.push(m.data);
                snap.second_moment.push(v.data);
            }
            AdamState::restore(lr, snap)
        }
        // Moment blobs exist only once the stage has taken a step; a
        // missing step_count blob means the optimizer is still fresh.
        let n_codec = trainer.codec_params().len();
        let n_diff = trainer.diffusion_params().len();
        trainer.adam_codec = restore_adam(
            &mut by_name,
            &fmt,
            "adam_codec",
            n_codec,
            codec_step,
            cfg.codec_lr,
        )?;
        trainer.adam_diffusion = restore_adam(
            &mut by_name,
            &fmt,
            "adam_diffusion",
            n_diff,
            diffusion_step,
            cfg.diffusion_lr,
        )?;

        if let Some(b) = by_name.remove("log.codec") {
            trainer.log.codec_losses = b.data;
        }
        if let Some(b) = by_name.remove("log.diffusion") {
            trainer.log.diffusion_losses = b.data;
        }

        if trainer.codec_step == cfg.codec_steps {
            trainer.finish_codec_stage()?;
            trainer.model.latent_scale = latent_scale;
        }
        Ok(trainer)
    }
}

/// Run both stages to completion. If `state_dir` is given, training state
/// is checkpointed there every `checkpoint_every` steps (and at the stage
/// boundary), so a divergence abort leaves the last good state on disk.
pub fn pretrain(
    corpus: &[CaptionedImage],
    cfg: &PretrainConfig,
    state_dir: Option<&Path>,
    checkpoint_every: usize,
) -> Result<(FrozenModel, TrainLog)> {
    let mut t = Pretrainer::new(corpus, cfg)?;
    let state_path = state_dir.map(|d| d.join("train-state.bin"));
    let chunk = if checkpoint_every == 0 { usize::MAX } else { checkpoint_every };

    while t.codec_step < cfg.codec_steps {
        t.run_codec_stage(chunk).inspect_err(|_| {
            if let Some(p) = &state_path {
                eprintln!("pretrain aborted; last good state: {}", p.display());
            }
        })?;
        if let Some(p) = &state_path {
            t.save_state(p)?;
        }
    }
    while t.diffusion_step < cfg.diffusion_steps {
        t.run_diffusion_stage(chunk).inspect_err(|_| {
            if let Some(p) = &state_path {
                eprintln!("pretrain aborted; last good state: {}", p.display());
            }
        })?;
        if let Some(p) = &state_path {
            t.save_state(p)?;
        }
    }
    Ok((t.frozen_model()?, t.log))
}
