//! Flat key=value run configuration with a closed key schema. Every run
//! resolves to a complete key set (defaults filled in, learning-rate
//! preset applied) whose SHA-256 is the run's config hash.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use sha2::{Digest, Sha256};
use tinv_core::error::{Error, Result};
use tinv_core::eval::{DualEncoderConfig, EvalConfig, EVAL_PROMPT_BANK};
use tinv_core::invert::{InversionConfig, PivotalTuneConfig};
use tinv_core::pretrain::PretrainConfig;
use tinv_core::text::TemplateMode;

/// Every key the configuration understands, with its default value.
/// Unknown keys are rejected at parse time.
pub const KEY_SCHEMA: &[(&str, &str)] = &[
    ("seed", "0"),
    ("out_root", ""),
    ("corpus.seed", "11"),
    ("corpus.pairs", "2048"),
    ("schedule.t_max", "1000"),
    ("schedule.beta_start", "0.00085"),
    ("schedule.beta_end", "0.012"),
    ("pretrain.codec_steps", "1500"),
    ("pretrain.codec_lr", "0.002"),
    ("pretrain.diffusion_steps", "6000"),
    ("pretrain.diffusion_lr", "0.0002"),
    ("pretrain.batch", "16"),
    ("pretrain.caption_dropout", "0.1"),
    ("invert.placeholder", "<concept-0>"),
    ("invert.vectors", "1"),
    ("invert.progressive", "false"),
    ("invert.second_step", "2000"),
    ("invert.third_step", "4000"),
    ("invert.reg_lambda", "0"),
    ("invert.per_image_tokens", "false"),
    ("invert.lr_preset", "base"),
    ("invert.base_lr", "0.005"),
    ("invert.lr_scaling", "8"),
    ("invert.steps", "5000"),
    ("invert.batch", "4"),
    ("invert.template_mode", "object"),
    ("sample.n", "64"),
    ("sample.steps", "50"),
    ("sample.guidance", "5"),
    ("eval.samples", "64"),
    ("eval.steps", "50"),
    ("eval.guidance", "5"),
    ("eval.recon_template", "a photo of {}."),
    ("eval.prompts", ""),
    ("dual.seed", "0"),
    ("dual.steps", "1500"),
    ("dual.batch", "32"),
    ("dual.lr", "0.001"),
    ("dual.temperature", "0.07"),
    ("edit.steps", "50"),
    ("edit.guidance", "1"),
    ("pivotal.steps", "500"),
    ("pivotal.lr", "0.00001"),
    ("pivotal.batch", "4"),
    ("sweep.sizes", "1,3,5,10,25"),
    ("paths.model", ""),
    ("paths.concept", ""),
    ("paths.pseudoword", ""),
    ("paths.image", ""),
    ("paths.dual", ""),
];

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            values: KEY_SCHEMA
                .iter()
                .map(|(k, v)| ((*k).to_string(), (*v).to_string()))
                .collect(),
            explicit: BTreeSet::new(),
        }
    }
}

impl RunConfig {
    /// Parse `key = value` lines on top of the defaults. `#` starts a
    /// comment line; blank lines are skipped; duplicate or unknown keys
    /// are errors.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::invalid(format!("config line {}: expected key=value", lineno + 1))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::invalid(format!(
                    "config line {}: duplicate key {key}",
                    lineno + 1
                )));
            }
            cfg.set(key, value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    /// Set a known key; unknown keys are rejected with the full key list.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.values.contains_key(key) {
            return Err(Error::invalid(format!(
                "unknown config key {key:?}; known keys: {}",
                KEY_SCHEMA
                    .iter()
                    .map(|(k, _)| *k)
                    .collect::<Vec<_>>()
                    .join(", ")
            )));
        }
        self.values.insert(key.to_string(), value.to_string());
        self.explicit.insert(key.to_string());
        Ok(())
    }

    pub fn was_set(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("config key {key} missing from schema"))
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<T> {
        self.get(key).parse().map_err(|_| {
            Error::invalid(format!(
                "config key {key}={:?} is not a valid {what}",
                self.get(key)
            ))
        })
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.parse_as(key, "integer")
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.parse_as(key, "integer")
    }

    pub fn get_f32(&self, key: &str) -> Result<f32> {
        self.parse_as(key, "number")
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(Error::invalid(format!(
                "config key {key}={other:?} is not a boolean"
            ))),
        }
    }

    /// Apply cross-key resolution: the learning-rate preset decides
    /// `invert.base_lr` unless that key was set explicitly.
    pub fn resolve(&mut self) -> Result<()> {
        let preset_lr = match self.get("invert.lr_preset") {
            "base" => "0.005",
            "high" => "0.02",
            "low" => "0.0001",
            other => {
                return Err(Error::invalid(format!(
                    "invert.lr_preset {other:?} must be base, high, or low"
                )))
            }
        };
        if !self.was_set("invert.base_lr") {
            self.values
                .insert("invert.base_lr".to_string(), preset_lr.to_string());
        }
        Ok(())
    }

    /// Canonical text form: sorted `key=value` lines covering every key.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the resolved text — the run's config hash.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.resolved_text().as_bytes());
        format!("{:x}", h.finalize())
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    // -- typed views over config records --------------------------------------

    pub fn pretrain_config(&self) -> Result<PretrainConfig> {
        let cfg = PretrainConfig {
            seed: self.get_u64("seed")?,
            codec_steps: self.get_usize("pretrain.codec_steps")?,
            codec_lr: self.get_f32("pretrain.codec_lr")?,
            diffusion_steps: self.get_usize("pretrain.diffusion_steps")?,
            diffusion_lr: self.get_f32("pretrain.diffusion_lr")?,
            batch_size: self.get_usize("pretrain.batch")?,
            caption_dropout: self.get_f32("pretrain.caption_dropout")?,
            t_max: self.get_usize("schedule.t_max")?,
            beta_start: self.get_f32("schedule.beta_start")?,
            beta_end: self.get_f32("schedule.beta_end")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn inversion_config(&self) -> Result<InversionConfig> {
        let template_mode = match self.get("invert.template_mode") {
            "object" => TemplateMode::Object,
            "style" => TemplateMode::Style,
            other => {
                return Err(Error::invalid(format!(
                    "invert.template_mode {other:?} must be object or style"
                )))
            }
        };
        let cfg = InversionConfig {
            placeholder: self.get("invert.placeholder").to_string(),
            num_vectors: self.get_usize("invert.vectors")?,
            progressive: self.get_bool("invert.progressive")?,
            second_vector_step: self.get_usize("invert.second_step")?,
            third_vector_step: self.get_usize("invert.third_step")?,
            reg_lambda: self.get_f32("invert.reg_lambda")?,
            per_image_tokens: self.get_bool("invert.per_image_tokens")?,
            base_lr: self.get_f32("invert.base_lr")?,
            lr_scaling: self.get_f32("invert.lr_scaling")?,
            steps: self.get_usize("invert.steps")?,
            batch_size: self.get_usize("invert.batch")?,
            template_mode,
            seed: self.get_u64("seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval_config(&self) -> Result<EvalConfig> {
        let prompts = self.get("eval.prompts");
        let edit_templates: Vec<String> = if prompts.is_empty() {
            EVAL_PROMPT_BANK.iter().map(|s| s.to_string()).collect()
        } else {
            prompts.split(';').map(|p| p.trim().to_string()).collect()
        };
        let cfg = EvalConfig {
            n_samples: self.get_usize("eval.samples")?,
            ddim_steps: self.get_usize("eval.steps")?,
            guidance_scale: self.get_f32("eval.guidance")?,
            recon_template: self.get("eval.recon_template").to_string(),
            edit_templates,
            seed: self.get_u64("seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dual_config(&self) -> Result<DualEncoderConfig> {
        Ok(DualEncoderConfig {
            seed: self.get_u64("dual.seed")?,
            steps: self.get_usize("dual.steps")?,
            batch_size: self.get_usize("dual.batch")?,
            lr: self.get_f32("dual.lr")?,
            temperature: self.get_f32("dual.temperature")?,
        })
    }

    pub fn pivotal_config(&self) -> Result<PivotalTuneConfig> {
        Ok(PivotalTuneConfig {
            lr: self.get_f32("pivotal.lr")?,
            steps: self.get_usize("pivotal.steps")?,
            batch_size: self.get_usize("pivotal.batch")?,
            seed: self.get_u64("seed")?,
        })
    }

    pub fn sweep_sizes(&self) -> Result<Vec<usize>> {
        let text = self.get("sweep.sizes");
        let sizes: Vec<usize> = text
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("sweep.sizes entry {s:?} is not an integer")))
            })
            .collect::<Result<_>>()?;
        if sizes.is_empty() {
            return Err(Error::invalid("sweep.sizes is empty"));
        }
        Ok(sizes)
    }

    /// Path-valued key, with `required` controlling whether empty errors.
    pub fn path(&self, key: &str, flag: &str, required: bool) -> Result<Option<std::path::PathBuf>> {
        let v = self.get(key);
        if v.is_empty() {
            if required {
                return Err(Error::invalid(format!(
                    "missing input: pass {flag} or set {key} in the config file"
                )));
            }
            return Ok(None);
        }
        Ok(Some(std::path::PathBuf::from(v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tinv_core::invert::{BASE_LR, DEFAULT_LR_SCALING, HIGH_LR, LOW_LR};

    #[test]
    fn defaults_match_library_constants() {
        let mut cfg = RunConfig::default();
        cfg.resolve().unwrap();
        let pre = cfg.pretrain_config().unwrap();
        assert_eq!(pre, PretrainConfig::default());

        let inv = cfg.inversion_config().unwrap();
        let lib = InversionConfig::default();
        assert_eq!(inv.placeholder, lib.placeholder);
        assert_eq!(inv.base_lr.to_bits(), BASE_LR.to_bits());
        assert_eq!(inv.lr_scaling.to_bits(), DEFAULT_LR_SCALING.to_bits());
        assert_eq!(inv.steps, lib.steps);
        assert_eq!(inv.batch_size, lib.batch_size);
        assert!((inv.effective_lr() - 0.04).abs() < 1e-7);

        let dual = cfg.dual_config().unwrap();
        assert_eq!(dual.steps, DualEncoderConfig::default().steps);
        assert_eq!(cfg.sweep_sizes().unwrap(), vec![1, 3, 5, 10, 25]);
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        assert!(RunConfig::parse("no_such_key=1\n").is_err());
        assert!(RunConfig::parse("seed=1\nseed=2\n").is_err());
        assert!(RunConfig::parse("seed\n").is_err());
        let cfg = RunConfig::parse("# comment\n\nseed = 7\n").unwrap();
        assert_eq!(cfg.get_u64("seed").unwrap(), 7);
        assert!(cfg.was_set("seed"));
        assert!(!cfg.was_set("invert.steps"));
    }

    #[test]
    fn lr_preset_resolves_unless_overridden() {
        for (preset, want) in [("base", BASE_LR), ("high", HIGH_LR), ("low", LOW_LR)] {
            let mut cfg = RunConfig::parse(&format!("invert.lr_preset={preset}\n")).unwrap();
            cfg.resolve().unwrap();
            assert_eq!(cfg.get_f32("invert.base_lr").unwrap().to_bits(), want.to_bits());
        }
        let mut cfg = RunConfig::parse("invert.lr_preset=high\ninvert.base_lr=0.5\n").unwrap();
        cfg.resolve().unwrap();
        assert_eq!(cfg.get_f32("invert.base_lr").unwrap(), 0.5);

        let mut bad = RunConfig::parse("invert.lr_preset=warp\n").unwrap();
        assert!(bad.resolve().is_err());
    }

    #[test]
    fn hash_is_stable_and_covers_every_key() {
        let mut a = RunConfig::default();
        a.resolve().unwrap();
        let mut b = RunConfig::default();
        b.resolve().unwrap();
        assert_eq!(a.hash(), b.hash());
        let text = a.resolved_text();
        assert_eq!(text.lines().count(), KEY_SCHEMA.len());
        for (k, _) in KEY_SCHEMA {
            assert!(text.contains(&format!("{k}=")), "missing {k}");
        }

        b.set("invert.steps", "10").unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn eval_prompts_key_overrides_the_bank() {
        let mut cfg =
            RunConfig::parse("eval.prompts=a photo of {} at night.; a sketch of {}.\n").unwrap();
        cfg.resolve().unwrap();
        let ec = cfg.eval_config().unwrap();
        assert_eq!(
            ec.edit_templates,
            vec!["a photo of {} at night.".to_string(), "a sketch of {}.".to_string()]
        );
        let dc = RunConfig::default();
        assert_eq!(dc.eval_config().unwrap().edit_templates.len(), EVAL_PROMPT_BANK.len());
    }
}
