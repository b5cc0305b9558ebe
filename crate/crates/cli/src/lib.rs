//! Command-line surface for the textual-inversion laboratory: corpus
//! generation, pretraining, pseudo-word learning, sampling, evaluation,
//! deterministic editing, pivotal tuning, and the set-size sweep.

pub mod commands;
pub mod config;
pub mod gallery;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use tinv_core::error::Result;

#[derive(Parser)]
#[command(
    name = "tinv",
    version,
    about = "Desk-scale textual inversion: pretrain a tiny latent diffusion model, \
             learn pseudo-words in its frozen embedding space, and measure the \
             distortion-editability tradeoff."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat key=value config file; flags override file values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root for the runs/<timestamp>-<hash> layout
    /// (default: $TINV_OUT_ROOT, then ./runs)
    #[arg(long, global = true)]
    out_root: Option<PathBuf>,
    /// Exact run directory (bypasses the timestamped layout)
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Master seed
    #[arg(long, global = true)]
    seed: Option<u64>,
}

impl Common {
    fn build_config(&self, overrides: &[(&str, Option<String>)]) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(root) = &self.out_root {
            cfg.set("out_root", &root.display().to_string())?;
        }
        if let Some(seed) = self.seed {
            cfg.set("seed", &seed.to_string())?;
        }
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        Ok(cfg)
    }
}

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(|x| x.to_string())
}

fn flag(b: bool) -> Option<String> {
    b.then(|| "true".to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shapes corpus, concept sets, and previews
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of captioned training pairs
        #[arg(long)]
        pairs: Option<usize>,
        /// Corpus generator seed
        #[arg(long)]
        corpus_seed: Option<u64>,
    },
    /// Pretrain the codec and the conditional denoiser, then freeze
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        codec_steps: Option<usize>,
        #[arg(long)]
        diffusion_steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        /// Save resumable training state every N steps (0 = only at the end)
        #[arg(long, default_value_t = 1000)]
        checkpoint_every: usize,
    },
    /// Learn a pseudo-word for a concept set against a frozen model
    Invert {
        #[command(flatten)]
        common: Common,
        /// Pretrained checkpoint
        #[arg(long)]
        model: Option<PathBuf>,
        /// Directory of 1-25 concept images
        #[arg(long)]
        concept: Option<PathBuf>,
        /// One-word coarse descriptor (defaults to the directory's file)
        #[arg(long)]
        descriptor: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        /// Pseudo-word vectors to learn (1-3)
        #[arg(long)]
        vectors: Option<usize>,
        /// Introduce the 2nd/3rd vectors at the schedule thresholds
        #[arg(long)]
        progressive: bool,
        /// L2 pull toward the descriptor embedding
        #[arg(long)]
        reg_lambda: Option<f32>,
        /// Add one extra token per training image
        #[arg(long)]
        per_image_tokens: bool,
        /// Learning-rate preset: base, high, or low
        #[arg(long)]
        lr_preset: Option<String>,
        #[arg(long)]
        base_lr: Option<f32>,
        #[arg(long)]
        batch: Option<usize>,
        /// Placeholder token, e.g. <concept-0>
        #[arg(long)]
        placeholder: Option<String>,
        /// Training caption bank: object or style
        #[arg(long)]
        template_mode: Option<String>,
    },
    /// Sample images from a prompt (optionally with learned pseudo-words)
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Learned pseudo-word file (repeatable)
        #[arg(long)]
        pseudoword: Vec<PathBuf>,
        #[arg(long)]
        prompt: String,
        /// Number of samples
        #[arg(long)]
        n: Option<usize>,
        /// DDIM steps
        #[arg(long)]
        steps: Option<usize>,
        /// Guidance scale (1 = unguided)
        #[arg(long)]
        guidance: Option<f32>,
    },
    /// Score reconstruction and editability against the dual encoder
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        pseudoword: Vec<PathBuf>,
        #[arg(long)]
        concept: Option<PathBuf>,
        #[arg(long)]
        descriptor: Option<String>,
        /// Saved dual encoder (trained from the corpus when omitted)
        #[arg(long)]
        dual: Option<PathBuf>,
        /// Samples per score
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        guidance: Option<f32>,
    },
    /// Deterministically edit an image: DDIM-invert under the source
    /// prompt, re-sample under the target prompt
    DdimEdit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        pseudoword: Vec<PathBuf>,
        /// Image to edit (PNG/JPEG/BMP; center-cropped to 32x32)
        #[arg(long)]
        image: Option<PathBuf>,
        /// Prompt describing the image as it is
        #[arg(long)]
        src: String,
        /// Prompt describing the desired edit
        #[arg(long)]
        tgt: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        guidance: Option<f32>,
    },
    /// Fine-tune a copy of the denoiser around a frozen pseudo-word
    PivotalTune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        pseudoword: Vec<PathBuf>,
        #[arg(long)]
        concept: Option<PathBuf>,
        #[arg(long)]
        descriptor: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
    },
    /// Invert and score at several concept-set sizes
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Directory with up to 25 views of one concept
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        descriptor: Option<String>,
        #[arg(long)]
        dual: Option<PathBuf>,
        /// Comma-separated sizes, e.g. 1,3,5,10,25
        #[arg(long)]
        sizes: Option<String>,
    },
}

fn run(cmd: Command) -> Result<PathBuf> {
    match cmd {
        Command::GenData {
            common,
            pairs,
            corpus_seed,
        } => {
            let cfg = common.build_config(&[
                ("corpus.pairs", opt(&pairs)),
                ("corpus.seed", opt(&corpus_seed)),
            ])?;
            commands::gen_data(cfg, common.out_dir.as_deref())
        }
        Command::Pretrain {
            common,
            codec_steps,
            diffusion_steps,
            batch,
            checkpoint_every,
        } => {
            let cfg = common.build_config(&[
                ("pretrain.codec_steps", opt(&codec_steps)),
                ("pretrain.diffusion_steps", opt(&diffusion_steps)),
                ("pretrain.batch", opt(&batch)),
            ])?;
            commands::pretrain_cmd(cfg, common.out_dir.as_deref(), checkpoint_every)
        }
        Command::Invert {
            common,
            model,
            concept,
            descriptor,
            steps,
            vectors,
            progressive,
            reg_lambda,
            per_image_tokens,
            lr_preset,
            base_lr,
            batch,
            placeholder,
            template_mode,
        } => {
            let cfg = common.build_config(&[
                ("invert.steps", opt(&steps)),
                ("invert.vectors", opt(&vectors)),
                ("invert.progressive", flag(progressive)),
                ("invert.reg_lambda", opt(&reg_lambda)),
                ("invert.per_image_tokens", flag(per_image_tokens)),
                ("invert.lr_preset", opt(&lr_preset)),
                ("invert.base_lr", opt(&base_lr)),
                ("invert.batch", opt(&batch)),
                ("invert.placeholder", opt(&placeholder)),
                ("invert.template_mode", opt(&template_mode)),
            ])?;
            commands::invert_cmd(
                cfg,
                common.out_dir.as_deref(),
                model.as_deref(),
                concept.as_deref(),
                descriptor.as_deref(),
            )
        }
        Command::Sample {
            common,
            model,
            pseudoword,
            prompt,
            n,
            steps,
            guidance,
        } => {
            let cfg = common.build_config(&[
                ("sample.n", opt(&n)),
                ("sample.steps", opt(&steps)),
                ("sample.guidance", opt(&guidance)),
            ])?;
            commands::sample_cmd(
                cfg,
                common.out_dir.as_deref(),
                model.as_deref(),
                &pseudoword,
                &prompt,
            )
        }
        Command::Evaluate {
            common,
            model,
            pseudoword,
            concept,
            descriptor,
            dual,
            samples,
            steps,
            guidance,
        } => {
            let cfg = common.build_config(&[
                ("eval.samples", opt(&samples)),
                ("eval.steps", opt(&steps)),
                ("eval.guidance", opt(&guidance)),
            ])?;
            commands::evaluate_cmd(
                cfg,
                common.out_dir.as_deref(),
                model.as_deref(),
                &pseudoword,
                concept.as_deref(),
                descriptor.as_deref(),
                dual.as_deref(),
            )
        }
        Command::DdimEdit {
            common,
            model,
            pseudoword,
            image,
            src,
            tgt,
            steps,
            guidance,
        } => {
            let cfg = common.build_config(&[
                ("edit.steps", opt(&steps)),
                ("edit.guidance", opt(&guidance)),
            ])?;
            commands::ddim_edit_cmd(
                cfg,
                common.out_dir.as_deref(),
                model.as_deref(),
                &pseudoword,
                image.as_deref(),
                &src,
                &tgt,
            )
        }
        Command::PivotalTune {
            common,
            model,
            pseudoword,
            concept,
            descriptor,
            steps,
            lr,
        } => {
            let cfg = common.build_config(&[
                ("pivotal.steps", opt(&steps)),
                ("pivotal.lr", opt(&lr)),
            ])?;
            commands::pivotal_tune_cmd(
                cfg,
                common.out_dir.as_deref(),
                model.as_deref(),
                &pseudoword,
                concept.as_deref(),
                descriptor.as_deref(),
            )
        }
        Command::Sweep {
            common,
            model,
            pool,
            descriptor,
            dual,
            sizes,
        } => {
            let cfg = common.build_config(&[("sweep.sizes", opt(&sizes))])?;
            commands::sweep_cmd(
                cfg,
                common.out_dir.as_deref(),
                model.as_deref(),
                pool.as_deref(),
                descriptor.as_deref(),
                dual.as_deref(),
            )
        }
    }
}

/// Parse and execute. Exit codes: 0 ok, 1 domain error, 2 usage error.
pub fn dispatch(args: &[String]) -> i32 {
    let argv = std::iter::once("tinv".to_string()).chain(args.iter().cloned());
    match Cli::try_parse_from(argv) {
        Ok(cli) => match run(cli.cmd) {
            Ok(_) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                1
            }
        },
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_argv_prints_usage_and_exits_2() {
        assert_eq!(dispatch(&[]), 2);
    }

    #[test]
    fn unknown_subcommand_and_flag_exit_2() {
        assert_eq!(dispatch(&["frobnicate".into()]), 2);
        assert_eq!(dispatch(&["sample".into(), "--no-such-flag".into()]), 2);
    }

    #[test]
    fn help_exits_0() {
        assert_eq!(dispatch(&["--help".into()]), 0);
        assert_eq!(dispatch(&["invert".into(), "--help".into()]), 0);
    }

    #[test]
    fn domain_errors_exit_1() {
        // missing required input path -> domain error, not usage error
        let tmp = tempfile::tempdir().unwrap();
        let code = dispatch(&[
            "sample".into(),
            "--prompt".into(),
            "a photo of a circle.".into(),
            "--out-dir".into(),
            tmp.path().join("run").display().to_string(),
        ]);
        assert_eq!(code, 1);
    }
}
