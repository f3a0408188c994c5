//! Command-line interface: argument parsing, config merging and the
//! subcommands behind the `dik` binary.
//!
//! Parameters resolve as flag, then config file, then default. Results go to
//! `--out` or stdout; diagnostics go to stderr. Exit status is 0 on success,
//! 2 for input or validation errors and 1 for internal failures.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{ArgGroup, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bench::{run_bench, BenchConfig};
use crate::denoiser::{confidence_map, Denoiser, DenoiserSpec, Timestep};
use crate::error::{Error, Result};
use crate::grounding::{ground, ground_by_attention, SpatialPrompt};
use crate::inversion::{edit, invert, FusionParams};
use crate::masking::ScheduleParams;
use crate::metrics::{region_metrics, IntensityGrid};
use crate::refinement::{intrinsic_refine, recover_residual, relax_mask, residual_mask, RefinementParams, RelaxMode};
use crate::rng::RngState;
use crate::types::{parse_json, Conditioning, GroundingMask, ResidualStack, TokenGrid};

pub const EXIT_OK: u8 = 0;
pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_INPUT: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "dik", version, about = "Grounded inversion and editing of discrete token grids")]
pub struct Cli {
    /// Master seed; DIK_SEED is used when the flag is absent.
    #[arg(long, env = "DIK_SEED", global = true)]
    pub seed: Option<u64>,
    /// Number of reverse steps T [default: 64].
    #[arg(long, global = true)]
    pub timesteps: Option<usize>,
    /// Residual weight λ in [0, 1] [default: 0.2].
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Logit temperature [default: 1.0].
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    /// Argmax margin of the inverted logits [default: 1.0].
    #[arg(long, global = true)]
    pub lai_margin: Option<f64>,
    /// Gumbel scale on mask scores [default: 0.0].
    #[arg(long, global = true)]
    pub tau_mask: Option<f64>,
    /// Confidence below which target tokens are resampled [default: 0.5].
    #[arg(long, global = true)]
    pub conf_threshold: Option<f64>,
    /// Replace grounding masks by their bounding boxes.
    #[arg(long, global = true)]
    pub relax: bool,
    /// Experiment config JSON (benchmark config for `bench`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Denoiser spec JSON.
    #[arg(long, global = true)]
    pub denoiser: Option<PathBuf>,
    /// Output path; stdout when absent.
    #[arg(long, short, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ground a spatial prompt (or attention to concept tokens) to a mask.
    #[command(group(ArgGroup::new("query").required(true).args(["prompt", "attention"])))]
    Ground {
        #[arg(long)]
        grid: PathBuf,
        /// Prompt JSON, inline or as a file path.
        #[arg(long)]
        prompt: Option<String>,
        /// Concept tokens for attention-guided grounding.
        #[arg(long, value_delimiter = ',')]
        attention: Option<Vec<u32>>,
        #[arg(long, default_value_t = 4)]
        top_k: usize,
    },
    /// Record the residual stack of a grid over a mask.
    Invert {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Source prompt tokens.
        #[arg(long, value_delimiter = ',', required = true)]
        concept: Vec<u32>,
    },
    /// Replay a residual stack under a target prompt.
    Edit {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        stack: PathBuf,
        /// Target prompt tokens.
        #[arg(long, value_delimiter = ',', required = true)]
        concept: Vec<u32>,
    },
    /// Resample unstable target tokens, then inpaint the vacated region.
    Refine {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        source_mask: PathBuf,
        #[arg(long)]
        target_mask: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        concept: Vec<u32>,
    },
    /// Run the compositional benchmark described by --config.
    Bench,
    /// Region MSE/PSNR/SSIM between two token or intensity grids.
    Metrics {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        candidate: PathBuf,
        /// Mask JSON; the whole grid when absent.
        #[arg(long)]
        region: Option<PathBuf>,
    },
    /// Fit an empirical denoiser on a directory of token grids.
    Fit {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab_size: usize,
    },
}

/// Optional experiment config shared by the single-pipeline commands.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub denoiser: Option<DenoiserSpec>,
    #[serde(default)]
    pub schedule: Option<ScheduleParams>,
    #[serde(default)]
    pub fusion: Option<FusionParams>,
    #[serde(default)]
    pub refinement: Option<RefinementParams>,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Parameters after merging flags over the config over defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub denoiser: Option<DenoiserSpec>,
    pub schedule: ScheduleParams,
    pub fusion: FusionParams,
    pub refinement: RefinementParams,
    pub seed: u64,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    parse_json(&read_text(path)?).map_err(|e| match e {
        Error::Parse { field, message } => Error::Parse {
            field,
            message: format!("{message} (in {})", path.display()),
        },
        other => other,
    })
}

fn read_grid(path: &Path) -> Result<TokenGrid> {
    TokenGrid::from_json(&read_text(path)?)
}

fn read_mask(path: &Path) -> Result<GroundingMask> {
    GroundingMask::from_json(&read_text(path)?)
}

impl Cli {
    fn overrides(&self, mut r: Resolved) -> Result<Resolved> {
        if let Some(t) = self.timesteps {
            r.schedule.timesteps = t;
        }
        if let Some(tau) = self.tau_mask {
            r.schedule.mask_temperature = tau;
        }
        if let Some(l) = self.lambda {
            r.fusion.lambda = l;
        }
        if let Some(t) = self.temperature {
            r.fusion.temperature = t;
        }
        if let Some(m) = self.lai_margin {
            r.fusion.lai_margin = m;
        }
        if let Some(c) = self.conf_threshold {
            r.refinement.conf_threshold = c;
        }
        if self.relax {
            r.refinement.relax_mode = RelaxMode::BoundingBox;
        }
        if let Some(s) = self.seed {
            r.seed = s;
        }
        if let Some(p) = &self.denoiser {
            r.denoiser = Some(read_json(p)?);
        }
        r.schedule.validate()?;
        r.fusion.validate()?;
        r.refinement.validate()?;
        if let Some(d) = &r.denoiser {
            d.validate()?;
        }
        Ok(r)
    }

    /// Merge flags over the experiment config over defaults.
    pub fn resolve(&self) -> Result<Resolved> {
        let cfg: ExperimentConfig = match &self.config {
            Some(p) => read_json(p)?,
            None => ExperimentConfig::default(),
        };
        self.overrides(Resolved {
            denoiser: cfg.denoiser,
            schedule: cfg.schedule.unwrap_or_default(),
            fusion: cfg.fusion.unwrap_or_default(),
            refinement: cfg.refinement.unwrap_or_default(),
            seed: cfg.seed.unwrap_or(0),
        })
    }
}

impl Resolved {
    /// The configured denoiser, or a radius-1 local-hash model over the
    /// grid's vocabulary.
    pub fn denoiser_for(&self, grid: &TokenGrid) -> DenoiserSpec {
        self.denoiser
            .clone()
            .unwrap_or_else(|| DenoiserSpec::local_hash(grid.vocab_size(), 1))
    }
}

fn parse_prompt(arg: &str) -> Result<SpatialPrompt> {
    let trimmed = arg.trim_start();
    if trimmed.starts_with('{') {
        parse_json(trimmed)
    } else {
        read_json(Path::new(arg))
    }
}

/// Parse an intensity grid, or a token grid rendered through the palette.
fn read_intensity(path: &Path) -> Result<IntensityGrid> {
    let text = read_text(path)?;
    let value: serde_json::Value = parse_json(&text)?;
    if value.get("tokens").is_some() {
        IntensityGrid::from_tokens(&TokenGrid::from_json(&text)?)
    } else {
        let g: IntensityGrid = parse_json(&text)?;
        g.validate()?;
        Ok(g)
    }
}

fn execute<'a, 'b>(cli: &Cli, stderr: &Mutex<&'a mut (dyn Write + Send + 'b)>) -> Result<String> {
    let out = match &cli.command {
        Command::Ground {
            grid,
            prompt,
            attention,
            top_k,
        } => {
            let grid = read_grid(grid)?;
            let mut mask = match (prompt, attention) {
                (Some(p), _) => ground(&grid, &parse_prompt(p)?)?,
                (None, Some(concept)) => {
                    let r = cli.resolve()?;
                    let den = r.denoiser_for(&grid);
                    ground_by_attention(&grid, &Conditioning::source(concept.clone()), &den, *top_k)?
                }
                (None, None) => return Err(Error::validation("either --prompt or --attention is required")),
            };
            if cli.relax && !mask.is_empty() {
                mask = relax_mask(&mask)?;
            }
            mask.to_json()
        }
        Command::Invert { grid, mask, concept } => {
            let r = cli.resolve()?;
            let grid = read_grid(grid)?;
            let mut mask = read_mask(mask)?;
            if r.refinement.relax_mode == RelaxMode::BoundingBox && !mask.is_empty() {
                mask = relax_mask(&mask)?;
            }
            let den = r.denoiser_for(&grid);
            let stack = invert(
                &grid,
                &mask,
                &r.schedule,
                &Conditioning::source(concept.clone()),
                &den,
                &r.fusion,
                &RngState::from_seed(r.seed),
            )?;
            stack.to_json()
        }
        Command::Edit { grid, stack, concept } => {
            let r = cli.resolve()?;
            let grid = read_grid(grid)?;
            let stack = ResidualStack::from_json(&read_text(stack)?)?;
            let den = r.denoiser_for(&grid);
            let edited = edit(
                &grid,
                &stack,
                &Conditioning::target(concept.clone()),
                &r.fusion,
                &den,
                &RngState::from_seed(r.seed),
            )?;
            edited.to_json()
        }
        Command::Refine {
            grid,
            source_mask,
            target_mask,
            concept,
        } => {
            let r = cli.resolve()?;
            let grid = read_grid(grid)?;
            let source = read_mask(source_mask)?;
            let target = read_mask(target_mask)?;
            let den = r.denoiser_for(&grid);
            let rng = RngState::from_seed(r.seed);
            let cond = Conditioning::target(concept.clone());
            let logits = den.predict_logits(&grid, &cond, Timestep::new(1, 1)?)?;
            let conf = confidence_map(&logits, &grid)?;
            let refined = intrinsic_refine(&grid, &conf, &target, &r.refinement, &cond, &den, &rng)?;
            let vacated = residual_mask(&source, &target)?;
            let recovered = recover_residual(
                &refined,
                &vacated,
                &Conditioning::neutral(),
                r.refinement.refine_steps,
                &den,
                &rng,
            )?;
            recovered.to_json()
        }
        Command::Bench => {
            let path = cli
                .config
                .as_ref()
                .ok_or_else(|| Error::validation("bench requires --config"))?;
            let cfg: BenchConfig = read_json(path)?;
            let base = path.parent().unwrap_or(Path::new("."));
            let cases = cfg.load_cases(base)?;
            let merged = cli.overrides(Resolved {
                denoiser: Some(cfg.denoiser.clone()),
                schedule: cfg.schedule,
                fusion: cfg.fusion.clone(),
                refinement: cfg.refinement,
                seed: cfg.seed,
            })?;
            let mut pipeline = cfg.pipeline();
            pipeline.denoiser = merged.denoiser.unwrap_or(pipeline.denoiser);
            pipeline.schedule = merged.schedule;
            pipeline.fusion = merged.fusion;
            pipeline.refinement = merged.refinement;
            pipeline.seed = merged.seed;
            let total = cases.len();
            let report = run_bench(&cases, &pipeline, |c| {
                let mut err = stderr.lock().expect("stderr lock");
                let _ = writeln!(
                    err,
                    "[{total} cases] {}: mse={} psnr={} ssim={}{}",
                    c.id,
                    c.non_edit.mse,
                    c.non_edit.psnr,
                    c.non_edit.ssim,
                    c.order_invariant
                        .map(|b| format!(" order_invariant={b}"))
                        .unwrap_or_default()
                );
            })?;
            serde_json::to_string_pretty(&report).map_err(|e| Error::Internal(e.to_string()))?
        }
        Command::Metrics {
            reference,
            candidate,
            region,
        } => {
            let a = read_intensity(reference)?;
            let b = read_intensity(candidate)?;
            let region = match region {
                Some(p) => read_mask(p)?,
                None => GroundingMask::full(a.height, a.width),
            };
            let m = region_metrics(&a, &b, &region)?;
            serde_json::to_string(&m).map_err(|e| Error::Internal(e.to_string()))?
        }
        Command::Fit { corpus, vocab_size } => {
            let spec = DenoiserSpec::fit_empirical_dir(*vocab_size, corpus)?;
            serde_json::to_string(&spec).map_err(|e| Error::Internal(e.to_string()))?
        }
    };
    Ok(out)
}

/// Parse `args`, run the command and return the exit status.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut (dyn Write + Send)) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let out_path = cli.out.clone();
    let result = execute(&cli, &Mutex::new(&mut *stderr));
    let written = result.and_then(|mut text| {
        text.push('\n');
        match &out_path {
            Some(p) => std::fs::write(p, text).map_err(|e| Error::Io {
                path: p.display().to_string(),
                source: e,
            }),
            None => stdout
                .write_all(text.as_bytes())
                .map_err(|e| Error::Internal(format!("writing stdout: {e}"))),
        }
    });
    match written {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            if e.is_input_error() {
                EXIT_INPUT
            } else {
                EXIT_INTERNAL
            }
        }
    }
}
