//! Command-line front end: configuration resolution and subcommands.

use crate::analysis::{analyze, AnalysisConfig};
use crate::error::{Error, Result};
use crate::fieldgen::{generate_ensemble, read_fields, write_fields};
use crate::mstats::io::{write_pdf_csv, write_stats_csv};
use crate::mstats::ScaleSet;
use crate::refcurves::{save_reference_csv, synth_reference, ReferenceModelParams};
use crate::trainer::{train, ReferenceSource, TrainConfig};
use crate::unet::{checkpoint_hash, load_checkpoint};
use crate::validation::{model_loss_gradcheck, op_gradchecks};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "turbstoch", version, about = "Neural synthesis of 1-D fields with turbulent multiscale statistics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set trainer.batch=4`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed for training and generation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker thread cap (falls back to TURBSTOCH_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the reference curves as CSV.
    MakeRef,
    /// Train a model against the reference curves.
    Train,
    /// Generate an ensemble of fields from a checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compute statistics, pdfs and slope fits of a field file.
    Analyze {
        #[arg(long)]
        fields: Option<PathBuf>,
    },
    /// Run the finite-difference gradient checks.
    Gradcheck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MakeRefConfig {
    pub min_scale: f64,
    pub max_scale: f64,
    pub count: usize,
}

impl Default for MakeRefConfig {
    fn default() -> Self {
        Self { min_scale: 0.5, max_scale: 32768.0, count: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub checkpoint: Option<PathBuf>,
    pub realizations: usize,
    pub n: usize,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { checkpoint: None, realizations: 64, n: 1 << 15, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub n: usize,
    pub batch: usize,
    /// Random coordinates checked in every parameter tensor.
    pub per_tensor: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { n: 256, batch: 2, per_tensor: 4, seed: 0 }
    }
}

/// Everything a subcommand may need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub trainer: TrainConfig,
    pub make_ref: MakeRefConfig,
    pub generate: GenerateConfig,
    pub analyze: AnalysisConfig,
    pub gradcheck: GradcheckConfig,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            trainer: TrainConfig::default(),
            make_ref: MakeRefConfig::default(),
            generate: GenerateConfig::default(),
            analyze: AnalysisConfig::default(),
            gradcheck: GradcheckConfig::default(),
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Reference model used for fitting windows and reference slopes.
    pub fn reference_params(&self) -> ReferenceModelParams {
        match &self.trainer.reference {
            ReferenceSource::Synth(p) => *p,
            ReferenceSource::Csv(_) => ReferenceModelParams::default(),
        }
    }
}

fn from_value(v: Value) -> Result<RunConfig> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        Error::Usage(format!("config key `{path}`: {}", e.into_inner()))
    })
}

/// Apply one `key.path=value` override. The value is read as JSON when
/// it parses, otherwise as a string.
pub fn apply_override(config: &RunConfig, assignment: &str) -> Result<RunConfig> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override `{assignment}` is not of the form key=value")))?;
    let mut root = serde_json::to_value(config)?;
    let mut slot = &mut root;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| Error::Usage(format!("unknown config key `{key}`")))?;
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    from_value(root)
}

/// Resolve the configuration: defaults, then the file, then `--set`
/// overrides, then the dedicated flags.
pub fn parse_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
            from_value(v)?
        }
        None => RunConfig::default(),
    };
    for s in &common.set {
        cfg = apply_override(&cfg, s)?;
    }
    if let Some(seed) = common.seed {
        cfg.trainer.seed = seed;
        cfg.generate.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn absolute(p: &Path) -> Result<PathBuf> {
    Ok(std::path::absolute(p)?)
}

/// Make every path in the configuration absolute.
fn resolve_paths(cfg: &mut RunConfig) -> Result<()> {
    cfg.out = absolute(&cfg.out)?;
    if let ReferenceSource::Csv(p) = &mut cfg.trainer.reference {
        *p = absolute(p)?;
    }
    if let Some(p) = &mut cfg.generate.checkpoint {
        *p = absolute(p)?;
    }
    if let Some(p) = &mut cfg.analyze.fields {
        *p = absolute(p)?;
    }
    Ok(())
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) => EXIT_USAGE,
        Error::Parameter(_) | Error::Range(_) | Error::Scale { .. } => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("TURBSTOCH_THREADS") {
        Ok(v) => {
            v.parse().map(Some).map_err(|_| Error::Usage(format!("TURBSTOCH_THREADS=`{v}` is not a thread count")))
        }
        Err(_) => Ok(None),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Run one subcommand with a resolved configuration; returns the exit code.
pub fn run(command: &Command, mut cfg: RunConfig) -> Result<i32> {
    match command {
        Command::Generate { checkpoint: Some(c) } => cfg.generate.checkpoint = Some(c.clone()),
        Command::Analyze { fields: Some(f) } => cfg.analyze.fields = Some(f.clone()),
        _ => {}
    }
    resolve_paths(&mut cfg)?;
    cfg.trainer.validate()?;
    let out = cfg.out.clone();
    std::fs::create_dir_all(&out)?;
    write_json(&out.join("config.resolved.json"), &cfg)?;

    match command {
        Command::MakeRef => {
            let m = &cfg.make_ref;
            let scales = ScaleSet::log_spaced(m.min_scale, m.max_scale, m.count)?;
            let curves = match &cfg.trainer.reference {
                ReferenceSource::Synth(p) => synth_reference(p, &scales)?,
                ReferenceSource::Csv(_) => return Err(Error::Usage("make-ref needs a synthesized reference".into())),
            };
            save_reference_csv(&out.join("reference.csv"), &curves)?;
        }
        Command::Train => {
            let outcome = train(&cfg.trainer, &out)?;
            log::info!("final checkpoint {}", outcome.final_checkpoint.display());
        }
        Command::Generate { .. } => {
            let g = &cfg.generate;
            let path = g.checkpoint.as_ref().ok_or_else(|| Error::Usage("generate needs --checkpoint".into()))?;
            let ckpt = load_checkpoint(path)?;
            let ensemble = generate_ensemble(&ckpt.model, g.seed, g.realizations, g.n)?;
            write_fields(&ensemble, &out.join("fields.nntf"))?;
            let provenance = serde_json::json!({
                "checkpoint": path,
                "checkpoint_sha256": checkpoint_hash(path)?,
                "base_seed": g.seed,
                "realizations": g.realizations,
                "n": g.n,
            });
            write_json(&out.join("fields.json"), &provenance)?;
        }
        Command::Analyze { .. } => {
            let path = cfg.analyze.fields.as_ref().ok_or_else(|| Error::Usage("analyze needs --fields".into()))?;
            let ensemble = read_fields(path)?;
            let a = analyze(&ensemble.data, &cfg.reference_params(), &cfg.analyze)?;
            write_stats_csv(std::fs::File::create(out.join("stats.csv"))?, &a.stats)?;
            write_pdf_csv(std::fs::File::create(out.join("pdf.csv"))?, &a.pdfs)?;
            write_json(&out.join("report.json"), &a.report)?;
        }
        Command::Gradcheck => {
            let g = &cfg.gradcheck;
            let mut checks = op_gradchecks(g.seed)?;
            checks.push(model_loss_gradcheck(&cfg.trainer.model, g.n, g.batch, g.per_tensor, g.seed)?);
            for c in &checks {
                let verdict = if c.passed { "ok" } else { "FAIL" };
                println!(
                    "{verdict:4} {:28} max rel err {:.2e} (tol {:.0e})",
                    c.report.op, c.report.max_rel_err, c.tolerance
                );
            }
            write_json(&out.join("gradcheck.json"), &checks)?;
            if checks.iter().any(|c| !c.passed) {
                return Ok(EXIT_VALIDATION);
            }
        }
    }
    Ok(EXIT_OK)
}

/// Parse arguments, run, and map the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = (|| {
        if let Some(n) = thread_count(cli.common.threads)? {
            // a pool may already exist when called repeatedly in-process
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        let cfg = parse_config(&cli.common)?;
        run(&cli.command, cfg)
    })();
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
