//! `dyadformer` command-line driver.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage error.

pub mod config;
pub mod experiment;
pub mod params;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dyadformer::data::{generate_synthetic, sample_dataset, write_dataset, Plant, Split};
use dyadformer::evaluation::{prediction_spread, render_spread, report_table, GroupBy};
use dyadformer::model::checkpoint::Checkpoint;
use dyadformer::model::{Dyadformer, ModelVariant, Participant};
use dyadformer::training::collect_predictions;

use config::{Profile, RunConfig};
use experiment::{ablate_grid, fit, load_sessions, save_run, warn_long_window, CellSpec, CHECKPOINT_FILE, LOG_FILE};

#[derive(Debug, Parser)]
#[command(name = "dyadformer", version, about = "Dyadic personality-trait regression with attention models")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dyad dataset.
    Synth(SynthArgs),
    /// Train one model and write its checkpoint and epoch log.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Train a grid of variants, depths, window lengths and seeds.
    Ablate(AblateArgs),
    /// Count parameters of every variant.
    Params(ParamsArgs),
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// TOML run configuration; flags override its values.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load_or_default(self.config.as_deref())
    }
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory (default: the configured output directory).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sessions: Option<usize>,
    #[arg(long)]
    chunks: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Signal source of all five traits: own_video, own_audio,
    /// partner_video or sparse_temporal. Default: a mix.
    #[arg(long, value_parser = parse_plant)]
    plant: Option<Plant>,
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Sequence length T in chunks.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    eval_stride: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainOverrides {
    #[arg(long, value_parser = parse_profile)]
    profile: Option<Profile>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainOverrides,
    #[arg(long)]
    variant: Option<ModelVariant>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: the configured output directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Also write the report as `task,trait,metric,value` rows.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Only the overall block, no per-task blocks.
    #[arg(long)]
    overall: bool,
    /// Print the mean and standard deviation of the predictions.
    #[arg(long)]
    spread: bool,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainOverrides,
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<ModelVariant>>,
    #[arg(long, value_delimiter = ',')]
    windows: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Cells trained in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ParamsArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Base dimensions (default: paper, or the config file's profile).
    #[arg(long, value_parser = parse_profile)]
    profile: Option<Profile>,
}

fn parse_plant(s: &str) -> Result<Plant, String> {
    match s.to_ascii_lowercase().replace('-', "_").as_str() {
        "own_video" => Ok(Plant::OwnVideo),
        "own_audio" => Ok(Plant::OwnAudio),
        "partner_video" => Ok(Plant::PartnerVideo),
        "sparse_temporal" => Ok(Plant::SparseTemporal),
        _ => Err(format!("unknown plant {s:?}")),
    }
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse().map_err(|e: anyhow::Error| e.to_string())
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
        Command::Params(a) => params_cmd(a),
    }
}

fn apply_data(cfg: &mut RunConfig, d: &DataArgs) {
    if let Some(m) = &d.manifest {
        cfg.data.manifest = Some(m.clone());
    }
    if let Some(t) = d.window {
        cfg.data.window = t;
    }
    if let Some(s) = d.stride {
        cfg.data.stride = s;
    }
    if let Some(s) = d.eval_stride {
        cfg.data.eval_stride = s;
    }
}

fn apply_train(cfg: &mut RunConfig, t: &TrainOverrides) {
    if let Some(p) = t.profile {
        cfg.profile = p;
    }
    if let Some(e) = t.epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(lr) = t.lr {
        cfg.train.lr0 = lr;
    }
    if let Some(b) = t.batch_size {
        cfg.train.batch_size = b;
    }
}

fn manifest_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.data
        .manifest
        .as_deref()
        .context("no dataset: pass --manifest or set data.manifest")
}

fn check_strides(cfg: &RunConfig) -> Result<()> {
    if cfg.data.window == 0 || cfg.data.stride == 0 || cfg.data.eval_stride == 0 {
        bail!("window and strides must be at least 1");
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<i32> {
    let cfg = a.config.load()?;
    let mut spec = cfg.synth.clone();
    if let Some(n) = a.sessions {
        spec.n_sessions = n;
    }
    if let Some(n) = a.chunks {
        spec.chunks_per_session = n;
    }
    if let Some(s) = a.noise {
        spec.noise_std = s;
    }
    if let Some(p) = a.plant {
        spec = spec.with_plant(p);
    }
    let seed = a.seed.or(cfg.seeds.first().copied()).unwrap_or(0);
    let out = a.out.unwrap_or(cfg.output);
    let sessions = generate_synthetic(&spec, seed)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let manifest = write_dataset(&sessions, &out)?;
    fs::write(out.join("synthetic.toml"), format!("seed = {seed}\n\n{}", toml::to_string(&spec)?))?;
    println!("wrote {} sessions to {}", sessions.len(), manifest.display());
    Ok(0)
}

fn train_cmd(a: TrainArgs) -> Result<i32> {
    let mut cfg = a.config.load()?;
    apply_data(&mut cfg, &a.data);
    apply_train(&mut cfg, &a.train);
    if let Some(v) = a.variant {
        cfg.set_model_value("variant", v.key());
    }
    check_strides(&cfg)?;
    warn_long_window(cfg.data.window);
    let sessions = load_sessions(manifest_path(&cfg)?)?;
    let spec = CellSpec {
        variant: cfg.variant()?,
        layers: None,
        window: cfg.data.window,
        seed: a.seed.or(cfg.seeds.first().copied()).unwrap_or(0),
    };
    let out = a.out.unwrap_or_else(|| cfg.output.clone());
    let (_, outcome) = fit(&cfg, &spec, &sessions)?;
    save_run(&out, &outcome)?;
    let st = &outcome.state;
    println!(
        "{}: {} epochs, best validation loss {:.6} at epoch {}",
        spec.variant.key(),
        st.log.len(),
        st.best_val_loss,
        st.best_epoch
    );
    println!("wrote {} and {}", out.join(CHECKPOINT_FILE).display(), out.join(LOG_FILE).display());
    Ok(0)
}

fn evaluate(a: EvaluateArgs) -> Result<i32> {
    let mut cfg = a.config.load()?;
    apply_data(&mut cfg, &a.data);
    check_strides(&cfg)?;
    warn_long_window(cfg.data.window);
    let ckpt = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let sessions = load_sessions(manifest_path(&cfg)?)?;
    let widths = sessions[0].widths();
    let c = &ckpt.config;
    if widths != (c.d_v, c.d_a, c.d_m) {
        bail!(
            "dataset feature widths {widths:?} do not match the checkpoint's {:?}",
            (c.d_v, c.d_a, c.d_m)
        );
    }
    let model = Dyadformer::new(ckpt.config.clone())?;
    let samples = sample_dataset(&sessions, a.split, cfg.data.window, cfg.data.eval_stride);
    if samples.is_empty() {
        bail!("no {:?} sequences of length {}", a.split, cfg.data.window);
    }
    let records = collect_predictions(&model, &ckpt.params, &samples, &Participant::BOTH)?;
    let group_by = if a.overall { GroupBy::Overall } else { GroupBy::Task };
    let report = report_table(&records, group_by)?;
    print!("{}", report.render_text());
    if a.spread {
        print!("{}", render_spread(&prediction_spread(&records)?));
    }
    if let Some(path) = &a.csv {
        fs::write(path, report.render_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(0)
}

fn ablate(a: AblateArgs) -> Result<i32> {
    let mut cfg = a.config.load()?;
    apply_data(&mut cfg, &a.data);
    apply_train(&mut cfg, &a.train);
    if let Some(v) = a.variants {
        cfg.ablate.variants = v;
    }
    if let Some(w) = a.windows {
        cfg.ablate.windows = w;
    }
    if let Some(l) = a.layers {
        cfg.ablate.layers = l;
    }
    if let Some(s) = a.seeds {
        cfg.seeds = s;
    }
    if cfg.ablate.windows.contains(&0) || cfg.ablate.layers.contains(&0) {
        bail!("windows and layers must be at least 1");
    }
    check_strides(&cfg)?;
    let out = a.out.unwrap_or_else(|| cfg.output.clone());
    let sessions = load_sessions(manifest_path(&cfg)?)?;
    let grid = ablate_grid(&cfg, &sessions, &out, a.jobs)?;
    print!("{}", grid.summary.render_text());
    let failed = grid.failures();
    if failed > 0 {
        eprintln!("error: {failed} of {} cells failed; see {}", grid.cells.len(), out.join("cells.csv").display());
        return Ok(1);
    }
    Ok(0)
}

fn params_cmd(a: ParamsArgs) -> Result<i32> {
    let mut cfg = match &a.config.config {
        Some(_) => a.config.load()?,
        None => RunConfig {
            profile: Profile::Paper,
            ..RunConfig::default()
        },
    };
    if let Some(p) = a.profile {
        cfg.profile = p;
    }
    let compare = cfg.profile == Profile::Paper && cfg.model.keys().all(|k| k == "variant");
    let audit = params::audit(|v| cfg.model_config_for(v), compare)?;
    print!("{}", audit.render());
    let failures = audit.failures();
    if !failures.is_empty() {
        let names: Vec<&str> = failures.iter().map(|r| r.name.as_str()).collect();
        eprintln!(
            "error: {} deviate from the reference by more than {:.0}%",
            names.join(", "),
            100.0 * audit.tolerance
        );
        return Ok(1);
    }
    Ok(0)
}
