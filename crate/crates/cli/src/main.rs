use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdanet::harness::{
    discover_cases, evaluate_to_dir, export_attention_maps, make_targets, parse_variants, predict, run_ablation,
    train_with, Checkpoint, ExperimentConfig, TargetCache, IMAGE_SUFFIX, LABEL_MAP_FILE, LABEL_SUFFIX,
};
use cdanet::network::Variant;
use cdanet::volume_io::{generate_phantom, save_labels, save_volume};
use cdanet::{Dims, Error, Result};
use clap::{Args, Parser, Subcommand};

/// Contour- and distance-guided attention network for volumetric
/// multi-structure segmentation.
#[derive(Debug, Parser)]
#[command(name = "cdanet", version, arg_required_else_help = true)]
struct Cli {
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Precompute and cache contour and distance-transform targets.
    MakeTargets(ConfigArgs),
    /// Write synthetic phantom volumes and their label map.
    Phantom(PhantomArgs),
    /// Train one fold of the configured experiment.
    Train(TrainArgs),
    /// Compute per-case and aggregate metrics for a checkpoint.
    Evaluate(CheckpointArgs),
    /// Segment cases and write label volumes at native resolution.
    Predict(CheckpointArgs),
    /// Cross-validate several model variants and write a comparison table.
    Ablate(AblateArgs),
    /// Write the attention map of each case as a volume.
    ExportAttention(CheckpointArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Experiment file (TOML).
    #[arg(short, long)]
    config: PathBuf,

    /// Override a config key, e.g. `--set training.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_key_value)]
    overrides: Vec<(String, String)>,

    /// Override `data_root` (also settable through CDANET_DATA_ROOT).
    #[arg(long)]
    data_root: Option<PathBuf>,

    /// Override `output_root`.
    #[arg(long)]
    output_root: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config, &self.overrides)?;
        if let Some(p) = &self.data_root {
            cfg.data_root = p.clone();
        }
        if let Some(p) = &self.output_root {
            cfg.output_root = p.clone();
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct PhantomArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Edge length, or `D,H,W`.
    #[arg(long, default_value = "32", value_parser = parse_size)]
    size: Dims,

    #[arg(long, default_value_t = 3)]
    structures: usize,

    /// Number of phantoms, seeded `seed`, `seed + 1`, ...
    #[arg(long, default_value_t = 1)]
    count: u64,

    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,

    /// Model variant, e.g. `base+CTN+DTTN+penalty`.
    #[arg(long)]
    variant: Option<Variant>,

    #[arg(long)]
    epochs: Option<usize>,

    /// Fold to hold out for validation.
    #[arg(long)]
    fold: Option<usize>,

    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct CheckpointArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Checkpoint file written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,

    /// Case ids to process (comma separated); defaults to every case in the data root.
    #[arg(long, value_delimiter = ',')]
    cases: Vec<String>,

    /// Output directory; defaults to a subdirectory of the output root.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Variants to compare (comma separated); defaults to all six.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
}

fn parse_key_value(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn parse_size(s: &str) -> std::result::Result<Dims, String> {
    let parts = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad size `{s}`: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    match parts.as_slice() {
        [n] => Ok(Dims::cube(*n)),
        [d, h, w] => Ok(Dims::new(*d, *h, *w)),
        _ => Err(format!("size must be N or D,H,W, got `{s}`")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_secs()
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Phantom(a) => phantom(&a),
        Command::MakeTargets(a) => {
            let cfg = a.load()?;
            let ids = discover_cases(&cfg.data_root)?;
            let cases = make_targets(&cfg, &ids)?;
            let cache = TargetCache::for_config(&cfg, &cfg.resolve_label_map()?);
            println!("{} cases ready in {}", cases.len(), cache.dir().display());
            Ok(())
        }
        Command::Train(a) => {
            let mut overrides = a.config.overrides.clone();
            let mut push = |k: &str, v: Option<String>| {
                if let Some(v) = v {
                    overrides.push((k.to_string(), v));
                }
            };
            push("model.variant", a.variant.map(|v| format!("\"{}\"", v.name())));
            push("training.epochs", a.epochs.map(|v| v.to_string()));
            push("training.fold", a.fold.map(|v| v.to_string()));
            push("training.seed", a.seed.map(|v| v.to_string()));
            let cfg = ConfigArgs {
                overrides,
                ..a.config
            }
            .load()?;
            let out = train_with(&cfg, a.resume.as_deref())?;
            let dsc = out.best_val_wh_dsc.map_or("NA".into(), |v| format!("{v:.4}"));
            println!(
                "trained {} steps; best validation WH DSC {dsc}; checkpoint {}",
                out.steps,
                out.best_checkpoint.display()
            );
            Ok(())
        }
        Command::Evaluate(a) => {
            let (cfg, ck, ids) = checkpoint_inputs(&a)?;
            let dir = a.out.clone().unwrap_or_else(|| cfg.output_root.join("eval"));
            let report = evaluate_to_dir(&cfg, &ck, &ids, &dir)?;
            let dsc = report.mean_wh_dsc().map_or("NA".into(), |v| format!("{v:.4}"));
            println!("{} cases evaluated; mean WH DSC {dsc}; reports in {}", ids.len(), dir.display());
            Ok(())
        }
        Command::Predict(a) => {
            let (cfg, ck, ids) = checkpoint_inputs(&a)?;
            let dir = a.out.clone().unwrap_or_else(|| cfg.output_root.join("predictions"));
            let written = predict(&cfg, &ck, &ids, &dir)?;
            print_written(&written);
            Ok(())
        }
        Command::ExportAttention(a) => {
            let (cfg, ck, ids) = checkpoint_inputs(&a)?;
            let dir = a.out.clone().unwrap_or_else(|| cfg.output_root.join("attention"));
            let written = export_attention_maps(&cfg, &ck, &ids, &dir)?;
            print_written(&written);
            Ok(())
        }
        Command::Ablate(a) => {
            let cfg = a.config.load()?;
            let variants = if a.variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                parse_variants(&a.variants)?
            };
            let table = run_ablation(&cfg, &variants)?;
            print!("{}", table.to_csv_string()?);
            Ok(())
        }
    }
}

fn checkpoint_inputs(a: &CheckpointArgs) -> Result<(ExperimentConfig, Checkpoint, Vec<String>)> {
    let cfg = a.config.load()?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let ids = if a.cases.is_empty() {
        discover_cases(&cfg.data_root)?
    } else {
        a.cases.clone()
    };
    Ok((cfg, ck, ids))
}

fn print_written(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn phantom(a: &PhantomArgs) -> Result<()> {
    if a.count == 0 {
        return Err(Error::InvalidArgument("--count must be positive".into()));
    }
    let out: &Path = &a.out;
    for seed in a.seed..a.seed + a.count {
        let (image, labels) = generate_phantom(seed, a.size, a.structures)?;
        let id = format!("phantom_{seed:03}");
        let img_path = out.join(format!("{id}{IMAGE_SUFFIX}.nii.gz"));
        let lab_path = out.join(format!("{id}{LABEL_SUFFIX}.nii.gz"));
        save_volume(&image, &img_path)?;
        save_labels(&labels, &lab_path)?;
        if seed == a.seed {
            labels.label_map.save(&out.join(LABEL_MAP_FILE))?;
        }
        println!("{}\n{}", img_path.display(), lab_path.display());
    }
    Ok(())
}
