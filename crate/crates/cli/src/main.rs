//! `nlct` command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nlct::data::{write_dataset, Dataset, Split};
use nlct::gradcheck::{run_gradcheck, GradcheckConfig};
use nlct::io::{read_nlt1, write_nlt1, write_pgm};
use nlct::losses::{noise_weight_map, FeatureExtractor};
use nlct::metrics::hu_window;
use nlct::networks::{build_variant, Variant};
use nlct::nonlocal::attention_weights_debug;
use nlct::train::{
    ablate, ablation_csv, evaluate, evaluate_noisy, radius_csv, radius_sweep, reflect_pad_to, train, write_text,
    Preset, TrainConfig, TrainState, SWEEP_RADII,
};
use nlct::{Error, OpTag, Result};

/// Seed of the fixed random feature extractor used for texture distances.
const TML_SEED: u64 = 7;

#[derive(Parser, Debug)]
#[command(name = "nlct", version, about = "Neighborhood non-local denoising for CT-like images")]
struct Cli {
    /// Plain-text `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Starting preset when no config file is given.
    #[arg(long, global = true, value_parser = ["paper", "desk"], conflicts_with = "config")]
    preset: Option<String>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic phantom dataset.
    PhantomGen {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        test_count: Option<usize>,
    },
    /// Train one variant.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        iters: Option<u64>,
    },
    /// Denoise one NLT1 image in HU.
    Denoise {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write the windowed result as an 8-bit PGM.
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
    /// Score a checkpoint (or the raw low-dose input) on a dataset split.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train several variants from one seed and compare them.
    Ablate {
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
        /// Sweep the neighborhood radius of the configured variant instead.
        #[arg(long)]
        radius_sweep: bool,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        iters: Option<u64>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        seeds: usize,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Write the noise weight map and attention maps for one slice.
    DumpWeights {
        #[arg(long)]
        id: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match (&cli.config, cli.preset.as_deref()) {
        (Some(p), _) => TrainConfig::load(p)?,
        (None, Some("desk")) => TrainConfig::preset(Preset::Desk),
        _ => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.dataset.seed = s;
    }
    if let Some(o) = &cli.out_dir {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn load_checkpoint(path: &Path, cli: &Cli, cfg: &TrainConfig) -> Result<TrainState> {
    let state = TrainState::load(path)?;
    if cli.config.is_some() {
        state.ensure_matches(&build_variant(&cfg.variant_config(), &cfg.scale)?)?;
    }
    Ok(state)
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(cli)?;
    let fx = FeatureExtractor::random(TML_SEED);
    match &cli.cmd {
        Cmd::PhantomGen {
            count,
            size,
            test_count,
        } => {
            let d = &mut cfg.dataset;
            if let Some(c) = count {
                d.count = *c;
            }
            if let Some(s) = size {
                d.height = *s;
                d.width = *s;
            }
            if let Some(t) = test_count {
                d.test_count = *t;
            }
            let root = cli.out_dir.clone().unwrap_or_else(|| cfg.data_dir.clone());
            let ds = write_dataset(&root, &cfg.dataset)?;
            println!(
                "wrote {} phantoms ({} test) to {}",
                ds.entries.len(),
                ds.ids(Split::Test).len(),
                root.display()
            );
        }
        Cmd::Train { data, variant, iters } => {
            if let Some(d) = data {
                cfg.data_dir = d.clone();
            }
            if let Some(v) = variant {
                cfg.variant = *v;
            }
            if let Some(n) = iters {
                cfg.max_iters = *n;
            }
            let (_, outcome) = train(&cfg)?;
            println!(
                "trained {} for {} iterations{}; checkpoint {}",
                cfg.variant,
                outcome.iterations,
                if outcome.stopped_early { " (early stop)" } else { "" },
                outcome.checkpoint().display()
            );
        }
        Cmd::Denoise {
            checkpoint,
            input,
            output,
            pgm,
        } => {
            let state = load_checkpoint(checkpoint, cli, &cfg)?;
            let mut hu = read_nlt1(input)?;
            let shape = hu.shape().to_vec();
            if shape.len() == 2 {
                hu = hu.reshape(&[1, shape[0], shape[1]])?;
            }
            let out = state.denoise_hu(&hu)?;
            if let Some(p) = pgm {
                write_pgm(p, &hu_window(&out, &state.window))?;
            }
            write_nlt1(output, &out.reshape(&shape)?)?;
        }
        Cmd::Evaluate {
            checkpoint,
            data,
            split,
        } => {
            let ds = Dataset::open(data.as_deref().unwrap_or(&cfg.data_dir))?;
            let split = Split::parse(split)?;
            let report = match checkpoint {
                Some(c) => evaluate(&load_checkpoint(c, cli, &cfg)?, &ds, split, &fx)?,
                None => evaluate_noisy(&ds, split, &cfg.window, &fx)?,
            };
            mkdir(&cfg.out_dir)?;
            report.write_csv(&cfg.out_dir.join("eval.csv"))?;
            print!("{}", report.to_csv());
        }
        Cmd::Ablate {
            variants,
            radius_sweep: sweep,
            data,
            iters,
        } => {
            if let Some(d) = data {
                cfg.data_dir = d.clone();
            }
            if let Some(n) = iters {
                cfg.max_iters = *n;
            }
            mkdir(&cfg.out_dir)?;
            if *sweep {
                let rows = radius_sweep(&cfg, &SWEEP_RADII, &fx)?;
                let csv = radius_csv(&rows);
                write_text(&cfg.out_dir.join("radius_sweep.csv"), &csv)?;
                print!("{csv}");
            } else {
                let vs = if variants.is_empty() {
                    Variant::ALL.to_vec()
                } else {
                    variants.clone()
                };
                let rows = ablate(&cfg, &vs, &fx)?;
                let csv = ablation_csv(&rows);
                write_text(&cfg.out_dir.join("ablation.csv"), &csv)?;
                print!("{csv}");
            }
        }
        Cmd::Gradcheck { seeds, inject_fault } => {
            let fault = match inject_fault.as_deref() {
                None => None,
                Some("conv2d") => Some((OpTag::Conv2d, 1.5)),
                Some(other) => return Err(Error::config(format!("cannot inject a fault into `{other}`"))),
            };
            let report = run_gradcheck(&GradcheckConfig {
                seeds: *seeds,
                fault,
                ..GradcheckConfig::default()
            })?;
            print!("{}", report.render());
            if !report.passed() {
                return Err(Error::numeric(format!(
                    "gradient check failed for {}",
                    report.failing().join(", ")
                )));
            }
        }
        Cmd::DumpWeights { id, checkpoint, data } => {
            let ds = Dataset::open(data.as_deref().unwrap_or(&cfg.data_dir))?;
            ds.check_files(&[id.as_str()])?;
            let state = checkpoint.as_ref().map(|c| load_checkpoint(c, cli, &cfg)).transpose()?;
            let window = state.as_ref().map_or(cfg.window, |s| s.window);
            let (clean, low) = ds.load_hu(id)?;
            let (h, w) = (clean.shape()[1], clean.shape()[2]);
            let clean = hu_window(&clean, &window).reshape(&[1, 1, h, w])?;
            let noisy = hu_window(&low, &window).reshape(&[1, 1, h, w])?;
            let recon = match &state {
                Some(s) => s.denoise_normalized(&noisy)?,
                None => noisy.clone(),
            };
            let p = noise_weight_map(&clean, &recon, &cfg.weights)?.p;
            mkdir(&cfg.out_dir)?;
            write_nlt1(&cfg.out_dir.join("weight_map.nlt1"), &p)?;
            let peak = p.data().iter().copied().fold(0.0f32, f32::max);
            write_pgm(&cfg.out_dir.join("weight_map.pgm"), &p.map(|v| v / peak))?;
            println!("weight map written to {}", cfg.out_dir.display());
            if let Some(s) = state.filter(|s| s.generator.spec.use_nonlocal) {
                let f = s.generator.spec.downsample_factor;
                let x = reflect_pad_to(&recon, h.div_ceil(f) * f, w.div_ceil(f) * f)?;
                let feat = s.generator.bottleneck(&s.gen_params, &x)?;
                let spec = &s.generator.spec;
                let att = attention_weights_debug(&feat, &s.gen_params, &spec.nonlocal_block(), &spec.nl_radius)?;
                write_nlt1(&cfg.out_dir.join("attention.nlt1"), &att)?;
                println!("attention maps {:?} written", att.shape());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
