use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use langmamba::config::Config;
use langmamba::data::{load_dir, to_model_input, write_dataset, PhantomPair};
use langmamba::langae::{train_langae, LangAe};
use langmamba::metrics::{evaluate, Denoiser, Identity};
use langmamba::nn::Checkpoint;
use langmamba::scan2d::{bench_scan, BenchRow};
use langmamba::seed::{train_denoiser, Ablation, Seed};
use langmamba::{data, Error, Result};

#[derive(Parser)]
#[command(name = "langmamba", version, about = "Low-dose CT denoising on synthetic phantoms")]
struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data generation and evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic NDCT/LDCT pairs into OUT_DIR/train and OUT_DIR/test.
    GenData {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        test_count: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        dose: Option<f64>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Also write abdominal-window PNG previews.
        #[arg(long)]
        png: bool,
    },
    /// Train the autoencoder on NDCT images and write a frozen checkpoint.
    TrainLangae {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the denoiser against a frozen autoencoder.
    TrainDenoiser {
        #[arg(long)]
        langae_ckpt: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        /// no-ema, resnet-encoder, no-langda, langda-c or langda-d.
        #[arg(long)]
        ablate: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR/SSIM over a directory of pairs as JSON lines.
    Eval {
        /// Directory of pair files.
        #[arg(long)]
        data_dir: PathBuf,
        /// Denoiser checkpoint; without it the noisy input is scored.
        #[arg(long, requires = "langae_ckpt")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        langae_ckpt: Option<PathBuf>,
        /// HU window as LO,HI.
        #[arg(long, value_parser = parse_window, default_value = "-160,240")]
        window: (f32, f32),
        /// Write the report here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Time the skip scan across token counts and print CSV.
    BenchScan {
        /// Comma-separated token counts (perfect squares).
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        /// Comma-separated sub-grid steps.
        #[arg(long, value_delimiter = ',')]
        step: Option<Vec<usize>>,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Print the token pyramid of one image.
    ExportTokens {
        #[arg(long)]
        langae_ckpt: PathBuf,
        /// Pair file whose NDCT image is tokenized.
        #[arg(long, conflicts_with = "phantom_seed")]
        pair: Option<PathBuf>,
        /// Tokenize a freshly generated phantom instead.
        #[arg(long)]
        phantom_seed: Option<u64>,
        #[arg(long, default_value_t = 8)]
        top: usize,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Dataset written by gen-data; generated in memory from the config when absent.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

fn parse_window(s: &str) -> std::result::Result<(f32, f32), String> {
    let (a, b) = s.split_once(',').ok_or("expected LO,HI")?;
    let lo: f32 = a.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f32 = b.trim().parse().map_err(|e| format!("{e}"))?;
    if lo >= hi {
        return Err("window needs LO < HI".into());
    }
    Ok((lo, hi))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        e if e.is_numeric() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.langae.seed = s;
        cfg.langae.model.init_seed = s;
        cfg.denoiser.seed = s;
        cfg.denoiser.model.init_seed = s;
    }
    Ok(cfg)
}

fn splits(cfg: &Config, seed: u64, args: &DataArgs) -> Result<(Vec<PhantomPair>, Vec<PhantomPair>)> {
    match &args.data_dir {
        Some(dir) => {
            let test_dir = dir.join("test");
            let test = if test_dir.is_dir() { load_dir(&test_dir)? } else { Vec::new() };
            Ok((load_dir(&dir.join("train"))?, test))
        }
        None => Ok((data::generate_split(&cfg.data, seed, false)?, data::generate_split(&cfg.data, seed, true)?)),
    }
}

fn load_langae(path: &Path) -> Result<Arc<LangAe>> {
    Ok(Arc::new(LangAe::from_checkpoint(&Checkpoint::load(path)?)?))
}

fn json_line<T: serde::Serialize>(v: &T) {
    eprintln!("{}", serde_json::to_string(v).expect("log serializes"));
}

fn log_every(steps: usize) -> usize {
    (steps / 100).max(1)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let mut cfg = load_config(&cli)?;
    let seed = cli.seed.unwrap_or(0);
    match cli.cmd {
        Command::GenData {
            count,
            test_count,
            size,
            dose,
            out_dir,
            png,
        } => {
            cfg.data.train_count = count.unwrap_or(cfg.data.train_count);
            cfg.data.test_count = test_count.unwrap_or(cfg.data.test_count);
            cfg.data.size = size.unwrap_or(cfg.data.size);
            cfg.data.dose = dose.unwrap_or(cfg.data.dose);
            cfg.validate()?;
            let (train, test) = write_dataset(&cfg.data, seed, &out_dir, png)?;
            eprintln!("wrote {train} training and {test} test pairs to {}", out_dir.display());
        }
        Command::TrainLangae { data, steps, out } => {
            cfg.langae.steps = steps.unwrap_or(cfg.langae.steps);
            cfg.validate()?;
            let (train, _) = splits(&cfg, seed, &data)?;
            let images = train.iter().map(|p| to_model_input(&p.ndct)).collect::<Result<Vec<_>>>()?;
            let every = log_every(cfg.langae.steps);
            let model = train_langae(&cfg.langae, &images, |l| {
                if l.step % every == 0 || l.step + 1 == cfg.langae.steps {
                    json_line(l);
                }
            })?;
            model.to_checkpoint()?.save(&out)?;
            eprintln!("saved {}", out.display());
        }
        Command::TrainDenoiser {
            langae_ckpt,
            data,
            steps,
            lambda,
            ablate,
            out,
        } => {
            cfg.denoiser.steps = steps.unwrap_or(cfg.denoiser.steps);
            cfg.denoiser.model.lambda = lambda.unwrap_or(cfg.denoiser.model.lambda);
            if let Some(a) = ablate {
                cfg.denoiser.model.ablation = a.parse::<Ablation>()?;
            }
            cfg.validate()?;
            let langae = load_langae(&langae_ckpt)?;
            let (train, test) = splits(&cfg, seed, &data)?;
            let every = log_every(cfg.denoiser.steps);
            let model = train_denoiser(
                &cfg.denoiser,
                langae,
                &train,
                &test,
                |l| {
                    if l.step % every == 0 || l.step + 1 == cfg.denoiser.steps {
                        json_line(l);
                    }
                },
                |e| json_line(e),
            )?;
            model.to_checkpoint()?.save(&out)?;
            eprintln!("saved {}", out.display());
        }
        Command::Eval {
            data_dir,
            ckpt,
            langae_ckpt,
            window,
            output,
        } => {
            let pairs = load_dir(&data_dir)?;
            let model: Box<dyn Denoiser> = match (ckpt, langae_ckpt) {
                (Some(c), Some(l)) => Box::new(Seed::from_checkpoint(&Checkpoint::load(&c)?, load_langae(&l)?)?),
                _ => Box::new(Identity),
            };
            let report = evaluate(model.as_ref(), &pairs, window)?;
            match output {
                Some(p) => report.write_json_lines(&mut std::fs::File::create(p)?)?,
                None => report.write_json_lines(&mut io::stdout().lock())?,
            }
            eprintln!("{}", report.summary());
        }
        Command::BenchScan { sizes, step, reps } => {
            let b = &cfg.bench;
            let sizes = sizes.unwrap_or_else(|| b.sizes.clone());
            let steps = step.unwrap_or_else(|| b.steps.clone());
            let mut out = io::stdout().lock();
            writeln!(out, "{}", BenchRow::HEADER)?;
            for s in steps {
                for row in bench_scan(&sizes, s, b.channels, b.state, reps.unwrap_or(b.reps), seed)? {
                    writeln!(out, "{}", row.csv())?;
                }
            }
        }
        Command::ExportTokens {
            langae_ckpt,
            pair,
            phantom_seed,
            top,
        } => {
            let langae = load_langae(&langae_ckpt)?;
            let ndct = match (pair, phantom_seed) {
                (Some(p), _) => PhantomPair::load(&p)?.ndct,
                (None, s) => data::gen_phantom(s.unwrap_or(seed), cfg.data.size)?,
            };
            let e = langae.export_tokens(&to_model_input(&ndct)?, top)?;
            let mut out = io::stdout().lock();
            writeln!(out, "layer 1:")?;
            for row in &e.grid {
                writeln!(out, "  {}", row.join(" "))?;
            }
            for (l, toks) in e.top.iter().enumerate() {
                let list: Vec<String> = toks.iter().map(|(t, c)| format!("{t}({c})")).collect();
                writeln!(out, "layer {}: {}", l + 2, list.join(" "))?;
            }
        }
    }
    Ok(())
}
