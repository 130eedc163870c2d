use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use hiertax::coherence::{expand_labels, propagate};
use hiertax::config::{parse_config, ToySettings};
use hiertax::decode::{decode_field, evaluate_prediction};
use hiertax::gradcheck::{self, Target, DEFAULT_TOLERANCE};
use hiertax::losses::FocalConfig;
use hiertax::report::{self, RUN_JSON};
use hiertax::synthetic::{generate_split, SyntheticConfig};
use hiertax::train::{train, TrainConfig};
use hiertax::{
    parse_taxonomy, ClassHierarchy, Error, LabelField, Result, ScoreField, TOY_TAXONOMY,
};

const DEFAULT_PIXELS_PER_CLASS: usize = 500;
const DEFAULT_WIDTH: usize = 100;

#[derive(Parser)]
#[command(
    name = "hiertax",
    version,
    about = "Hierarchy-aware pixel classification tools"
)]
struct Cli {
    /// Seed for every randomized step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a taxonomy and print its size, depth and per-level class counts.
    ValidateTaxonomy { file: PathBuf },
    /// Make scores coherent with the labeled path of every pixel.
    Propagate {
        #[arg(long)]
        tax: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode the best root-to-leaf path per pixel.
    Decode {
        #[arg(long)]
        tax: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-level IoU of a decoded prediction against ground truth.
    Eval {
        #[arg(long)]
        tax: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// One of cce, bce, focal, tm, ftm, tt.
        #[arg(long)]
        loss: String,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Train the toy scorer on synthetic data and write reports.
    TrainToy(TrainToyArgs),
    /// Regenerate report files from a saved run.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct TrainToyArgs {
    /// Taxonomy file; the bundled three-level toy tree when omitted.
    #[arg(long)]
    tax: Option<PathBuf>,
    /// key=value settings file, applied before flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    tree_triplet: bool,
    /// Extra `key=value` overrides, same keys as the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_taxonomy(path: &Path) -> Result<ClassHierarchy> {
    parse_taxonomy(&std::fs::read_to_string(path)?)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let seed = cli.seed;
    match cli.command {
        Command::ValidateTaxonomy { file } => {
            let h = load_taxonomy(&file)?;
            println!("nodes: {}", h.len());
            println!("depth: {}", h.height());
            for (i, n) in h.level_counts().iter().enumerate() {
                println!("level {}: {n}", i + 1);
            }
        }
        Command::Propagate {
            tax,
            scores,
            labels,
            out,
        } => {
            let h = load_taxonomy(&tax)?;
            let s = ScoreField::read(&scores)?;
            let l = LabelField::read(&labels)?;
            check_dims(&s, &l)?;
            l.validate(&h)?;
            if s.num_classes() != h.len() {
                return Err(Error::LengthMismatch {
                    what: "score classes",
                    expected: h.len(),
                    got: s.num_classes(),
                });
            }
            let rows: Vec<Vec<f64>> = (0..s.num_pixels())
                .into_par_iter()
                .map(|i| match l.get(i) {
                    None => Ok(s.pixel(i).to_vec()),
                    Some(leaf) => propagate(&h, s.pixel(i), &expand_labels(&h, leaf)?),
                })
                .collect::<Result<_>>()?;
            let field = ScoreField::new(s.height(), s.width(), h.len(), rows.concat())?;
            field.write(&out)?;
        }
        Command::Decode { tax, scores, out } => {
            let h = load_taxonomy(&tax)?;
            decode_field(&h, &ScoreField::read(&scores)?)?.write(&out)?;
        }
        Command::Eval { tax, pred, gt, csv } => {
            let h = load_taxonomy(&tax)?;
            let (pred, gt) = (LabelField::read(&pred)?, LabelField::read(&gt)?);
            pred.validate(&h)?;
            gt.validate(&h)?;
            let levels = evaluate_prediction(&h, &pred, &gt)?;
            for l in &levels {
                let note = if l.level == h.num_levels() {
                    " (root, trivial)"
                } else {
                    ""
                };
                println!("level {}: mIoU {:.6}{note}", l.level, l.miou);
            }
            if let Some(csv) = csv {
                std::fs::write(csv, report::miou_csv(&levels, h.names()))?;
            }
        }
        Command::Gradcheck {
            loss,
            trials,
            tolerance,
        } => {
            let target: Target = loss.parse()?;
            let s = gradcheck::run(target, trials, seed.unwrap_or(0), &FocalConfig::default())?;
            println!(
                "{loss}: max relative error {:.3e} over {} trials (worst trial {})",
                s.max_relative_error, s.trials, s.worst_trial
            );
            if s.max_relative_error > tolerance {
                eprintln!("error: gradient mismatch above tolerance {tolerance:e}");
                return Ok(ExitCode::from(3));
            }
        }
        Command::TrainToy(args) => train_toy(args, seed)?,
        Command::Report { run, out_dir } => {
            let r = report::read_run(&run)?;
            for p in report::write_report(&r, &out_dir)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn check_dims(s: &ScoreField, l: &LabelField) -> Result<()> {
    if s.height() != l.height() || s.width() != l.width() {
        return Err(Error::InvalidInput(format!(
            "score field is {}x{} but label field is {}x{}",
            s.height(),
            s.width(),
            l.height(),
            l.width()
        )));
    }
    Ok(())
}

fn train_toy(args: TrainToyArgs, seed: Option<u64>) -> Result<()> {
    let h = match &args.tax {
        Some(p) => load_taxonomy(p)?,
        None => parse_taxonomy(TOY_TAXONOMY)?,
    };
    let mut settings = ToySettings {
        train: TrainConfig::default(),
        data: SyntheticConfig::for_hierarchy(&h, DEFAULT_PIXELS_PER_CLASS, DEFAULT_WIDTH),
    };
    let mut entries = match &args.config {
        Some(p) => parse_config(&std::fs::read_to_string(p)?)?,
        None => Default::default(),
    };
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got `{kv}`")))?;
        entries.insert(k.trim().to_owned(), v.trim().to_owned());
    }
    if let Some(l) = &args.loss {
        entries.insert("loss".into(), l.clone());
    }
    if let Some(n) = args.iterations {
        entries.insert("iterations".into(), n.to_string());
    }
    if args.tree_triplet {
        entries.insert("tree_triplet".into(), "true".into());
    }
    if let Some(s) = seed {
        entries.insert("seed".into(), s.to_string());
    }
    settings.apply(&entries)?;
    if !entries.contains_key("height") && settings.data.width > 0 {
        let total = h.leaves().len() * settings.data.pixels_per_class;
        settings.data.height = total / settings.data.width;
    }

    let start = Instant::now();
    let (train_set, eval_set) = generate_split(&h, &settings.data)?;
    let data_time = start.elapsed();

    let start = Instant::now();
    let run = train(&h, &train_set, &eval_set, &settings.train)?;
    let train_time = start.elapsed();

    std::fs::create_dir_all(&args.out_dir)?;
    report::write_run(&run, args.out_dir.join(RUN_JSON))?;
    report::write_report(&run, &args.out_dir)?;

    println!("loss: {}", run.config.loss);
    for l in &run.levels {
        println!("level {}: mIoU {:.6}", l.level, l.miou);
    }
    println!("coherence violation rate: {:.6}", run.coherence.rate());
    println!(
        "data {:.3}s, training {:.3}s ({:.3} ms/step)",
        data_time.as_secs_f64(),
        train_time.as_secs_f64(),
        1e3 * train_time.as_secs_f64() / run.steps.len().max(1) as f64
    );
    Ok(())
}
