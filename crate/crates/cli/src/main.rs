use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use neuroaps_core::bench::{self, SweepConfig};
use neuroaps_core::io;
use neuroaps_core::model::ModelConfig;
use neuroaps_core::phantom::{generate_dataset, generate_phantom, Manifest, PhantomConfig, Split};
use neuroaps_core::sampler::{aps_sample, ablation_sample, SamplerKind, SamplingBudget};
use neuroaps_core::trainer::{evaluate, sample_seed, train, TrainConfig};
use neuroaps_core::types::PointCloud;
use neuroaps_core::Error;

const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Parser)]
#[command(name = "neuroaps", version, about = "Anatomically prioritized point-cloud sampling and classification of 2D brain slices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantom slices with region masks and a manifest.
    GenPhantom {
        #[arg(long, default_value_t = 50)]
        count_per_class: usize,
        /// Image side length in pixels.
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fraction of each class assigned to the training split.
        #[arg(long, default_value_t = 0.8)]
        split: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Sample one point cloud per phantom.
    Sample {
        /// Phantom manifest written by gen-phantom.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = Sampler::Aps)]
        sampler: Sampler,
        #[arg(long, default_value = "2048", value_parser = ["2048", "4096", "8192"])]
        points: String,
        /// Four comma-separated fractions: hippocampus, ventricles, surface, interior [aps only; default 0.25,0.25,0.30,0.20].
        #[arg(long)]
        ratios: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        /// Also write a color-by-region scatter plot per cloud.
        #[arg(long)]
        svg: bool,
    },
    /// Train a model on sampled clouds.
    Train {
        /// Directory written by `sample`.
        #[arg(long)]
        clouds: PathBuf,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 0.01)]
        jitter: f64,
        #[arg(long, default_value_t = 0.1)]
        dropout: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        checkpoint_out: PathBuf,
        /// CSV with epoch, train_loss, train_acc, test_acc.
        #[arg(long)]
        history_out: Option<PathBuf>,
    },
    /// Accuracy and confusion counts of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clouds: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        json: bool,
    },
    /// Single-cloud forward latency and workspace bytes.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "2048", value_parser = ["2048", "4096", "8192"])]
        points: String,
        #[arg(long, default_value_t = bench::DEFAULT_WARMUP)]
        warmup: usize,
        #[arg(long, default_value_t = bench::DEFAULT_REPS)]
        reps: usize,
    },
    /// Point-density or sampler-ablation sweep on a generated phantom set.
    Sweep {
        #[arg(long, value_enum)]
        mode: Mode,
        /// Comma-separated run seeds.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        /// CSV report path.
        #[arg(long)]
        report_out: PathBuf,
        /// Also write a JSON mirror next to the CSV.
        #[arg(long)]
        json: bool,
        /// Also write a bar chart.
        #[arg(long)]
        svg: Option<PathBuf>,
        /// Comma-separated point counts [default: 2048,4096,8192 for density, 8192 for ablation].
        #[arg(long)]
        points: Option<String>,
        #[arg(long, default_value_t = 50)]
        count_per_class: usize,
        #[arg(long, default_value_t = 0.8)]
        split: f64,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        phantom_seed: u64,
        #[arg(long, default_value_t = bench::DEFAULT_WARMUP)]
        warmup: usize,
        #[arg(long, default_value_t = bench::DEFAULT_REPS)]
        reps: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Sampler {
    Aps,
    UniformRoi,
    Uniform,
    RandomRoi,
    Random,
}

impl From<Sampler> for SamplerKind {
    fn from(s: Sampler) -> Self {
        match s {
            Sampler::Aps => SamplerKind::Aps,
            Sampler::UniformRoi => SamplerKind::UniformRoi,
            Sampler::Uniform => SamplerKind::UniformNoRoi,
            Sampler::RandomRoi => SamplerKind::RandomRoi,
            Sampler::Random => SamplerKind::RandomNoRoi,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Density,
    Ablation,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, kind: "usage", message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match e {
            Error::InvalidInput(_) | Error::Budget(_) => (2, "usage"),
            Error::NonFinite(_) | Error::NonFiniteLoss { .. } => (4, "numerical"),
            Error::Io(_) => (3, "io"),
            _ => (3, "data"),
        };
        Self { code, kind, message: e.to_string() }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error code={} kind={} message={:?}", f.code, f.kind, f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::GenPhantom { count_per_class, size, seed, split, out_dir } => gen_phantom(count_per_class, size, seed, split, &out_dir),
        Command::Sample { manifest, sampler, points, ratios, seed, out_dir, svg } => {
            sample(&manifest, sampler.into(), parse_points(&points)?, ratios.as_deref(), seed, &out_dir, svg)
        }
        Command::Train { clouds, epochs, lr, batch, jitter, dropout, seed, checkpoint_out, history_out } => {
            let config = TrainConfig {
                learning_rate: lr,
                epochs,
                batch_size: batch,
                jitter_sigma: jitter,
                dropout_fraction: dropout,
                seed,
                eval_every_epoch: true,
            };
            train_cmd(&clouds, &config, &checkpoint_out, history_out.as_deref())
        }
        Command::Eval { checkpoint, clouds, split, json } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            eval_cmd(&checkpoint, &clouds, split, json)
        }
        Command::Bench { checkpoint, points, warmup, reps } => {
            let params = io::read_checkpoint(&checkpoint)?;
            let n = parse_points(&points)?;
            let stats = bench::measure_latency_at(&params, n, warmup, reps)?;
            let peak = bench::peak_workspace_bytes(&params, &bench::reference_cloud(n)?)?;
            println!("n_points,latency_ms,min_ms,max_ms,peak_workspace_bytes");
            println!("{n},{},{},{},{peak}", stats.median_ms, stats.min_ms, stats.max_ms);
            Ok(())
        }
        Command::Sweep {
            mode,
            seeds,
            report_out,
            json,
            svg,
            points,
            count_per_class,
            split,
            epochs,
            size,
            phantom_seed,
            warmup,
            reps,
        } => {
            let phantom = PhantomConfig { image_size: size, seed: phantom_seed, ..Default::default() };
            let manifest = generate_dataset(&phantom, count_per_class, split)?;
            let mut config = SweepConfig::new(phantom, manifest);
            config.train.epochs = epochs;
            config.warmup = warmup;
            config.reps = reps;
            let seeds = parse_list::<u64>(&seeds, "--seeds")?;
            let cells = match mode {
                Mode::Density => {
                    let counts = match points {
                        Some(p) => parse_point_list(&p)?,
                        None => bench::default_point_counts(),
                    };
                    bench::density_sweep(&config, &counts, &seeds)?
                }
                Mode::Ablation => {
                    let n = match points {
                        Some(p) => match parse_point_list(&p)?.as_slice() {
                            [n] => *n,
                            _ => return Err(Failure::usage("ablation takes a single --points value")),
                        },
                        None => bench::ABLATION_POINTS,
                    };
                    bench::ablation_sweep_with(&config, &SamplerKind::ALL, n, &seeds)?
                }
            };
            let report = bench::report_of(&cells);
            io::write_atomic(&report_out, io::report_csv(&report).as_bytes())?;
            if json {
                io::write_atomic(&report_out.with_extension("json"), io::report_json(&report).as_bytes())?;
            }
            if let Some(path) = svg {
                io::write_atomic(&path, io::report_svg(&report).as_bytes())?;
            }
            print!("{}", io::report_csv(&report));
            Ok(())
        }
    }
}

fn parse_points(s: &str) -> CliResult<usize> {
    match s.parse::<usize>() {
        Ok(n) if neuroaps_core::types::SUPPORTED_SIZES.contains(&n) => Ok(n),
        _ => Err(Failure::usage(format!("--points {s} is not one of 2048, 4096, 8192"))),
    }
}

fn parse_point_list(s: &str) -> CliResult<Vec<usize>> {
    s.split(',').map(|p| parse_points(p.trim())).collect()
}

fn parse_list<T: std::str::FromStr>(s: &str, flag: &str) -> CliResult<Vec<T>> {
    let v: Result<Vec<T>, _> = s.split(',').map(|p| p.trim().parse::<T>()).collect();
    match v {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(Failure::usage(format!("{flag} expects a comma-separated list, got {s:?}"))),
    }
}

/// Four fractions summing to 1 within 1e-6, rescaled to sum exactly.
fn parse_ratios(s: &str) -> CliResult<[f64; 4]> {
    let v = parse_list::<f64>(s, "--ratios")?;
    let r: [f64; 4] = v.try_into().map_err(|_| Failure::usage("--ratios needs exactly four values"))?;
    let sum: f64 = r.iter().sum();
    if r.iter().any(|x| !x.is_finite() || *x < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(Failure::usage(format!("--ratios must be non-negative and sum to 1 (sum {sum})")));
    }
    Ok(r.map(|x| x / sum))
}

fn dir_of(path: &Path) -> &Path {
    path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

fn gen_phantom(count_per_class: usize, size: usize, seed: u64, split: f64, out_dir: &Path) -> CliResult {
    let config = PhantomConfig { image_size: size, seed, ..Default::default() };
    let manifest = generate_dataset(&config, count_per_class, split)?;
    for record in &manifest.records {
        let index = record.phantom_index().expect("generated ids carry an index");
        let phantom = generate_phantom(&config, record.class, index)?;
        io::write_phantom(&out_dir.join(&record.path), &phantom)?;
    }
    io::write_manifest(&out_dir.join(MANIFEST_FILE), &manifest)?;
    println!("wrote {} phantoms to {}", manifest.records.len(), out_dir.display());
    Ok(())
}

fn sample(
    manifest_path: &Path,
    kind: SamplerKind,
    n: usize,
    ratios: Option<&str>,
    seed: u64,
    out_dir: &Path,
    svg: bool,
) -> CliResult {
    let budget = match (kind, ratios) {
        (SamplerKind::Aps, r) => Some(SamplingBudget::new(r.map(parse_ratios).transpose()?.unwrap_or(SamplingBudget::DEFAULT_RATIOS), n)?),
        (_, Some(_)) => return Err(Failure::usage(format!("--ratios only applies to the aps sampler, not {kind}"))),
        (_, None) => None,
    };
    let manifest = io::read_manifest(manifest_path)?;
    let base = dir_of(manifest_path);
    let mut out = Manifest::default();
    for record in &manifest.records {
        let phantom = io::read_phantom(&base.join(&record.path))?;
        if phantom.class != record.class {
            return Err(Error::Value(format!("{}: phantom class disagrees with manifest", record.sample_id)).into());
        }
        let s = sample_seed(seed, &record.sample_id);
        let mut cloud = match &budget {
            Some(b) => aps_sample(&phantom.slice, &phantom.masks, b, s)?,
            None => ablation_sample(kind, &phantom.slice, &phantom.masks, n, s)?,
        };
        cloud.class_label = Some(record.class);
        let file = format!("{}.apc", record.sample_id);
        io::write_cloud(&out_dir.join(&file), &cloud)?;
        if svg {
            io::write_atomic(&out_dir.join(format!("{}.svg", record.sample_id)), io::cloud_svg(&cloud, 512).as_bytes())?;
        }
        out.records.push(neuroaps_core::phantom::SampleRecord { path: file, ..record.clone() });
    }
    io::write_manifest(&out_dir.join(MANIFEST_FILE), &out)?;
    println!("wrote {} {kind} clouds of {n} points to {}", out.records.len(), out_dir.display());
    Ok(())
}

fn load_split(dir: &Path, split: Split) -> CliResult<Vec<PointCloud>> {
    let manifest = io::read_manifest(&dir.join(MANIFEST_FILE))?;
    manifest
        .split(split)
        .map(|r| {
            let mut cloud = io::read_cloud(&dir.join(&r.path))?;
            if cloud.class_label != Some(r.class) {
                return Err(Error::Value(format!("{}: cloud class disagrees with manifest", r.sample_id)).into());
            }
            cloud.source_id = r.sample_id.clone();
            Ok(cloud)
        })
        .collect()
}

fn train_cmd(clouds: &Path, config: &TrainConfig, checkpoint_out: &Path, history_out: Option<&Path>) -> CliResult {
    let train_set = load_split(clouds, Split::Train)?;
    let test_set = load_split(clouds, Split::Test)?;
    let outcome = train(&train_set, &test_set, &ModelConfig::with_seed(config.seed), config)?;
    io::write_checkpoint(checkpoint_out, &outcome.params)?;
    if let Some(path) = history_out {
        io::write_atomic(path, io::history_csv(&outcome.history).as_bytes())?;
    }
    if let Some(last) = outcome.history.last() {
        let test = last.test_accuracy.map_or_else(|| "n/a".to_string(), |a| format!("{a:.4}"));
        println!(
            "epoch={} train_loss={:.6} train_acc={:.4} test_acc={test}",
            last.epoch, last.train_loss, last.train_accuracy
        );
    }
    Ok(())
}

fn eval_cmd(checkpoint: &Path, clouds: &Path, split: Split, json: bool) -> CliResult {
    let params = io::read_checkpoint(checkpoint)?;
    let set = load_split(clouds, split)?;
    let report = evaluate(&params, &set)?;
    if json {
        println!("{}", serde_json::to_string(&report).expect("report serializes"));
    } else {
        let c = report.confusion;
        println!("accuracy={:.4} tp={} tn={} fp={} fn={}", report.accuracy, c.tp, c.tn, c.fp, c.fn_);
    }
    Ok(())
}
