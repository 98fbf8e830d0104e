//! Command-line entry points.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use activest::classifier::load_model;
use activest::cloud::{estimate_normals, generate_synthetic_scene, load_cloud, save_cloud, Cloud, CloudFormat, SceneSpec};
use activest::ensemble::DEFAULT_K_VERSIONS;
use activest::eval::{confusion, miou, selection_stats};
use activest::pipeline::{
    checkpoint, infer_vote, load_dataset_clouds, metrics_csv, resume, run_experiment, ExperimentConfig, Oracle,
    PreparedDataset,
};
use activest::supervoxel::{load_partition, save_partition, segment, SegmentParams};
use activest::{Error, Result};

use crate::server;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "activest", version, about = "Active self-training for point-cloud segmentation")]
struct Cli {
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Over-segment a cloud into super-voxels.
    Segment(SegmentArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Run an oracle-mode experiment to completion.
    Run(RunArgs),
    /// Serve experiments to a human annotator over HTTP.
    Serve(ServeArgs),
    /// Label a cloud with a trained model.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Summarize where the annotations of a finished run landed.
    Stats(StatsArgs),
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON file with segmentation parameters.
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    objects_per_class: usize,
    /// Write ASCII PLY instead of table-binary.
    #[arg(long)]
    ply: bool,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    cloud: PathBuf,
    /// Partition JSON; the cloud is segmented with default parameters when absent.
    #[arg(long)]
    partition: Option<PathBuf>,
    /// Output label file, one class id per line.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K_VERSIONS)]
    k_versions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    k_neighbors: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Label file (one id per line) or a cloud with semantic labels.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Number of classes; inferred from the labels when absent.
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// Output directory of `run`.
    #[arg(long)]
    run: PathBuf,
}

/// Parse `argv` (including the program name) and execute it.
pub fn dispatch<I, S>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = write!(stderr, "{}", e.render());
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    if let Err(missing) = check_inputs(&cli.command) {
        let _ = writeln!(stderr, "error: input file `{}` does not exist\n", missing.display());
        let _ = writeln!(stderr, "For more information, try '--help'.");
        return EXIT_USAGE;
    }
    match execute(&cli, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            if cli.json {
                let _ = writeln!(stdout, "{}", json!({ "error": e.to_string() }));
            }
            let _ = writeln!(stderr, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn check_inputs(command: &Command) -> std::result::Result<(), PathBuf> {
    let inputs: Vec<&Path> = match command {
        Command::Segment(a) => [Some(a.input.as_path()), a.params.as_deref()].into_iter().flatten().collect(),
        Command::Run(a) => vec![&a.config],
        Command::Infer(a) => [Some(a.model.as_path()), Some(a.cloud.as_path()), a.partition.as_deref()]
            .into_iter()
            .flatten()
            .collect(),
        Command::Eval(a) => vec![&a.pred, &a.gt],
        Command::Stats(a) => vec![&a.run],
        Command::Synth(_) | Command::Serve(_) => Vec::new(),
    };
    match inputs.into_iter().find(|p| !p.exists()) {
        Some(p) => Err(p.to_path_buf()),
        None => Ok(()),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.to_path_buf(), source: e }
}

fn emit(stdout: &mut dyn Write, as_json: bool, value: serde_json::Value, text: String) -> Result<()> {
    let line = if as_json { value.to_string() } else { text };
    writeln!(stdout, "{line}").map_err(io_err(Path::new("<stdout>")))
}

fn with_normals(cloud: Cloud, k: usize) -> Result<Cloud> {
    if cloud.normals().is_some() {
        Ok(cloud)
    } else {
        estimate_normals(&cloud, k)
    }
}

fn execute(cli: &Cli, stdout: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Segment(a) => {
            let params: SegmentParams = match &a.params {
                Some(p) => serde_json::from_str(&fs::read_to_string(p).map_err(io_err(p))?)?,
                None => SegmentParams::default(),
            };
            params.validate()?;
            let cloud = load_cloud(&a.input, CloudFormat::from_path(&a.input))?;
            let cloud = with_normals(cloud, params.k_neighbors)?;
            let partition = segment(&cloud, &params)?;
            save_partition(&partition, &a.out)?;
            emit(
                stdout,
                cli.json,
                json!({ "points": partition.len(), "supervoxels": partition.num_supervoxels() }),
                format!("{} points -> {} super-voxels", partition.len(), partition.num_supervoxels()),
            )
        }
        Command::Synth(a) => {
            fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
            let spec = SceneSpec::indoor(a.objects_per_class);
            let (format, ext) = if a.ply { (CloudFormat::PlyAscii, "ply") } else { (CloudFormat::TableBinary, "astc") };
            let mut files = Vec::new();
            for j in 0..a.scenes {
                let id = format!("scene{j:03}");
                let cloud = generate_synthetic_scene(&spec, &id, activest::seed::derive(a.seed, "scene", j as u64))?;
                let path = a.out.join(format!("{id}.{ext}"));
                save_cloud(&cloud, &path, format)?;
                files.push(path.display().to_string());
            }
            emit(stdout, cli.json, json!({ "files": files }), format!("wrote {} scenes to {}", files.len(), a.out.display()))
        }
        Command::Run(a) => {
            let config = ExperimentConfig::load(&a.config)?;
            let dataset = PreparedDataset::from_config(&config)?;
            let outcome = run_experiment(config.clone(), &dataset, &mut Oracle)?;
            fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
            let csv_path = a.out.join("metrics.csv");
            fs::write(&csv_path, metrics_csv(&outcome.metrics)).map_err(io_err(&csv_path))?;
            let cfg_path = a.out.join("config.json");
            fs::write(&cfg_path, config.to_json()).map_err(io_err(&cfg_path))?;
            activest::classifier::save_model(&outcome.model, a.out.join("model.astm"))?;
            checkpoint(&outcome.state, a.out.join("checkpoint"))?;
            let last = outcome.metrics.last().and_then(|m| m.miou);
            emit(
                stdout,
                cli.json,
                json!({ "iterations": outcome.metrics.len(), "miou": last, "metrics": csv_path }),
                format!(
                    "{} iterations, final mIoU {}; metrics in {}",
                    outcome.metrics.len(),
                    last.map_or("n/a".to_string(), |m| format!("{m:.1}")),
                    csv_path.display()
                ),
            )
        }
        Command::Serve(a) => {
            let dir = server::resolve_data_dir(a.data_dir.clone());
            let runtime = tokio::runtime::Runtime::new().map_err(io_err(Path::new("<runtime>")))?;
            runtime.block_on(async {
                let app = server::AppState::open(&dir).await?;
                server::serve(app, &a.addr).await.map_err(io_err(Path::new(&a.addr)))
            })
        }
        Command::Infer(a) => {
            let model = load_model(&a.model)?;
            let cloud = load_cloud(&a.cloud, CloudFormat::from_path(&a.cloud))?;
            let cloud = with_normals(cloud, a.k_neighbors)?;
            let partition = match &a.partition {
                Some(p) => load_partition(p, Some(cloud.len()))?,
                None => segment(&cloud, &SegmentParams { k_neighbors: a.k_neighbors, ..SegmentParams::default() })?,
            };
            let augment = activest::cloud::AugmentParams::default();
            let labels = infer_vote(&model, &cloud, &partition, &augment, a.k_versions, a.seed, a.k_neighbors)?;
            write_labels(&a.out, &labels)?;
            emit(
                stdout,
                cli.json,
                json!({ "points": labels.len(), "out": a.out }),
                format!("labeled {} points -> {}", labels.len(), a.out.display()),
            )
        }
        Command::Eval(a) => {
            let (pred, names) = read_labels(&a.pred)?;
            let (gt, gt_names) = read_labels(&a.gt)?;
            let names = gt_names.or(names);
            let observed = pred.iter().chain(&gt).max().map_or(0, |&m| m as usize + 1);
            let classes = a.classes.or(names.as_ref().map(Vec::len)).unwrap_or(observed);
            let report = miou(&confusion(&pred, &gt, classes)?)?;
            emit(
                stdout,
                cli.json,
                json!({ "miou": report.percent(), "per_class": report.per_class }),
                format!("mIoU {:.1}\n{}", report.percent(), report.to_csv(names.as_deref()).trim_end()),
            )
        }
        Command::Stats(a) => {
            let config = ExperimentConfig::load(a.run.join("config.json"))?;
            let state = resume(a.run.join("checkpoint"))?;
            let (clouds, _) = load_dataset_clouds(&config.dataset)?;
            let stats = selection_stats(state.labels(), &clouds)?;
            let text = format!(
                "annotations per class: {:?}\ninstances with 0/1/>1 clicks: {}/{}/{}",
                stats.class_histogram, stats.instance_buckets.zero, stats.instance_buckets.one, stats.instance_buckets.more
            );
            emit(stdout, cli.json, serde_json::to_value(&stats)?, text)
        }
    }
}

fn is_label_file(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("txt" | "labels"))
}

/// Labels from a text file or from the semantic channel of a cloud.
fn read_labels(path: &Path) -> Result<(Vec<u32>, Option<Vec<String>>)> {
    if is_label_file(path) {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let labels = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                l.trim().parse::<u32>().map_err(|e| Error::Parse {
                    location: format!("{}:{}", path.display(), i + 1),
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((labels, None))
    } else {
        let cloud = load_cloud(path, CloudFormat::from_path(path))?;
        let labels = cloud
            .gt_semantic()
            .ok_or_else(|| Error::MissingGroundTruth(format!("{} has no semantic labels", path.display())))?
            .to_vec();
        Ok((labels, cloud.class_names().map(<[String]>::to_vec)))
    }
}

fn write_labels(path: &Path, labels: &[u32]) -> Result<()> {
    let mut text = String::with_capacity(labels.len() * 3);
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}
