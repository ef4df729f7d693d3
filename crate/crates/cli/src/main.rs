//! `okp`: learn prototypes from one annotated support image, extract keypoint
//! instances from query images, evaluate, and generate synthetic fixtures.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use okp_core::enhance::{objectness_activation, sigmoid};
use okp_core::evalkit::{aggregate, render_table, score_image, EvalResult, GroundTruth, Summary};
use okp_core::feature_io::read_feature_file;
use okp_core::group::{min_keypoints, GroupConfig};
use okp_core::matching::MatchConfig;
use okp_core::pipeline::extract;
use okp_core::prototype::{learn_prototypes, load_store, save_store, Annotation, PrototypeConfig};
use okp_core::synth::{generate, SynthConfig};
use okp_core::{DetectionSet, EnhanceConfig, Error, ExtractConfig, Result};

#[derive(Parser)]
#[command(
    name = "okp",
    version,
    about = "One-shot instance-aware object keypoint extraction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn keypoint and edge prototypes from an annotated support map.
    Learn(LearnArgs),
    /// Extract keypoint instances from a query map.
    Extract(ExtractArgs),
    /// Score detections against ground truth.
    Eval(EvalArgs),
    /// Dump the objectness activation of a feature map as a PGM image.
    Activation(ActivationArgs),
    /// Write a deterministic synthetic support/query fixture.
    Synth(SynthArgs),
}

#[derive(Args)]
struct LearnArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    alpha: f64,
    #[arg(long)]
    no_attention: bool,
    #[arg(long, default_value_t = 8)]
    nseg: usize,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    proto: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.3, allow_negative_numbers = true)]
    tau_e: f32,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    cand_threshold: f32,
    #[arg(long, default_value_t = 2)]
    nms_radius: usize,
    /// Overrides the default rule derived from the number of keypoints.
    #[arg(long)]
    min_keypoints: Option<usize>,
    /// Image id written to the detections; defaults to the query file stem.
    #[arg(long)]
    image_id: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Args)]
struct EvalArgs {
    /// Detection file, or directory mirroring the ground-truth layout.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth file, or directory whose subdirectories are sequences.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    min_keypoints: Option<usize>,
    /// Keypoints per object; defaults to the largest ground-truth identity.
    #[arg(long)]
    n_kp: Option<usize>,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Args)]
struct ActivationArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    alpha: f64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 2)]
    instances: usize,
    #[arg(long, default_value_t = 4)]
    keypoints: usize,
    #[arg(long, default_value_t = 32)]
    channels: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    grid: usize,
    #[arg(long, default_value_t = 16)]
    object_size: usize,
    #[arg(long, default_value_t = 2)]
    smooth_radius: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Learn(a) => cmd_learn(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Activation(a) => cmd_activation(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("okp: {e}");
            ExitCode::from(if e.is_file_error() { 1 } else { 2 })
        }
    }
}

fn cmd_learn(a: LearnArgs) -> Result<()> {
    let support = read_feature_file(&a.features)?;
    let annotation = Annotation::from_json(&fs::read_to_string(&a.annotations)?)?;
    let config = PrototypeConfig {
        enhance: EnhanceConfig {
            alpha: a.alpha,
            use_objectness_attention: !a.no_attention,
            ..EnhanceConfig::default()
        },
        n_seg: a.nseg,
    };
    let store = learn_prototypes(support, annotation, config)?;
    save_store(&store, &a.out)?;
    println!("N_KP {}", store.n_kp());
    println!("edges {}", store.edges().len());
    println!("D {}", store.base_channels());
    println!("D_B {}", store.binned_channels());
    Ok(())
}

fn cmd_extract(a: ExtractArgs) -> Result<()> {
    let store = load_store(&a.proto)?;
    let query = read_feature_file(&a.features)?;
    let cfg = ExtractConfig {
        matching: MatchConfig {
            cand_threshold: a.cand_threshold,
            nms_radius: a.nms_radius,
        },
        grouping: GroupConfig {
            tau_e: a.tau_e,
            min_keypoints_override: a.min_keypoints,
        },
    };
    cfg.grouping.validate()?;
    let image = a.image_id.unwrap_or_else(|| stem(&a.features));
    let detections = extract(&store, &query, &cfg, &image)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    detections.write(&a.out)?;
    println!("instances {}", detections.instances.len());
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// One ground-truth image and where its prediction is expected.
struct EvalItem {
    sequence: String,
    gt: GroundTruth,
    pred: PathBuf,
    /// Named explicitly on the command line, so it must exist.
    required: bool,
}

fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.is_file() && p.extension().is_some_and(|e| e == "json"));
    files.sort();
    Ok(files)
}

fn collect_items(args: &EvalArgs) -> Result<Vec<EvalItem>> {
    if args.gt.is_file() {
        let gt = GroundTruth::read(&args.gt)?;
        let required = !args.pred.is_dir();
        let pred = if required {
            args.pred.clone()
        } else {
            args.pred.join(format!("{}.json", gt.image))
        };
        return Ok(vec![EvalItem {
            sequence: stem(&args.gt),
            gt,
            pred,
            required,
        }]);
    }
    if !args.gt.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("ground truth {} not found", args.gt.display()),
        )));
    }
    if !args.pred.is_dir() {
        return Err(Error::InvalidConfig(
            "a ground-truth directory needs a prediction directory".into(),
        ));
    }
    let mut sequences: Vec<(String, PathBuf)> = Vec::new();
    if !json_files(&args.gt)?.is_empty() {
        sequences.push((stem(&args.gt), PathBuf::new()));
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(&args.gt)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    subdirs.retain(|p| p.is_dir());
    subdirs.sort();
    for d in subdirs {
        let name = d.file_name().unwrap().to_string_lossy().into_owned();
        sequences.push((name.clone(), PathBuf::from(name)));
    }
    let mut items = Vec::new();
    for (name, rel) in sequences {
        for file in json_files(&args.gt.join(&rel))? {
            let gt = GroundTruth::read(&file)?;
            let pred = args.pred.join(&rel).join(file.file_name().unwrap());
            items.push(EvalItem {
                sequence: name.clone(),
                gt,
                pred,
                required: false,
            });
        }
    }
    Ok(items)
}

#[derive(Serialize)]
struct ImageReport {
    sequence: String,
    image: String,
    #[serde(flatten)]
    result: EvalResult,
}

#[derive(Serialize)]
struct Report {
    n_kp: usize,
    min_keypoints: usize,
    images: Vec<ImageReport>,
    #[serde(flatten)]
    summary: Summary,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let items = collect_items(&a)?;
    let n_kp = match a.n_kp {
        Some(n) => n,
        None => items
            .iter()
            .map(|i| i.gt.max_identity() as usize)
            .max()
            .unwrap_or(0),
    };
    let min_kp = a.min_keypoints.unwrap_or_else(|| min_keypoints(n_kp));
    let mut images = Vec::new();
    let mut groups: Vec<(String, Vec<EvalResult>)> = Vec::new();
    for item in &items {
        let pred = if item.required || item.pred.exists() {
            DetectionSet::read(&item.pred)?
        } else {
            DetectionSet::empty(item.gt.image.clone())
        };
        let result = score_image(&pred, &item.gt, min_kp, n_kp)?;
        match groups.last_mut() {
            Some((name, results)) if *name == item.sequence => results.push(result),
            _ => groups.push((item.sequence.clone(), vec![result])),
        }
        images.push(ImageReport {
            sequence: item.sequence.clone(),
            image: item.gt.image.clone(),
            result,
        });
    }
    let summary = aggregate(&groups)?;
    let table = render_table(&summary);
    let report = Report {
        n_kp,
        min_keypoints: min_kp,
        images,
        summary,
    };
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(path) = &a.report {
        fs::write(path, &json)?;
    }
    match a.format {
        Format::Json => println!("{json}"),
        Format::Table => print!("{table}"),
    }
    Ok(())
}

fn cmd_activation(a: ActivationArgs) -> Result<()> {
    if !a.alpha.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "alpha must be finite, got {}",
            a.alpha
        )));
    }
    let map = read_feature_file(&a.features)?;
    let act = objectness_activation(&map);
    let mut pgm = format!("P5\n{} {}\n255\n", act.cols, act.rows).into_bytes();
    pgm.extend(
        act.values
            .iter()
            .map(|&o| (255.0 * sigmoid(a.alpha * o as f64)).round() as u8),
    );
    fs::File::create(&a.out)?.write_all(&pgm)?;
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        instances: a.instances,
        keypoints: a.keypoints,
        channels: a.channels,
        noise: a.noise,
        seed: a.seed,
        grid: a.grid,
        object_size: a.object_size,
        smooth_radius: a.smooth_radius,
        ..SynthConfig::default()
    };
    let fixture = generate(&cfg)?;
    fixture.write_to_dir(&a.out_dir)?;
    println!(
        "wrote {} instance(s) to {}",
        a.instances,
        a.out_dir.display()
    );
    Ok(())
}
