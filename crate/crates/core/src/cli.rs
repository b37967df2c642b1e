//! Command-line front end: `synth`, `train`, `detect`, `eval` and
//! `gradcheck`.
//!
//! Every subcommand accepts the same option set. Options can also come
//! from a `key = value` file given with `--config`, where keys are the long
//! flag names without the leading dashes; flags given on the command line
//! win over the file, and unknown keys are rejected.

use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::certify::{run_gradcheck, GradcheckConfig};
use crate::data_io::{generate_synthetic, read_manifest, SynthConfig};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, ground_truth_classes, read_ground_truth, DEFAULT_IOU_THRESHOLDS};
use crate::localization::{detect_dataset, read_detections, write_detections, write_trace, Detection, LocalizeConfig};
use crate::losses::{ClassLoss, DistanceKind, MetricKind, Tail};
use crate::model::{read_checkpoint, write_checkpoint, ClassifierInput};
use crate::trainer::{train, write_loss_log, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "wstal", version, about = "Weakly-supervised temporal action localization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (features, manifests, ground truth) to --out.
    Synth(Options),
    /// Train on --manifest and write the model to --checkpoint.
    Train(Options),
    /// Write detections for every video in --manifest to --out.
    Detect(Options),
    /// Score --detections against --ground-truth.
    Eval(Options),
    /// Compare analytic gradients with finite differences.
    Gradcheck(Options),
}

/// Comma-separated IoU thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct Thresholds(pub Vec<f64>);

impl FromStr for Thresholds {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad IoU threshold {t:?}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Thresholds)
    }
}

fn parse_value<T>(key: &str, value: &str) -> Result<T>
where
    T: FromStr,
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

macro_rules! options {
    ($( $(#[$meta:meta])* $field:ident : $ty:ty = $key:literal, )*) => {
        #[derive(Debug, Clone, Default, Args)]
        pub struct Options {
            /// `key = value` file; flags on the command line take precedence.
            #[arg(long)]
            pub config: Option<PathBuf>,
            $( $(#[$meta])* #[arg(long = $key)] pub $field: Option<$ty>, )*
        }

        impl Options {
            /// Sets one option from its textual form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( $key => self.$field = Some(parse_value(key, value)?), )*
                    _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
                }
                Ok(())
            }

            /// Fields of `self`, falling back to `base` where unset.
            pub fn over(self, base: Options) -> Options {
                Options {
                    config: self.config.or(base.config),
                    $( $field: self.$field.or(base.$field), )*
                }
            }
        }
    };
}

options! {
    /// Dataset manifest.
    manifest: PathBuf = "manifest",
    /// Model file (written by train, read by detect).
    checkpoint: PathBuf = "checkpoint",
    /// Output path: dataset directory, loss log, detection file or report.
    out: PathBuf = "out",
    seed: u64 = "seed",
    epochs: usize = "epochs",
    lr: f64 = "lr",
    /// Weight of the metric term.
    lambda: f64 = "lambda",
    /// Metric margin.
    alpha: f64 = "alpha",
    /// Activation clip bound.
    kappa: f64 = "kappa",
    /// Segments per block; 0 scores the whole video as one block.
    block_size: usize = "block-size",
    /// Segments averaged by the k-max pooling.
    k: usize = "k",
    dropout: f64 = "dropout",
    /// bce | bbce | softmax-mil
    loss: ClassLoss = "loss",
    /// none | contrastive | triplet
    metric: MetricKind = "metric",
    /// ours | cosine | euclidean | custom
    distance: DistanceKind = "distance",
    /// Rank of the learnable factors used by the custom distance.
    metric_rank: usize = "metric-rank",
    /// Segments kept per video during training.
    max_segments: usize = "max-segments",
    classes_per_batch: usize = "classes-per-batch",
    videos_per_class: usize = "videos-per-class",
    seg_threshold: f64 = "seg-threshold",
    /// Weight of the video-level score in detection confidence.
    gamma: f64 = "gamma",
    /// Comma-separated, e.g. 0.1,0.3,0.5,0.7
    iou_thresholds: Thresholds = "iou-thresholds",
    /// embedded | raw
    classifier_input: ClassifierInput = "classifier-input",
    /// Skip classes whose video-level probability is below this value.
    class_gate: f64 = "class-gate",
    /// merge | drop: what happens to segments after the last full block.
    tail: Tail = "tail",
    /// Directory for per-video score traces (detect).
    traces: PathBuf = "traces",
    /// Detection file (eval).
    detections: PathBuf = "detections",
    /// Ground-truth file (eval).
    ground_truth: PathBuf = "ground-truth",
    /// Number of classes (synth).
    classes: usize = "classes",
    /// Feature dimension (synth).
    dim: usize = "dim",
    train_videos_per_class: usize = "train-videos-per-class",
    test_videos_per_class: usize = "test-videos-per-class",
    segments_per_video: usize = "segments-per-video",
    /// Norm of each class mean (synth).
    separation: f64 = "separation",
    noise_std: f64 = "noise-std",
    /// Mean planted interval length in segments (synth).
    activity_len: f64 = "activity-len",
    max_instances: usize = "max-instances",
    second_class_prob: f64 = "second-class-prob",
    /// Random instances per loss variant (gradcheck).
    instances: usize = "instances",
    /// Largest accepted relative error (gradcheck).
    tolerance: f64 = "tolerance",
}

/// Parses a `key = value` file. `#` starts a comment; underscores in keys
/// are read as dashes.
pub fn parse_config_file(text: &str, path: &Path) -> Result<Options> {
    let mut opts = Options::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("{}:{}: expected key = value", path.display(), i + 1))
        })?;
        let key = key.trim().replace('_', "-");
        opts.set(&key, value.trim())
            .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
    }
    Ok(opts)
}

/// Command-line options merged over the `--config` file, if any.
pub fn resolve(flags: Options) -> Result<Options> {
    match &flags.config {
        None => Ok(flags),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file = parse_config_file(&text, path)?;
            Ok(flags.over(file))
        }
    }
}

fn require<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T> {
    value
        .as_ref()
        .ok_or_else(|| Error::Config(format!("--{flag} is required")))
}

pub fn train_config(o: &Options) -> TrainConfig {
    let mut c = TrainConfig::default();
    macro_rules! take {
        ($($src:ident => $($dst:ident).+;)*) => { $( if let Some(v) = o.$src { c.$($dst).+ = v; } )* };
    }
    take! {
        seed => seed;
        epochs => epochs;
        lr => adam.lr;
        lambda => loss.lambda;
        alpha => loss.alpha;
        kappa => forward.kappa;
        k => loss.blocks.k;
        dropout => forward.dropout;
        loss => loss.class_loss;
        metric => loss.metric;
        distance => loss.distance;
        metric_rank => metric_rank;
        max_segments => max_segments;
        classes_per_batch => classes_per_batch;
        videos_per_class => videos_per_class;
        classifier_input => forward.classifier_input;
        tail => loss.blocks.tail;
    }
    if let Some(b) = o.block_size {
        c.loss.blocks.block_len = (b > 0).then_some(b);
    }
    c
}

pub fn localize_config(o: &Options) -> LocalizeConfig {
    let d = LocalizeConfig::default();
    LocalizeConfig {
        seg_threshold: o.seg_threshold.unwrap_or(d.seg_threshold),
        gamma: o.gamma.unwrap_or(d.gamma),
        class_gate: o.class_gate.or(d.class_gate),
    }
}

pub fn synth_config(o: &Options) -> SynthConfig {
    let d = SynthConfig::default();
    SynthConfig {
        num_classes: o.classes.unwrap_or(d.num_classes),
        dim: o.dim.unwrap_or(d.dim),
        train_videos_per_class: o.train_videos_per_class.unwrap_or(d.train_videos_per_class),
        test_videos_per_class: o.test_videos_per_class.unwrap_or(d.test_videos_per_class),
        segments_per_video: o.segments_per_video.unwrap_or(d.segments_per_video),
        mean_activity_len: o.activity_len.unwrap_or(d.mean_activity_len),
        max_instances: o.max_instances.unwrap_or(d.max_instances),
        second_class_prob: o.second_class_prob.unwrap_or(d.second_class_prob),
        separation: o.separation.unwrap_or(d.separation),
        noise_std: o.noise_std.unwrap_or(d.noise_std),
        seed: o.seed.unwrap_or(d.seed),
        ..d
    }
}

/// Variants restricted to the ones named on the command line, if any.
pub fn gradcheck_config(o: &Options) -> GradcheckConfig {
    let d = GradcheckConfig::default();
    GradcheckConfig {
        instances_per_config: o.instances.unwrap_or(d.instances_per_config),
        seed: o.seed.unwrap_or(d.seed),
        tolerance: o.tolerance.unwrap_or(d.tolerance),
        class_losses: o.loss.map_or(d.class_losses, |l| vec![l]),
        metrics: o.metric.map_or(d.metrics, |m| vec![m]),
        distances: o.distance.map_or(d.distances, |x| vec![x]),
        lambda: o.lambda.unwrap_or(d.lambda),
        alpha: o.alpha.unwrap_or(d.alpha),
        kappa: o.kappa.unwrap_or(d.kappa),
        dropout: o.dropout.unwrap_or(d.dropout),
        metric_rank: o.metric_rank.unwrap_or(d.metric_rank),
        ..d
    }
}

fn cmd_synth(o: &Options) -> Result<()> {
    let dir = require(&o.out, "out")?;
    let data = generate_synthetic(&synth_config(o))?;
    for path in data.write(dir)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_train(o: &Options) -> Result<()> {
    let manifest = read_manifest(require(&o.manifest, "manifest")?)?;
    let ckpt_path = require(&o.checkpoint, "checkpoint")?;
    let dataset = manifest.load()?;
    let cfg = train_config(o);
    let outcome = train::<f64>(&dataset, &cfg)?;
    write_checkpoint(&outcome.checkpoint(), ckpt_path)?;
    let log_path = o
        .out
        .clone()
        .unwrap_or_else(|| ckpt_path.with_extension("loss.tsv"));
    write_loss_log(&log_path, &outcome.trace)?;
    match outcome.trace.last() {
        Some(r) => println!(
            "{} steps; final bbce {:.6} metric {:.6} total {:.6}",
            outcome.trace.len(),
            r.bbce,
            r.metric,
            r.total
        ),
        None => println!("0 steps; checkpoint holds the initial parameters"),
    }
    println!("wrote {} and {}", ckpt_path.display(), log_path.display());
    Ok(())
}

fn cmd_detect(o: &Options) -> Result<()> {
    let manifest = read_manifest(require(&o.manifest, "manifest")?)?;
    let ckpt = read_checkpoint(require(&o.checkpoint, "checkpoint")?)?;
    let out = require(&o.out, "out")?;
    let mut cfg = train_config(o);
    if let Some(k) = o.kappa {
        if k != ckpt.kappa {
            eprintln!(
                "warning: --kappa {k} differs from the checkpoint's kappa {}; using {k}",
                ckpt.kappa
            );
        }
    } else {
        cfg.forward.kappa = ckpt.kappa;
    }
    if o.classifier_input.is_some_and(|c| c != ckpt.classifier_input) {
        return Err(Error::Config(format!(
            "--classifier-input disagrees with the checkpoint ({:?})",
            ckpt.classifier_input
        )));
    }
    cfg.forward.classifier_input = ckpt.classifier_input;
    if ckpt.params.num_classes() != manifest.classes.len() {
        return Err(Error::shape(format!(
            "checkpoint has {} classes, manifest declares {}",
            ckpt.params.num_classes(),
            manifest.classes.len()
        )));
    }
    let dataset = manifest.load()?;
    let per_video = detect_dataset(
        &dataset,
        &ckpt.params,
        &cfg.forward,
        &cfg.loss.blocks,
        &localize_config(o),
    )?;
    if let Some(dir) = &o.traces {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for v in &per_video {
            write_trace(&dir.join(format!("{}.tsv", v.video_id)), &v.segment_probs, &dataset.classes)?;
        }
    }
    let dets: Vec<Detection> = per_video.into_iter().flat_map(|v| v.detections).collect();
    write_detections(out, &dets)?;
    println!("{} detections over {} videos -> {}", dets.len(), dataset.videos.len(), out.display());
    Ok(())
}

fn cmd_eval(o: &Options) -> Result<()> {
    let dets = read_detections(require(&o.detections, "detections")?)?;
    let gt_path = require(&o.ground_truth, "ground-truth")?;
    let gts = read_ground_truth(gt_path)?;
    let classes = match &o.manifest {
        Some(m) => read_manifest(m)?.classes,
        None => ground_truth_classes(&gts),
    };
    let thresholds = o
        .iou_thresholds
        .clone()
        .map_or_else(|| DEFAULT_IOU_THRESHOLDS.to_vec(), |t| t.0);
    let report = evaluate(&dets, &gts, &thresholds, &classes)?;
    print!("{report}");
    let out = o
        .out
        .clone()
        .unwrap_or_else(|| gt_path.with_extension("eval.json"));
    fs::write(&out, report.to_json()).map_err(|e| Error::io(&out, e))?;
    println!("report saved to {}", out.display());
    Ok(())
}

fn cmd_gradcheck(o: &Options) -> Result<()> {
    let report = run_gradcheck(&gradcheck_config(o))?;
    print!("{report}");
    if let Some(out) = &o.out {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(out, json).map_err(|e| Error::io(out, e))?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Error::OracleFailure(format!(
            "largest relative error {:.3e} exceeds {:.1e}",
            report.max_error(),
            report.tolerance
        )))
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth(o) => cmd_synth(&resolve(o)?),
        Command::Train(o) => cmd_train(&resolve(o)?),
        Command::Detect(o) => cmd_detect(&resolve(o)?),
        Command::Eval(o) => cmd_eval(&resolve(o)?),
        Command::Gradcheck(o) => cmd_gradcheck(&resolve(o)?),
    }
}

/// Parses `args` (program name first), runs the subcommand and maps the
/// outcome to an exit code.
pub fn run<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(crate::error::EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
