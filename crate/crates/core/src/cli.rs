//! Command-line front end. Each subcommand prints its fully resolved
//! configuration as one JSON line before doing any work.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::data::{Dataset, SyntheticSpec};
use crate::distill::{DistillConfig, DistillRun, Mode, StepRecord};
use crate::error::{Error, Result};
use crate::eval::{attention_rollout, cosine_layer_similarity, export_embeddings, linear_probe, top1_accuracy, ProbeOptions};
use crate::lora::{count_trainable, Placement};
use crate::pnm::{load_image_dir, write_pgm_heatmap, Labels, Pnm};
use crate::select::Selection;
use crate::vit::{train_teacher, TrainOptions, ViTConfig, ViTModel};

/// Seed of `synthetic:N,C` data when none is given.
pub const DEFAULT_DATA_SEED: u64 = 7;

#[derive(Debug, Parser)]
#[command(name = "wecolora", version, about = "Few-shot ViT feature distillation with low-rank adapters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a supervised teacher from scratch.
    TrainTeacher(TrainTeacherArgs),
    /// Distill a shallow student from a teacher without labels.
    Distill(DistillArgs),
    /// Fit a linear probe on frozen CLS features.
    Probe(ProbeArgs),
    /// Top-1 accuracy of a model with a probe head.
    Eval(EvalArgs),
    /// Diagnostics on trained models.
    #[command(subcommand)]
    Analyze(Analyze),
    /// Hyperparameter sweeps.
    #[command(subcommand)]
    Sweep(Sweep),
}

#[derive(Debug, Args)]
pub struct TrainTeacherArgs {
    /// JSON file with optional "model" (ViT config) and "train" sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Image directory or `synthetic:N,C[,SEED]`.
    #[arg(long)]
    pub data: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct DistillFlags {
    /// JSON file with distillation settings (flags take precedence).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub teacher: PathBuf,
    /// Image directory or `synthetic:N,C[,SEED]`.
    #[arg(long)]
    pub data: String,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long = "select")]
    pub selection: Option<Selection>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub accum: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub augment: bool,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[command(flatten)]
    pub flags: DistillFlags,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step metrics, one JSON object per line.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Save adapters unmerged instead of folding them into the weights.
    #[arg(long)]
    pub unmerged: bool,
    /// Read labels.csv and report a linear-probe accuracy of the student.
    /// Distillation itself never sees labels.
    #[arg(long)]
    pub labels: bool,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long)]
    pub data: String,
}

#[derive(Debug, Subcommand)]
pub enum Analyze {
    /// Per-layer token cosine similarity between student and teacher blocks.
    Cosine {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        r: usize,
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention rollout heatmap for one image.
    Rollout {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        top: f32,
        #[arg(long)]
        out: PathBuf,
    },
    /// CLS embeddings as CSV.
    Export {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum Sweep {
    /// Distill once per adapter rank and report one JSON line per rank.
    Rank {
        /// Comma-separated ranks.
        #[arg(long, value_delimiter = ',', required = true)]
        ranks: Vec<usize>,
        #[command(flatten)]
        flags: DistillFlags,
        /// Also fit a linear probe per rank (reads labels.csv for directories).
        #[arg(long)]
        probe: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl std::str::FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let Some(rest) = s.strip_prefix("synthetic:") else {
            return Ok(DataSource::Dir(PathBuf::from(s)));
        };
        let parts: Vec<&str> = rest.split(',').map(str::trim).collect();
        let num = |p: &str| {
            p.parse::<u64>()
                .map_err(|_| Error::Config(format!("bad synthetic data spec {s:?} (expected synthetic:N,C[,SEED])")))
        };
        match parts.as_slice() {
            [n, c] => Ok(DataSource::Synthetic {
                n: num(n)? as usize,
                classes: num(c)? as usize,
                seed: DEFAULT_DATA_SEED,
            }),
            [n, c, seed] => Ok(DataSource::Synthetic {
                n: num(n)? as usize,
                classes: num(c)? as usize,
                seed: num(seed)?,
            }),
            _ => Err(Error::Config(format!("bad synthetic data spec {s:?} (expected synthetic:N,C[,SEED])"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Dir(PathBuf),
    Synthetic { n: usize, classes: usize, seed: u64 },
}

impl DataSource {
    /// Loads images at the model's resolution. Directory labels are read
    /// according to `labels`; synthetic data always carries its labels.
    pub fn load(&self, config: &ViTConfig, labels: Labels) -> Result<Dataset> {
        match self {
            DataSource::Dir(dir) => load_image_dir(dir, config.image_size, config.channels, labels),
            DataSource::Synthetic { n, classes, seed } => {
                if config.channels != 1 {
                    return Err(Error::Config(format!(
                        "synthetic data is single-channel but the model expects {} channels",
                        config.channels
                    )));
                }
                SyntheticSpec {
                    image_size: config.image_size,
                    ..SyntheticSpec::new(*n, *classes, *seed)
                }
                .generate()
            }
        }
    }
}

/// Rewrites numbers that came from `f32` fields with their shortest `f32`
/// spelling, so `0.01` prints as `0.01` rather than its widened `f64` value.
fn tidy_floats(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Number(n) if n.is_f64() => {
            let v = n.as_f64().unwrap_or_default();
            let narrow = v as f32;
            if narrow as f64 == v {
                if let Some(t) = format!("{narrow}").parse::<f64>().ok().and_then(serde_json::Number::from_f64) {
                    *n = t;
                }
            }
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(tidy_floats),
        serde_json::Value::Object(map) => map.values_mut().for_each(tidy_floats),
        _ => {}
    }
}

fn print_config(command: &str, mut value: serde_json::Value) {
    tidy_floats(&mut value);
    println!("{}", json!({ "command": command, "config": value }));
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_line(out: &mut impl Write, path: &Path, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io(path, e))
}

fn to_json(value: &impl Serialize) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherFile {
    pub model: ViTConfig,
    pub train: TrainOptions,
}

/// Defaults, then the JSON file, then flags. The classifier width always
/// follows the training data.
pub fn resolve_teacher(args: &TrainTeacherArgs) -> Result<TeacherFile> {
    let mut cfg: TeacherFile = match &args.config {
        Some(path) => read_json(path)?,
        None => TeacherFile::default(),
    };
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.train.lr = lr;
    }
    if let Some(b) = args.batch {
        cfg.train.batch_size = b;
    }
    cfg.model.validate()?;
    Ok(cfg)
}

pub fn resolve_distill(flags: &DistillFlags) -> Result<DistillConfig> {
    let mut cfg: DistillConfig = match &flags.config {
        Some(path) => read_json(path)?,
        None => DistillConfig::default(),
    };
    macro_rules! take {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = flags.$flag { cfg.$field = v; })*
        };
    }
    take!(mode => mode, r => r, rank => rank, alpha => alpha, selection => selection,
          epochs => epochs, batch => batch_size, accum => accum, seed => seed);
    if flags.lr.is_some() {
        cfg.lr = flags.lr;
    }
    if flags.augment {
        cfg.augment = true;
    }
    Ok(cfg.resolved())
}

fn train_teacher_cmd(args: &TrainTeacherArgs) -> Result<()> {
    let source: DataSource = args.data.parse()?;
    let mut cfg = resolve_teacher(args)?;
    let data = source.load(&cfg.model, Labels::Required)?;
    cfg.model.num_classes = data.num_classes;
    print_config(
        "train-teacher",
        json!({ "model": cfg.model, "train": cfg.train, "data": source, "seed": args.seed, "out": args.out }),
    );
    let (model, stats) = train_teacher(&cfg.model, &data, &cfg.train, args.seed)?;
    for s in &stats {
        println!("{}", to_json(s));
    }
    save_checkpoint(&model, &["teacher"], &args.out)
}

fn mode_tags(cfg: &DistillConfig, merged: bool) -> Vec<String> {
    vec![
        "student".into(),
        format!("mode={}", cfg.mode.as_str()),
        format!("r={}", cfg.r),
        format!("rank={}", cfg.rank),
        if merged { "merged" } else { "unmerged" }.into(),
    ]
}

/// Runs one distillation and returns the log plus the (merged unless
/// `keep_adapters`) student.
fn distill_with(
    teacher: &ViTModel,
    data: &Dataset,
    cfg: &DistillConfig,
    keep_adapters: bool,
) -> Result<(ViTModel, Vec<StepRecord>)> {
    let mut run = DistillRun::new(teacher, data.images(), cfg)?;
    run.train()?;
    if keep_adapters {
        let student = run.student().clone();
        Ok((student, run.log().to_vec()))
    } else {
        let out = run.finish()?;
        Ok((out.student, out.log))
    }
}

fn distill_cmd(args: &DistillArgs) -> Result<()> {
    let source: DataSource = args.flags.data.parse()?;
    let cfg = resolve_distill(&args.flags)?;
    print_config(
        "distill",
        json!({
            "distill": cfg, "teacher": args.flags.teacher, "data": source,
            "out": args.out, "log": args.log, "unmerged": args.unmerged, "labels": args.labels,
        }),
    );
    let teacher = load_checkpoint(&args.flags.teacher)?;
    let labels = if args.labels { Labels::Required } else { Labels::Ignore };
    let mut data = source.load(&teacher.config, labels)?;
    let labelled = data.labels.take();
    let (student, log) = distill_with(&teacher, &data, &cfg, args.unmerged)?;
    if let Some(path) = &args.log {
        let mut out = create(path)?;
        for rec in &log {
            write_line(&mut out, path, &to_json(rec))?;
        }
        out.flush().map_err(|e| Error::io(path, e))?;
    }
    let tags = mode_tags(&cfg, !args.unmerged);
    let tags: Vec<&str> = tags.iter().map(String::as_str).collect();
    save_checkpoint(&student, &tags, &args.out)?;
    let means = crate::distill::epoch_means(&log);
    let probe_accuracy = match labelled.filter(|_| args.labels) {
        Some(labels) => {
            data.labels = Some(labels);
            let head = linear_probe(&student, &data, &ProbeOptions::default(), cfg.seed)?;
            Some(top1_accuracy(&head, &student, &data)?)
        }
        None => None,
    };
    let mut summary = json!({
        "steps": log.len(), "first_epoch_loss": means.first(), "final_epoch_loss": means.last(),
        "probe_accuracy": probe_accuracy,
    });
    tidy_floats(&mut summary);
    println!("{summary}");
    Ok(())
}

fn probe_cmd(args: &ProbeArgs) -> Result<()> {
    let source: DataSource = args.data.parse()?;
    let mut opts = ProbeOptions::default();
    if let Some(e) = args.epochs {
        opts.epochs = e;
    }
    if let Some(lr) = args.lr {
        opts.lr = lr;
    }
    if let Some(b) = args.batch {
        opts.batch_size = b;
    }
    print_config(
        "probe",
        json!({ "probe": opts, "model": args.model, "data": source, "seed": args.seed, "out": args.out }),
    );
    let model = load_checkpoint(&args.model)?;
    let data = source.load(&model.config, Labels::Required)?;
    let head = linear_probe(&model, &data, &opts, args.seed)?;
    let acc = top1_accuracy(&head, &model, &data)?;
    println!("{}", json!({ "train_accuracy": acc }));
    Checkpoint::from_probe(&head).save(&args.out)
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let source: DataSource = args.data.parse()?;
    print_config("eval", json!({ "model": args.model, "head": args.head, "data": source }));
    let model = load_checkpoint(&args.model)?;
    let head = Checkpoint::load(&args.head)?.to_probe()?;
    let data = source.load(&model.config, Labels::Required)?;
    let acc = top1_accuracy(&head, &model, &data)?;
    println!("top1_accuracy {acc:.6}");
    Ok(())
}

fn analyze_cmd(cmd: &Analyze) -> Result<()> {
    match cmd {
        Analyze::Cosine { teacher, student, r, data, out } => {
            let source: DataSource = data.parse()?;
            print_config(
                "analyze cosine",
                json!({ "teacher": teacher, "student": student, "r": r, "data": source, "out": out }),
            );
            let teacher = load_checkpoint(teacher)?;
            let student = load_checkpoint(student)?;
            let data = source.load(&teacher.config, Labels::Ignore)?;
            let report = cosine_layer_similarity(&teacher, &student, *r, data.images())?;
            let mut w = create(out)?;
            for layer in &report.layers {
                write_line(&mut w, out, &to_json(layer))?;
            }
            w.flush().map_err(|e| Error::io(out, e))?;
            println!("{}", json!({ "mean_cosine": report.mean() }));
            Ok(())
        }
        Analyze::Rollout { model, image, top, out } => {
            print_config("analyze rollout", json!({ "model": model, "image": image, "top": top, "out": out }));
            let model = load_checkpoint(model)?;
            let img = Pnm::read(image)?.to_tensor(model.config.image_size, model.config.channels);
            let rollout = attention_rollout(&model, &img, *top)?;
            write_pgm_heatmap(&rollout.heatmap, out)
        }
        Analyze::Export { model, data, out } => {
            let source: DataSource = data.parse()?;
            print_config("analyze export", json!({ "model": model, "data": source, "out": out }));
            let model = load_checkpoint(model)?;
            let data = source.load(&model.config, Labels::Optional)?;
            export_embeddings(&model, &data, out)
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepLine {
    pub rank: usize,
    pub trainable_params: usize,
    pub steps: usize,
    pub first_epoch_loss: f32,
    pub final_epoch_loss: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_accuracy: Option<f32>,
}

fn sweep_cmd(cmd: &Sweep) -> Result<()> {
    let Sweep::Rank { ranks, flags, probe, out } = cmd;
    let source: DataSource = flags.data.parse()?;
    let base = resolve_distill(flags)?;
    print_config(
        "sweep rank",
        json!({ "ranks": ranks, "distill": base, "teacher": flags.teacher, "data": source, "probe": probe, "out": out }),
    );
    if ranks.is_empty() {
        return Err(Error::Config("sweep needs at least one rank".into()));
    }
    let teacher = load_checkpoint(&flags.teacher)?;
    let labels = if *probe { Labels::Required } else { Labels::Ignore };
    let data = source.load(&teacher.config, labels)?;
    let mut sink = match out {
        Some(path) => Some((create(path)?, path)),
        None => None,
    };
    for &rank in ranks {
        let cfg = DistillConfig { rank, ..base.clone() };
        let (student, log) = distill_with(&teacher, &data, &cfg, false)?;
        let means = crate::distill::epoch_means(&log);
        let placement = match cfg.mode {
            Mode::QvLora => Some(Placement::QueryValue),
            Mode::Wecolora => Some(Placement::Enhanced),
            Mode::WecoKd | Mode::ScratchKd => None,
        };
        let trainable_params = match placement {
            Some(p) => count_trainable(&student.config, rank, p),
            None => student.param_count(),
        };
        let probe_accuracy = if *probe {
            let head = linear_probe(&student, &data, &ProbeOptions::default(), cfg.seed)?;
            Some(top1_accuracy(&head, &student, &data)?)
        } else {
            None
        };
        let line = to_json(&SweepLine {
            rank,
            trainable_params,
            steps: log.len(),
            first_epoch_loss: means.first().copied().unwrap_or(f32::NAN),
            final_epoch_loss: means.last().copied().unwrap_or(f32::NAN),
            probe_accuracy,
        });
        println!("{line}");
        if let Some((w, path)) = sink.as_mut() {
            write_line(w, path, &line)?;
        }
    }
    if let Some((mut w, path)) = sink {
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::TrainTeacher(a) => train_teacher_cmd(a),
        Command::Distill(a) => distill_cmd(a),
        Command::Probe(a) => probe_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Analyze(a) => analyze_cmd(a),
        Command::Sweep(s) => sweep_cmd(s),
    }
}
