//! `omdet`: train, evaluate and inspect task-conditioned detectors.

mod plot;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use omdet::checkpoint::{Checkpoint, EntryType};
use omdet::data::{generate_synthetic, load_coco_json, write_coco, ConflictSpec, FederatedRegistry, Image};
use omdet::eval::{collect_eval_inputs, compute_ap, pr_curves, EvalConfig, EvalReport};
use omdet::mdn::{Detection, Model};
use omdet::sampler::build_batch;
use omdet::text::{EmbeddingProvider, Slot};
use omdet::train::{load_model, Precision, TrainConfig, Trainer, OUTPUT_DIR_ENV};
use omdet::{Error, Result};
use omdet_tensor::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "omdet", version, about = "Language-aware, task-conditioned object detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML config.
    Train(TrainArgs),
    /// Score a checkpoint on a COCO-style dataset.
    Eval(EvalArgs),
    /// Detect the words of a task in one image.
    Detect(DetectArgs),
    /// Print the tasks the trainer would sample, one JSON object per line.
    SampleTask(SampleArgs),
    /// Render a synthetic shape world as COCO datasets.
    GenSynthetic(GenArgs),
    /// Turn training logs into CSV tables and SVG plots.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    config: PathBuf,
    /// Continue from a checkpoint written by the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    /// COCO-style annotation file.
    dataset: PathBuf,
    /// Image directory; defaults to the directory named after the JSON file,
    /// else the directory holding it.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    max_det: usize,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
    /// Also write precision-recall curves at IoU 0.5 as CSV.
    #[arg(long)]
    pr_csv: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    checkpoint: PathBuf,
    image: PathBuf,
    /// Comma-separated task words.
    #[arg(long, value_delimiter = ',', required = true)]
    task: Vec<String>,
    #[arg(long, default_value_t = 0.3)]
    threshold: f64,
    #[arg(long, default_value_t = 100)]
    max_det: usize,
    /// Write a per-stage SVG of the detections' boxes.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the JSON here instead of standard output.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    config: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Defaults to the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenArgs {
    /// TOML shape-world spec; every field is optional.
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// A run directory, or a directory of run directories.
    logdir: PathBuf,
    /// Defaults to `<logdir>/report`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Detect(a) => detect(a),
        Command::SampleTask(a) => sample_task(a),
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::Report(a) => report::run(&a.logdir, a.out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = TrainConfig::load(&a.config)?;
    if cfg.output_dir().is_none() {
        return Err(Error::Config(format!("no output directory: set output_dir in the config or {OUTPUT_DIR_ENV}")));
    }
    match cfg.precision {
        Precision::F32 => train_with::<f32>(cfg, a.resume.as_deref()),
        Precision::F64 => train_with::<f64>(cfg, a.resume.as_deref()),
    }
}

fn train_with<F: Float>(cfg: TrainConfig, resume: Option<&Path>) -> Result<()> {
    let mut trainer = Trainer::<F>::new(cfg)?;
    if let Some(path) = resume {
        trainer.restore(&Checkpoint::load(path)?)?;
        eprintln!("resuming at step {} of {}", trainer.step, trainer.total_steps);
    }
    eprintln!("training {} parameters for {} steps", trainer.trainable_count(), trainer.total_steps);
    let logs = trainer.run()?;
    let dir = trainer.out_dir().expect("checked above");
    match logs.last() {
        Some(l) => println!("step {}: loss {:.4}; checkpoint {}", l.step, l.loss.total, dir.join("checkpoint.omck").display()),
        None => println!("nothing to do; checkpoint {}", dir.join("checkpoint.omck").display()),
    }
    Ok(())
}

/// A model loaded at the precision its parameters were stored in.
enum Loaded {
    F32(Model<f32>),
    F64(Model<f64>),
}

fn load(path: &Path) -> Result<(Loaded, EmbeddingProvider)> {
    let ck = Checkpoint::load(path)?;
    let wide = ck.entries.iter().any(|(k, e)| k.starts_with("param/") && e.dtype == EntryType::F64);
    Ok(if wide {
        let (m, p) = load_model::<f64>(&ck)?;
        (Loaded::F64(m), p)
    } else {
        let (m, p) = load_model::<f32>(&ck)?;
        (Loaded::F32(m), p)
    })
}

fn image_root(json: &Path) -> PathBuf {
    let parent = json.parent().unwrap_or(Path::new("."));
    match json.file_stem() {
        Some(stem) if parent.join(stem).is_dir() => parent.join(stem),
        _ => parent.to_path_buf(),
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let (model, provider) = load(&a.checkpoint)?;
    let root = a.images.clone().unwrap_or_else(|| image_root(&a.dataset));
    let ds = load_coco_json(&a.dataset, Some(&root))?;
    let cfg = EvalConfig { max_det: a.max_det, ..EvalConfig::default() };
    let inputs = match &model {
        Loaded::F32(m) => collect_eval_inputs(m, &ds, &provider, &cfg)?,
        Loaded::F64(m) => collect_eval_inputs(m, &ds, &provider, &cfg)?,
    };
    let report = compute_ap(&inputs.vocabulary, &inputs.detections, &inputs.ground_truth, ds.images.len(), &cfg)?;
    if let Some(path) = &a.pr_csv {
        let mut csv = String::from("class,score,recall,precision\n");
        for p in pr_curves(&inputs.vocabulary, &inputs.detections, &inputs.ground_truth, 0.5, &cfg) {
            csv.push_str(&format!("{},{},{},{}\n", p.class, p.score, p.recall, p.precision));
        }
        write_file(path, csv)?;
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("serializes"));
    } else {
        print!("{}", format_report(&ds.name, &report));
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.4}", x))
}

fn format_report(name: &str, r: &EvalReport) -> String {
    let mut s = format!(
        "{name}: {} images, {} ground truths, {} detections\n{:<16} {:>8} {:>8} {:>8} {:>8} {:>6}\n",
        r.num_images, r.num_gt, r.num_det, "class", "AP", "AP50", "AP75", "R@0.5", "GT"
    );
    for c in &r.classes {
        s.push_str(&format!(
            "{:<16} {:>8} {:>8} {:>8} {:>8} {:>6}\n",
            c.name,
            opt(c.ap),
            opt(c.ap50),
            opt(c.ap75),
            opt(c.recall50),
            c.num_gt
        ));
    }
    s.push_str(&format!("{:<16} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n", "mean", r.ap, r.ap50, r.ap75, r.recall50));
    s
}

#[derive(Serialize)]
struct DetectionOut<'a> {
    label: &'a str,
    #[serde(flatten)]
    detection: &'a Detection,
}

#[derive(Serialize)]
struct DetectOutput<'a> {
    image: String,
    width: usize,
    height: usize,
    task: &'a [String],
    detections: Vec<DetectionOut<'a>>,
}

fn detect(a: DetectArgs) -> Result<()> {
    let task: Vec<String> = a.task.iter().map(|w| w.trim().to_string()).collect();
    if task.iter().any(String::is_empty) {
        return Err(Error::Usage("empty word in --task".into()));
    }
    let (model, provider) = load(&a.checkpoint)?;
    let image = Image::load(&a.image)?;
    let slots: Vec<Slot> = task.iter().cloned().map(Some).collect();
    let dets = match &model {
        Loaded::F32(m) => m.detect(&image, &slots, &provider, a.threshold, a.max_det)?,
        Loaded::F64(m) => m.detect(&image, &slots, &provider, a.threshold, a.max_det)?,
    };
    let out = DetectOutput {
        image: a.image.display().to_string(),
        width: image.width,
        height: image.height,
        task: &task,
        detections: dets.iter().map(|d| DetectionOut { label: &task[d.class_index], detection: d }).collect(),
    };
    let text = serde_json::to_string_pretty(&out).expect("serializes");
    match &a.output {
        Some(path) => write_file(path, text + "\n")?,
        None => println!("{text}"),
    }
    if let Some(path) = &a.trace {
        write_file(path, plot::stage_trace(&image, &task, &dets)?)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TaskLine<'a> {
    draw: usize,
    dataset: &'a str,
    image_id: u64,
    #[serde(flatten)]
    task: &'a omdet::sampler::SampledTask,
}

fn sample_task(a: SampleArgs) -> Result<()> {
    let cfg = TrainConfig::load(&a.config)?;
    cfg.validate()?;
    let seed = a.seed.unwrap_or(cfg.seed);
    let registry = FederatedRegistry::new(cfg.load_datasets()?, cfg.weights.clone())?;
    // the same streams the trainer draws from
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let picks: Vec<(usize, usize)> = registry.stream(seed).take(a.count).collect();
    let batch = build_batch(&registry, &picks, cfg.model.max_task, &mut rng)?;
    for (i, item) in batch.iter().enumerate() {
        let ds = &registry.datasets[item.dataset];
        let line = TaskLine { draw: i, dataset: &ds.name, image_id: ds.images[item.image].id, task: &item.task };
        println!("{}", serde_json::to_string(&line).expect("serializes"));
    }
    Ok(())
}

fn gen_synthetic(a: GenArgs) -> Result<()> {
    let text = fs::read_to_string(&a.spec).map_err(|e| Error::io(format!("reading {}", a.spec.display()), e))?;
    let spec: ConflictSpec = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", a.spec.display())))?;
    let datasets = generate_synthetic(&spec, a.seed)?;
    for ds in &datasets {
        let dir = a.out.join(&ds.name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let json = a.out.join(format!("{}.json", ds.name));
        write_coco(ds, &json, Some(&dir))?;
        println!("{}: {} images, {} boxes -> {}", ds.name, ds.images.len(), ds.annotation_count(), json.display());
    }
    Ok(())
}
