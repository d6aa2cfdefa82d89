//! Training: configuration, freeze masks, the optimizer, checkpoints and
//! the step loop.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use omdet_tensor::{Float, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{
    generate_synthetic, ingest_pseudo_labels, load_coco_json, resolve, ConflictSpec, DetectionDataset,
    FederatedRegistry, RegistryStream,
};
use crate::error::{config, Error, Result};
use crate::eval::{evaluate_dataset, EvalConfig, EvalReport};
use crate::matching::{set_prediction_loss, LossBreakdown, LossConfig};
use crate::mdn::{Model, ModelConfig, WORD_TABLE_PREFIX};
use crate::nn::{Group, ParamId, ParamStore};
use crate::sampler::build_batch;
use crate::text::{fnv1a, to_omev, EmbeddingProvider};

/// Environment variable that replaces the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "OMDET_OUTPUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningMode {
    /// Everything except raw word vectors.
    #[default]
    Full,
    /// Backbone and pyramid frozen.
    HeadOnly,
    /// Only the raw word vectors of the task vocabulary.
    Prompt,
}

impl TuningMode {
    pub fn trains(self, group: Group) -> bool {
        match self {
            TuningMode::Full => group != Group::WordTable,
            TuningMode::HeadOnly => matches!(group, Group::TaskEncoder | Group::LabelEncoder | Group::Mdn),
            TuningMode::Prompt => group == Group::WordTable,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Coco {
        json: PathBuf,
        #[serde(default)]
        images: Option<PathBuf>,
        #[serde(default)]
        pseudo_labels: Option<PathBuf>,
        #[serde(default = "default_min_confidence")]
        min_confidence: f64,
    },
    /// Expands to one dataset per entry of the spec.
    Synthetic {
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        spec: ConflictSpec,
    },
}

fn default_min_confidence() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub tuning_mode: TuningMode,
    pub precision: Precision,
    pub model: ModelConfig,
    pub loss: LossConfig,
    /// OMEV file; the hash provider is used when absent.
    pub embeddings: Option<PathBuf>,
    pub datasets: Vec<DatasetSpec>,
    /// Sampling weight per (expanded) dataset; image-count shares by default.
    pub weights: Option<Vec<f64>>,
    /// Parameters to start from (fine-tuning).
    pub init_checkpoint: Option<PathBuf>,
    /// Evaluate every this many steps (0 = only at the end, if `eval_images` > 0).
    pub eval_every: usize,
    /// Images per dataset used for periodic evaluation (0 = no evaluation).
    pub eval_images: usize,
    /// Extra checkpoint every this many steps (0 = epoch boundaries only).
    pub checkpoint_every: usize,
    pub output_dir: Option<PathBuf>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 1,
            steps: None,
            batch_size: 2,
            lr: 5e-5,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            tuning_mode: TuningMode::Full,
            precision: Precision::F32,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            embeddings: None,
            datasets: Vec::new(),
            weights: None,
            init_checkpoint: None,
            eval_every: 0,
            eval_images: 0,
            checkpoint_every: 0,
            output_dir: None,
            base_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config("lr must be positive"));
        }
        if self.batch_size == 0 {
            return Err(config("batch_size must be >= 1"));
        }
        if self.steps == Some(0) || (self.steps.is_none() && self.epochs == 0) {
            return Err(config("need at least one training step"));
        }
        if !(self.clip_norm > 0.0) || self.weight_decay < 0.0 || self.adam_eps <= 0.0 {
            return Err(config("clip_norm and adam_eps must be positive, weight_decay non-negative"));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(config("betas must lie in [0, 1)"));
        }
        if self.datasets.is_empty() {
            return Err(config("no datasets configured"));
        }
        Ok(())
    }

    /// Output directory after the environment override.
    pub fn output_dir(&self) -> Option<PathBuf> {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(d) if !d.is_empty() => Some(PathBuf::from(d)),
            _ => self.output_dir.as_ref().map(|p| resolve(self.base_dir.as_deref(), p)),
        }
    }

    /// FNV-1a of everything that affects the training trajectory.
    pub fn hash(&self) -> u64 {
        let mut c = self.clone();
        c.output_dir = None;
        c.eval_every = 0;
        c.eval_images = 0;
        c.checkpoint_every = 0;
        fnv1a(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    pub fn load_datasets(&self) -> Result<Vec<DetectionDataset>> {
        let base = self.base_dir.as_deref();
        let mut out = Vec::new();
        for spec in &self.datasets {
            match spec {
                DatasetSpec::Coco { json, images, pseudo_labels, min_confidence } => {
                    let root = images.as_ref().map(|p| resolve(base, p));
                    let mut ds = load_coco_json(&resolve(base, json), root.as_deref())?;
                    if let Some(pl) = pseudo_labels {
                        let path = resolve(base, pl);
                        let text = fs::read_to_string(&path)
                            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
                        let (merged, report) = ingest_pseudo_labels(ds, &text, *min_confidence)?;
                        if report.unknown_image > 0 {
                            eprintln!("warning: {} pseudo labels reference unknown images", report.unknown_image);
                        }
                        ds = merged;
                    }
                    out.push(ds);
                }
                DatasetSpec::Synthetic { seed, spec } => out.extend(generate_synthetic(spec, *seed)?),
            }
        }
        Ok(out)
    }

    pub fn provider(&self) -> Result<EmbeddingProvider> {
        let p = match &self.embeddings {
            Some(path) => EmbeddingProvider::load(&resolve(self.base_dir.as_deref(), path))?,
            None => EmbeddingProvider::hash(self.model.d_text),
        };
        if p.dim() != self.model.d_text {
            return Err(config(format!("embedding dim {} != model d_text {}", p.dim(), self.model.d_text)));
        }
        Ok(p)
    }
}

/// Piecewise-constant schedule: ×0.1 from 70% of training, ×0.01 from 90%.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if 10 * step < 7 * total_steps {
        base_lr
    } else if 10 * step < 9 * total_steps {
        base_lr * 0.1
    } else {
        base_lr * 0.01
    }
}

/// Adam with decoupled weight decay and global-norm gradient clipping.
/// Parameters that received no gradient in a step are left untouched.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub t: u64,
    m: Vec<Option<Vec<F>>>,
    v: Vec<Option<Vec<F>>>,
}

impl<F: Float> AdamW<F> {
    pub fn new(params: usize, cfg: &TrainConfig) -> Self {
        AdamW {
            beta1: cfg.betas[0],
            beta2: cfg.betas[1],
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.clip_norm,
            t: 0,
            m: vec![None; params],
            v: vec![None; params],
        }
    }

    /// Applies one update; returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &[(ParamId, Vec<F>)], lr: f64) -> Result<f64> {
        let norm = grads.iter().flat_map(|(_, g)| g.iter()).map(|&x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric("gradient norm is not finite".into()));
        }
        let scale = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        self.t += 1;
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let (one, sc) = (F::one(), F::lit(scale));
        let bc1 = F::lit(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = F::lit(1.0 - self.beta2.powi(self.t as i32));
        let (lr_f, eps, decay) = (F::lit(lr), F::lit(self.eps), F::lit(1.0 - lr * self.weight_decay));
        for (id, g) in grads {
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| vec![F::zero(); g.len()]);
            let v = self.v[i].get_or_insert_with(|| vec![F::zero(); g.len()]);
            let p = params.value_mut(*id).data_mut();
            for j in 0..g.len() {
                let gj = g[j] * sc;
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] = p[j] * decay - lr_f * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(norm)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub step: usize,
    pub eval: Vec<(String, EvalReport)>,
}

/// Summary written to `run.json` next to the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub config: TrainConfig,
    pub trainable_params: usize,
    pub total_steps: usize,
    pub datasets: Vec<DatasetInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub images: usize,
    pub weight: f64,
    pub vocabulary: Vec<String>,
}

fn rng_bytes(r: &ChaCha8Rng) -> Vec<u8> {
    let mut b = r.get_seed().to_vec();
    b.extend_from_slice(&r.get_stream().to_le_bytes());
    b.extend_from_slice(&r.get_word_pos().to_le_bytes());
    b
}

fn rng_from_bytes(b: &[u8]) -> Result<ChaCha8Rng> {
    if b.len() != 56 {
        return Err(Error::Data("corrupt RNG state in checkpoint".into()));
    }
    let mut r = ChaCha8Rng::from_seed(b[..32].try_into().expect("32 bytes"));
    r.set_stream(u64::from_le_bytes(b[32..40].try_into().expect("8 bytes")));
    r.set_word_pos(u128::from_le_bytes(b[40..56].try_into().expect("16 bytes")));
    Ok(r)
}

/// Word-table words of a training run: every dataset label, in first-seen
/// order. Only prompt tuning uses a table.
fn prompt_words(datasets: &[DetectionDataset]) -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    for d in datasets {
        for w in &d.vocabulary {
            if !words.contains(w) {
                words.push(w.clone());
            }
        }
    }
    words
}

/// Copies every parameter present in `ck` into `model` (matching shapes
/// required). With `strict`, every model parameter must be present.
pub fn load_params<F: Float>(model: &mut Model<F>, ck: &Checkpoint, strict: bool) -> Result<()> {
    let ids: Vec<ParamId> = model.params.ids().collect();
    for id in ids {
        let key = format!("param/{}", model.params.name(id));
        if !ck.contains(&key) {
            if strict {
                return Err(Error::Data(format!("checkpoint lacks {key}")));
            }
            continue;
        }
        let t: Tensor<F> = ck.tensor(&key)?;
        if t.shape() != model.params.value(id).shape() {
            return Err(config(format!(
                "{key}: checkpoint shape {:?} != model shape {:?}",
                t.shape(),
                model.params.value(id).shape()
            )));
        }
        *model.params.value_mut(id) = t;
    }
    Ok(())
}

/// Rebuilds the model and its embedding provider from a checkpoint alone.
pub fn load_model<F: Float>(ck: &Checkpoint) -> Result<(Model<F>, EmbeddingProvider)> {
    let cfg: ModelConfig = serde_json::from_slice(ck.bytes("meta/model")?)
        .map_err(|e| Error::Data(format!("checkpoint model config: {e}")))?;
    let emb = ck.bytes("meta/embeddings")?;
    let provider = if emb.is_empty() { EmbeddingProvider::hash(cfg.d_text) } else { EmbeddingProvider::from_omev(emb)? };
    let mut model = Model::new(cfg, 0)?;
    let prefix = format!("param/{WORD_TABLE_PREFIX}");
    let words: Vec<String> = ck.entries.keys().filter_map(|k| k.strip_prefix(&prefix)).map(str::to_string).collect();
    if !words.is_empty() {
        model.add_word_table(&words, &provider)?;
    }
    load_params(&mut model, ck, true)?;
    Ok((model, provider))
}

pub struct Trainer<F: Float> {
    pub cfg: TrainConfig,
    pub model: Model<F>,
    pub registry: FederatedRegistry,
    pub provider: EmbeddingProvider,
    pub step: usize,
    pub total_steps: usize,
    pub steps_per_epoch: usize,
    opt: AdamW<F>,
    sampler: ChaCha8Rng,
    stream: RegistryStream,
    drawn: u64,
    out_dir: Option<PathBuf>,
}

impl<F: Float> Trainer<F> {
    /// Loads datasets and embeddings as configured.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let datasets = cfg.load_datasets()?;
        let provider = cfg.provider()?;
        Self::with_data(cfg, datasets, provider)
    }

    pub fn with_data(cfg: TrainConfig, datasets: Vec<DetectionDataset>, provider: EmbeddingProvider) -> Result<Self> {
        cfg.validate()?;
        let words = prompt_words(&datasets);
        let registry = FederatedRegistry::new(datasets, cfg.weights.clone())?;
        let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
        if cfg.tuning_mode == TuningMode::Prompt {
            model.add_word_table(&words, &provider)?;
        }
        if let Some(init) = &cfg.init_checkpoint {
            let ck = Checkpoint::load(&resolve(cfg.base_dir.as_deref(), init))?;
            load_params(&mut model, &ck, false)?;
        }
        let steps_per_epoch = registry.total_images().div_ceil(cfg.batch_size);
        let total_steps = cfg.steps.unwrap_or(cfg.epochs * steps_per_epoch);
        let mut sampler = ChaCha8Rng::seed_from_u64(cfg.seed);
        sampler.set_stream(1);
        let stream = registry.stream(cfg.seed);
        let opt = AdamW::new(model.params.len(), &cfg);
        let out_dir = cfg.output_dir();
        Ok(Trainer {
            cfg,
            model,
            registry,
            provider,
            step: 0,
            total_steps,
            steps_per_epoch,
            opt,
            sampler,
            stream,
            drawn: 0,
            out_dir,
        })
    }

    pub fn out_dir(&self) -> Option<&Path> {
        self.out_dir.as_deref()
    }

    pub fn trainable_count(&self) -> usize {
        let mode = self.cfg.tuning_mode;
        self.model.params.scalar_count(|_, g| mode.trains(g))
    }

    /// One optimizer step. Parameters are untouched if the step fails.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let picks: Vec<(usize, usize)> =
            (0..self.cfg.batch_size).map(|_| self.stream.next().expect("stream is endless")).collect();
        self.drawn += picks.len() as u64;
        let batch = build_batch(&self.registry, &picks, self.cfg.model.max_task, &mut self.sampler)?;

        let mode = self.cfg.tuning_mode;
        let mut tape = Tape::<F>::new();
        let bound = self.model.params.bind(&mut tape, |_, g| mode.trains(g));
        let mut outs = Vec::with_capacity(batch.len());
        for item in &batch {
            let image = &self.registry.datasets[item.dataset].images[item.image].image;
            outs.push(self.model.forward(&mut tape, &bound, image, &item.task.slots(), &self.provider).map_err(numeric)?);
        }
        let targets: Vec<_> = batch.iter().map(|b| b.targets.clone()).collect();
        let loss = set_prediction_loss(&mut tape, &outs, &targets, &self.cfg.loss, None).map_err(numeric)?;
        if !loss.breakdown.total.is_finite() {
            return Err(Error::Numeric(format!("loss is {} at step {}", loss.breakdown.total, self.step)));
        }
        let mut grads_all = tape.backward(loss.loss).map_err(|e| numeric(e.into()))?;
        let grads: Vec<(ParamId, Vec<F>)> = self
            .model
            .params
            .ids()
            .filter_map(|id| grads_all.take(bound.var(id)).map(|g| (id, g)))
            .collect();
        let lr = lr_at(self.step, self.total_steps, self.cfg.lr);
        let grad_norm = self.opt.step(&mut self.model.params, &grads, lr)?;
        self.step += 1;
        Ok(StepLog { step: self.step, epoch: self.step.div_ceil(self.steps_per_epoch), lr, grad_norm, loss: loss.breakdown })
    }

    pub fn evaluate(&self, max_images: usize) -> Result<Vec<(String, EvalReport)>> {
        self.registry
            .datasets
            .iter()
            .map(|d| {
                let mut sub = d.clone();
                if max_images > 0 {
                    sub.images.truncate(max_images);
                }
                Ok((d.name.clone(), evaluate_dataset(&self.model, &sub, &self.provider, &EvalConfig::default())?))
            })
            .collect()
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.put_bytes("meta/model", serde_json::to_string(&self.model.cfg).expect("serializes").as_bytes());
        let emb = match &self.provider {
            EmbeddingProvider::Hash { .. } => Vec::new(),
            EmbeddingProvider::File { dim, table } => {
                let entries: Vec<(String, Vec<f32>)> = table.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
                to_omev(*dim, &entries)?
            }
        };
        ck.put_bytes("meta/embeddings", &emb);
        ck.put_u64s("meta/config_hash", &[self.cfg.hash()]);
        ck.put_u64s("meta/progress", &[self.step as u64, self.total_steps as u64, self.drawn, self.opt.t]);
        ck.put_bytes("meta/sampler_rng", &rng_bytes(&self.sampler));
        for (id, name, p) in self.model.params.iter() {
            ck.put_tensor(format!("param/{name}"), &p.value);
            if let (Some(m), Some(v)) = (&self.opt.m[id.index()], &self.opt.v[id.index()]) {
                ck.put_tensor(format!("adam_m/{name}"), &Tensor::new(p.value.shape().to_vec(), m.clone())?);
                ck.put_tensor(format!("adam_v/{name}"), &Tensor::new(p.value.shape().to_vec(), v.clone())?);
            }
        }
        Ok(ck)
    }

    /// Restores parameters, moments, RNG and data position from a checkpoint
    /// written by a run with the same configuration.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let hash = ck.u64s("meta/config_hash")?;
        if hash != [self.cfg.hash()] {
            return Err(config("checkpoint was written with a different training configuration"));
        }
        load_params(&mut self.model, ck, true)?;
        let progress = ck.u64s("meta/progress")?;
        let [step, total, drawn, t] = progress[..] else {
            return Err(Error::Data("corrupt progress entry in checkpoint".into()));
        };
        if total as usize != self.total_steps {
            return Err(config("checkpoint was written for a different step budget"));
        }
        self.step = step as usize;
        self.opt.t = t;
        for (id, name, p) in self.model.params.iter() {
            let (mk, vk) = (format!("adam_m/{name}"), format!("adam_v/{name}"));
            if ck.contains(&mk) {
                let m: Tensor<F> = ck.tensor(&mk)?;
                let v: Tensor<F> = ck.tensor(&vk)?;
                if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                    return Err(Error::Data(format!("moment shape mismatch for {name}")));
                }
                self.opt.m[id.index()] = Some(m.into_vec());
                self.opt.v[id.index()] = Some(v.into_vec());
            } else {
                self.opt.m[id.index()] = None;
                self.opt.v[id.index()] = None;
            }
        }
        self.sampler = rng_from_bytes(ck.bytes("meta/sampler_rng")?)?;
        self.stream = self.registry.stream(self.cfg.seed);
        for _ in 0..drawn {
            self.stream.next();
        }
        self.drawn = drawn;
        Ok(())
    }

    fn save(&self, file: &str) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            self.checkpoint()?.save(&dir.join(file))?;
        }
        Ok(())
    }

    fn log_line(&self, line: &str) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            let path = dir.join("metrics.jsonl");
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
            writeln!(f, "{line}").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        }
        Ok(())
    }

    /// Prepares the output directory; on resume, drops log lines past the
    /// restored step.
    fn prepare_output(&self) -> Result<()> {
        let Some(dir) = &self.out_dir else { return Ok(()) };
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let info = RunInfo {
            config: self.cfg.clone(),
            trainable_params: self.trainable_count(),
            total_steps: self.total_steps,
            datasets: self
                .registry
                .datasets
                .iter()
                .zip(&self.registry.weights)
                .map(|(d, &weight)| DatasetInfo { name: d.name.clone(), images: d.images.len(), weight, vocabulary: d.vocabulary.clone() })
                .collect(),
        };
        let path = dir.join("run.json");
        let text = serde_json::to_string_pretty(&info).expect("serializes");
        fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        let path = dir.join("metrics.jsonl");
        let kept = if self.step == 0 {
            String::new()
        } else {
            let text = fs::read_to_string(&path).unwrap_or_default();
            text.lines()
                .filter(|l| {
                    serde_json::from_str::<serde_json::Value>(l)
                        .ok()
                        .and_then(|v| v.get("step").and_then(serde_json::Value::as_u64))
                        .is_some_and(|s| s as usize <= self.step)
                })
                .map(|l| format!("{l}\n"))
                .collect()
        };
        fs::write(&path, kept).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Trains to the step budget, logging every step and checkpointing at
    /// epoch boundaries. A numeric failure leaves `last_good.omck` holding
    /// the parameters from before the failing step.
    pub fn run(&mut self) -> Result<Vec<StepLog>> {
        self.prepare_output()?;
        let mut logs = Vec::new();
        while self.step < self.total_steps {
            let log = match self.train_step() {
                Ok(l) => l,
                Err(e @ Error::Numeric(_)) => {
                    self.save("last_good.omck")?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            self.log_line(&serde_json::to_string(&log).expect("serializes"))?;
            logs.push(log);
            let s = self.step;
            let end = s == self.total_steps;
            if s % self.steps_per_epoch == 0 || end || (self.cfg.checkpoint_every > 0 && s % self.cfg.checkpoint_every == 0) {
                self.save("checkpoint.omck")?;
            }
            let eval_due = self.cfg.eval_images > 0 && (end || (self.cfg.eval_every > 0 && s % self.cfg.eval_every == 0));
            if eval_due {
                let eval = self.evaluate(self.cfg.eval_images)?;
                self.log_line(&serde_json::to_string(&EvalLog { step: s, eval }).expect("serializes"))?;
            }
        }
        Ok(logs)
    }
}

fn numeric(e: Error) -> Error {
    match e {
        Error::Tensor(omdet_tensor::TensorError::NonFinite { op }) => Error::Numeric(format!("loss ({op})")),
        e => e,
    }
}
