//! The multimodal detection network: learnable proposals refined by stacked
//! fusion stages, scored against task label embeddings.

use indexmap::IndexMap;
use omdet_tensor::{Float, Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, Fpn};
use crate::data::Image;
use crate::error::{config, usage, Error, Result};
use crate::geometry::{decode_boxes, PoolCfg};
use crate::nn::{mask_rows, Attention, Bound, Ffn, Group, Init, Linear, Norm, ParamId, ParamStore};
use crate::text::{EmbeddingProvider, SetEncoder, Slot};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub d_text: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    /// Number of proposals N.
    pub proposals: usize,
    /// Number of stacked stages S.
    pub stages: usize,
    pub heads: usize,
    /// Maximum task size K.
    pub max_task: usize,
    pub gamma: f64,
    pub learnable_gamma: bool,
    /// Language only in the final classification (ablation).
    pub shallow: bool,
    pub pool: PoolCfg,
    pub ffn_hidden: usize,
    /// Standard deviation of the initial proposal features.
    pub proposal_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            d_text: 32,
            encoder_layers: 2,
            encoder_heads: 4,
            proposals: 30,
            stages: 6,
            heads: 4,
            max_task: 8,
            gamma: 20.0,
            learnable_gamma: false,
            shallow: false,
            pool: PoolCfg::default(),
            ffn_hidden: 128,
            proposal_std: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn d(&self) -> usize {
        self.backbone.d_fpn
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        if self.proposals == 0 || self.stages == 0 || self.max_task == 0 {
            return Err(config("proposals, stages and max_task must be >= 1"));
        }
        if d % 4 != 0 {
            return Err(config(format!("model dim {d} must be divisible by 4 (dynamic conv bottleneck)")));
        }
        if self.heads == 0 || d % self.heads != 0 || self.encoder_heads == 0 || d % self.encoder_heads != 0 {
            return Err(config(format!("model dim {d} must be divisible by the head counts")));
        }
        if self.d_text == 0 || self.ffn_hidden == 0 || self.pool.pool == 0 || self.pool.sampling == 0 {
            return Err(config("d_text, ffn_hidden, pool and sampling must be >= 1"));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(config("gamma must be positive"));
        }
        Ok(())
    }
}

/// Dynamic interaction: two per-proposal 1×1 kernels generated from the
/// proposal feature, applied to its pooled region.
#[derive(Clone, Debug)]
struct DynamicConv {
    params: Linear,
    norm1: Norm,
    norm2: Norm,
    out: Linear,
    norm3: Norm,
}

#[derive(Clone, Debug)]
struct Stage {
    attn: Attention,
    dynamic: DynamicConv,
    post_norm: Norm,
    ffn: Ffn,
    reg: [Linear; 2],
    cls: [Linear; 2],
}

impl Stage {
    fn new<F: Float>(store: &mut ParamStore<F>, init: &mut Init, s: usize, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d();
        let dd = d / 4;
        let g = Group::Mdn;
        let n = |part: &str| format!("mdn.stage{s}.{part}");
        let p2 = cfg.pool.pool * cfg.pool.pool;
        let reg_out = Linear::new(store, init, &n("reg.1"), d, 4, g);
        // Zero deltas at init: every stage starts by passing boxes through.
        *store.value_mut(reg_out.w) = Tensor::zeros(vec![4, d]);
        Ok(Stage {
            attn: Attention::new(store, init, &n("attn"), d, cfg.heads, g)?,
            dynamic: DynamicConv {
                params: Linear::new(store, init, &n("dynamic.params"), d, 2 * d * dd, g),
                norm1: Norm::new(store, &n("dynamic.norm1"), dd, g),
                norm2: Norm::new(store, &n("dynamic.norm2"), d, g),
                out: Linear::new(store, init, &n("dynamic.out"), p2 * d, d, g),
                norm3: Norm::new(store, &n("dynamic.norm3"), d, g),
            },
            post_norm: Norm::new(store, &n("post_norm"), d, g),
            ffn: Ffn::new(store, init, &n("ffn"), d, cfg.ffn_hidden, g),
            reg: [Linear::new(store, init, &n("reg.0"), d, d, g), reg_out],
            cls: [Linear::new(store, init, &n("cls.0"), d, d, g), Linear::new(store, init, &n("cls.1"), d, d, g)],
        })
    }
}

/// Tape handles produced by one stage.
#[derive(Clone, Copy, Debug)]
pub struct StageVars {
    /// `[N, k]` logits (pad columns are meaningless; see `pad_mask`).
    pub logits: Var,
    /// `[N, 4]` normalized cxcywh boxes.
    pub boxes: Var,
    pub q: Var,
    pub t: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOut {
    pub stages: Vec<StageVars>,
    pub pad_mask: Vec<bool>,
    pub image_size: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct Model<F> {
    pub cfg: ModelConfig,
    pub params: ParamStore<F>,
    backbone: Backbone,
    fpn: Fpn,
    task_encoder: SetEncoder,
    label_encoder: SetEncoder,
    q0: ParamId,
    b0: ParamId,
    gamma: Option<ParamId>,
    stages: Vec<Stage>,
    word_table: IndexMap<String, ParamId>,
}

pub const WORD_TABLE_PREFIX: &str = "word_table.";

impl<F: Float> Model<F> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let d = cfg.d();
        let backbone = Backbone::new(&mut store, &mut init, &cfg.backbone)?;
        let fpn = Fpn::new(&mut store, &mut init, &cfg.backbone);
        let enc = |store: &mut ParamStore<F>, init: &mut Init, name, group| {
            SetEncoder::new(store, init, name, cfg.d_text, d, cfg.encoder_layers, cfg.encoder_heads, group)
        };
        let task_encoder = enc(&mut store, &mut init, "task_encoder", Group::TaskEncoder)?;
        let label_encoder = enc(&mut store, &mut init, "label_encoder", Group::LabelEncoder)?;
        let q0 = store.add("mdn.proposal_features", init.normal(&[cfg.proposals, d], cfg.proposal_std), Group::Mdn);
        let b0_row = [0.5, 0.5, 1.0, 1.0];
        let b0: Vec<f64> = (0..cfg.proposals).flat_map(|_| b0_row).collect();
        let b0 = store.add("mdn.proposal_boxes", Tensor::from_f64(vec![cfg.proposals, 4], &b0)?, Group::Mdn);
        let gamma = cfg
            .learnable_gamma
            .then(|| store.add("mdn.gamma", Tensor::from_f64(vec![1], &[cfg.gamma]).expect("scalar"), Group::Mdn));
        let stages = (0..cfg.stages).map(|s| Stage::new(&mut store, &mut init, s, &cfg)).collect::<Result<_>>()?;
        Ok(Model {
            cfg,
            params: store,
            backbone,
            fpn,
            task_encoder,
            label_encoder,
            q0,
            b0,
            gamma,
            stages,
            word_table: IndexMap::new(),
        })
    }

    /// Adds trainable raw vectors for `words`, initialized from `provider`.
    /// Tasks containing these words read their raw embedding from the table.
    pub fn add_word_table(&mut self, words: &[String], provider: &EmbeddingProvider) -> Result<()> {
        if provider.dim() != self.cfg.d_text {
            return Err(config(format!("provider dim {} != d_text {}", provider.dim(), self.cfg.d_text)));
        }
        for w in words {
            if self.word_table.contains_key(w) {
                continue;
            }
            let v: Vec<F> = provider.embed(w)?.into_iter().map(F::lit).collect();
            let id = self.params.add(format!("{WORD_TABLE_PREFIX}{w}"), Tensor::new(vec![v.len()], v)?, Group::WordTable);
            self.word_table.insert(w.clone(), id);
        }
        Ok(())
    }

    pub fn word_table(&self) -> impl Iterator<Item = &str> {
        self.word_table.keys().map(String::as_str)
    }

    pub fn proposal_ids(&self) -> (ParamId, ParamId) {
        (self.q0, self.b0)
    }

    pub fn cast<G: Float>(&self) -> Model<G> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            backbone: self.backbone.clone(),
            fpn: self.fpn.clone(),
            task_encoder: self.task_encoder.clone(),
            label_encoder: self.label_encoder.clone(),
            q0: self.q0,
            b0: self.b0,
            gamma: self.gamma,
            stages: self.stages.clone(),
            word_table: self.word_table.clone(),
        }
    }

    fn raw_embeddings(&self, tape: &mut Tape<F>, p: &Bound, provider: &EmbeddingProvider, slots: &[Slot]) -> Result<Var> {
        let d = self.cfg.d_text;
        if provider.dim() != d {
            return Err(config(format!("provider dim {} != d_text {d}", provider.dim())));
        }
        if !slots.iter().flatten().any(|w| self.word_table.contains_key(w)) {
            let (raw, _) = crate::text::embed_labels::<F>(provider, slots)?;
            return Ok(tape.constant(raw));
        }
        let mut rows = Vec::with_capacity(slots.len());
        for s in slots {
            let row = match s.as_ref().and_then(|w| self.word_table.get(w)) {
                Some(&id) => tape.reshape(p.var(id), &[1, d])?,
                None => {
                    let (raw, _) = crate::text::embed_labels::<F>(provider, std::slice::from_ref(s))?;
                    tape.constant(raw)
                }
            };
            rows.push(row);
        }
        Ok(tape.concat(&rows, 0)?)
    }

    /// Runs encoders, backbone, pyramid and all stages on one image.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        image: &Image,
        slots: &[Slot],
        provider: &EmbeddingProvider,
    ) -> Result<ForwardOut> {
        let k = slots.len();
        if k == 0 || slots.iter().all(Option::is_none) {
            return Err(usage("task has no words"));
        }
        if k > self.cfg.max_task {
            return Err(usage(format!("task has {k} slots, more than K = {}", self.cfg.max_task)));
        }
        let pad: Vec<bool> = slots.iter().map(Option::is_none).collect();
        let raw = self.raw_embeddings(tape, p, provider, slots)?;
        let t0 = if self.cfg.shallow { None } else { Some(self.task_encoder.forward(tape, p, raw, &pad)?) };
        let labels = self.label_encoder.forward(tape, p, raw, &pad)?;

        let img = tape.constant(image.to_tensor());
        let c = self.backbone.forward(tape, p, img)?;
        let pyramid = self.fpn.forward(tape, p, &c)?;

        let mut q = p.var(self.q0);
        let mut b = p.var(self.b0);
        let mut t = t0.unwrap_or(labels);
        let mut out = Vec::with_capacity(self.stages.len());
        for (s, stage) in self.stages.iter().enumerate() {
            let sv = self
                .stage(tape, p, stage, &pyramid, image, q, b, t, labels, &pad)
                .map_err(|e| match e {
                    Error::Tensor(TensorError::NonFinite { op }) => Error::Numeric(format!("mdn stage {s} ({op})")),
                    e => e,
                })?;
            (q, b, t) = (sv.q, sv.boxes, sv.t);
            out.push(sv);
        }
        Ok(ForwardOut { stages: out, pad_mask: pad, image_size: (image.width, image.height) })
    }

    #[allow(clippy::too_many_arguments)]
    fn stage(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        st: &Stage,
        pyramid: &[Var],
        image: &Image,
        q: Var,
        b: Var,
        t: Var,
        labels: Var,
        pad: &[bool],
    ) -> Result<StageVars> {
        let n = self.cfg.proposals;
        let k = pad.len();
        let d = self.cfg.d();
        let dd = d / 4;
        let pp = self.cfg.pool.pool * self.cfg.pool.pool;

        let abs = decode_boxes(tape, b, image.width as f64, image.height as f64)?;
        let v = crate::geometry::pyramid_roi_align(tape, pyramid, abs, self.cfg.pool)?;
        let v = tape.reshape(v, &[n, d, pp])?;
        let v = tape.permute(v, &[0, 2, 1])?;

        let (q1, t1) = if self.cfg.shallow {
            (st.attn.forward(tape, p, q, None)?, t)
        } else {
            let x = tape.concat(&[q, t], 0)?;
            let mask: Vec<bool> = std::iter::repeat_n(false, n).chain(pad.iter().copied()).collect();
            let y = st.attn.forward(tape, p, x, Some(&mask))?;
            let q1 = tape.slice(y, 0, 0, n)?;
            let t1 = tape.slice(y, 0, n, n + k)?;
            let keep: Vec<bool> = pad.iter().map(|m| !m).collect();
            (q1, mask_rows(tape, t1, &keep)?)
        };

        let dc = &st.dynamic;
        let kernels = dc.params.forward(tape, p, q1)?;
        let k1 = tape.slice(kernels, 1, 0, d * dd)?;
        let k1 = tape.reshape(k1, &[n, d, dd])?;
        let k2 = tape.slice(kernels, 1, d * dd, 2 * d * dd)?;
        let k2 = tape.reshape(k2, &[n, dd, d])?;
        let h = tape.matmul(v, k1)?;
        let h = dc.norm1.layer(tape, p, h)?;
        let h = tape.relu(h)?;
        let h = tape.matmul(h, k2)?;
        let h = dc.norm2.layer(tape, p, h)?;
        let h = tape.relu(h)?;
        let h = tape.reshape(h, &[n, pp * d])?;
        let h = dc.out.forward(tape, p, h)?;
        let h = dc.norm3.layer(tape, p, h)?;
        let h = tape.relu(h)?;
        let q2 = tape.add(q1, h)?;
        let q2 = st.post_norm.layer(tape, p, q2)?;
        let q2 = st.ffn.forward(tape, p, q2)?;

        let r = st.reg[0].forward(tape, p, q2)?;
        let r = tape.relu(r)?;
        let delta = st.reg[1].forward(tape, p, r)?;
        let moved = tape.add(b, delta)?;
        let boxes = tape.clamp(moved, F::zero(), F::one())?;

        let c = st.cls[0].forward(tape, p, q2)?;
        let c = tape.relu(c)?;
        let c = st.cls[1].forward(tape, p, c)?;
        let cos = tape.cosine_similarity(c, labels)?;
        let logits = match self.gamma {
            Some(g) => tape.mul(cos, p.var(g))?,
            None => tape.scale(cos, F::lit(self.cfg.gamma))?,
        };
        Ok(StageVars { logits, boxes, q: q2, t: t1 })
    }

    /// Forward pass with every parameter held constant.
    pub fn infer(&self, image: &Image, slots: &[Slot], provider: &EmbeddingProvider) -> Result<Inference> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, |_, _| false);
        let out = self.forward(&mut tape, &p, image, slots, provider)?;
        let (w, h) = (image.width as f64, image.height as f64);
        let stages = out
            .stages
            .iter()
            .map(|s| {
                let logits = tape.value(s.logits).to_f64_vec();
                let boxes = tape.value(s.boxes).to_f64_vec();
                StageResult {
                    logits: logits
                        .chunks(slots.len())
                        .map(|row| row.iter().zip(&out.pad_mask).map(|(&v, &m)| if m { f64::NEG_INFINITY } else { v }).collect())
                        .collect(),
                    boxes: boxes.chunks(4).map(|b| to_abs([b[0], b[1], b[2], b[3]], w, h)).collect(),
                }
            })
            .collect();
        Ok(Inference { stages, pad_mask: out.pad_mask })
    }

    /// Scored detections from the last stage: every non-pad (proposal, class)
    /// pair with `sigmoid(logit) >= score_thresh`, best first, at most `max_det`.
    pub fn detect(
        &self,
        image: &Image,
        slots: &[Slot],
        provider: &EmbeddingProvider,
        score_thresh: f64,
        max_det: usize,
    ) -> Result<Vec<Detection>> {
        Ok(self.infer(image, slots, provider)?.detections(score_thresh, max_det))
    }
}

/// Normalized cxcywh → absolute xyxy clamped to the image (same arithmetic
/// as the on-tape decode).
fn to_abs(b: [f64; 4], w: f64, h: f64) -> [f64; 4] {
    let n = [b[0] - 0.5 * b[2], b[1] - 0.5 * b[3], b[0] + 0.5 * b[2], b[1] + 0.5 * b[3]];
    let n = n.map(|v| v.clamp(0.0, 1.0));
    [n[0] * w, n[1] * h, n[2] * w, n[3] * h]
}

/// Materialized per-stage outputs; pad logits are `-inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct StageResult {
    pub logits: Vec<Vec<f64>>,
    /// Absolute xyxy, clamped to the image.
    pub boxes: Vec<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub stages: Vec<StageResult>,
    pub pad_mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub bbox: [f64; 4],
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Absolute xyxy.
    pub bbox: [f64; 4],
    pub class_index: usize,
    pub score: f64,
    pub proposal: usize,
    /// The same proposal and class at every stage.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<TracePoint>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Inference {
    pub fn detections(&self, score_thresh: f64, max_det: usize) -> Vec<Detection> {
        let Some(last) = self.stages.last() else { return Vec::new() };
        let mut dets = Vec::new();
        for (i, row) in last.logits.iter().enumerate() {
            for (c, &l) in row.iter().enumerate() {
                if self.pad_mask[c] {
                    continue;
                }
                let score = sigmoid(l);
                if score >= score_thresh {
                    dets.push(Detection { bbox: last.boxes[i], class_index: c, score, proposal: i, trace: Vec::new() });
                }
            }
        }
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        dets.truncate(max_det);
        for d in &mut dets {
            d.trace = self
                .stages
                .iter()
                .map(|s| TracePoint { bbox: s.boxes[d.proposal], score: sigmoid(s.logits[d.proposal][d.class_index]) })
                .collect();
        }
        dets
    }
}
