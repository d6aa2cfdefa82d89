//! Small convolutional backbone plus a top-down feature pyramid.

use omdet_tensor::{Float, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::nn::{Bound, Conv, Group, Init, Norm, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    /// Output channels of the four stages C2..C5.
    pub channels: [usize; 4],
    /// Channel count of every pyramid level.
    pub d_fpn: usize,
    pub norm_groups: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { stem_channels: 16, channels: [32, 64, 128, 256], d_fpn: 64, norm_groups: 8 }
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    conv: Conv,
    norm: Norm,
    groups: usize,
}

impl Block {
    fn new<F: Float>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        inp: usize,
        out: usize,
        stride: usize,
        groups: usize,
    ) -> Self {
        Block {
            conv: Conv::new(store, init, &format!("{name}.conv"), inp, out, 3, stride, Group::Backbone),
            norm: Norm::new(store, &format!("{name}.norm"), out, Group::Backbone),
            groups: norm_groups(out, groups),
        }
    }

    fn forward<F: Float>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, p, x)?;
        let y = self.norm.group(tape, p, y, self.groups)?;
        Ok(tape.gelu(y)?)
    }
}

/// Largest divisor of `channels` not above `wanted`.
fn norm_groups(channels: usize, wanted: usize) -> usize {
    (1..=wanted.max(1)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct Backbone {
    stem: Block,
    /// Per stage: the stride-2 block then a stride-1 block.
    stages: Vec<[Block; 2]>,
}

impl Backbone {
    pub fn new<F: Float>(store: &mut ParamStore<F>, init: &mut Init, cfg: &BackboneConfig) -> Result<Self> {
        if cfg.stem_channels == 0 || cfg.channels.contains(&0) {
            return Err(config("backbone channel counts must be positive"));
        }
        let stem = Block::new(store, init, "backbone.stem", 3, cfg.stem_channels, 2, cfg.norm_groups);
        let mut inp = cfg.stem_channels;
        let mut stages = Vec::new();
        for (i, &out) in cfg.channels.iter().enumerate() {
            let name = format!("backbone.c{}", i + 2);
            stages.push([
                Block::new(store, init, &format!("{name}.0"), inp, out, 2, cfg.norm_groups),
                Block::new(store, init, &format!("{name}.1"), out, out, 1, cfg.norm_groups),
            ]);
            inp = out;
        }
        Ok(Backbone { stem, stages })
    }

    /// `image: [3, H, W]` with H, W divisible by 32 → C2..C5.
    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, p: &Bound, image: Var) -> Result<Vec<Var>> {
        let s = tape.shape(image).to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(config(format!("backbone expects a [3, H, W] image, got {s:?}")));
        }
        if s[1] % 32 != 0 || s[2] % 32 != 0 || s[1] == 0 || s[2] == 0 {
            return Err(config(format!("image height and width must be positive multiples of 32, got {}x{}", s[2], s[1])));
        }
        let mut x = self.stem.forward(tape, p, image)?;
        let mut out = Vec::with_capacity(4);
        for [down, same] in &self.stages {
            x = down.forward(tape, p, x)?;
            x = same.forward(tape, p, x)?;
            out.push(x);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct Fpn {
    lateral: Vec<Conv>,
    output: Vec<Conv>,
    channels: [usize; 4],
}

impl Fpn {
    pub fn new<F: Float>(store: &mut ParamStore<F>, init: &mut Init, cfg: &BackboneConfig) -> Self {
        let mut lateral = Vec::new();
        let mut output = Vec::new();
        for (i, &c) in cfg.channels.iter().enumerate() {
            let l = i + 2;
            lateral.push(Conv::new(store, init, &format!("fpn.lateral{l}"), c, cfg.d_fpn, 1, 1, Group::Fpn));
            output.push(Conv::new(store, init, &format!("fpn.output{l}"), cfg.d_fpn, cfg.d_fpn, 3, 1, Group::Fpn));
        }
        Fpn { lateral, output, channels: cfg.channels }
    }

    /// C2..C5 → P2..P5: lateral 1×1, nearest ×2 top-down addition, 3×3 smoothing.
    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, p: &Bound, c: &[Var]) -> Result<Vec<Var>> {
        if c.len() != 4 {
            return Err(config(format!("fpn expects 4 stage maps, got {}", c.len())));
        }
        for (i, &v) in c.iter().enumerate() {
            let s = tape.shape(v);
            if s.len() != 3 || s[0] != self.channels[i] {
                return Err(config(format!("fpn input C{} has shape {s:?}, expected {} channels", i + 2, self.channels[i])));
            }
        }
        let mut top = self.lateral[3].forward(tape, p, c[3])?;
        let mut merged = vec![top];
        for i in (0..3).rev() {
            let lat = self.lateral[i].forward(tape, p, c[i])?;
            let up = tape.upsample2x(top)?;
            top = tape.add(lat, up)?;
            merged.push(top);
        }
        merged.reverse();
        merged.iter().zip(&self.output).map(|(&m, conv)| conv.forward(tape, p, m)).collect()
    }
}
