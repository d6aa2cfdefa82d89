//! Bipartite matching of proposals to ground truths and the set-prediction
//! loss built on it.

use omdet_tensor::{focal_term, Float, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};
use crate::geometry::{cxcywh_to_xyxy, cxcywh_to_xyxy_var, giou, giou_var};
use crate::mdn::ForwardOut;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchAssignment {
    /// `(row, column)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

/// Minimum-cost assignment of `min(R, C)` pairs.
///
/// Shortest augmenting paths with potentials, O(n²m) for n = min(R, C).
/// Rows are added in index order and columns scanned in index order with a
/// strict comparison, so ties go to the lowest indices.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<MatchAssignment> {
    let r = cost.len();
    let c = cost.first().map_or(0, Vec::len);
    if r == 0 || c == 0 {
        return Err(usage("hungarian: empty cost matrix"));
    }
    if cost.iter().any(|row| row.len() != c) {
        return Err(usage("hungarian: ragged cost matrix"));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(usage("hungarian: non-finite cost entry"));
    }
    let transposed = r > c;
    let (n, m) = if transposed { (c, r) } else { (r, c) };
    let a = |i: usize, j: usize| if transposed { cost[j][i] } else { cost[i][j] };

    // 1-based; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| if transposed { (j - 1, p[j] - 1) } else { (p[j] - 1, j - 1) })
        .collect();
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
    Ok(MatchAssignment { pairs, cost: total })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_cls: 2.0, lambda_l1: 5.0, lambda_giou: 2.0, focal_alpha: 0.25, focal_gamma: 2.0 }
    }
}

/// Focal loss of a positive minus that of a negative at the same logit.
pub fn focal_cost(logit: f64, alpha: f64, gamma: f64) -> f64 {
    focal_term(logit, 1.0, alpha, gamma).0 - focal_term(logit, 0.0, alpha, gamma).0
}

/// Ground truth remapped into the current task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Column of the task slot holding this object's label.
    pub class: usize,
    /// Normalized cxcywh.
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Targets {
    pub gts: Vec<GroundTruth>,
}

fn check_classes(gts: &[GroundTruth], pad: &[bool]) -> Result<()> {
    for g in gts {
        if g.class >= pad.len() || pad[g.class] {
            return Err(usage(format!("ground-truth class {} is not a word of the task", g.class)));
        }
    }
    Ok(())
}

/// `[N][M]` cost between predicted (logits `[N][k]`, normalized cxcywh boxes)
/// and ground truths. GIoU is measured in pixels of a `w`×`h` image.
pub fn matching_cost(
    logits: &[Vec<f64>],
    boxes: &[[f64; 4]],
    gts: &[GroundTruth],
    pad: &[bool],
    image: (f64, f64),
    cfg: &LossConfig,
) -> Result<Vec<Vec<f64>>> {
    check_classes(gts, pad)?;
    if logits.len() != boxes.len() {
        return Err(usage("matching_cost: logits and boxes disagree on N"));
    }
    let (w, h) = image;
    Ok(logits
        .iter()
        .zip(boxes)
        .map(|(row, b)| {
            let pb = cxcywh_to_xyxy(*b, w, h);
            gts.iter()
                .map(|g| {
                    let cls = focal_cost(row[g.class], cfg.focal_alpha, cfg.focal_gamma);
                    let l1: f64 = b.iter().zip(&g.bbox).map(|(x, y)| (x - y).abs()).sum();
                    let gi = giou(pb, cxcywh_to_xyxy(g.bbox, w, h));
                    cfg.lambda_cls * cls + cfg.lambda_l1 * l1 + cfg.lambda_giou * (1.0 - gi)
                })
                .collect()
        })
        .collect())
}

/// Unweighted per-term values (already divided by the GT count).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLoss {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub stages: Vec<StageLoss>,
    pub matched: usize,
    pub num_gt: usize,
}

/// The loss on the tape, its breakdown, and the matchings used
/// (`[image][stage]`).
pub struct SetLoss {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub matches: Vec<Vec<MatchAssignment>>,
}

const GIOU_EPS: f64 = 1e-7;

/// Stage-summed set-prediction loss over a batch. Each stage is matched
/// afresh unless `fixed` supplies the assignments (`[image][stage]`); the
/// assignment is a constant either way.
pub fn set_prediction_loss<F: Float>(
    tape: &mut Tape<F>,
    outs: &[ForwardOut],
    targets: &[Targets],
    cfg: &LossConfig,
    fixed: Option<&[Vec<MatchAssignment>]>,
) -> Result<SetLoss> {
    if outs.len() != targets.len() || outs.is_empty() {
        return Err(usage("set_prediction_loss: need one target set per image"));
    }
    let stages = outs[0].stages.len();
    if outs.iter().any(|o| o.stages.len() != stages) {
        return Err(usage("set_prediction_loss: images disagree on stage count"));
    }
    if let Some(f) = fixed {
        if f.len() != outs.len() || f.iter().any(|s| s.len() != stages) {
            return Err(usage("set_prediction_loss: fixed matches have the wrong shape"));
        }
    }
    let num_gt: usize = targets.iter().map(|t| t.gts.len()).sum();
    let norm = 1.0 / num_gt.max(1) as f64;
    let (alpha, gamma) = (F::lit(cfg.focal_alpha), F::lit(cfg.focal_gamma));

    let mut breakdown = LossBreakdown { stages: vec![StageLoss::default(); stages], num_gt, ..Default::default() };
    let mut matches = vec![Vec::with_capacity(stages); outs.len()];
    let mut terms: Vec<Var> = Vec::new();
    for (img, (out, tg)) in outs.iter().zip(targets).enumerate() {
        check_classes(&tg.gts, &out.pad_mask)?;
        let k = out.pad_mask.len();
        let (w, h) = (out.image_size.0 as f64, out.image_size.1 as f64);
        let m = tg.gts.len();
        for (s, sv) in out.stages.iter().enumerate() {
            let n = tape.shape(sv.logits)[0];
            if m > n {
                return Err(usage(format!("{m} ground truths but only {n} proposals")));
            }
            let assignment = match fixed {
                Some(f) => f[img][s].clone(),
                None if m == 0 => MatchAssignment { pairs: Vec::new(), cost: 0.0 },
                None => {
                    let lv = tape.value(sv.logits).to_f64_vec();
                    let bv = tape.value(sv.boxes).to_f64_vec();
                    let logits: Vec<Vec<f64>> = lv.chunks(k).map(<[f64]>::to_vec).collect();
                    let boxes: Vec<[f64; 4]> = bv.chunks(4).map(|b| [b[0], b[1], b[2], b[3]]).collect();
                    hungarian(&matching_cost(&logits, &boxes, &tg.gts, &out.pad_mask, (w, h), cfg)?)?
                }
            };

            let mut targets01 = vec![F::zero(); n * k];
            for &(i, j) in &assignment.pairs {
                targets01[i * k + tg.gts[j].class] = F::one();
            }
            let weights: Vec<F> = (0..n * k).map(|e| if out.pad_mask[e % k] { F::zero() } else { F::one() }).collect();
            let focal = tape.focal_loss(sv.logits, &targets01, &weights, alpha, gamma)?;
            let cls = tape.scale(focal, F::lit(norm))?;
            let st = &mut breakdown.stages[s];
            st.cls += tape.value(cls).item().as_f64();
            terms.push(tape.scale(cls, F::lit(cfg.lambda_cls))?);

            if !assignment.pairs.is_empty() {
                let rows: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
                let gt_norm: Vec<f64> = assignment.pairs.iter().flat_map(|p| tg.gts[p.1].bbox).collect();
                let gt_abs: Vec<f64> =
                    assignment.pairs.iter().flat_map(|p| cxcywh_to_xyxy(tg.gts[p.1].bbox, w, h)).collect();
                let mm = rows.len();
                let pred = tape.index_select(sv.boxes, &rows)?;
                let gtv = tape.constant(Tensor::from_f64(vec![mm, 4], &gt_norm)?);
                let diff = tape.sub(pred, gtv)?;
                let diff = tape.abs(diff)?;
                let l1 = tape.sum(diff)?;
                let l1 = tape.scale(l1, F::lit(norm))?;
                st.l1 += tape.value(l1).item().as_f64();
                terms.push(tape.scale(l1, F::lit(cfg.lambda_l1))?);

                let pxy = cxcywh_to_xyxy_var(tape, pred)?;
                let size = tape.constant(Tensor::from_f64(vec![4], &[w, h, w, h])?);
                let pxy = tape.mul(pxy, size)?;
                let gxy = tape.constant(Tensor::from_f64(vec![mm, 4], &gt_abs)?);
                let g = giou_var(tape, pxy, gxy, GIOU_EPS)?;
                let g = tape.sum(g)?;
                // (mm - Σ giou) / num_gt
                let gl = tape.affine(g, F::lit(-norm), F::lit(mm as f64 * norm))?;
                st.giou += tape.value(gl).item().as_f64();
                terms.push(tape.scale(gl, F::lit(cfg.lambda_giou))?);
                breakdown.matched += mm;
            }
            matches[img].push(assignment);
        }
    }
    for st in &mut breakdown.stages {
        st.total = cfg.lambda_cls * st.cls + cfg.lambda_l1 * st.l1 + cfg.lambda_giou * st.giou;
        breakdown.cls += st.cls;
        breakdown.l1 += st.l1;
        breakdown.giou += st.giou;
    }
    breakdown.total = breakdown.stages.iter().map(|s| s.total).sum();
    let mut flat = Vec::with_capacity(terms.len());
    for t in terms {
        flat.push(tape.reshape(t, &[1])?);
    }
    let stacked = tape.concat(&flat, 0)?;
    let loss = tape.sum(stacked)?;
    Ok(SetLoss { loss, breakdown, matches })
}
