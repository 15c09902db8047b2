//! Inter-slice fusion of pyramid levels, a single-stage per-position head,
//! target assignment, losses, and decoding with NMS.

use std::cmp::Ordering;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::autodiff::{ParamStore, Tape, Var};
use crate::backbone::{conv_weight, LEVELS};
use crate::boxes::{iou, LesionBox};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vdformer::{init_vdformer_params, vd_former};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    None,
    P3d,
    C3d,
    Vdformer,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [FusionMode::None, FusionMode::P3d, FusionMode::C3d, FusionMode::Vdformer];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::None => "none",
            FusionMode::P3d => "p3d",
            FusionMode::C3d => "c3d",
            FusionMode::Vdformer => "vdformer",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion mode `{s}` (none|p3d|c3d|vdformer)")))
    }
}

/// Parameter prefix of the fusion module of pyramid level `level`.
pub fn fusion_prefix(mode: FusionMode, level: usize) -> String {
    format!("{}.level{level}", mode.name())
}

/// Adds the fusion parameters for one level (`channels` = pyramid width).
pub fn init_fusion_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    mode: FusionMode,
    level: usize,
    channels: usize,
    vd: &AttentionConfig,
    rng: &mut R,
) -> Result<()> {
    let p = fusion_prefix(mode, level);
    let f = channels;
    match mode {
        FusionMode::None => {}
        FusionMode::Vdformer => {
            if vd.channels != f {
                return Err(Error::Config(format!(
                    "vdformer channels {} must equal pyramid channels {f}",
                    vd.channels
                )));
            }
            init_vdformer_params(store, &p, vd, rng)?;
        }
        FusionMode::C3d => {
            // fan-in covers all three taps
            let std = (2.0 / (f * 27) as f64).sqrt();
            for k in 0..3 {
                store.insert(format!("{p}.tap{k}.weight"), Tensor::randn(&[f, f, 3, 3], std, rng))?;
            }
            store.insert(format!("{p}.bias"), Tensor::zeros(&[f]))?;
        }
        FusionMode::P3d => {
            store.insert(format!("{p}.spatial.weight"), conv_weight(f, f, 3, rng))?;
            store.insert(format!("{p}.spatial.bias"), Tensor::zeros(&[f]))?;
            let std = (2.0 / (f * 3) as f64).sqrt();
            for k in 0..3 {
                store.insert(format!("{p}.temporal.tap{k}.weight"), Tensor::randn(&[f, f, 1, 1], std, rng))?;
            }
            store.insert(format!("{p}.temporal.bias"), Tensor::zeros(&[f]))?;
        }
    }
    Ok(())
}

fn require(store: &ParamStore, name: &str, mode: FusionMode) -> Result<()> {
    if store.index_of(name).is_none() {
        return Err(Error::Config(format!(
            "fusion mode `{}` needs parameter `{name}`, which the model does not have",
            mode.name()
        )));
    }
    Ok(())
}

/// `Σ_dt conv3x3(x[c+dt-1], W_dt) + b` over the taps present in `feats`.
/// This is the pre-activation of the 3×3×3 fusion; taps outside the stack
/// see zero features and are skipped.
pub fn c3d_linear(tape: &mut Tape, feats: &[Var], store: &ParamStore, prefix: &str) -> Result<Var> {
    let c = feats.len() / 2;
    let mut acc: Option<Var> = None;
    for k in 0..3 {
        let Some(i) = (c + k).checked_sub(1).filter(|&i| i < feats.len()) else {
            continue;
        };
        let w = tape.param(store, &format!("{prefix}.tap{k}.weight"))?;
        let y = tape.conv2d(feats[i], w, None, 1, 1)?;
        acc = Some(match acc {
            None => y,
            Some(a) => tape.add(a, y)?,
        });
    }
    let acc = acc.expect("center tap always present");
    let b = tape.param(store, &format!("{prefix}.bias"))?;
    add_channel_bias(tape, acc, b)
}

/// `x[c, h, w] + b[c]`.
fn add_channel_bias(tape: &mut Tape, x: Var, b: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let hw = s[1] * s[2];
    let map: Rc<[usize]> = (0..s[0] * hw).map(|i| i / hw).collect();
    let bb = tape.gather(b, s, map)?;
    tape.add(x, bb)
}

fn p3d(tape: &mut Tape, feats: &[Var], store: &ParamStore, prefix: &str) -> Result<Var> {
    let c = feats.len() / 2;
    let ws = tape.param(store, &format!("{prefix}.spatial.weight"))?;
    let bs = tape.param(store, &format!("{prefix}.spatial.bias"))?;
    let mut acc: Option<Var> = None;
    for k in 0..3 {
        let Some(i) = (c + k).checked_sub(1).filter(|&i| i < feats.len()) else {
            continue;
        };
        let spatial = tape.conv2d(feats[i], ws, Some(bs), 1, 1)?;
        let wt = tape.param(store, &format!("{prefix}.temporal.tap{k}.weight"))?;
        let y = tape.conv2d(spatial, wt, None, 1, 0)?;
        acc = Some(match acc {
            None => y,
            Some(a) => tape.add(a, y)?,
        });
    }
    let acc = acc.expect("center tap always present");
    let b = tape.param(store, &format!("{prefix}.temporal.bias"))?;
    let pre = add_channel_bias(tape, acc, b)?;
    tape.gelu(pre)
}

/// Fuses the `T` per-slice maps `[F, H, W]` of one level into the center
/// slice's map.
pub fn fuse_level(
    tape: &mut Tape,
    feats: &[Var],
    mode: FusionMode,
    store: &ParamStore,
    level: usize,
    vd: &AttentionConfig,
) -> Result<Var> {
    if feats.len() % 2 == 0 {
        return Err(Error::Config(format!("slice window T must be odd, got {}", feats.len())));
    }
    let center = feats[feats.len() / 2];
    let prefix = fusion_prefix(mode, level);
    match mode {
        FusionMode::None => Ok(center),
        FusionMode::Vdformer => {
            require(store, &format!("{prefix}.view_wt.block0.attn.qkv.weight"), mode)?;
            let stack = tape.stack_last(feats)?;
            vd_former(tape, stack, store, &prefix, vd)
        }
        FusionMode::C3d => {
            require(store, &format!("{prefix}.bias"), mode)?;
            let pre = c3d_linear(tape, feats, store, &prefix)?;
            tape.gelu(pre)
        }
        FusionMode::P3d => {
            require(store, &format!("{prefix}.temporal.bias"), mode)?;
            p3d(tape, feats, store, &prefix)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub tower_channels: usize,
    /// Initial foreground probability encoded in the classifier bias.
    pub prior: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            tower_channels: 64,
            prior: 0.01,
        }
    }
}

pub fn init_head_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    in_channels: usize,
    cfg: &HeadConfig,
    rng: &mut R,
) -> Result<()> {
    if !(cfg.prior > 0.0 && cfg.prior < 1.0) || cfg.tower_channels == 0 {
        return Err(Error::Config(format!("invalid head config {cfg:?}")));
    }
    let t = cfg.tower_channels;
    store.insert(format!("{prefix}.tower0.weight"), conv_weight(t, in_channels, 3, rng))?;
    store.insert(format!("{prefix}.tower0.bias"), Tensor::zeros(&[t]))?;
    store.insert(format!("{prefix}.tower1.weight"), conv_weight(t, t, 3, rng))?;
    store.insert(format!("{prefix}.tower1.bias"), Tensor::zeros(&[t]))?;
    store.insert(format!("{prefix}.cls.weight"), Tensor::randn(&[1, t, 1, 1], 0.01, rng))?;
    let prior = -((1.0 - cfg.prior) / cfg.prior).ln();
    store.insert(format!("{prefix}.cls.bias"), Tensor::full(&[1], prior))?;
    store.insert(format!("{prefix}.reg.weight"), Tensor::randn(&[4, t, 1, 1], 0.01, rng))?;
    store.insert(format!("{prefix}.reg.bias"), Tensor::zeros(&[4]))?;
    Ok(())
}

/// Per-level head outputs: logits `[1, H, W]` and positive box distances
/// `[4, H, W]` (left, top, right, bottom, in level units).
#[derive(Clone, Copy, Debug)]
pub struct LevelPrediction {
    pub logits: Var,
    pub boxes: Var,
}

pub fn head_forward(tape: &mut Tape, levels: &[Var], store: &ParamStore, prefix: &str) -> Result<Vec<LevelPrediction>> {
    let mut out = Vec::with_capacity(levels.len());
    for &x in levels {
        let conv = |tape: &mut Tape, x: Var, name: &str, pad: usize| -> Result<Var> {
            let w = tape.param(store, &format!("{prefix}.{name}.weight"))?;
            let b = tape.param(store, &format!("{prefix}.{name}.bias"))?;
            tape.conv2d(x, w, Some(b), 1, pad)
        };
        let t = conv(tape, x, "tower0", 1)?;
        let t = tape.gelu(t)?;
        let t = conv(tape, t, "tower1", 1)?;
        let t = tape.gelu(t)?;
        let logits = conv(tape, t, "cls", 0)?;
        let raw = conv(tape, t, "reg", 0)?;
        let boxes = tape.exp(raw)?;
        out.push(LevelPrediction { logits, boxes });
    }
    Ok(out)
}

/// Geometry of one pyramid level in pixel space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelSpec {
    pub level: usize,
    pub rows: usize,
    pub cols: usize,
    pub stride: f64,
}

impl LevelSpec {
    /// Range `[lo, hi)` of longer box sides handled by this level.
    pub fn size_range(&self) -> (f64, f64) {
        let lo = if self.level <= LEVELS[0] { 0.0 } else { (1u64 << (self.level + 1)) as f64 };
        let hi = if self.level >= LEVELS[4] { f64::INFINITY } else { (1u64 << (self.level + 3)) as f64 };
        (lo, hi)
    }

    pub fn accepts(&self, b: &LesionBox) -> bool {
        let (lo, hi) = self.size_range();
        let s = b.longer_side();
        lo <= s && s < hi
    }

    /// Pixel coordinates `(x, y)` of the center of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        ((col as f64 + 0.5) * self.stride, (row as f64 + 0.5) * self.stride)
    }

    pub fn positions(&self) -> usize {
        self.rows * self.cols
    }
}

/// Level specs for an image of `height × width` pixels whose level-2 map has
/// stride `base_stride`.
pub fn level_specs(height: usize, width: usize, base_stride: usize) -> Vec<LevelSpec> {
    let (mut r, mut c) = (height / base_stride, width / base_stride);
    LEVELS
        .iter()
        .enumerate()
        .map(|(k, &level)| {
            if k > 0 {
                r /= 2;
                c /= 2;
            }
            LevelSpec {
                level,
                rows: r,
                cols: c,
                stride: (base_stride << k) as f64,
            }
        })
        .collect()
}

/// Classification labels and regression targets of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets {
    /// `[1, H, W]`, 0 or 1.
    pub labels: Tensor,
    /// `[4, H, W]` distances (l, t, r, b) in level units; 0 at negatives.
    pub regression: Tensor,
    /// Index of the assigned box per position.
    pub assigned: Vec<Option<usize>>,
}

impl LevelTargets {
    pub fn positives(&self) -> usize {
        self.assigned.iter().filter(|a| a.is_some()).count()
    }

    pub fn regression_mask(&self) -> Vec<bool> {
        let n = self.assigned.len();
        (0..4 * n).map(|i| self.assigned[i % n].is_some()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionTargets {
    pub levels: Vec<LevelTargets>,
}

impl DetectionTargets {
    pub fn positives(&self) -> usize {
        self.levels.iter().map(|l| l.positives()).sum()
    }
}

/// A position is positive iff its cell center lies in `[x1, x2) × [y1, y2)`
/// of a box whose longer side is in the level's range; among several such
/// boxes the smallest area wins, ties go to the lower index.
pub fn assign_targets(gt: &[LesionBox], specs: &[LevelSpec]) -> Result<DetectionTargets> {
    let bad: Vec<String> = gt
        .iter()
        .enumerate()
        .filter(|(_, b)| !b.is_valid())
        .map(|(i, b)| format!("box {i} ({}, {}, {}, {}) has no area", b.x1, b.y1, b.x2, b.y2))
        .collect();
    if !bad.is_empty() {
        return Err(Error::Validation(bad));
    }
    let mut levels = Vec::with_capacity(specs.len());
    for spec in specs {
        let n = spec.positions();
        let mut labels = vec![0.0; n];
        let mut reg = vec![0.0; 4 * n];
        let mut assigned = vec![None; n];
        let candidates: Vec<usize> = (0..gt.len()).filter(|&i| spec.accepts(&gt[i])).collect();
        for row in 0..spec.rows {
            for col in 0..spec.cols {
                let (x, y) = spec.cell_center(row, col);
                let mut best: Option<usize> = None;
                for &i in &candidates {
                    let b = &gt[i];
                    if b.x1 <= x && x < b.x2 && b.y1 <= y && y < b.y2 {
                        best = match best {
                            Some(j) if gt[j].area() <= b.area() => Some(j),
                            _ => Some(i),
                        };
                    }
                }
                if let Some(i) = best {
                    let p = row * spec.cols + col;
                    let b = &gt[i];
                    labels[p] = 1.0;
                    assigned[p] = Some(i);
                    let d = [x - b.x1, y - b.y1, b.x2 - x, b.y2 - y];
                    for (k, v) in d.iter().enumerate() {
                        reg[k * n + p] = v / spec.stride;
                    }
                }
            }
        }
        levels.push(LevelTargets {
            labels: Tensor::from_parts(vec![1, spec.rows, spec.cols], labels),
            regression: Tensor::from_parts(vec![4, spec.rows, spec.cols], reg),
            assigned,
        });
    }
    Ok(DetectionTargets { levels })
}

pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Loss variables of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct DetectionLoss {
    pub total: Var,
    pub classification: Var,
    pub regression: Var,
}

/// Mean binary cross-entropy over every position of every level plus
/// Smooth-L1 summed over the four distances and averaged over positives.
pub fn detection_loss(tape: &mut Tape, preds: &[LevelPrediction], targets: &DetectionTargets) -> Result<DetectionLoss> {
    if preds.len() != targets.levels.len() {
        return Err(Error::shape(
            "detection_loss",
            format!("{} prediction levels vs {} target levels", preds.len(), targets.levels.len()),
        ));
    }
    let total_positions: usize = targets.levels.iter().map(|t| t.assigned.len()).sum();
    let positives = targets.positives() as f64;
    let mut cls: Option<Var> = None;
    let mut reg: Option<Var> = None;
    for (p, t) in preds.iter().zip(&targets.levels) {
        let b = tape.bce_with_logits(p.logits, &t.labels)?;
        let b = tape.scale(b, t.assigned.len() as f64 / total_positions as f64)?;
        cls = Some(match cls {
            None => b,
            Some(a) => tape.add(a, b)?,
        });
        let r = tape.smooth_l1(p.boxes, &t.regression, &t.regression_mask(), positives, SMOOTH_L1_BETA)?;
        reg = Some(match reg {
            None => r,
            Some(a) => tape.add(a, r)?,
        });
    }
    let (classification, regression) = match (cls, reg) {
        (Some(c), Some(r)) => (c, r),
        _ => return Err(Error::shape("detection_loss", "no levels")),
    };
    let total = tape.add(classification, regression)?;
    Ok(DetectionLoss {
        total,
        classification,
        regression,
    })
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// A decoded box with its ordering key.
#[derive(Clone, Copy, Debug)]
pub struct Candidate {
    pub det: LesionBox,
    pub level: usize,
    pub index: usize,
}

/// Descending score, then lower level, then lower row-major index.
fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.det
        .score
        .total_cmp(&a.det.score)
        .then(a.level.cmp(&b.level))
        .then(a.index.cmp(&b.index))
}

/// Greedy NMS: keep the best remaining candidate, drop everything that
/// overlaps it with IoU above `iou_threshold`.
pub fn nms(mut cands: Vec<Candidate>, iou_threshold: f64) -> Vec<LesionBox> {
    cands.sort_by(candidate_order);
    let mut kept: Vec<LesionBox> = Vec::new();
    for c in cands {
        if kept.iter().all(|k| iou(k, &c.det) <= iou_threshold) {
            kept.push(c.det);
        }
    }
    kept
}

/// Decodes positions with `sigmoid(logit) ≥ score_threshold` into boxes
/// clipped to `width × height`, then applies [`nms`].
pub fn decode_and_nms(
    logits: &[Tensor],
    distances: &[Tensor],
    specs: &[LevelSpec],
    slice: usize,
    width: f64,
    height: f64,
    score_threshold: f64,
    iou_threshold: f64,
) -> Vec<LesionBox> {
    let mut cands = Vec::new();
    for ((lg, d), spec) in logits.iter().zip(distances).zip(specs) {
        let n = spec.positions();
        for p in 0..n {
            let score = sigmoid(lg.data()[p]);
            if score < score_threshold {
                continue;
            }
            let (x, y) = spec.cell_center(p / spec.cols, p % spec.cols);
            let dd = |k: usize| d.data()[k * n + p] * spec.stride;
            let det = LesionBox {
                slice,
                x1: (x - dd(0)).clamp(0.0, width),
                y1: (y - dd(1)).clamp(0.0, height),
                x2: (x + dd(2)).clamp(0.0, width),
                y2: (y + dd(3)).clamp(0.0, height),
                score,
            };
            // clipping can collapse a box that lies along the border
            if det.is_valid() {
                cands.push(Candidate {
                    det,
                    level: spec.level,
                    index: p,
                });
            }
        }
    }
    nms(cands, iou_threshold)
}
