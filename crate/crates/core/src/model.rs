//! The full slice detector: a shared encoder + FPN per slice, inter-slice
//! fusion on every pyramid level, and the per-position head. Predictions are
//! made for the center slice of a `T`-slice window only.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::autodiff::{ParamStore, Tape, Var};
use crate::backbone::{init_pyramid_params, pyramid_forward, BackboneConfig, LEVELS};
use crate::boxes::LesionBox;
use crate::detection::{
    assign_targets, decode_and_nms, detection_loss, fuse_level, head_forward, init_fusion_params,
    init_head_params, level_specs, DetectionLoss, FusionMode, HeadConfig, LevelPrediction, LevelSpec,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const HEAD_PREFIX: &str = "head";

/// Attention settings of the fusion transformer; its width is the pyramid
/// width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionAttention {
    pub heads: usize,
    pub window: usize,
    pub mlp_ratio: f64,
    #[serde(default = "default_true")]
    pub use_relative_bias: bool,
}

fn default_true() -> bool {
    true
}

impl Default for FusionAttention {
    fn default() -> Self {
        Self {
            heads: 8,
            window: 4,
            mlp_ratio: 1.0,
            use_relative_bias: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub fusion: FusionMode,
    /// Slice window `T` fused per prediction; odd.
    pub slices: usize,
    pub attention: FusionAttention,
    pub head: HeadConfig,
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            fusion: FusionMode::Vdformer,
            slices: 3,
            attention: FusionAttention::default(),
            head: HeadConfig::default(),
            score_threshold: 0.05,
            nms_iou: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn vd_attention(&self) -> AttentionConfig {
        AttentionConfig {
            channels: self.backbone.fpn_channels,
            heads: self.attention.heads,
            window: self.attention.window,
            use_relative_bias: self.attention.use_relative_bias,
            mlp_ratio: self.attention.mlp_ratio,
        }
    }

    /// Problems as `key: message` strings, empty when valid.
    pub fn problems(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if let Err(e) = self.backbone.validate() {
            bad.push(format!("model.backbone: {e}"));
        }
        if self.backbone.in_channels != 3 {
            bad.push(format!(
                "model.backbone.in_channels: slices enter as 3-channel images, got {}",
                self.backbone.in_channels
            ));
        }
        if self.slices % 2 == 0 {
            bad.push(format!("model.slices: T must be odd, got {}", self.slices));
        }
        if self.fusion == FusionMode::Vdformer {
            if let Err(e) = self.vd_attention().validate() {
                bad.push(format!("model.attention: {e}"));
            }
        }
        if !(self.head.prior > 0.0 && self.head.prior < 1.0) || self.head.tower_channels == 0 {
            bad.push("model.head: need 0 < prior < 1 and tower_channels >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            bad.push(format!("model.score_threshold: {} not in [0, 1]", self.score_threshold));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            bad.push(format!("model.nms_iou: {} not in [0, 1]", self.nms_iou));
        }
        bad
    }

    pub fn validate(&self) -> Result<()> {
        let bad = self.problems();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }
}

/// Slice `k` with its two neighbours as a `[3, H, W]` image; slices outside
/// the volume are zero.
pub fn slice_image(volume: &Tensor, k: usize) -> Result<Tensor> {
    let s = volume.shape();
    if s.len() != 3 {
        return Err(Error::shape("slice_image", format!("expected [D, H, W], got {s:?}")));
    }
    let (d, plane) = (s[0], s[1] * s[2]);
    if k >= d {
        return Err(Error::Index { index: k, len: d });
    }
    let mut data = vec![0.0; 3 * plane];
    for c in 0..3 {
        if let Some(src) = (k + c).checked_sub(1).filter(|&z| z < d) {
            data[c * plane..(c + 1) * plane].copy_from_slice(&volume.data()[src * plane..(src + 1) * plane]);
        }
    }
    Tensor::new(vec![3, s[1], s[2]], data)
}

pub struct Detector {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Detector {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_pyramid_params(&mut params, &config.backbone, &mut rng)?;
        let f = config.backbone.fpn_channels;
        let vd = config.vd_attention();
        for level in LEVELS {
            init_fusion_params(&mut params, config.fusion, level, f, &vd, &mut rng)?;
        }
        init_head_params(&mut params, HEAD_PREFIX, f, &config.head, &mut rng)?;
        Ok(Self { config, params })
    }

    /// Wraps existing parameters, e.g. from a checkpoint.
    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, params })
    }

    pub fn level_specs(&self, height: usize, width: usize) -> Vec<LevelSpec> {
        level_specs(height, width, self.config.backbone.patch)
    }

    /// Indices of the window around `t`; `None` outside the volume.
    fn window(&self, t: usize, depth: usize) -> Vec<Option<usize>> {
        let half = self.config.slices / 2;
        (0..self.config.slices)
            .map(|j| (t + j).checked_sub(half).filter(|&k| k < depth))
            .collect()
    }

    fn needs_neighbours(&self) -> bool {
        self.config.fusion != FusionMode::None
    }

    /// Fuses per-slice pyramids (indexed like the window; `None` for slices
    /// outside the volume or not needed) and runs the head.
    fn fuse_and_predict(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pyramids: &[Option<[Var; 5]>],
    ) -> Result<Vec<LevelPrediction>> {
        let center = pyramids[pyramids.len() / 2].expect("center slice is always encoded");
        let vd = self.config.vd_attention();
        let mut fused = Vec::with_capacity(LEVELS.len());
        for (l, &level) in LEVELS.iter().enumerate() {
            let shape = tape.shape(center[l]).to_vec();
            let feats: Vec<Var> = pyramids
                .iter()
                .map(|p| match p {
                    Some(p) => p[l],
                    None => tape.constant(Tensor::zeros(&shape)),
                })
                .collect();
            fused.push(fuse_level(tape, &feats, self.config.fusion, store, level, &vd)?);
        }
        head_forward(tape, &fused, store, HEAD_PREFIX)
    }

    /// Differentiable predictions for slice `t` of `volume: [D, H, W]`.
    pub fn forward(&self, tape: &mut Tape, volume: &Tensor, t: usize) -> Result<Vec<LevelPrediction>> {
        self.forward_with(tape, &self.params, volume, t)
    }

    /// [`Detector::forward`] reading parameters from `store`.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        volume: &Tensor,
        t: usize,
    ) -> Result<Vec<LevelPrediction>> {
        let d = volume.shape().first().copied().unwrap_or(0);
        if t >= d {
            return Err(Error::Index { index: t, len: d });
        }
        let window = self.window(t, d);
        let half = window.len() / 2;
        let mut pyramids = Vec::with_capacity(window.len());
        for (j, k) in window.into_iter().enumerate() {
            pyramids.push(match k {
                Some(k) if j == half || self.needs_neighbours() => {
                    let image = tape.constant(slice_image(volume, k)?);
                    Some(pyramid_forward(tape, image, &self.config.backbone, store)?)
                }
                _ => None,
            });
        }
        self.fuse_and_predict(tape, store, &pyramids)
    }

    /// Training loss of slice `t` against its ground-truth boxes.
    pub fn loss(&self, tape: &mut Tape, volume: &Tensor, t: usize, gt: &[LesionBox]) -> Result<DetectionLoss> {
        self.loss_with(tape, &self.params, volume, t, gt)
    }

    pub fn loss_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        volume: &Tensor,
        t: usize,
        gt: &[LesionBox],
    ) -> Result<DetectionLoss> {
        let s = volume.shape();
        let specs = self.level_specs(s[1], s[2]);
        let targets = assign_targets(gt, &specs)?;
        let preds = self.forward_with(tape, store, volume, t)?;
        detection_loss(tape, &preds, &targets)
    }

    fn decode(&self, tape: &Tape, preds: &[LevelPrediction], t: usize, h: usize, w: usize) -> Vec<LesionBox> {
        let logits: Vec<Tensor> = preds.iter().map(|p| tape.value(p.logits).clone()).collect();
        let dists: Vec<Tensor> = preds.iter().map(|p| tape.value(p.boxes).clone()).collect();
        decode_and_nms(
            &logits,
            &dists,
            &self.level_specs(h, w),
            t,
            w as f64,
            h as f64,
            self.config.score_threshold,
            self.config.nms_iou,
        )
    }

    /// Pyramid of one slice, without gradient tracking.
    pub fn slice_pyramid(&self, volume: &Tensor, k: usize) -> Result<[Tensor; 5]> {
        let mut tape = Tape::inference();
        let image = tape.constant(slice_image(volume, k)?);
        let p = pyramid_forward(&mut tape, image, &self.config.backbone, &self.params)?;
        Ok(p.map(|v| tape.value(v).clone()))
    }

    fn detect_cached(&self, pyramids: &[Option<[Tensor; 5]>], t: usize, h: usize, w: usize) -> Result<Vec<LesionBox>> {
        let mut tape = Tape::inference();
        let window = self.window(t, pyramids.len());
        let half = window.len() / 2;
        let vars: Vec<Option<[Var; 5]>> = window
            .into_iter()
            .enumerate()
            .map(|(j, k)| {
                k.filter(|_| j == half || self.needs_neighbours())
                    .and_then(|k| pyramids[k].as_ref())
                    .map(|p| p.clone().map(|x| tape.constant(x)))
            })
            .collect();
        let preds = self.fuse_and_predict(&mut tape, &self.params, &vars)?;
        Ok(self.decode(&tape, &preds, t, h, w))
    }

    /// Detections on slice `t`; every box carries slice index `t`.
    pub fn detect_slice(&self, volume: &Tensor, t: usize) -> Result<Vec<LesionBox>> {
        let s = volume.shape();
        if s.len() != 3 {
            return Err(Error::shape("detect_slice", format!("expected [D, H, W], got {s:?}")));
        }
        if t >= s[0] {
            return Err(Error::Index { index: t, len: s[0] });
        }
        let mut pyramids: Vec<Option<[Tensor; 5]>> = vec![None; s[0]];
        for (j, k) in self.window(t, s[0]).into_iter().enumerate() {
            if let Some(k) = k.filter(|_| j == self.config.slices / 2 || self.needs_neighbours()) {
                pyramids[k] = Some(self.slice_pyramid(volume, k)?);
            }
        }
        self.detect_cached(&pyramids, t, s[1], s[2])
    }

    /// Detections on every slice, encoding each slice once.
    pub fn detect_volume(&self, volume: &Tensor) -> Result<Vec<LesionBox>> {
        let s = volume.shape();
        if s.len() != 3 {
            return Err(Error::shape("detect_volume", format!("expected [D, H, W], got {s:?}")));
        }
        let pyramids = (0..s[0])
            .map(|k| self.slice_pyramid(volume, k).map(Some))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::new();
        for t in 0..s[0] {
            out.extend(self.detect_cached(&pyramids, t, s[1], s[2])?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
