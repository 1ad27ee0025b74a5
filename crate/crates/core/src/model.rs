//! Detector assembly: backbone + heads + configuration, checkpoint I/O and
//! grid-proposal inference.
//!
//! Boxes cross this boundary in image pixels; the stride scaling into the
//! feature-map frame happens exactly once, here. At inference the TSD head is
//! the retained branch for TSD-trained checkpoints; sibling checkpoints use
//! the sibling head. Test-time proposals come from a regular multi-scale grid
//! over the image (there is no proposal network), so results are
//! self-contained.

use crate::backbone::{BackboneConfig, TinyBackbone, BACKBONE_STRIDE};
use crate::checkpoint::{self, Snapshot};
use crate::geometry::{clip_box, decode_deltas, nms, BBox, Deltas, Detection};
use crate::heads::{
    pool_feature_rows, sibling_forward_rows, tsd_forward_rows, HeadConfig, HeadParams,
};
use crate::tensor::{ParamSet, Tape};
use crate::{Error, Real, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub image_size: usize,
    pub feat_channels: usize,
    pub head_hidden: usize,
    pub pool_size: usize,
    pub samples_per_bin: usize,
    pub gamma: Real,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 3,
            image_size: 128,
            feat_channels: 64,
            head_hidden: 1024,
            pool_size: 7,
            samples_per_bin: 2,
            gamma: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            num_classes: self.num_classes,
            in_channels: self.feat_channels,
            pool_size: self.pool_size,
            samples_per_bin: self.samples_per_bin,
            hidden: self.head_hidden,
            gamma: self.gamma,
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig { in_channels: 3, out_channels: self.feat_channels }
    }
}

/// Which objective a detector was trained with; also selects the inference
/// branch (TSD-trained checkpoints retain only the TSD head at inference).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    #[serde(rename = "sibling")]
    Sibling,
    #[serde(rename = "tsd")]
    Tsd,
    #[serde(rename = "tsd+pc")]
    TsdPc,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sibling" => Ok(TrainMode::Sibling),
            "tsd" => Ok(TrainMode::Tsd),
            "tsd+pc" => Ok(TrainMode::TsdPc),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected sibling, tsd or tsd+pc)"
            ))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Sibling => "sibling",
            TrainMode::Tsd => "tsd",
            TrainMode::TsdPc => "tsd+pc",
        })
    }
}

impl TrainMode {
    pub fn uses_sibling_branch(&self) -> bool {
        matches!(self, TrainMode::Sibling | TrainMode::TsdPc)
    }

    pub fn uses_tsd_branch(&self) -> bool {
        matches!(self, TrainMode::Tsd | TrainMode::TsdPc)
    }
}

pub struct Detector {
    pub cfg: ModelConfig,
    pub mode: TrainMode,
    pub params: ParamSet,
    pub backbone: TinyBackbone,
    pub head: HeadParams,
}

#[derive(Serialize, Deserialize)]
struct CheckpointExtra {
    mode: TrainMode,
    model: ModelConfig,
}

impl Detector {
    pub fn new(cfg: &ModelConfig, mode: TrainMode, seed: u64) -> Detector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let backbone = TinyBackbone::new(&mut params, &cfg.backbone_config(), &mut rng);
        let head = HeadParams::new(&mut params, &cfg.head_config(), &mut rng);
        Detector { cfg: cfg.clone(), mode, params, backbone, head }
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot::of(&self.params)
    }

    pub fn from_snapshot(
        cfg: &ModelConfig,
        mode: TrainMode,
        snapshot: &Snapshot,
    ) -> Result<Detector> {
        let mut det = Detector::new(cfg, mode, 0);
        snapshot.restore(&mut det.params)?;
        Ok(det)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let extra = serde_json::to_value(CheckpointExtra {
            mode: self.mode,
            model: self.cfg.clone(),
        })?;
        checkpoint::save(path, &self.snapshot(), extra)
    }

    pub fn load(path: &Path) -> Result<Detector> {
        let (snapshot, manifest) = checkpoint::load(path)?;
        let extra: CheckpointExtra = serde_json::from_value(manifest.extra)
            .map_err(|e| Error::Checkpoint(format!("bad checkpoint extra: {e}")))?;
        Detector::from_snapshot(&extra.model, extra.mode, &snapshot)
    }

    pub fn stride(&self) -> Real {
        BACKBONE_STRIDE as Real
    }

    /// Forward a batch of image-frame proposals through the inference branch.
    /// Returns per-proposal post-softmax class probabilities (`C+1` each,
    /// background last) and raw box deltas (`4·C` each).
    pub fn forward_proposals(
        &self,
        image: &[Real],
        width: usize,
        height: usize,
        proposals: &[BBox],
    ) -> Result<(Vec<Vec<Real>>, Vec<Vec<Real>>)> {
        if proposals.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let mut tape = Tape::new();
        let bound = tape.bind_frozen(&self.params);
        let img = tape.constant(image.to_vec(), vec![height, width, 3]);
        let map = self.backbone.forward(&mut tape, &bound, img)?;

        let inv = 1.0 / self.stride();
        let feat_props: Vec<BBox> = proposals.iter().map(|p| p.scaled(inv)).collect();
        let head_cfg = self.cfg.head_config();
        let feat_rows = pool_feature_rows(&mut tape, map, &feat_props, &head_cfg)?;

        let (logits, deltas) = if self.mode.uses_tsd_branch() {
            let tsd =
                tsd_forward_rows(&mut tape, &bound, &self.head, map, &feat_props, feat_rows)?;
            (tsd.logits, tsd.deltas)
        } else {
            sibling_forward_rows(&mut tape, &bound, &self.head, feat_rows)?
        };

        let cols = self.cfg.num_classes + 1;
        let dcols = 4 * self.cfg.num_classes;
        let mut probs = Vec::with_capacity(proposals.len());
        let mut raw_deltas = Vec::with_capacity(proposals.len());
        let lv = tape.value(logits);
        let dv = tape.value(deltas);
        for i in 0..proposals.len() {
            probs.push(softmax_slice(&lv[i * cols..(i + 1) * cols]));
            raw_deltas.push(dv[i * dcols..(i + 1) * dcols].to_vec());
        }
        Ok((probs, raw_deltas))
    }

    /// Run detection on one image: grid proposals → head → decode → clip →
    /// class-wise NMS.
    pub fn detect(
        &self,
        image: &[Real],
        width: usize,
        height: usize,
        infer: &InferConfig,
    ) -> Result<Vec<Detection>> {
        let proposals = grid_proposals(width as Real, height as Real, infer);
        self.detect_with_proposals(image, width, height, &proposals, infer)
    }

    pub fn detect_with_proposals(
        &self,
        image: &[Real],
        width: usize,
        height: usize,
        proposals: &[BBox],
        infer: &InferConfig,
    ) -> Result<Vec<Detection>> {
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let (probs, deltas) = self.forward_proposals(image, width, height, proposals)?;
        let mut dets = Vec::new();
        for ((p, prob), delta) in proposals.iter().zip(&probs).zip(&deltas) {
            for c in 0..self.cfg.num_classes {
                let score = prob[c];
                if score < infer.score_threshold {
                    continue;
                }
                let d = Deltas::from_slice(&delta[4 * c..4 * c + 4]);
                let decoded = decode_deltas(p, &d);
                let clipped = clip_box(&decoded, width as Real, height as Real);
                if clipped.area() <= 0.0 {
                    continue;
                }
                dets.push(Detection { bbox: clipped, label: c, score });
            }
        }
        let mut kept = nms(&dets, infer.nms_iou);
        kept.truncate(infer.max_detections);
        Ok(kept)
    }
}

fn softmax_slice(logits: &[Real]) -> Vec<Real> {
    let max = logits.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let exps: Vec<Real> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: Real = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Test-time proposal source: a regular multi-scale grid over the image.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InferConfig {
    /// Square box side lengths, in pixels.
    pub scales: Vec<Real>,
    /// Width/height ratios applied to each scale.
    pub aspect_ratios: Vec<Real>,
    /// Grid step as a fraction of the box side.
    pub stride_fraction: Real,
    pub score_threshold: Real,
    pub nms_iou: Real,
    pub max_detections: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            scales: vec![14.0, 22.0, 34.0, 52.0],
            aspect_ratios: vec![1.0],
            stride_fraction: 0.5,
            score_threshold: 0.05,
            nms_iou: crate::geometry::NMS_IOU_THRESHOLD,
            max_detections: 100,
        }
    }
}

/// Regular multi-scale grid of boxes covering the image (no ground-truth
/// leakage). Boxes are clipped and degenerate cells dropped.
pub fn grid_proposals(width: Real, height: Real, cfg: &InferConfig) -> Vec<BBox> {
    let mut out = Vec::new();
    for &scale in &cfg.scales {
        for &ar in &cfg.aspect_ratios {
            let bw = scale * ar.sqrt();
            let bh = scale / ar.sqrt();
            let step = (scale * cfg.stride_fraction).max(1.0);
            let nx = ((width - bw).max(0.0) / step).floor() as usize + 1;
            let ny = ((height - bh).max(0.0) / step).floor() as usize + 1;
            for iy in 0..ny {
                for ix in 0..nx {
                    let x1 = (ix as Real * step).min(width - bw).max(0.0);
                    let y1 = (iy as Real * step).min(height - bh).max(0.0);
                    let b = clip_box(&BBox::new(x1, y1, x1 + bw, y1 + bh), width, height);
                    if b.area() > 1.0 {
                        out.push(b);
                    }
                }
            }
        }
    }
    out
}
