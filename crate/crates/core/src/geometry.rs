//! Box arithmetic shared by losses, RoI operators and evaluation.
//!
//! Boxes are axis-aligned `(x1, y1, x2, y2)` corner rectangles in continuous
//! pixel coordinates (no +1 pixel convention), matching RoIAlign's continuous
//! sampling. All functions here are pure and thread-safe.

use crate::{Error, Real, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: Real,
    pub y1: Real,
    pub x2: Real,
    pub y2: Real,
}

impl BBox {
    pub fn new(x1: Real, y1: Real, x2: Real, y2: Real) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> Real {
        self.x2 - self.x1
    }

    pub fn height(&self) -> Real {
        self.y2 - self.y1
    }

    pub fn area(&self) -> Real {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (Real, Real) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    /// Uniform scale of all coordinates (e.g. image -> feature-map frame).
    pub fn scaled(&self, s: Real) -> BBox {
        BBox::new(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)
    }

    pub fn translated(&self, dx: Real, dy: Real) -> BBox {
        BBox::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }
}

/// Box regression deltas in the standard parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub dx: Real,
    pub dy: Real,
    pub dw: Real,
    pub dh: Real,
}

impl Deltas {
    pub const ZERO: Deltas = Deltas { dx: 0.0, dy: 0.0, dw: 0.0, dh: 0.0 };

    pub fn to_array(self) -> [Real; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_slice(s: &[Real]) -> Self {
        Deltas { dx: s[0], dy: s[1], dw: s[2], dh: s[3] }
    }
}

/// One scored, labeled box — the unit of evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub label: usize,
    pub score: Real,
}

/// Intersection over union, in `[0, 1]`; 0 when the union has zero area.
pub fn iou(a: &BBox, b: &BBox) -> Real {
    let ix1 = a.x1.max(b.x1);
    let iy1 = a.y1.max(b.y1);
    let ix2 = a.x2.min(b.x2);
    let iy2 = a.y2.min(b.y2);
    let inter = (ix2 - ix1).max(0.0) * (iy2 - iy1).max(0.0);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Encode `target` relative to `proposal`:
/// `(Δx̂, Δŷ) = (t_center - p_center) / (p_w, p_h)`, `(Δŵ, Δĥ) = ln(t / p)`.
pub fn encode_deltas(proposal: &BBox, target: &BBox) -> Result<Deltas> {
    let (pw, ph) = (proposal.width(), proposal.height());
    if pw <= 0.0 || ph <= 0.0 {
        return Err(Error::degenerate(
            "encode_deltas",
            format!("proposal has non-positive size {pw}×{ph}"),
        ));
    }
    let (tw, th) = (target.width(), target.height());
    if tw <= 0.0 || th <= 0.0 {
        return Err(Error::degenerate(
            "encode_deltas",
            format!("target has non-positive size {tw}×{th}"),
        ));
    }
    let (px, py) = proposal.center();
    let (tx, ty) = target.center();
    Ok(Deltas {
        dx: (tx - px) / pw,
        dy: (ty - py) / ph,
        dw: (tw / pw).ln(),
        dh: (th / ph).ln(),
    })
}

/// Exact inverse of [`encode_deltas`] up to floating rounding.
pub fn decode_deltas(proposal: &BBox, deltas: &Deltas) -> BBox {
    let (pw, ph) = (proposal.width(), proposal.height());
    let (px, py) = proposal.center();
    let cx = px + deltas.dx * pw;
    let cy = py + deltas.dy * ph;
    let w = pw * deltas.dw.exp();
    let h = ph * deltas.dh.exp();
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// Clamp a box to `[0, image_w] × [0, image_h]`, preserving corner order.
pub fn clip_box(b: &BBox, image_w: Real, image_h: Real) -> BBox {
    BBox::new(
        b.x1.clamp(0.0, image_w),
        b.y1.clamp(0.0, image_h),
        b.x2.clamp(0.0, image_w),
        b.y2.clamp(0.0, image_h),
    )
}

/// Greedy class-wise non-maximum suppression.
///
/// Suppression happens only within a class; survivors are returned sorted by
/// (score desc, input index asc), the same deterministic order used to visit
/// candidates.
pub fn nms(dets: &[Detection], iou_threshold: Real) -> Vec<Detection> {
    assert!(iou_threshold > 0.0 && iou_threshold <= 1.0);
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(dets[i]);
        for &j in &order[rank + 1..] {
            if !suppressed[j]
                && dets[j].label == dets[i].label
                && iou(&dets[j].bbox, &dets[i].bbox) > iou_threshold
            {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Default NMS threshold used at inference.
pub const NMS_IOU_THRESHOLD: Real = 0.5;
