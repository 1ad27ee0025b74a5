//! Detection heads over pooled RoI features.
//!
//! Two heads share the input RoI feature `F` of a proposal `P`:
//!
//! - the sibling head: one shared extractor `f`, with classification `C` and
//!   regression `R` branching from the same hidden feature;
//! - the TSD head: estimators derive a rigidly translated proposal `P̂_r`
//!   (via `ΔR = γ·F_r(F)·(w,h)`) for localization and a pointwise
//!   deformation `ΔC = γ·F_c(F)·(w,h)` for classification, then disjoint
//!   extractors `f_c`/`f_r` and predictors produce the TSD outputs.
//!
//! The estimators `F_r`/`F_c` are three-layer MLPs with widths
//! `{256, 256, 2}` and `{256, 256, k·k·2}`; their first layer is one shared
//! parameter set, so its gradient accumulates from both paths. Estimator
//! output layers are zero-initialized: the first forward pass is an exact
//! functional copy of a deformable-pool-free head.
//!
//! Proposals here are in feature-map coordinates; the caller applies the
//! backbone stride once at the boundary.

use crate::geometry::BBox;
use crate::roi::{deformable_pool, roi_align, roi_align_translated, RoiFeature};
use crate::tensor::{Bound, Init, LinearLayer, ParamSet, Tape, Var};
use crate::{Error, Real, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Width of the two hidden estimator layers.
pub const ESTIMATOR_HIDDEN: usize = 256;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HeadConfig {
    /// Foreground classes; logits have `num_classes + 1` entries with the
    /// background logit last, deltas have `4 * num_classes`.
    pub num_classes: usize,
    /// Channels of the incoming feature map.
    pub in_channels: usize,
    /// RoI pooling grid size `k`.
    pub pool_size: usize,
    /// Bilinear samples per bin axis (`samples_per_bin²` per bin).
    pub samples_per_bin: usize,
    /// Hidden width of the extractors `f`, `f_c`, `f_r`.
    pub hidden: usize,
    /// Magnitude modulation of the learned offsets.
    pub gamma: Real,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            num_classes: 3,
            in_channels: 64,
            pool_size: 7,
            samples_per_bin: 2,
            hidden: 1024,
            gamma: 0.1,
        }
    }
}

impl HeadConfig {
    pub fn flat_dim(&self) -> usize {
        self.pool_size * self.pool_size * self.in_channels
    }

    pub fn num_logits(&self) -> usize {
        self.num_classes + 1
    }

    pub fn background_label(&self) -> usize {
        self.num_classes
    }

    pub fn num_deltas(&self) -> usize {
        4 * self.num_classes
    }
}

/// All learnable weights of the sibling head, the TSD branches and the
/// proposal estimators.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub cfg: HeadConfig,
    /// First estimator layer, shared by `F_r` and `F_c`.
    pub shared_estimator: LinearLayer,
    pub fr_rest: [LinearLayer; 2],
    pub fc_rest: [LinearLayer; 2],
    pub sibling_f: [LinearLayer; 2],
    pub sibling_cls: LinearLayer,
    pub sibling_loc: LinearLayer,
    pub tsd_f_c: [LinearLayer; 2],
    pub tsd_f_r: [LinearLayer; 2],
    pub tsd_cls: LinearLayer,
    pub tsd_loc: LinearLayer,
}

impl HeadParams {
    pub fn new(params: &mut ParamSet, cfg: &HeadConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.flat_dim();
        let h = cfg.hidden;
        let e = ESTIMATOR_HIDDEN;
        let k2 = cfg.pool_size * cfg.pool_size;
        let u = Init::UniformFanIn;
        HeadParams {
            cfg: cfg.clone(),
            shared_estimator: LinearLayer::new(params, "tsd.shared_estimator", d, e, u, rng),
            fr_rest: [
                LinearLayer::new(params, "tsd.fr_rest.0", e, e, u, rng),
                LinearLayer::new(params, "tsd.fr_rest.1", e, 2, Init::Zero, rng),
            ],
            fc_rest: [
                LinearLayer::new(params, "tsd.fc_rest.0", e, e, u, rng),
                LinearLayer::new(params, "tsd.fc_rest.1", e, k2 * 2, Init::Zero, rng),
            ],
            sibling_f: [
                LinearLayer::new(params, "sibling.f.0", d, h, u, rng),
                LinearLayer::new(params, "sibling.f.1", h, h, u, rng),
            ],
            sibling_cls: LinearLayer::new(params, "sibling.cls", h, cfg.num_logits(), u, rng),
            sibling_loc: LinearLayer::new(params, "sibling.loc", h, cfg.num_deltas(), u, rng),
            tsd_f_c: [
                LinearLayer::new(params, "tsd.f_c.0", d, h, u, rng),
                LinearLayer::new(params, "tsd.f_c.1", h, h, u, rng),
            ],
            tsd_f_r: [
                LinearLayer::new(params, "tsd.f_r.0", d, h, u, rng),
                LinearLayer::new(params, "tsd.f_r.1", h, h, u, rng),
            ],
            tsd_cls: LinearLayer::new(params, "tsd.cls", h, cfg.num_logits(), u, rng),
            tsd_loc: LinearLayer::new(params, "tsd.loc", h, cfg.num_deltas(), u, rng),
        }
    }
}

fn fc_stack(tape: &mut Tape, bound: &Bound, stack: &[LinearLayer; 2], x: Var) -> Result<Var> {
    let h1 = stack[0].forward(tape, bound, x)?;
    let h1 = tape.relu(h1);
    let h2 = stack[1].forward(tape, bound, h1)?;
    Ok(tape.relu(h2))
}

/// RoIAlign each proposal and stack the flattened features as rows `[P×D]`.
pub fn pool_feature_rows(
    tape: &mut Tape,
    map: Var,
    proposals: &[BBox],
    cfg: &HeadConfig,
) -> Result<Var> {
    let mut rows = Vec::with_capacity(proposals.len());
    for p in proposals {
        let f = roi_align(tape, map, p, cfg.pool_size, cfg.samples_per_bin)?;
        rows.push(f.grid);
    }
    tape.stack_rows(&rows)
}

/// Per-row deltas of the two estimators, scaled to pixels: `ΔR [P×2]` and
/// `ΔC [P×(k·k·2)]` with interleaved `(dx, dy)` pairs.
pub fn estimate_deltas_rows(
    tape: &mut Tape,
    bound: &Bound,
    params: &HeadParams,
    feat_rows: Var,
    proposals: &[BBox],
) -> Result<(Var, Var)> {
    let k2 = params.cfg.pool_size * params.cfg.pool_size;
    let gamma = params.cfg.gamma;

    let shared = params.shared_estimator.forward(tape, bound, feat_rows)?;
    let shared = tape.relu(shared);

    let hr = params.fr_rest[0].forward(tape, bound, shared)?;
    let hr = tape.relu(hr);
    let dr_raw = params.fr_rest[1].forward(tape, bound, hr)?;

    let hc = params.fc_rest[0].forward(tape, bound, shared)?;
    let hc = tape.relu(hc);
    let dc_raw = params.fc_rest[1].forward(tape, bound, hc)?;

    let mut dr_scale = Vec::with_capacity(proposals.len() * 2);
    let mut dc_scale = Vec::with_capacity(proposals.len() * k2 * 2);
    for p in proposals {
        let (gw, gh) = (gamma * p.width(), gamma * p.height());
        dr_scale.push(gw);
        dr_scale.push(gh);
        for _ in 0..k2 {
            dc_scale.push(gw);
            dc_scale.push(gh);
        }
    }
    let dr = tape.mul_const(dr_raw, dr_scale)?;
    let dc = tape.mul_const(dc_raw, dc_scale)?;
    Ok((dr, dc))
}

/// `ΔR = γ·F_r(F; θ_r)·(w, h)` for a single proposal, as a 2-element tensor
/// of pixel offsets.
pub fn estimate_delta_r(
    tape: &mut Tape,
    bound: &Bound,
    params: &HeadParams,
    f: &RoiFeature,
    p: &BBox,
) -> Result<Var> {
    let row = f.flat_row(tape)?;
    let (dr, _) = estimate_deltas_rows(tape, bound, params, row, std::slice::from_ref(p))?;
    Ok(dr)
}

/// `ΔC = γ·F_c(F; θ_c)·(w, h)` for a single proposal, as a `k·k·2` tensor of
/// pixel offsets.
pub fn estimate_delta_c(
    tape: &mut Tape,
    bound: &Bound,
    params: &HeadParams,
    f: &RoiFeature,
    p: &BBox,
) -> Result<Var> {
    let row = f.flat_row(tape)?;
    let (_, dc) = estimate_deltas_rows(tape, bound, params, row, std::slice::from_ref(p))?;
    Ok(dc)
}

/// Sibling head over pooled feature rows: `(logits [P×(C+1)], deltas [P×4C])`.
pub fn sibling_forward_rows(
    tape: &mut Tape,
    bound: &Bound,
    params: &HeadParams,
    feat_rows: Var,
) -> Result<(Var, Var)> {
    let f = fc_stack(tape, bound, &params.sibling_f, feat_rows)?;
    let logits = params.sibling_cls.forward(tape, bound, f)?;
    let deltas = params.sibling_loc.forward(tape, bound, f)?;
    Ok((logits, deltas))
}

/// Sibling head for one pooled RoI feature.
pub fn sibling_forward(
    tape: &mut Tape,
    bound: &Bound,
    params: &HeadParams,
    f: &RoiFeature,
) -> Result<(Var, Var)> {
    let row = f.flat_row(tape)?;
    sibling_forward_rows(tape, bound, params, row)
}

/// TSD branch over a batch of proposals sharing one feature map.
pub struct TsdRows {
    pub logits: Var,
    pub deltas: Var,
    /// Concrete translated proposals `P̂_r = P + ΔR`.
    pub p_hat_r: Vec<BBox>,
    pub delta_r: Var,
    pub delta_c: Var,
}

pub fn tsd_forward_rows(
    tape: &mut Tape,
    bound: &Bound,
    params: &HeadParams,
    map: Var,
    proposals: &[BBox],
    feat_rows: Var,
) -> Result<TsdRows> {
    let cfg = &params.cfg;
    let (k, s) = (cfg.pool_size, cfg.samples_per_bin);
    let (dr, dc) = estimate_deltas_rows(tape, bound, params, feat_rows, proposals)?;

    let mut fr_rows = Vec::with_capacity(proposals.len());
    let mut fc_rows = Vec::with_capacity(proposals.len());
    let mut p_hat_r = Vec::with_capacity(proposals.len());
    for (i, p) in proposals.iter().enumerate() {
        let dr_i = tape.slice_row(dr, i, 0, 2)?;
        let dc_i = tape.slice_row(dc, i, 0, k * k * 2)?;
        let drv = tape.value(dr_i);
        p_hat_r.push(p.translated(drv[0], drv[1]));

        let f_r = roi_align_translated(tape, map, p, dr_i, k, s)?;
        let f_c = deformable_pool(tape, map, p, dc_i, k, s)?;
        fr_rows.push(f_r.grid);
        fc_rows.push(f_c.grid);
    }
    let fr_rows = tape.stack_rows(&fr_rows)?;
    let fc_rows = tape.stack_rows(&fc_rows)?;

    let hc = fc_stack(tape, bound, &params.tsd_f_c, fc_rows)?;
    let logits = params.tsd_cls.forward(tape, bound, hc)?;
    let hr = fc_stack(tape, bound, &params.tsd_f_r, fr_rows)?;
    let deltas = params.tsd_loc.forward(tape, bound, hr)?;

    Ok(TsdRows { logits, deltas, p_hat_r, delta_r: dr, delta_c: dc })
}

/// Full single-proposal forward: sibling and TSD outputs from the shared
/// RoI feature of `p`.
pub struct HeadOutput {
    pub sibling_logits: Var,
    pub sibling_deltas: Var,
    pub tsd_logits: Var,
    pub tsd_deltas: Var,
    pub p_hat_r: BBox,
    pub delta_r: Var,
    pub delta_c: Var,
}

pub fn tsd_forward(
    tape: &mut Tape,
    bound: &Bound,
    params: &HeadParams,
    map: Var,
    p: &BBox,
) -> Result<HeadOutput> {
    if p.width() <= 0.0 || p.height() <= 0.0 {
        return Err(Error::degenerate(
            "tsd_forward",
            format!("proposal has non-positive size {}×{}", p.width(), p.height()),
        ));
    }
    let cfg = &params.cfg;
    let f = roi_align(tape, map, p, cfg.pool_size, cfg.samples_per_bin)?;
    let feat_rows = f.flat_row(tape)?;
    let tsd = tsd_forward_rows(tape, bound, params, map, std::slice::from_ref(p), feat_rows)?;
    let (sibling_logits, sibling_deltas) = sibling_forward_rows(tape, bound, params, feat_rows)?;
    Ok(HeadOutput {
        sibling_logits,
        sibling_deltas,
        tsd_logits: tsd.logits,
        tsd_deltas: tsd.deltas,
        p_hat_r: tsd.p_hat_r[0],
        delta_r: tsd.delta_r,
        delta_c: tsd.delta_c,
    })
}
