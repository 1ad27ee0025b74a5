//! Training losses: classification and localization for both heads, the two
//! progressive-constraint margins, and proposal label assignment.
//!
//! Term conventions:
//! - classification loss averages over all sampled proposals (background
//!   proposals use the last logit as their class);
//! - localization loss and both margins average over positives only;
//! - negatives contribute exactly zero to the margins — the localization
//!   margin is simply not built for them;
//! - every term is unit-weighted in the total.
//!
//! The classification margin compares post-softmax probabilities of the
//! matched class, which keeps a margin of 0.2 meaningful on a `[0, 1]`
//! scale. The localization margin compares IoUs of the decoded predicted
//! boxes against the matched ground truth, with gradients flowing through
//! the decoding; disjoint prediction/ground-truth pairs sit on the IoU
//! plateau and pass no gradient there.

use crate::geometry::{encode_deltas, BBox};
use crate::tensor::{Tape, Var};
use crate::{Error, Real, Result};
use serde::{Deserialize, Serialize};

/// Progressive-constraint margins. Both default to 0.2.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PcConfig {
    pub m_c: Real,
    pub m_r: Real,
}

impl Default for PcConfig {
    fn default() -> Self {
        PcConfig { m_c: 0.2, m_r: 0.2 }
    }
}

/// A proposal with its assignment against the ground truth set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledProposal {
    pub bbox: BBox,
    /// Matched ground-truth box; present only for positives.
    pub matched_gt: Option<BBox>,
    /// Foreground class of the matched ground truth; `None` is background.
    pub label: Option<usize>,
    /// Index of the matched ground truth in the assignment call.
    pub gt_index: Option<usize>,
}

impl LabeledProposal {
    pub fn is_positive(&self) -> bool {
        self.label.is_some()
    }

    pub fn background(bbox: BBox) -> Self {
        LabeledProposal { bbox, matched_gt: None, label: None, gt_index: None }
    }
}

/// Default positive-assignment IoU threshold.
pub const ASSIGN_IOU_THRESHOLD: Real = 0.5;

/// Match each proposal to its max-IoU ground truth; positive iff that IoU is
/// `>= t` (inclusive). Ties break to the lowest ground-truth index; an empty
/// ground-truth set labels everything background.
pub fn assign_labels(
    proposals: &[BBox],
    gts: &[(BBox, usize)],
    t: Real,
) -> Result<Vec<LabeledProposal>> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Config(format!("assignment threshold must be in (0,1), got {t}")));
    }
    Ok(proposals
        .iter()
        .map(|p| {
            let mut best: Option<(usize, Real)> = None;
            for (i, (gt, _)) in gts.iter().enumerate() {
                let v = crate::geometry::iou(p, gt);
                let better = match best {
                    None => true,
                    Some((_, bv)) => v > bv,
                };
                if better {
                    best = Some((i, v));
                }
            }
            match best {
                Some((i, v)) if v >= t => LabeledProposal {
                    bbox: *p,
                    matched_gt: Some(gts[i].0),
                    label: Some(gts[i].1),
                    gt_index: Some(i),
                },
                _ => LabeledProposal::background(*p),
            }
        })
        .collect())
}

/// Cross-entropy over all proposals; background uses the last logit.
pub fn cls_loss(
    tape: &mut Tape,
    logits_rows: Var,
    labeled: &[LabeledProposal],
    num_classes: usize,
) -> Result<Var> {
    let labels: Vec<usize> =
        labeled.iter().map(|l| l.label.unwrap_or(num_classes)).collect();
    tape.softmax_cross_entropy_rows(logits_rows, &labels)
}

/// Smooth-L1 over the matched class's 4-delta slice, averaged over positives;
/// returns a constant 0 when the batch has no positives.
pub fn loc_loss(
    tape: &mut Tape,
    deltas_rows: Var,
    labeled: &[LabeledProposal],
) -> Result<Var> {
    let mut terms = Vec::new();
    for (i, l) in labeled.iter().enumerate() {
        let (Some(y), Some(gt)) = (l.label, l.matched_gt) else { continue };
        let target = encode_deltas(&l.bbox, &gt)?;
        let pred = tape.slice_row(deltas_rows, i, 4 * y, 4)?;
        terms.push(tape.smooth_l1_sum(pred, &target.to_array())?);
    }
    tape.mean_of(&terms)
}

/// `M_cls = |sibling - tsd + m_c|₊` on the matched-class probabilities of a
/// positive proposal. Gradient flows to both score paths.
pub fn margin_cls(tape: &mut Tape, sibling_score_y: Var, tsd_score_y: Var, m_c: Real) -> Result<Var> {
    let diff = tape.sub(sibling_score_y, tsd_score_y)?;
    let shifted = tape.affine(diff, 1.0, m_c);
    Ok(tape.relu(shifted))
}

/// `M_loc = |IoU_sibling - IoU_tsd + m_r|₊` for positives; negatives yield a
/// constant 0 with no gradient.
pub fn margin_loc(
    tape: &mut Tape,
    iou_sibling: Var,
    iou_tsd: Var,
    m_r: Real,
    is_positive: bool,
) -> Result<Var> {
    if !is_positive {
        return Ok(tape.scalar_const(0.0));
    }
    let diff = tape.sub(iou_sibling, iou_tsd)?;
    let shifted = tape.affine(diff, 1.0, m_r);
    Ok(tape.relu(shifted))
}

/// IoU between the box decoded from a 4-element delta tensor and a fixed
/// ground truth, differentiable with respect to the deltas.
pub fn decoded_iou(tape: &mut Tape, proposal: &BBox, pred_deltas: Var, gt: &BBox) -> Result<Var> {
    if tape.value(pred_deltas).len() != 4 {
        return Err(Error::shape(
            "decoded_iou",
            format!("expected 4 deltas, got {}", tape.value(pred_deltas).len()),
        ));
    }
    let (pw, ph) = (proposal.width(), proposal.height());
    if pw <= 0.0 || ph <= 0.0 {
        return Err(Error::degenerate("decoded_iou", "zero-size proposal".to_string()));
    }
    let (px, py) = proposal.center();

    let dx = tape.slice_flat(pred_deltas, 0, 1)?;
    let dy = tape.slice_flat(pred_deltas, 1, 1)?;
    let dw = tape.slice_flat(pred_deltas, 2, 1)?;
    let dh = tape.slice_flat(pred_deltas, 3, 1)?;

    let cx = tape.affine(dx, pw, px);
    let cy = tape.affine(dy, ph, py);
    let ew = tape.exp(dw);
    let w = tape.affine(ew, pw, 0.0);
    let eh = tape.exp(dh);
    let h = tape.affine(eh, ph, 0.0);

    let half_w = tape.affine(w, 0.5, 0.0);
    let half_h = tape.affine(h, 0.5, 0.0);
    let x1 = tape.sub(cx, half_w)?;
    let x2 = tape.add(cx, half_w)?;
    let y1 = tape.sub(cy, half_h)?;
    let y2 = tape.add(cy, half_h)?;

    let ix1 = tape.max_const(x1, gt.x1);
    let ix2 = tape.min_const(x2, gt.x2);
    let iy1 = tape.max_const(y1, gt.y1);
    let iy2 = tape.min_const(y2, gt.y2);
    let iw_raw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw_raw);
    let ih_raw = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih_raw);
    let inter = tape.mul(iw, ih)?;

    let area_pred = tape.mul(w, h)?;
    let sum_areas = tape.affine(area_pred, 1.0, gt.area());
    let union = tape.sub(sum_areas, inter)?;
    tape.div(inter, union)
}

/// Head outputs for one sampled batch of proposals, all `[P×·]` row tensors.
pub struct BatchOutputs {
    pub sibling_logits: Var,
    pub sibling_deltas: Var,
    pub tsd_logits: Var,
    pub tsd_deltas: Var,
}

/// Scalar values of each term, for logging.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lcls: Real,
    pub lloc: Real,
    pub ldcls: Real,
    pub ldloc: Real,
    pub mcls: Real,
    pub mloc: Real,
}

pub struct LossTerms {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Progressive-constraint margins averaged over positives:
/// `(M_cls, M_loc)`.
pub fn pc_margins(
    tape: &mut Tape,
    outs: &BatchOutputs,
    labeled: &[LabeledProposal],
    pc: &PcConfig,
) -> Result<(Var, Var)> {
    let sib_probs = tape.softmax_rows(outs.sibling_logits)?;
    let tsd_probs = tape.softmax_rows(outs.tsd_logits)?;
    let cols = tape.shape(sib_probs)[1];

    let mut mcls_terms = Vec::new();
    let mut mloc_terms = Vec::new();
    for (i, l) in labeled.iter().enumerate() {
        let (Some(y), Some(gt)) = (l.label, l.matched_gt) else { continue };
        debug_assert!(y < cols);
        let sib_p = tape.slice_row(sib_probs, i, y, 1)?;
        let tsd_p = tape.slice_row(tsd_probs, i, y, 1)?;
        mcls_terms.push(margin_cls(tape, sib_p, tsd_p, pc.m_c)?);

        let sib_d = tape.slice_row(outs.sibling_deltas, i, 4 * y, 4)?;
        let tsd_d = tape.slice_row(outs.tsd_deltas, i, 4 * y, 4)?;
        let iou_sib = decoded_iou(tape, &l.bbox, sib_d, &gt)?;
        let iou_tsd = decoded_iou(tape, &l.bbox, tsd_d, &gt)?;
        mloc_terms.push(margin_loc(tape, iou_sib, iou_tsd, pc.m_r, true)?);
    }
    let mcls = tape.mean_of(&mcls_terms)?;
    let mloc = tape.mean_of(&mloc_terms)?;
    Ok((mcls, mloc))
}

/// The six-term joint objective:
/// `L_cls + L_loc + L^D_cls + L^D_loc + M_cls + M_loc`, all unit-weighted.
pub fn total_loss(
    tape: &mut Tape,
    outs: &BatchOutputs,
    labeled: &[LabeledProposal],
    pc: &PcConfig,
    num_classes: usize,
) -> Result<LossTerms> {
    let lcls = cls_loss(tape, outs.sibling_logits, labeled, num_classes)?;
    let lloc = loc_loss(tape, outs.sibling_deltas, labeled)?;
    let ldcls = cls_loss(tape, outs.tsd_logits, labeled, num_classes)?;
    let ldloc = loc_loss(tape, outs.tsd_deltas, labeled)?;
    let (mcls, mloc) = pc_margins(tape, outs, labeled, pc)?;

    let mut total = tape.add(lcls, lloc)?;
    for term in [ldcls, ldloc, mcls, mloc] {
        total = tape.add(total, term)?;
    }
    let breakdown = LossBreakdown {
        lcls: tape.scalar_value(lcls),
        lloc: tape.scalar_value(lloc),
        ldcls: tape.scalar_value(ldcls),
        ldloc: tape.scalar_value(ldloc),
        mcls: tape.scalar_value(mcls),
        mloc: tape.scalar_value(mloc),
    };
    Ok(LossTerms { total, breakdown })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::decode_deltas;
    use crate::tensor::finite_difference_check;
    use crate::{GRAD_CHECK_EPS, GRAD_CHECK_TOL};

    #[test]
    fn assignment_basic_cases() {
        let gts = vec![(BBox::new(10.0, 10.0, 20.0, 20.0), 1)];
        let labeled = assign_labels(
            &[
                BBox::new(10.0, 10.0, 20.0, 20.0), // identical
                BBox::new(50.0, 50.0, 60.0, 60.0), // disjoint
            ],
            &gts,
            0.5,
        )
        .unwrap();
        assert!(labeled[0].is_positive());
        assert_eq!(labeled[0].label, Some(1));
        assert!(!labeled[1].is_positive());
        assert_eq!(labeled[1].matched_gt, None);
    }

    #[test]
    fn assignment_boundary_iou_is_inclusive() {
        // proposal (0,0,2,2) vs gt (0,0,2,1): inter 2, union 4 → IoU = 0.5
        // exactly (powers of two, exact in float)
        let gts = vec![(BBox::new(0.0, 0.0, 2.0, 1.0), 0)];
        let labeled = assign_labels(&[BBox::new(0.0, 0.0, 2.0, 2.0)], &gts, 0.5).unwrap();
        assert!(labeled[0].is_positive());
    }

    #[test]
    fn assignment_empty_gts_all_background() {
        let labeled = assign_labels(&[BBox::new(0.0, 0.0, 2.0, 2.0)], &[], 0.5).unwrap();
        assert!(!labeled[0].is_positive());
    }

    #[test]
    fn assignment_tie_breaks_to_lowest_gt_index() {
        let gt = BBox::new(0.0, 0.0, 4.0, 4.0);
        let gts = vec![(gt, 2), (gt, 1)];
        let labeled = assign_labels(&[gt], &gts, 0.5).unwrap();
        assert_eq!(labeled[0].gt_index, Some(0));
        assert_eq!(labeled[0].label, Some(2));
    }

    #[test]
    fn loc_loss_zero_for_exact_prediction_and_regimes() {
        let p = BBox::new(0.0, 0.0, 10.0, 10.0);
        let gt = BBox::new(1.0, 1.0, 11.0, 11.0);
        let target = encode_deltas(&p, &gt).unwrap();
        let labeled = vec![LabeledProposal {
            bbox: p,
            matched_gt: Some(gt),
            label: Some(1),
            gt_index: Some(0),
        }];

        // class 1 slice carries the exact target, other slices garbage
        let mut row = vec![9.0; 8];
        row[4..8].copy_from_slice(&target.to_array());
        let mut tape = Tape::new();
        let deltas = tape.constant(row, vec![1, 8]);
        let l = loc_loss(&mut tape, deltas, &labeled).unwrap();
        assert!(tape.scalar_value(l).abs() < 1e-6);

        // per-coordinate error 0.5 in all four coords → 4 · 0.125
        let mut row2 = vec![0.0; 8];
        for (i, t) in target.to_array().iter().enumerate() {
            row2[4 + i] = t + 0.5;
        }
        let mut tape2 = Tape::new();
        let deltas2 = tape2.constant(row2, vec![1, 8]);
        let l2 = loc_loss(&mut tape2, deltas2, &labeled).unwrap();
        assert!((tape2.scalar_value(l2) - 0.5).abs() < 1e-5);
    }

    #[test]
    fn loc_loss_no_positives_is_zero() {
        let labeled = vec![LabeledProposal::background(BBox::new(0.0, 0.0, 5.0, 5.0))];
        let mut tape = Tape::new();
        let deltas = tape.constant(vec![1.0; 8], vec![1, 8]);
        let l = loc_loss(&mut tape, deltas, &labeled).unwrap();
        assert_eq!(tape.scalar_value(l), 0.0);
    }

    #[test]
    fn margin_cls_substitution_cases() {
        let cases = [
            (0.5, 0.9, 0.2, 0.0), // clamped
            (0.9, 0.8, 0.2, 0.3),
            (0.7, 0.7, 0.2, 0.2), // equal scores → exactly m_c
        ];
        for (sib, tsd, m, expect) in cases {
            let mut tape = Tape::new();
            let s = tape.leaf(vec![sib], vec![1]);
            let t = tape.leaf(vec![tsd], vec![1]);
            let m_out = margin_cls(&mut tape, s, t, m).unwrap();
            let v = tape.scalar_value(m_out);
            assert!((v - expect).abs() < 1e-6, "case {sib},{tsd},{m}: got {v}");
        }
    }

    #[test]
    fn margin_loc_substitution_and_negative() {
        let mut tape = Tape::new();
        let s = tape.leaf(vec![0.6], vec![1]);
        let t = tape.leaf(vec![0.7], vec![1]);
        let m = margin_loc(&mut tape, s, t, 0.2, true).unwrap();
        assert!((tape.scalar_value(m) - 0.1).abs() < 1e-6);

        // clamp: iou_tsd ≥ iou_sibling + m_r
        let s2 = tape.leaf(vec![0.5], vec![1]);
        let t2 = tape.leaf(vec![0.8], vec![1]);
        let m2 = margin_loc(&mut tape, s2, t2, 0.2, true).unwrap();
        assert_eq!(tape.scalar_value(m2), 0.0);

        // negative proposal: zero with no gradient into the scores
        let s3 = tape.leaf(vec![0.9], vec![1]);
        let t3 = tape.leaf(vec![0.1], vec![1]);
        let m3 = margin_loc(&mut tape, s3, t3, 0.2, false).unwrap();
        assert_eq!(tape.scalar_value(m3), 0.0);
        tape.backward(m3).unwrap();
        assert!(tape.grad(s3).is_none());
        assert!(tape.grad(t3).is_none());
    }

    #[test]
    fn decoded_iou_matches_pure_geometry() {
        let p = BBox::new(2.0, 3.0, 10.0, 9.0);
        let gt = BBox::new(3.0, 2.0, 11.0, 8.0);
        let d = [0.1, -0.05, 0.2, 0.15];
        let mut tape = Tape::new();
        let deltas = tape.leaf(d.to_vec(), vec![4]);
        let v = decoded_iou(&mut tape, &p, deltas, &gt).unwrap();

        let decoded = decode_deltas(&p, &crate::geometry::Deltas::from_slice(&d));
        let expect = crate::geometry::iou(&decoded, &gt);
        assert!((tape.scalar_value(v) - expect).abs() < 1e-5);
    }

    #[test]
    fn decoded_iou_gradient_matches_fd() {
        let p = BBox::new(2.0, 3.0, 10.0, 9.0);
        let gt = BBox::new(3.0, 2.5, 11.0, 8.5);
        let err = finite_difference_check(
            move |tape, vars| decoded_iou(tape, &p, vars[0], &gt),
            &[(vec![0.08, -0.06, 0.17, 0.12], vec![4])],
            GRAD_CHECK_EPS,
        )
        .unwrap();
        assert!(err < GRAD_CHECK_TOL, "rel err {err}");
    }

    #[test]
    fn decoded_iou_disjoint_boxes_plateau() {
        let p = BBox::new(0.0, 0.0, 2.0, 2.0);
        let gt = BBox::new(50.0, 50.0, 60.0, 60.0);
        let mut tape = Tape::new();
        let deltas = tape.leaf(vec![0.0, 0.0, 0.0, 0.0], vec![4]);
        let v = decoded_iou(&mut tape, &p, deltas, &gt).unwrap();
        assert_eq!(tape.scalar_value(v), 0.0);
        tape.backward(v).unwrap();
        // flat region: zero gradient accepted
        if let Some(g) = tape.grad(deltas) {
            assert!(g.iter().all(|&x| x == 0.0));
        }
    }

    fn perfect_batch(num_classes: usize) -> (Vec<LabeledProposal>, Vec<Real>, Vec<Real>) {
        // 3 proposals: positives of class 0 and 1, one background
        let gt0 = BBox::new(10.0, 10.0, 30.0, 30.0);
        let gt1 = BBox::new(50.0, 50.0, 80.0, 90.0);
        let p0 = BBox::new(12.0, 9.0, 31.0, 29.0);
        let p1 = BBox::new(48.0, 52.0, 79.0, 92.0);
        let bg = BBox::new(100.0, 5.0, 120.0, 25.0);
        let labeled = vec![
            LabeledProposal { bbox: p0, matched_gt: Some(gt0), label: Some(0), gt_index: Some(0) },
            LabeledProposal { bbox: p1, matched_gt: Some(gt1), label: Some(1), gt_index: Some(1) },
            LabeledProposal::background(bg),
        ];
        let cols = num_classes + 1;
        let mut logits = vec![0.0; 3 * cols];
        logits[0] = 30.0; // row 0 → class 0
        logits[cols + 1] = 30.0; // row 1 → class 1
        logits[2 * cols + num_classes] = 30.0; // row 2 → background
        let mut deltas = vec![0.0; 3 * 4 * num_classes];
        let t0 = encode_deltas(&p0, &gt0).unwrap().to_array();
        let t1 = encode_deltas(&p1, &gt1).unwrap().to_array();
        deltas[0..4].copy_from_slice(&t0);
        let row1 = 4 * num_classes;
        deltas[row1 + 4..row1 + 8].copy_from_slice(&t1);
        (labeled, logits, deltas)
    }

    #[test]
    fn total_loss_on_perfect_batch_is_margin_residual() {
        let num_classes = 2;
        let (labeled, logits, deltas) = perfect_batch(num_classes);
        let mut tape = Tape::new();
        let cols = num_classes + 1;
        let l = tape.constant(logits.clone(), vec![3, cols]);
        let d = tape.constant(deltas.clone(), vec![3, 4 * num_classes]);
        // tsd outputs pinned equal to sibling outputs
        let l2 = tape.constant(logits, vec![3, cols]);
        let d2 = tape.constant(deltas, vec![3, 4 * num_classes]);
        let outs = BatchOutputs {
            sibling_logits: l,
            sibling_deltas: d,
            tsd_logits: l2,
            tsd_deltas: d2,
        };
        let pc = PcConfig { m_c: 0.2, m_r: 0.15 };
        let terms = total_loss(&mut tape, &outs, &labeled, &pc, num_classes).unwrap();
        let b = terms.breakdown;
        assert!(b.lcls < 1e-6);
        assert!(b.lloc < 1e-6);
        assert!(b.ldcls < 1e-6);
        assert!(b.ldloc < 1e-6);
        // equal outputs → margins land exactly on m_c and m_r
        assert!((b.mcls - 0.2).abs() < 1e-6);
        assert!((b.mloc - 0.15).abs() < 1e-6);
        let total = tape.scalar_value(terms.total);
        assert!((total - (b.lcls + b.lloc + b.ldcls + b.ldloc + b.mcls + b.mloc)).abs() < 1e-6);
    }

    #[test]
    fn zero_margins_with_equal_outputs_vanish() {
        let num_classes = 2;
        let (labeled, logits, deltas) = perfect_batch(num_classes);
        let mut tape = Tape::new();
        let l = tape.constant(logits.clone(), vec![3, 3]);
        let d = tape.constant(deltas.clone(), vec![3, 8]);
        let l2 = tape.constant(logits, vec![3, 3]);
        let d2 = tape.constant(deltas, vec![3, 8]);
        let outs =
            BatchOutputs { sibling_logits: l, sibling_deltas: d, tsd_logits: l2, tsd_deltas: d2 };
        let pc = PcConfig { m_c: 0.0, m_r: 0.0 };
        let (mcls, mloc) = pc_margins(&mut tape, &outs, &labeled, &pc).unwrap();
        assert_eq!(tape.scalar_value(mcls), 0.0);
        assert_eq!(tape.scalar_value(mloc), 0.0);
    }

    #[test]
    fn margins_are_nonnegative_for_random_inputs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let mut tape = Tape::new();
            let s = tape.leaf(vec![rng.gen_range(0.0..1.0)], vec![1]);
            let t = tape.leaf(vec![rng.gen_range(0.0..1.0)], vec![1]);
            let m = margin_cls(&mut tape, s, t, rng.gen_range(0.0..0.5)).unwrap();
            assert!(tape.scalar_value(m) >= 0.0);
            let m2 = margin_loc(&mut tape, s, t, rng.gen_range(0.0..0.5), true).unwrap();
            assert!(tape.scalar_value(m2) >= 0.0);
        }
    }

    #[test]
    fn total_loss_gradient_matches_fd_on_toy_batch() {
        // 2-class / 3-proposal batch away from ReLU and smooth-L1 kinks
        let num_classes = 2;
        let (labeled, logits, deltas) = perfect_batch(num_classes);
        // move predictions off the perfect point so no term sits on a kink
        let logits: Vec<Real> = logits.iter().map(|&v| v * 0.05 + 0.3).collect();
        let deltas: Vec<Real> = deltas.iter().map(|&v| v + 0.13).collect();
        let tsd_logits: Vec<Real> = logits.iter().map(|&v| v + 0.21).collect();
        let tsd_deltas: Vec<Real> = deltas.iter().map(|&v| v - 0.07).collect();

        let err = finite_difference_check(
            move |tape, vars| {
                let outs = BatchOutputs {
                    sibling_logits: vars[0],
                    sibling_deltas: vars[1],
                    tsd_logits: vars[2],
                    tsd_deltas: vars[3],
                };
                let pc = PcConfig { m_c: 0.2, m_r: 0.2 };
                Ok(total_loss(tape, &outs, &labeled, &pc, num_classes)?.total)
            },
            &[
                (logits, vec![3, 3]),
                (deltas, vec![3, 8]),
                (tsd_logits, vec![3, 3]),
                (tsd_deltas, vec![3, 8]),
            ],
            GRAD_CHECK_EPS,
        )
        .unwrap();
        assert!(err < GRAD_CHECK_TOL, "rel err {err}");
    }
}
