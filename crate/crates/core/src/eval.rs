//! Average-precision evaluation across IoU thresholds.
//!
//! Matching is greedy and class-wise: detections in (score desc, input index
//! asc) order each take the unmatched same-class ground truth of highest IoU
//! at or above the threshold (ties to the lowest ground-truth index). AP uses
//! all-points interpolation (the continuous precision envelope), and mAP
//! averages over classes that have at least one ground truth; classes without
//! ground truths are reported as absent.

use crate::geometry::{iou, BBox, Detection};
use crate::model::{Detector, InferConfig};
use crate::synth::Scene;
use crate::{Real, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// The IoU thresholds reported individually: 0.5 to 0.9 by 0.1.
pub const REPORT_THRESHOLDS: [Real; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<Real>,
    /// Class → AP at each reported threshold. Only classes with ground
    /// truths appear.
    pub per_class_ap: BTreeMap<usize, Vec<Real>>,
    /// Mean AP over present classes, per reported threshold.
    pub map_per_threshold: Vec<Real>,
    /// COCO-style mAP averaged over IoU 0.50:0.95 step 0.05.
    pub coco_map: Real,
}

impl EvalReport {
    pub fn map_at(&self, threshold: Real) -> Option<Real> {
        self.thresholds
            .iter()
            .position(|&t| (t - threshold).abs() < 1e-6)
            .map(|i| self.map_per_threshold[i])
    }
}

/// Greedy matcher: for detections of one scene, returns each detection's
/// matched ground-truth index (aligned to the input order). Only same-class
/// ground truths are candidates; each ground truth matches at most once.
pub fn greedy_match(
    dets: &[Detection],
    gts: &[(BBox, usize)],
    iou_threshold: Real,
) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; gts.len()];
    let mut matched = vec![None; dets.len()];
    for &i in &order {
        let mut best: Option<(usize, Real)> = None;
        for (j, (gt, class)) in gts.iter().enumerate() {
            if taken[j] || *class != dets[i].label {
                continue;
            }
            let v = iou(&dets[i].bbox, gt);
            if v < iou_threshold {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, bv)) => v > bv,
            };
            if better {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            matched[i] = Some(j);
        }
    }
    matched
}

/// All-points interpolated AP from `(score, tp)` records. The records are
/// sorted here by (score desc, insertion order asc), so pass them in a
/// deterministic order.
fn average_precision(records: &[(Real, bool)], n_gt: usize) -> Real {
    if n_gt == 0 {
        return 0.0;
    }
    if records.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[b].0.partial_cmp(&records[a].0).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut precisions = Vec::with_capacity(records.len());
    let mut recalls = Vec::with_capacity(records.len());
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        if records[i].1 {
            tp += 1;
        }
        precisions.push(tp as Real / (rank + 1) as Real);
        recalls.push(tp as Real / n_gt as Real);
    }
    // precision envelope from the right, integrated over recall steps
    let mut ap = 0.0;
    let mut max_p = 0.0;
    let mut contrib = Vec::with_capacity(recalls.len());
    for i in (0..recalls.len()).rev() {
        max_p = precisions[i].max(max_p);
        contrib.push((recalls[i], max_p));
    }
    contrib.reverse();
    let mut last_r = 0.0;
    for (r, p) in contrib {
        if r > last_r {
            ap += (r - last_r) * p;
            last_r = r;
        }
    }
    ap
}

/// Per-class AP at one threshold over many scenes.
fn ap_per_class(
    dets_per_scene: &[Vec<Detection>],
    gts_per_scene: &[Vec<(BBox, usize)>],
    classes: &[usize],
    threshold: Real,
) -> BTreeMap<usize, Real> {
    let mut records: BTreeMap<usize, Vec<(Real, bool)>> =
        classes.iter().map(|&c| (c, Vec::new())).collect();
    let mut gt_counts: BTreeMap<usize, usize> = classes.iter().map(|&c| (c, 0)).collect();

    for (dets, gts) in dets_per_scene.iter().zip(gts_per_scene) {
        for (_, c) in gts {
            if let Some(n) = gt_counts.get_mut(c) {
                *n += 1;
            }
        }
        let matched = greedy_match(dets, gts, threshold);
        for (d, m) in dets.iter().zip(&matched) {
            if let Some(recs) = records.get_mut(&d.label) {
                recs.push((d.score, m.is_some()));
            }
        }
    }

    classes
        .iter()
        .map(|&c| (c, average_precision(&records[&c], gt_counts[&c])))
        .collect()
}

/// Evaluate detections against ground truths at the given thresholds.
pub fn evaluate(
    dets_per_scene: &[Vec<Detection>],
    gts_per_scene: &[Vec<(BBox, usize)>],
    thresholds: &[Real],
) -> EvalReport {
    assert_eq!(dets_per_scene.len(), gts_per_scene.len());
    // classes present in the ground truth
    let mut classes: Vec<usize> = gts_per_scene
        .iter()
        .flat_map(|g| g.iter().map(|(_, c)| *c))
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let mut per_class_ap: BTreeMap<usize, Vec<Real>> =
        classes.iter().map(|&c| (c, Vec::new())).collect();
    let mut map_per_threshold = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let aps = ap_per_class(dets_per_scene, gts_per_scene, &classes, t);
        let mean = if classes.is_empty() {
            0.0
        } else {
            aps.values().sum::<Real>() / classes.len() as Real
        };
        map_per_threshold.push(mean);
        for (&c, ap) in &aps {
            per_class_ap.get_mut(&c).unwrap().push(*ap);
        }
    }

    // COCO-style average over 0.50:0.95 step 0.05
    let coco_thresholds: Vec<Real> = (0..10).map(|i| 0.5 + 0.05 * i as Real).collect();
    let mut coco_sum = 0.0;
    for &t in &coco_thresholds {
        let aps = ap_per_class(dets_per_scene, gts_per_scene, &classes, t);
        if !classes.is_empty() {
            coco_sum += aps.values().sum::<Real>() / classes.len() as Real;
        }
    }
    let coco_map = coco_sum / coco_thresholds.len() as Real;

    EvalReport { thresholds: thresholds.to_vec(), per_class_ap, map_per_threshold, coco_map }
}

/// Run a detector over scenes and evaluate at the standard thresholds.
pub fn evaluate_detector(
    detector: &Detector,
    scenes: &[Scene],
    infer: &InferConfig,
) -> Result<EvalReport> {
    let mut dets_per_scene = Vec::with_capacity(scenes.len());
    let mut gts_per_scene = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let dets = detector.detect(&scene.image, scene.width, scene.height, infer)?;
        dets_per_scene.push(dets);
        gts_per_scene.push(scene.instances.clone());
    }
    Ok(evaluate(&dets_per_scene, &gts_per_scene, &REPORT_THRESHOLDS))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(b: BBox, label: usize, score: Real) -> Detection {
        Detection { bbox: b, label, score }
    }

    #[test]
    fn perfect_detector_has_ap_one_everywhere() {
        let gts = vec![
            vec![(BBox::new(0.0, 0.0, 10.0, 10.0), 0), (BBox::new(20.0, 20.0, 40.0, 40.0), 1)],
            vec![(BBox::new(5.0, 5.0, 25.0, 25.0), 0)],
        ];
        let dets: Vec<Vec<Detection>> = gts
            .iter()
            .map(|g| g.iter().map(|(b, c)| det(*b, *c, 1.0)).collect())
            .collect();
        let report = evaluate(&dets, &gts, &REPORT_THRESHOLDS);
        for &m in &report.map_per_threshold {
            assert!((m - 1.0).abs() < 1e-6);
        }
        assert!((report.coco_map - 1.0).abs() < 1e-6);
    }

    #[test]
    fn no_detections_is_zero_ap() {
        let gts = vec![vec![(BBox::new(0.0, 0.0, 10.0, 10.0), 0)]];
        let dets = vec![vec![]];
        let report = evaluate(&dets, &gts, &REPORT_THRESHOLDS);
        assert!(report.map_per_threshold.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn class_without_gts_is_absent() {
        let gts = vec![vec![(BBox::new(0.0, 0.0, 10.0, 10.0), 0)]];
        // a detection of class 5 has no ground truth anywhere
        let dets = vec![vec![
            det(BBox::new(0.0, 0.0, 10.0, 10.0), 0, 0.9),
            det(BBox::new(2.0, 2.0, 12.0, 12.0), 5, 0.8),
        ]];
        let report = evaluate(&dets, &gts, &REPORT_THRESHOLDS);
        assert!(report.per_class_ap.contains_key(&0));
        assert!(!report.per_class_ap.contains_key(&5));
    }

    #[test]
    fn greedy_matcher_is_one_to_one() {
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0);
        let gts = vec![(gt, 0)];
        let dets = vec![det(gt, 0, 0.9), det(gt, 0, 0.8)];
        let matched = greedy_match(&dets, &gts, 0.5);
        assert_eq!(matched, vec![Some(0), None]);
    }

    #[test]
    fn greedy_matcher_prefers_higher_iou_then_lower_index() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(2.0, 0.0, 12.0, 10.0);
        // det overlaps b more than a
        let d = det(BBox::new(2.0, 0.0, 12.0, 10.0), 0, 0.9);
        let matched = greedy_match(&[d], &[(a, 0), (b, 0)], 0.3);
        assert_eq!(matched, vec![Some(1)]);

        // exact tie: two identical gts → lowest index
        let matched2 = greedy_match(&[det(a, 0, 0.9)], &[(a, 0), (a, 0)], 0.3);
        assert_eq!(matched2, vec![Some(0)]);
    }

    #[test]
    fn greedy_matcher_is_class_aware() {
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0);
        let matched = greedy_match(&[det(gt, 1, 0.9)], &[(gt, 0)], 0.5);
        assert_eq!(matched, vec![None]);
    }

    #[test]
    fn three_det_two_gt_toy_case() {
        // hand-traced greedy outcome:
        //   det0 (score .9) IoU ~.74 with gt0 → TP
        //   det1 (score .8) exactly gt1 → TP
        //   det2 (score .7) overlaps gt0 but gt0 is taken → FP
        let gt0 = BBox::new(0.0, 0.0, 10.0, 10.0);
        let gt1 = BBox::new(20.0, 20.0, 30.0, 30.0);
        let dets = vec![
            det(BBox::new(1.0, 0.0, 11.0, 10.0), 0, 0.9),
            det(gt1, 0, 0.8),
            det(BBox::new(0.0, 1.0, 10.0, 11.0), 0, 0.7),
        ];
        let matched = greedy_match(&dets, &[(gt0, 0), (gt1, 0)], 0.5);
        assert_eq!(matched, vec![Some(0), Some(1), None]);

        // AP: ranks 1,2 are TP, rank 3 FP → all-points AP = 1.0
        let report = evaluate(&[dets], &[vec![(gt0, 0), (gt1, 0)]], &[0.5]);
        assert!((report.map_per_threshold[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ap_is_monotone_nonincreasing_in_threshold() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _case in 0..100 {
            let n_gt = rng.gen_range(1..4);
            let gts: Vec<(BBox, usize)> = (0..n_gt)
                .map(|_| {
                    let x = rng.gen_range(0.0..80.0);
                    let y = rng.gen_range(0.0..80.0);
                    let w = rng.gen_range(8.0..30.0);
                    let h = rng.gen_range(8.0..30.0);
                    (BBox::new(x, y, x + w, y + h), rng.gen_range(0..2))
                })
                .collect();
            let dets: Vec<Detection> = (0..rng.gen_range(0..6))
                .map(|_| {
                    let (gt, c) = gts[rng.gen_range(0..gts.len())];
                    let dx = rng.gen_range(-4.0..4.0);
                    let dy = rng.gen_range(-4.0..4.0);
                    det(gt.translated(dx, dy), c, rng.gen_range(0.1..1.0))
                })
                .collect();
            let report = evaluate(
                &[dets],
                &[gts],
                &[0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            );
            for pair in report.map_per_threshold.windows(2) {
                assert!(
                    pair[1] <= pair[0] + 1e-9,
                    "AP increased with threshold: {:?}",
                    report.map_per_threshold
                );
            }
        }
    }
}
