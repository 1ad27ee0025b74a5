//! Spatial-sensitivity probe: how classification confidence and localization
//! quality respond to translating a proposal around an instance.
//!
//! Protocol (fixed here; the choice of protocol is this module's contract):
//! a ground-truth-sized proposal is swept over a `grid_n × grid_n` grid of
//! offsets covering `±0.5·(w, h)` around the instance, with the unshifted
//! proposal at the center cell (`grid_n` odd). At each offset the detector's
//! inference branch runs once; the classification value is the softmax
//! probability of the instance's class and the localization value is the
//! IoU between the decoded regressed box and the ground truth. Each map is
//! min-max normalized: constant multi-cell maps normalize to all zeros by
//! convention, and a single-cell grid normalizes to 1 (it is its own
//! maximum).

use crate::geometry::{decode_deltas, iou, BBox, Deltas};
use crate::model::Detector;
use crate::ppm;
use crate::synth::Scene;
use crate::{Error, Real, Result};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone)]
pub struct SensitivityMap {
    /// Row-major `grid_n × grid_n` values in `[0, 1]`.
    pub grid: Vec<Real>,
    pub grid_n: usize,
    /// Pixels between adjacent grid offsets, per axis.
    pub stride_x: Real,
    pub stride_y: Real,
    pub center_instance: (BBox, usize),
}

impl SensitivityMap {
    /// Argmax cell as `(row, col)`; ties resolve to the lowest row-major
    /// index.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.grid.iter().enumerate() {
            if v > self.grid[best] {
                best = i;
            }
        }
        (best / self.grid_n, best % self.grid_n)
    }

    pub fn to_gray8(&self) -> Vec<u8> {
        self.grid.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }
}

fn minmax_normalize(values: &mut [Real]) {
    let min = values.iter().cloned().fold(Real::INFINITY, Real::min);
    let max = values.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    if max > min {
        let inv = 1.0 / (max - min);
        values.iter_mut().for_each(|v| *v = (*v - min) * inv);
    } else {
        // constant map convention: zeros, except a single cell which is its
        // own maximum
        let fill = if values.len() == 1 { 1.0 } else { 0.0 };
        values.iter_mut().for_each(|v| *v = fill);
    }
}

/// Sweep a gt-sized proposal over the offset grid and return the
/// classification and localization sensitivity maps.
pub fn sensitivity_scan(
    detector: &Detector,
    scene: &Scene,
    instance_index: usize,
    grid_n: usize,
) -> Result<(SensitivityMap, SensitivityMap)> {
    if instance_index >= scene.instances.len() {
        return Err(Error::index(
            "sensitivity_scan",
            format!("instance {instance_index} of {}", scene.instances.len()),
        ));
    }
    if grid_n == 0 || grid_n % 2 == 0 {
        return Err(Error::Config(format!("grid_n must be odd and positive, got {grid_n}")));
    }
    let (gt, class) = scene.instances[instance_index];
    let (w, h) = (gt.width(), gt.height());
    let (stride_x, stride_y) = if grid_n == 1 {
        (0.0, 0.0)
    } else {
        (w / (grid_n - 1) as Real, h / (grid_n - 1) as Real)
    };

    let mut proposals = Vec::with_capacity(grid_n * grid_n);
    for row in 0..grid_n {
        for col in 0..grid_n {
            let ex = -0.5 * w + col as Real * stride_x;
            let ey = -0.5 * h + row as Real * stride_y;
            proposals.push(gt.translated(ex, ey));
        }
    }

    let (probs, deltas) =
        detector.forward_proposals(&scene.image, scene.width, scene.height, &proposals)?;

    let mut cls_vals = Vec::with_capacity(proposals.len());
    let mut loc_vals = Vec::with_capacity(proposals.len());
    for ((p, prob), delta) in proposals.iter().zip(&probs).zip(&deltas) {
        cls_vals.push(prob[class]);
        let d = Deltas::from_slice(&delta[4 * class..4 * class + 4]);
        let decoded = decode_deltas(p, &d);
        loc_vals.push(iou(&decoded, &gt));
    }
    minmax_normalize(&mut cls_vals);
    minmax_normalize(&mut loc_vals);

    let make = |grid: Vec<Real>| SensitivityMap {
        grid,
        grid_n,
        stride_x,
        stride_y,
        center_instance: (gt, class),
    };
    Ok((make(cls_vals), make(loc_vals)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DivergenceStats {
    /// Euclidean distance between the two argmax offsets, in pixels.
    pub argmax_distance: f64,
    /// Spearman rank correlation over the flattened grids, in `[-1, 1]`.
    pub rank_correlation: f64,
}

/// Average ranks (1-based, ties averaged).
fn ranks(values: &[Real]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Spearman rank correlation (average ranks for ties); all internal math in
/// f64 regardless of the crate scalar.
pub fn spearman(a: &[Real], b: &[Real]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

/// Quantify how differently the two maps respond: argmax separation in
/// pixels and rank correlation of the full grids.
pub fn divergence(cls_map: &SensitivityMap, loc_map: &SensitivityMap) -> Result<DivergenceStats> {
    if cls_map.grid_n != loc_map.grid_n
        || cls_map.stride_x != loc_map.stride_x
        || cls_map.stride_y != loc_map.stride_y
    {
        return Err(Error::shape("divergence", "maps have different grid geometry".to_string()));
    }
    let (r1, c1) = cls_map.argmax();
    let (r2, c2) = loc_map.argmax();
    let dx = (c1 as f64 - c2 as f64) * cls_map.stride_x as f64;
    let dy = (r1 as f64 - r2 as f64) * cls_map.stride_y as f64;
    Ok(DivergenceStats {
        argmax_distance: (dx * dx + dy * dy).sqrt(),
        rank_correlation: spearman(&cls_map.grid, &loc_map.grid),
    })
}

#[derive(Debug, Serialize)]
struct ProbeStats<'a> {
    scene: usize,
    instance: usize,
    grid_n: usize,
    stride_x: Real,
    stride_y: Real,
    instance_box: [Real; 4],
    instance_class: usize,
    cls_argmax: [usize; 2],
    loc_argmax: [usize; 2],
    argmax_distance: f64,
    rank_correlation: f64,
    /// Cells whose shifted proposal keeps IoU with the instance at or above
    /// the positive-assignment threshold.
    iou_above_threshold: &'a [Vec<bool>],
}

/// Files written by [`emit`].
pub struct ProbeArtifacts {
    pub cls_pgm: PathBuf,
    pub loc_pgm: PathBuf,
    pub stats_json: PathBuf,
}

/// Write `PREFIX.cls.pgm`, `PREFIX.loc.pgm` and `PREFIX.stats.json`.
pub fn emit(
    prefix: &str,
    scene_index: usize,
    instance_index: usize,
    cls_map: &SensitivityMap,
    loc_map: &SensitivityMap,
) -> Result<ProbeArtifacts> {
    let stats = divergence(cls_map, loc_map)?;
    let (gt, class) = cls_map.center_instance;
    let n = cls_map.grid_n;

    let mut iou_mask = vec![vec![false; n]; n];
    for (row, mask_row) in iou_mask.iter_mut().enumerate() {
        for (col, cell) in mask_row.iter_mut().enumerate() {
            let ex = -0.5 * gt.width() + col as Real * cls_map.stride_x;
            let ey = -0.5 * gt.height() + row as Real * cls_map.stride_y;
            *cell = iou(&gt.translated(ex, ey), &gt) >= crate::losses::ASSIGN_IOU_THRESHOLD;
        }
    }

    let cls_pgm = PathBuf::from(format!("{prefix}.cls.pgm"));
    let loc_pgm = PathBuf::from(format!("{prefix}.loc.pgm"));
    let stats_json = PathBuf::from(format!("{prefix}.stats.json"));
    ppm::write_pgm(&cls_pgm, n, n, &cls_map.to_gray8())?;
    ppm::write_pgm(&loc_pgm, n, n, &loc_map.to_gray8())?;

    let (r1, c1) = cls_map.argmax();
    let (r2, c2) = loc_map.argmax();
    let record = ProbeStats {
        scene: scene_index,
        instance: instance_index,
        grid_n: n,
        stride_x: cls_map.stride_x,
        stride_y: cls_map.stride_y,
        instance_box: [gt.x1, gt.y1, gt.x2, gt.y2],
        instance_class: class,
        cls_argmax: [r1, c1],
        loc_argmax: [r2, c2],
        argmax_distance: stats.argmax_distance,
        rank_correlation: stats.rank_correlation,
        iou_above_threshold: &iou_mask,
    };
    std::fs::write(&stats_json, serde_json::to_vec_pretty(&record)?)?;
    Ok(ProbeArtifacts { cls_pgm, loc_pgm, stats_json })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TrainMode};
    use crate::synth::generate_scene;

    fn tiny_detector(mode: TrainMode) -> Detector {
        let cfg = ModelConfig {
            num_classes: 3,
            image_size: 128,
            feat_channels: 8,
            head_hidden: 16,
            pool_size: 3,
            samples_per_bin: 2,
            gamma: 0.1,
        };
        Detector::new(&cfg, mode, 5)
    }

    #[test]
    fn single_cell_grid_normalizes_to_one() {
        let det = tiny_detector(TrainMode::Sibling);
        let scene = generate_scene(50, 3).unwrap();
        let (cls, loc) = sensitivity_scan(&det, &scene, 0, 1).unwrap();
        assert_eq!(cls.grid, vec![1.0]);
        assert_eq!(loc.grid, vec![1.0]);
    }

    #[test]
    fn untrained_head_maps_are_valid_and_deterministic() {
        let det = tiny_detector(TrainMode::TsdPc);
        let scene = generate_scene(51, 3).unwrap();
        let (cls1, loc1) = sensitivity_scan(&det, &scene, 0, 5).unwrap();
        let (cls2, _) = sensitivity_scan(&det, &scene, 0, 5).unwrap();
        assert_eq!(cls1.grid, cls2.grid);
        for &v in cls1.grid.iter().chain(&loc1.grid) {
            assert!((0.0..=1.0).contains(&v));
        }
        // min-max normalization hits both ends
        assert!(cls1.grid.iter().any(|&v| v == 0.0));
        assert!(cls1.grid.iter().any(|&v| v == 1.0));
    }

    #[test]
    fn instance_index_out_of_range_is_error() {
        let det = tiny_detector(TrainMode::Sibling);
        let scene = generate_scene(52, 3).unwrap();
        assert!(matches!(
            sensitivity_scan(&det, &scene, 99, 3),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn even_grid_is_rejected() {
        let det = tiny_detector(TrainMode::Sibling);
        let scene = generate_scene(53, 3).unwrap();
        assert!(sensitivity_scan(&det, &scene, 0, 4).is_err());
    }

    fn map_of(grid: Vec<Real>, n: usize) -> SensitivityMap {
        SensitivityMap {
            grid,
            grid_n: n,
            stride_x: 2.0,
            stride_y: 3.0,
            center_instance: (BBox::new(0.0, 0.0, 10.0, 10.0), 0),
        }
    }

    #[test]
    fn divergence_identical_maps() {
        let m = map_of(vec![0.1, 0.5, 0.3, 0.9, 0.2, 0.4, 0.6, 0.0, 0.7], 3);
        let d = divergence(&m, &m).unwrap();
        assert_eq!(d.argmax_distance, 0.0);
        assert!((d.rank_correlation - 1.0).abs() < 1e-12);
    }

    #[test]
    fn divergence_reversed_ranking_is_minus_one() {
        let a = map_of(vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.1, 0.2, 0.3, 0.4], 3);
        let rev: Vec<Real> = a.grid.iter().map(|&v| 1.0 - v).collect();
        let b = map_of(rev, 3);
        let d = divergence(&a, &b).unwrap();
        assert!((d.rank_correlation + 1.0).abs() < 1e-12);
    }

    #[test]
    fn divergence_distance_is_symmetric() {
        let a = map_of(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 3);
        let b = map_of(vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0], 3);
        let d1 = divergence(&a, &b).unwrap();
        let d2 = divergence(&b, &a).unwrap();
        assert_eq!(d1.argmax_distance, d2.argmax_distance);
        // 2 cells in x (stride 2) and 2 in y (stride 3): √(16+36)
        assert!((d1.argmax_distance - (52.0f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn mismatched_grids_are_shape_error() {
        let a = map_of(vec![0.0; 9], 3);
        let mut b = map_of(vec![0.0; 9], 3);
        b.stride_x = 5.0;
        assert!(matches!(divergence(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn spearman_matches_brute_force_on_random_grids() {
        use rand::{Rng, SeedableRng};
        // O(n²) pairwise-count ranking as the independent oracle
        fn brute_force_spearman(a: &[Real], b: &[Real]) -> f64 {
            let rank = |v: &[Real]| -> Vec<f64> {
                v.iter()
                    .map(|&x| {
                        let less = v.iter().filter(|&&y| y < x).count() as f64;
                        let equal = v.iter().filter(|&&y| y == x).count() as f64;
                        less + (equal + 1.0) / 2.0
                    })
                    .collect()
            };
            pearson(&rank(a), &rank(b))
        }

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        for _ in 0..50 {
            let n = rng.gen_range(4..30);
            // quantized values so ties actually occur
            let a: Vec<Real> = (0..n).map(|_| rng.gen_range(0..6) as Real / 5.0).collect();
            let b: Vec<Real> = (0..n).map(|_| rng.gen_range(0..6) as Real / 5.0).collect();
            let fast = spearman(&a, &b);
            let slow = brute_force_spearman(&a, &b);
            assert!((fast - slow).abs() < 1e-9, "fast {fast} vs slow {slow}");
        }
    }

    #[test]
    fn emit_writes_deterministic_artifacts() {
        let det = tiny_detector(TrainMode::Sibling);
        let scene = generate_scene(54, 3).unwrap();
        let (cls, loc) = sensitivity_scan(&det, &scene, 0, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("probe").to_string_lossy().into_owned();
        let art1 = emit(&prefix, 0, 0, &cls, &loc).unwrap();
        let bytes1 = std::fs::read(&art1.cls_pgm).unwrap();
        let stats1 = std::fs::read(&art1.stats_json).unwrap();

        let (cls2, loc2) = sensitivity_scan(&det, &scene, 0, 5).unwrap();
        let art2 = emit(&prefix, 0, 0, &cls2, &loc2).unwrap();
        assert_eq!(bytes1, std::fs::read(&art2.cls_pgm).unwrap());
        assert_eq!(stats1, std::fs::read(&art2.stats_json).unwrap());

        let parsed: serde_json::Value =
            serde_json::from_slice(&stats1).unwrap();
        assert!(parsed["rank_correlation"].is_number());
        assert_eq!(parsed["grid_n"], 5);
    }
}
