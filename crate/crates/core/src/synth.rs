//! Synthetic detection corpus: rendered shape scenes plus a proposal
//! jitterer, standing in for a real dataset and a region-proposal stage.
//!
//! Scenes are pure functions of their seed. Shapes are anti-aliased by 4×4
//! coverage supersampling so object boundaries carry localization signal.
//! Class is the shape type: 0 = circle, 1 = square, 2 = triangle.

use crate::geometry::{clip_box, iou, BBox};
use crate::ppm;
use crate::{Error, Real, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DEFAULT_IMAGE_SIZE: usize = 128;
const SUPERSAMPLE: usize = 4;

/// One rendered image with its instances. `image` is `[H×W×3]` row-major in
/// `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub image: Vec<Real>,
    pub instances: Vec<(BBox, usize)>,
    pub seed: u64,
}

impl Scene {
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.image.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    /// Mirror the scene horizontally (image and boxes).
    pub fn hflip(&self) -> Scene {
        let (w, h) = (self.width, self.height);
        let mut image = vec![0.0; self.image.len()];
        for y in 0..h {
            for x in 0..w {
                let src = (y * w + x) * 3;
                let dst = (y * w + (w - 1 - x)) * 3;
                image[dst..dst + 3].copy_from_slice(&self.image[src..src + 3]);
            }
        }
        let wr = w as Real;
        let instances = self
            .instances
            .iter()
            .map(|(b, c)| (BBox::new(wr - b.x2, b.y1, wr - b.x1, b.y2), *c))
            .collect();
        Scene { width: w, height: h, image, instances, seed: self.seed }
    }
}

enum Shape {
    Circle { cx: Real, cy: Real, r: Real },
    Square { cx: Real, cy: Real, half: Real },
    Triangle { apex: (Real, Real), left: (Real, Real), right: (Real, Real) },
}

impl Shape {
    fn contains(&self, x: Real, y: Real) -> bool {
        match *self {
            Shape::Circle { cx, cy, r } => {
                let (dx, dy) = (x - cx, y - cy);
                dx * dx + dy * dy <= r * r
            }
            Shape::Square { cx, cy, half } => (x - cx).abs() <= half && (y - cy).abs() <= half,
            Shape::Triangle { apex, left, right } => {
                let sign = |a: (Real, Real), b: (Real, Real)| {
                    (x - b.0) * (a.1 - b.1) - (a.0 - b.0) * (y - b.1)
                };
                let d1 = sign(apex, left);
                let d2 = sign(left, right);
                let d3 = sign(right, apex);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
        }
    }

    fn bbox(&self) -> BBox {
        match *self {
            Shape::Circle { cx, cy, r } => BBox::new(cx - r, cy - r, cx + r, cy + r),
            Shape::Square { cx, cy, half } => {
                BBox::new(cx - half, cy - half, cx + half, cy + half)
            }
            Shape::Triangle { apex, left, right } => BBox::new(
                left.0.min(apex.0),
                apex.1,
                right.0.max(apex.0),
                left.1.max(right.1),
            ),
        }
    }
}

/// Render a reproducible scene with 1–4 shapes on a textured background.
/// `num_classes` must be 2 or 3 (class is the shape type).
pub fn generate_scene(seed: u64, num_classes: usize) -> Result<Scene> {
    generate_scene_sized(seed, num_classes, DEFAULT_IMAGE_SIZE)
}

pub fn generate_scene_sized(seed: u64, num_classes: usize, size: usize) -> Result<Scene> {
    if !(2..=3).contains(&num_classes) {
        return Err(Error::Config(format!(
            "num_classes must be 2 or 3 (one per shape type), got {num_classes}"
        )));
    }
    let (w, h) = (size, size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // smooth low-frequency background texture
    let base = [
        rng.gen_range(0.15..0.45) as Real,
        rng.gen_range(0.15..0.45) as Real,
        rng.gen_range(0.15..0.45) as Real,
    ];
    let (fx, fy) = (rng.gen_range(0.02..0.08) as Real, rng.gen_range(0.02..0.08) as Real);
    let phase = rng.gen_range(0.0..6.28) as Real;
    let amp = rng.gen_range(0.03..0.09) as Real;
    let mut image = vec![0.0; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let t = amp * ((fx * x as Real + fy * y as Real + phase).sin());
            let px = (y * w + x) * 3;
            for c in 0..3 {
                image[px + c] = (base[c] + t).clamp(0.0, 1.0);
            }
        }
    }

    // place 1–4 shapes, rejecting heavy overlap so assignment stays clean
    let n_shapes = rng.gen_range(1..=4usize);
    let mut shapes: Vec<(Shape, usize, [Real; 3])> = Vec::new();
    let mut boxes: Vec<BBox> = Vec::new();
    for _ in 0..n_shapes {
        for _attempt in 0..40 {
            let label = rng.gen_range(0..num_classes);
            let half = rng.gen_range(6.0..26.0) as Real;
            let cx = rng.gen_range(half + 1.0..w as Real - half - 1.0);
            let cy = rng.gen_range(half + 1.0..h as Real - half - 1.0);
            let shape = match label {
                0 => Shape::Circle { cx, cy, r: half },
                1 => Shape::Square { cx, cy, half },
                _ => {
                    let half_w = half * rng.gen_range(0.8..1.25) as Real;
                    Shape::Triangle {
                        apex: (cx, cy - half),
                        left: (cx - half_w, cy + half),
                        right: (cx + half_w, cy + half),
                    }
                }
            };
            let b = shape.bbox();
            if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > w as Real || b.y2 > h as Real {
                continue;
            }
            if boxes.iter().any(|other| iou(&b, other) > 0.3) {
                continue;
            }
            let color = [
                rng.gen_range(0.5..1.0) as Real,
                rng.gen_range(0.5..1.0) as Real,
                rng.gen_range(0.5..1.0) as Real,
            ];
            boxes.push(b);
            shapes.push((shape, label, color));
            break;
        }
    }

    // rasterize with coverage supersampling, back to front
    for (shape, _, color) in &shapes {
        let b = shape.bbox();
        let x_lo = (b.x1.floor().max(0.0)) as usize;
        let y_lo = (b.y1.floor().max(0.0)) as usize;
        let x_hi = (b.x2.ceil() as usize).min(w);
        let y_hi = (b.y2.ceil() as usize).min(h);
        let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as Real;
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as Real + (sx as Real + 0.5) / SUPERSAMPLE as Real;
                        let py = y as Real + (sy as Real + 0.5) / SUPERSAMPLE as Real;
                        if shape.contains(px, py) {
                            hits += 1;
                        }
                    }
                }
                if hits > 0 {
                    let alpha = hits as Real * inv;
                    let base_px = (y * w + x) * 3;
                    for c in 0..3 {
                        let v = &mut image[base_px + c];
                        *v = *v * (1.0 - alpha) + color[c] * alpha;
                    }
                }
            }
        }
    }

    let instances: Vec<(BBox, usize)> =
        shapes.iter().map(|(s, label, _)| (s.bbox(), *label)).collect();
    debug_assert!(instances.iter().all(|(b, _)| b.area() >= 16.0));
    Ok(Scene { width: w, height: h, image, instances, seed })
}

/// Magnitudes of the proposal jitter.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct JitterConfig {
    /// Center shift, uniform in `±center_frac · (w, h)`.
    pub center_frac: Real,
    /// Per-axis log-scale, uniform in `±log_scale`.
    pub log_scale: Real,
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig { center_frac: 0.3, log_scale: 0.4 }
    }
}

/// For each ground truth, emit `n_per_gt` jittered boxes plus an equal count
/// of random background boxes, all clipped to the image.
pub fn jitter_proposals(
    gts: &[BBox],
    n_per_gt: usize,
    cfg: &JitterConfig,
    image_w: Real,
    image_h: Real,
    rng: &mut impl Rng,
) -> Vec<BBox> {
    assert!(n_per_gt >= 1);
    let mut out = Vec::with_capacity(gts.len() * n_per_gt * 2);
    for gt in gts {
        let (gw, gh) = (gt.width(), gt.height());
        let (cx, cy) = gt.center();
        for _ in 0..n_per_gt {
            for _attempt in 0..20 {
                let ncx = cx
                    + if cfg.center_frac > 0.0 {
                        rng.gen_range(-cfg.center_frac..cfg.center_frac) as Real * gw
                    } else {
                        0.0
                    };
                let ncy = cy
                    + if cfg.center_frac > 0.0 {
                        rng.gen_range(-cfg.center_frac..cfg.center_frac) as Real * gh
                    } else {
                        0.0
                    };
                let nw = gw
                    * if cfg.log_scale > 0.0 {
                        (rng.gen_range(-cfg.log_scale..cfg.log_scale) as Real).exp()
                    } else {
                        1.0
                    };
                let nh = gh
                    * if cfg.log_scale > 0.0 {
                        (rng.gen_range(-cfg.log_scale..cfg.log_scale) as Real).exp()
                    } else {
                        1.0
                    };
                let b = clip_box(
                    &BBox::new(ncx - nw * 0.5, ncy - nh * 0.5, ncx + nw * 0.5, ncy + nh * 0.5),
                    image_w,
                    image_h,
                );
                if b.area() >= 4.0 {
                    out.push(b);
                    break;
                }
            }
        }
    }
    // background boxes: uniformly placed, size log-uniform
    let n_bg = gts.len() * n_per_gt;
    for _ in 0..n_bg {
        for _attempt in 0..20 {
            let s = (rng.gen_range((8.0 as Real).ln()..(64.0 as Real).ln()) as Real).exp();
            let ar = (rng.gen_range(-0.3..0.3) as Real).exp();
            let (bw, bh) = (s * ar, s / ar);
            let cx = rng.gen_range(0.0..image_w);
            let cy = rng.gen_range(0.0..image_h);
            let b = clip_box(
                &BBox::new(cx - bw * 0.5, cy - bh * 0.5, cx + bw * 0.5, cy + bh * 0.5),
                image_w,
                image_h,
            );
            if b.area() >= 4.0 {
                out.push(b);
                break;
            }
        }
    }
    out
}

// ── corpus on disk ───────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationLine {
    image: String,
    boxes: Vec<[Real; 4]>,
    labels: Vec<usize>,
}

/// Mix split and index into per-scene seeds (splitmix64 over the base seed).
pub fn scene_seed(base: u64, split: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(split.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(index.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Write one split: `scene_XXXXX.ppm` files plus `annotations.jsonl`.
pub fn save_split(dir: &Path, scenes: &[Scene]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut jsonl = String::new();
    for (i, scene) in scenes.iter().enumerate() {
        let name = format!("scene_{i:05}.ppm");
        ppm::write_ppm(&dir.join(&name), scene.width, scene.height, &scene.to_rgb8())?;
        let line = AnnotationLine {
            image: name,
            boxes: scene
                .instances
                .iter()
                .map(|(b, _)| [b.x1, b.y1, b.x2, b.y2])
                .collect(),
            labels: scene.instances.iter().map(|(_, c)| *c).collect(),
        };
        jsonl.push_str(&serde_json::to_string(&line)?);
        jsonl.push('\n');
    }
    std::fs::write(dir.join("annotations.jsonl"), jsonl)?;
    Ok(())
}

/// Load a split written by [`save_split`]. Loaded scenes carry their line
/// index as `seed` (the generator seed is not part of the on-disk schema).
pub fn load_split(dir: &Path) -> Result<Vec<Scene>> {
    let ann = std::fs::read_to_string(dir.join("annotations.jsonl"))?;
    let mut scenes = Vec::new();
    for (i, line) in ann.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationLine = serde_json::from_str(line)?;
        let (w, h, rgb) = ppm::read_ppm(&dir.join(&rec.image))?;
        if rec.boxes.len() != rec.labels.len() {
            return Err(Error::Data(format!(
                "{}: {} boxes vs {} labels",
                rec.image,
                rec.boxes.len(),
                rec.labels.len()
            )));
        }
        let instances: Vec<(BBox, usize)> = rec
            .boxes
            .iter()
            .zip(&rec.labels)
            .map(|(b, &l)| (BBox::new(b[0], b[1], b[2], b[3]), l))
            .collect();
        // degenerate ground-truth boxes are rejected at load time
        if let Some((bad, _)) = instances.iter().find(|(b, _)| b.area() <= 0.0) {
            return Err(Error::Data(format!(
                "{}: degenerate ground-truth box ({}, {}, {}, {})",
                rec.image, bad.x1, bad.y1, bad.x2, bad.y2
            )));
        }
        let image: Vec<Real> = rgb.iter().map(|&v| v as Real / 255.0).collect();
        scenes.push(Scene { width: w, height: h, image, instances, seed: i as u64 });
    }
    Ok(scenes)
}

/// Generate and persist a train/val corpus (the `gen-data` entry point).
pub fn generate_corpus(
    out: &Path,
    train: usize,
    val: usize,
    seed: u64,
    classes: usize,
) -> Result<()> {
    let train_scenes: Vec<Scene> = (0..train)
        .map(|i| generate_scene(scene_seed(seed, 0, i as u64), classes))
        .collect::<Result<_>>()?;
    let val_scenes: Vec<Scene> = (0..val)
        .map(|i| generate_scene(scene_seed(seed, 1, i as u64), classes))
        .collect::<Result<_>>()?;
    save_split(&out.join("train"), &train_scenes)?;
    save_split(&out.join("val"), &val_scenes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_scene(42, 3).unwrap();
        let b = generate_scene(42, 3).unwrap();
        assert_eq!(a.instances, b.instances);
        assert_eq!(
            a.image.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.image.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn labels_in_class_range_and_boxes_inside() {
        for seed in 0..50u64 {
            let s = generate_scene(seed, 3).unwrap();
            assert!(!s.instances.is_empty() && s.instances.len() <= 4);
            for (b, label) in &s.instances {
                assert!(*label < 3);
                assert!(b.area() >= 16.0);
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0);
                assert!(b.x2 <= s.width as Real && b.y2 <= s.height as Real);
            }
        }
        let two = generate_scene(7, 2).unwrap();
        assert!(two.instances.iter().all(|(_, l)| *l < 2));
    }

    #[test]
    fn invalid_class_count_is_rejected() {
        assert!(generate_scene(0, 1).is_err());
        assert!(generate_scene(0, 4).is_err());
    }

    #[test]
    fn five_hundred_scenes_under_ten_seconds() {
        let start = std::time::Instant::now();
        for i in 0..500u64 {
            let _ = generate_scene(scene_seed(99, 0, i), 3).unwrap();
        }
        let elapsed = start.elapsed();
        assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    }

    #[test]
    fn zero_magnitude_jitter_returns_gts() {
        let gts = vec![BBox::new(10.0, 12.0, 40.0, 44.0), BBox::new(60.0, 60.0, 90.0, 80.0)];
        let cfg = JitterConfig { center_frac: 0.0, log_scale: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let props = jitter_proposals(&gts, 3, &cfg, 128.0, 128.0, &mut rng);
        // first 6 are the jittered (identity) boxes, then 6 background
        assert_eq!(props.len(), 12);
        for (i, gt) in gts.iter().enumerate() {
            for j in 0..3 {
                let p = props[i * 3 + j];
                assert!((p.x1 - gt.x1).abs() < 1e-5 && (p.y2 - gt.y2).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn jitter_is_deterministic_under_fixed_seed() {
        let gts = vec![BBox::new(20.0, 20.0, 50.0, 60.0)];
        let cfg = JitterConfig::default();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            jitter_proposals(&gts, 4, &cfg, 128.0, 128.0, &mut rng)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn jitter_iou_spans_assignment_threshold() {
        // over many draws, jittered boxes land on both sides of IoU 0.5
        let gt = BBox::new(30.0, 30.0, 70.0, 80.0);
        let cfg = JitterConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut above = 0usize;
        let mut below = 0usize;
        for _ in 0..1000 {
            let props = jitter_proposals(&[gt], 10, &cfg, 128.0, 128.0, &mut rng);
            for p in &props[..10] {
                if iou(p, &gt) >= 0.5 {
                    above += 1;
                } else {
                    below += 1;
                }
            }
        }
        assert!(above > 500, "above {above}");
        assert!(below > 500, "below {below}");
    }

    #[test]
    fn corpus_round_trip_preserves_annotations() {
        let dir = tempfile::tempdir().unwrap();
        generate_corpus(dir.path(), 4, 2, 7, 3).unwrap();
        let train = load_split(&dir.path().join("train")).unwrap();
        let val = load_split(&dir.path().join("val")).unwrap();
        assert_eq!(train.len(), 4);
        assert_eq!(val.len(), 2);

        let fresh = generate_scene(scene_seed(7, 0, 2), 3).unwrap();
        assert_eq!(train[2].instances.len(), fresh.instances.len());
        for ((a, la), (b, lb)) in train[2].instances.iter().zip(&fresh.instances) {
            assert_eq!(la, lb);
            assert!((a.x1 - b.x1).abs() < 1e-4);
        }
        // pixel data round-trips through 8-bit quantization
        for (got, want) in train[2].image.iter().zip(&fresh.image) {
            assert!((got - want).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn hflip_mirrors_boxes() {
        let s = generate_scene(3, 3).unwrap();
        let f = s.hflip();
        let (b0, _) = s.instances[0];
        let (fb0, _) = f.instances[0];
        assert!((fb0.x1 - (s.width as Real - b0.x2)).abs() < 1e-5);
        for ((a, la), (b, lb)) in f.hflip().instances.iter().zip(&s.instances) {
            assert_eq!(la, lb);
            assert!((a.x1 - b.x1).abs() < 1e-4 && (a.x2 - b.x2).abs() < 1e-4);
        }
    }
}
