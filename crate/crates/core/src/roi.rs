//! Differentiable RoI feature extraction.
//!
//! Three pooling flavors share one sampling kernel:
//!
//! - [`roi_align`] — plain RoIAlign: the proposal is divided into `k×k` bins
//!   and each bin averages `samples_per_bin²` bilinear reads at regular
//!   sub-positions.
//! - [`roi_align_translated`] — pools the proposal rigidly shifted by a
//!   2-element offset tensor; gradients flow to the offset through the
//!   bilinear reads, which is what makes the proposal-wise translation
//!   learnable.
//! - [`deformable_pool`] — every sample point of bin `(y, x)` is shifted by
//!   that bin's learned `(dx, dy)` before the read.
//!
//! Offsets are in feature-map pixels; proposals are expressed in feature-map
//! coordinates (the caller applies the backbone stride scaling once at the
//! boundary). Out-of-bounds reads are zero-padded, so translated proposals
//! are pooled without clipping.

use crate::geometry::BBox;
use crate::tensor::{Tape, Var};
use crate::{Error, Real, Result};

/// Pooled `k×k×C` feature grid for one proposal, still attached to the graph.
pub struct RoiFeature {
    pub grid: Var,
    pub k: usize,
    pub channels: usize,
    pub source_proposal: BBox,
}

impl RoiFeature {
    /// Flattened `[1 × k·k·C]` row view for fully connected layers.
    pub fn flat_row(&self, tape: &mut Tape) -> Result<Var> {
        tape.stack_rows(&[self.grid])
    }
}

/// Proposal-wise translation in pixels (already scaled by `γ·(w, h)`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaR {
    pub dx: Real,
    pub dy: Real,
}

/// Rigid translation of a proposal: width and height are preserved exactly.
pub fn translate_proposal(p: &BBox, dr: DeltaR) -> BBox {
    p.translated(dr.dx, dr.dy)
}

enum OffsetMode {
    /// Plain RoIAlign: zero offset everywhere.
    None,
    /// One `(dx, dy)` applied to every sample point, read from a 2-element
    /// tensor node.
    Uniform(Var),
    /// Per-bin `(dx, dy)` from a `k·k·2` tensor node.
    PerBin(Var),
}

/// RoIAlign over `map [H×W×C]`.
pub fn roi_align(
    tape: &mut Tape,
    map: Var,
    p: &BBox,
    k: usize,
    samples_per_bin: usize,
) -> Result<RoiFeature> {
    pool(tape, map, p, OffsetMode::None, k, samples_per_bin)
}

/// RoIAlign of the proposal shifted rigidly by `dr` (a 2-element tensor);
/// differentiable with respect to the map and `dr`.
pub fn roi_align_translated(
    tape: &mut Tape,
    map: Var,
    p: &BBox,
    dr: Var,
    k: usize,
    samples_per_bin: usize,
) -> Result<RoiFeature> {
    if tape.value(dr).len() != 2 {
        return Err(Error::shape(
            "roi_align_translated",
            format!("dr must have 2 elements, got {}", tape.value(dr).len()),
        ));
    }
    pool(tape, map, p, OffsetMode::Uniform(dr), k, samples_per_bin)
}

/// Deformable pooling: identical bin layout to [`roi_align`], with every
/// sample point of bin `(y, x)` shifted by that bin's `(dx, dy)` before the
/// bilinear read. `dc` is laid out `[k×k×2]` row-major as
/// `offsets[(y·k + x)·2] = dx`, `offsets[(y·k + x)·2 + 1] = dy`.
pub fn deformable_pool(
    tape: &mut Tape,
    map: Var,
    p: &BBox,
    dc: Var,
    k: usize,
    samples_per_bin: usize,
) -> Result<RoiFeature> {
    if tape.value(dc).len() != k * k * 2 {
        return Err(Error::shape(
            "deformable_pool",
            format!("dc has {} elements, expected k·k·2 = {}", tape.value(dc).len(), k * k * 2),
        ));
    }
    pool(tape, map, p, OffsetMode::PerBin(dc), k, samples_per_bin)
}

fn pool(
    tape: &mut Tape,
    map: Var,
    p: &BBox,
    offsets: OffsetMode,
    k: usize,
    samples_per_bin: usize,
) -> Result<RoiFeature> {
    if k < 1 || samples_per_bin < 1 {
        return Err(Error::shape("roi_pool", "k and samples_per_bin must be at least 1"));
    }
    if p.width() <= 0.0 || p.height() <= 0.0 {
        return Err(Error::degenerate(
            "roi_pool",
            format!("proposal has non-positive size {}×{}", p.width(), p.height()),
        ));
    }
    let (h, w, c) = tape.dims3(map, "roi_pool")?;

    // Snapshot offset values for the forward pass; the node id is kept so
    // backward can scatter into the offset tensor.
    let (offset_vals, offset_link) = match &offsets {
        OffsetMode::None => (vec![0.0; 2], OffsetLink::None),
        OffsetMode::Uniform(v) => (tape.value(*v).to_vec(), OffsetLink::Uniform(v.0)),
        OffsetMode::PerBin(v) => (tape.value(*v).to_vec(), OffsetLink::PerBin(v.0)),
    };

    let geom = PoolGeometry {
        x1: p.x1,
        y1: p.y1,
        bin_w: p.width() / k as Real,
        bin_h: p.height() / k as Real,
        k,
        s: samples_per_bin,
        h,
        w,
        c,
    };

    let mut out = vec![0.0; k * k * c];
    {
        let mv = tape.value(map);
        geom.for_each_sample(&offset_vals, |bin, x, y| {
            accumulate_bilinear(mv, h, w, c, x, y, &mut out[bin * c..(bin + 1) * c]);
        });
        let inv = 1.0 / (samples_per_bin * samples_per_bin) as Real;
        out.iter_mut().for_each(|v| *v *= inv);
    }

    let needs_grad = tape.requires_grad(map)
        || match offset_link {
            OffsetLink::None => false,
            OffsetLink::Uniform(id) | OffsetLink::PerBin(id) => tape.requires_grad(Var(id)),
        };
    let rule = needs_grad.then(|| {
        Box::new(PoolBwd { map: map.0, offset_link, offset_vals, geom }) as Box<dyn crate::tensor::BackwardRule>
    });
    let grid = tape.push_node(out, vec![k, k, c], rule.is_some(), rule);
    Ok(RoiFeature { grid, k, channels: c, source_proposal: *p })
}

enum OffsetLink {
    None,
    Uniform(usize),
    PerBin(usize),
}

struct PoolGeometry {
    x1: Real,
    y1: Real,
    bin_w: Real,
    bin_h: Real,
    k: usize,
    s: usize,
    h: usize,
    w: usize,
    c: usize,
}

impl PoolGeometry {
    /// Visit every sample point as `(bin_index, x, y)`. Offset layout is the
    /// caller's: 2 values (uniform) or `k·k·2` (per bin); plain pooling
    /// passes two zeros and reads them for every bin.
    fn for_each_sample(&self, offsets: &[Real], mut visit: impl FnMut(usize, Real, Real)) {
        let per_bin = offsets.len() != 2;
        for by in 0..self.k {
            for bx in 0..self.k {
                let bin = by * self.k + bx;
                let (dx, dy) = if per_bin {
                    (offsets[bin * 2], offsets[bin * 2 + 1])
                } else {
                    (offsets[0], offsets[1])
                };
                for sy in 0..self.s {
                    let y = self.y1
                        + (by as Real + (sy as Real + 0.5) / self.s as Real) * self.bin_h
                        + dy;
                    for sx in 0..self.s {
                        let x = self.x1
                            + (bx as Real + (sx as Real + 0.5) / self.s as Real) * self.bin_w
                            + dx;
                        visit(bin, x, y);
                    }
                }
            }
        }
    }
}

fn corner_weights(x: Real, y: Real) -> (Real, Real, [Real; 4]) {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    (x0, y0, [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy])
}

fn accumulate_bilinear(map: &[Real], h: usize, w: usize, c: usize, x: Real, y: Real, acc: &mut [Real]) {
    let (x0, y0, wgt) = corner_weights(x, y);
    let corners = [(x0, y0, wgt[0]), (x0 + 1.0, y0, wgt[1]), (x0, y0 + 1.0, wgt[2]), (x0 + 1.0, y0 + 1.0, wgt[3])];
    for (cx, cy, wv) in corners {
        if cx >= 0.0 && cy >= 0.0 && (cx as usize) < w && (cy as usize) < h {
            let base = ((cy as usize) * w + cx as usize) * c;
            for (a, &v) in acc.iter_mut().zip(&map[base..base + c]) {
                *a += wv * v;
            }
        }
    }
}

struct PoolBwd {
    map: usize,
    offset_link: OffsetLink,
    offset_vals: Vec<Real>,
    geom: PoolGeometry,
}

impl crate::tensor::BackwardRule for PoolBwd {
    fn backward(&self, g: &[Real], ctx: &mut crate::tensor::BwdCtx<'_>) {
        let PoolGeometry { h, w, c, s, .. } = self.geom;
        let inv = 1.0 / (s * s) as Real;
        let map_vals = ctx.value(self.map).to_vec();
        let map_needs = ctx.needs_grad(self.map);
        let offset_id = match self.offset_link {
            OffsetLink::None => None,
            OffsetLink::Uniform(id) | OffsetLink::PerBin(id) => Some(id),
        };
        let offsets_need = offset_id.map(|id| ctx.needs_grad(id)).unwrap_or(false);

        let mut dmap = vec![0.0; map_vals.len()];
        let mut doff = vec![0.0; self.offset_vals.len()];

        self.geom.for_each_sample(&self.offset_vals, |bin, x, y| {
            let gout = &g[bin * c..(bin + 1) * c];
            let (x0, y0, wgt) = corner_weights(x, y);
            if map_needs {
                let corners = [
                    (x0, y0, wgt[0]),
                    (x0 + 1.0, y0, wgt[1]),
                    (x0, y0 + 1.0, wgt[2]),
                    (x0 + 1.0, y0 + 1.0, wgt[3]),
                ];
                for (cx, cy, wv) in corners {
                    if cx >= 0.0 && cy >= 0.0 && (cx as usize) < w && (cy as usize) < h {
                        let base = ((cy as usize) * w + cx as usize) * c;
                        for (d, &gv) in dmap[base..base + c].iter_mut().zip(gout) {
                            *d += inv * wv * gv;
                        }
                    }
                }
            }
            if offsets_need {
                let read = |cx: Real, cy: Real, ch: usize| -> Real {
                    if cx >= 0.0 && cy >= 0.0 && (cx as usize) < w && (cy as usize) < h {
                        map_vals[((cy as usize) * w + cx as usize) * c + ch]
                    } else {
                        0.0
                    }
                };
                let fx = x - x0;
                let fy = y - y0;
                let mut gx = 0.0;
                let mut gy = 0.0;
                for ch in 0..c {
                    let v00 = read(x0, y0, ch);
                    let v10 = read(x0 + 1.0, y0, ch);
                    let v01 = read(x0, y0 + 1.0, ch);
                    let v11 = read(x0 + 1.0, y0 + 1.0, ch);
                    gx += gout[ch] * ((1.0 - fy) * (v10 - v00) + fy * (v11 - v01));
                    gy += gout[ch] * ((1.0 - fx) * (v01 - v00) + fx * (v11 - v10));
                }
                if doff.len() == 2 {
                    doff[0] += inv * gx;
                    doff[1] += inv * gy;
                } else {
                    doff[bin * 2] += inv * gx;
                    doff[bin * 2 + 1] += inv * gy;
                }
            }
        });

        if map_needs {
            for (d, &v) in ctx.grad_mut(self.map).iter_mut().zip(&dmap) {
                *d += v;
            }
        }
        if offsets_need {
            if let Some(id) = offset_id {
                for (d, &v) in ctx.grad_mut(id).iter_mut().zip(&doff) {
                    *d += v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check;
    use crate::{GRAD_CHECK_EPS, GRAD_CHECK_TOL};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp_map(h: usize, w: usize) -> Vec<Real> {
        // linear in x and y: v = 2x + 3y
        let mut m = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                m[y * w + x] = 2.0 * x as Real + 3.0 * y as Real;
            }
        }
        m
    }

    /// Dense-grid average of bilinear reads over one bin, the brute-force
    /// oracle for pooled values.
    fn dense_bin_average(map: &[Real], h: usize, w: usize, b: &BBox, n: usize) -> Real {
        let mut acc = 0.0;
        for sy in 0..n {
            for sx in 0..n {
                let x = b.x1 + (sx as Real + 0.5) / n as Real * b.width();
                let y = b.y1 + (sy as Real + 0.5) / n as Real * b.height();
                let mut cell = [0.0];
                accumulate_bilinear(map, h, w, 1, x, y, &mut cell);
                acc += cell[0];
            }
        }
        acc / (n * n) as Real
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let mut tape = Tape::new();
        let map = tape.constant(vec![5.5; 16 * 16 * 3], vec![16, 16, 3]);
        let p = BBox::new(2.3, 4.1, 11.7, 13.9);
        let f = roi_align(&mut tape, map, &p, 7, 2).unwrap();
        for &v in tape.value(f.grid) {
            assert!((v - 5.5).abs() < 1e-5);
        }
    }

    #[test]
    fn one_by_one_pool_on_ramp_matches_brute_force() {
        let (h, w) = (12, 12);
        let mut tape = Tape::new();
        let map = tape.constant(ramp_map(h, w), vec![h, w, 1]);
        let p = BBox::new(2.0, 3.0, 8.0, 9.0);
        let f = roi_align(&mut tape, map, &p, 1, 2).unwrap();
        let got = tape.value(f.grid)[0];

        let oracle = dense_bin_average(&ramp_map(h, w), h, w, &p, 200);
        assert!((got - oracle).abs() < 1e-3, "got {got}, oracle {oracle}");

        // for a linear ramp the bin average equals the bin-center value
        let (cx, cy) = p.center();
        let center = 2.0 * cx + 3.0 * cy;
        assert!((got - center).abs() < 1e-4);
    }

    #[test]
    fn degenerate_proposal_is_error() {
        let mut tape = Tape::new();
        let map = tape.constant(vec![0.0; 16], vec![4, 4, 1]);
        let p = BBox::new(1.0, 1.0, 1.0, 3.0);
        assert!(matches!(
            roi_align(&mut tape, map, &p, 2, 2),
            Err(crate::Error::DegenerateBox { .. })
        ));
    }

    #[test]
    fn translate_proposal_examples() {
        let p = BBox::new(10.0, 10.0, 30.0, 20.0);
        assert_eq!(translate_proposal(&p, DeltaR { dx: 0.0, dy: 0.0 }), p);

        let t = translate_proposal(&p, DeltaR { dx: 2.0, dy: -3.0 });
        assert_eq!(t, BBox::new(12.0, 7.0, 32.0, 17.0));
        assert_eq!(t.width(), p.width());
        assert_eq!(t.height(), p.height());

        let back = translate_proposal(&t, DeltaR { dx: -2.0, dy: 3.0 });
        assert_eq!(back, p);
    }

    #[test]
    fn zero_offsets_equal_roi_align_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (h, w, c) = (10, 10, 3);
        let data: Vec<Real> = (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let map = tape.constant(data, vec![h, w, c]);
        let p = BBox::new(1.2, 0.7, 8.3, 9.1);
        let plain = roi_align(&mut tape, map, &p, 5, 2).unwrap();
        let zeros = tape.constant(vec![0.0; 5 * 5 * 2], vec![5, 5, 2]);
        let deform = deformable_pool(&mut tape, map, &p, zeros, 5, 2).unwrap();
        let a = tape.value(plain.grid);
        let b = tape.value(deform.grid);
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn uniform_offset_on_constant_map_is_unchanged() {
        let mut tape = Tape::new();
        let map = tape.constant(vec![2.0; 20 * 20], vec![20, 20, 1]);
        let p = BBox::new(5.0, 5.0, 15.0, 15.0);
        let plain = roi_align(&mut tape, map, &p, 3, 2).unwrap();
        let mut off = vec![0.0; 3 * 3 * 2];
        off.iter_mut().step_by(2).for_each(|v| *v = 1.7);
        let dc = tape.constant(off, vec![3, 3, 2]);
        let shifted = deformable_pool(&mut tape, map, &p, dc, 3, 2).unwrap();
        for (a, b) in tape.value(plain.grid).iter().zip(tape.value(shifted.grid)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_offset_equals_shifted_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, w, c) = (14, 14, 2);
        let data: Vec<Real> = (0..h * w * c).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut tape = Tape::new();
        let map = tape.constant(data, vec![h, w, c]);
        let p = BBox::new(2.0, 3.0, 9.0, 10.0);
        let delta = 1.3;

        let mut off = vec![0.0; 7 * 7 * 2];
        off.iter_mut().step_by(2).for_each(|v| *v = delta);
        let dc = tape.constant(off, vec![7, 7, 2]);
        let deform = deformable_pool(&mut tape, map, &p, dc, 7, 2).unwrap();

        let shifted_box = p.translated(delta, 0.0);
        let plain = roi_align(&mut tape, map, &shifted_box, 7, 2).unwrap();

        for (a, b) in tape.value(deform.grid).iter().zip(tape.value(plain.grid)) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn dc_shape_mismatch_is_error() {
        let mut tape = Tape::new();
        let map = tape.constant(vec![0.0; 16], vec![4, 4, 1]);
        let dc = tape.constant(vec![0.0; 8], vec![2, 2, 2]);
        let p = BBox::new(0.5, 0.5, 3.0, 3.0);
        assert!(matches!(
            deformable_pool(&mut tape, map, &p, dc, 3, 2),
            Err(crate::Error::Shape { .. })
        ));
    }

    #[test]
    fn roi_align_gradient_wrt_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, w) = (6, 6);
        let data: Vec<Real> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = BBox::new(1.1, 1.4, 4.6, 4.9);
        let err = finite_difference_check(
            |tape, vars| {
                let f = roi_align(tape, vars[0], &p, 2, 2)?;
                Ok(tape.sum(f.grid))
            },
            &[(data, vec![h, w, 1])],
            GRAD_CHECK_EPS,
        )
        .unwrap();
        assert!(err < GRAD_CHECK_TOL, "rel err {err}");
    }

    #[test]
    fn deformable_gradient_wrt_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (h, w) = (8, 8);
        let data: Vec<Real> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let map_fixed = data.clone();
        let p = BBox::new(1.3, 1.2, 6.1, 6.4);
        // fixed offsets chosen so no sample point sits within the FD step of
        // a lattice line (bilinear reads have kinks there)
        let offsets: Vec<Real> = vec![0.13, 0.21, -0.17, 0.23, 0.11, -0.29, 0.19, -0.23];
        let err = finite_difference_check(
            move |tape, vars| {
                let map = tape.constant(map_fixed.clone(), vec![h, w, 1]);
                let f = deformable_pool(tape, map, &p, vars[0], 2, 2)?;
                Ok(tape.sum(f.grid))
            },
            &[(offsets, vec![2, 2, 2])],
            GRAD_CHECK_EPS,
        )
        .unwrap();
        assert!(err < GRAD_CHECK_TOL, "rel err {err}");
    }

    #[test]
    fn translated_pool_gradient_wrt_dr() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (h, w) = (8, 8);
        let data: Vec<Real> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = BBox::new(2.2, 2.3, 5.8, 5.6);
        let err = finite_difference_check(
            move |tape, vars| {
                let map = tape.constant(data.clone(), vec![h, w, 1]);
                let f = roi_align_translated(tape, map, &p, vars[0], 3, 2)?;
                Ok(tape.sum(f.grid))
            },
            &[(vec![0.37, -0.21], vec![2])],
            GRAD_CHECK_EPS,
        )
        .unwrap();
        assert!(err < GRAD_CHECK_TOL, "rel err {err}");
    }
}
