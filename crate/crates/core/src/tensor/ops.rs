//! Differentiable operations recorded on the [`Tape`].
//!
//! Every builder validates shapes, evaluates the forward value eagerly, and
//! (when some input carries gradient) attaches a backward rule. Forward code
//! is plain loops over flat slices; the inner dimension is kept contiguous so
//! the hot products vectorize.

use super::{BackwardRule, BwdCtx, Tape, Var};
use crate::{Error, Real, Result};

// Smooth-L1 changes regime at |d| = 1 (quadratic inside, linear outside).
const SMOOTH_L1_TRANSITION: Real = 1.0;

impl Tape {
    fn any_grad(&self, ids: &[Var]) -> bool {
        ids.iter().any(|v| self.requires_grad(*v))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, format!("expected 2-d tensor, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if k != kb {
            return Err(Error::shape("matmul", format!("inner dims differ: {k} vs {kb}")));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..m {
                let arow = &av[i * k..(i + 1) * k];
                let crow = &mut out[i * n..(i + 1) * n];
                for (p, &ap) in arow.iter().enumerate() {
                    let brow = &bv[p * n..(p + 1) * n];
                    for j in 0..n {
                        crow[j] += ap * brow[j];
                    }
                }
            }
        }
        let rule = self
            .any_grad(&[a, b])
            .then(|| Box::new(MatMulBwd { a: a.0, b: b.0, m, k, n }) as Box<dyn BackwardRule>);
        Ok(self.push_node(out, vec![m, n], rule.is_some(), rule))
    }

    /// `[m×k] · [n×k]ᵀ -> [m×n]`; the layout used by linear layers whose
    /// weight is stored `[out×in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, kb) = self.dims2(b, "matmul_nt")?;
        if k != kb {
            return Err(Error::shape("matmul_nt", format!("inner dims differ: {k} vs {kb}")));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..m {
                let arow = &av[i * k..(i + 1) * k];
                let crow = &mut out[i * n..(i + 1) * n];
                for (j, c) in crow.iter_mut().enumerate() {
                    let brow = &bv[j * k..(j + 1) * k];
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += arow[p] * brow[p];
                    }
                    *c = acc;
                }
            }
        }
        let rule = self
            .any_grad(&[a, b])
            .then(|| Box::new(MatMulNtBwd { a: a.0, b: b.0, m, k, n }) as Box<dyn BackwardRule>);
        Ok(self.push_node(out, vec![m, n], rule.is_some(), rule))
    }

    fn binary_elementwise(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(Real, Real) -> Real,
        kind: BinKind,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("shape mismatch: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<Real> =
            self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let rule = self
            .any_grad(&[a, b])
            .then(|| Box::new(BinBwd { a: a.0, b: b.0, kind }) as Box<dyn BackwardRule>);
        Ok(self.push_node(out, shape, rule.is_some(), rule))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, "add", |x, y| x + y, BinKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, "sub", |x, y| x - y, BinKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, "mul", |x, y| x * y, BinKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, "div", |x, y| x / y, BinKind::Div)
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: Real, shift: Real) -> Var {
        let out: Vec<Real> = self.value(x).iter().map(|&v| scale * v + shift).collect();
        let shape = self.shape(x).to_vec();
        let rule = self
            .requires_grad(x)
            .then(|| Box::new(AffineBwd { x: x.0, scale }) as Box<dyn BackwardRule>);
        self.push_node(out, shape, rule.is_some(), rule)
    }

    /// Elementwise product with a constant vector of identical length.
    pub fn mul_const(&mut self, x: Var, consts: Vec<Real>) -> Result<Var> {
        if consts.len() != self.value(x).len() {
            return Err(Error::shape(
                "mul_const",
                format!("const len {} vs tensor len {}", consts.len(), self.value(x).len()),
            ));
        }
        let out: Vec<Real> = self.value(x).iter().zip(&consts).map(|(&v, &c)| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rule = self
            .requires_grad(x)
            .then(|| Box::new(MulConstBwd { x: x.0, consts }) as Box<dyn BackwardRule>);
        Ok(self.push_node(out, shape, rule.is_some(), rule))
    }

    /// Broadcast row add: `[m×n] + [n]`.
    pub fn add_rows(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_rows")?;
        if self.value(bias).len() != n {
            return Err(Error::shape(
                "add_rows",
                format!("bias len {} vs row width {n}", self.value(bias).len()),
            ));
        }
        let mut out = self.value(x).to_vec();
        {
            let bv = self.value(bias);
            for row in out.chunks_mut(n) {
                for (o, &b) in row.iter_mut().zip(bv) {
                    *o += b;
                }
            }
        }
        let rule = self.any_grad(&[x, bias]).then(|| {
            Box::new(AddRowsBwd { x: x.0, bias: bias.0, m, n }) as Box<dyn BackwardRule>
        });
        Ok(self.push_node(out, vec![m, n], rule.is_some(), rule))
    }

    /// Elementwise `max(0, x)`; subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<Real> = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = self.shape(x).to_vec();
        let rule =
            self.requires_grad(x).then(|| Box::new(ReluBwd { x: x.0 }) as Box<dyn BackwardRule>);
        self.push_node(out, shape, rule.is_some(), rule)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out: Vec<Real> = self.value(x).iter().map(|&v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        let id = self.len();
        let rule = self
            .requires_grad(x)
            .then(|| Box::new(ExpBwd { x: x.0, out: id }) as Box<dyn BackwardRule>);
        self.push_node(out, shape, rule.is_some(), rule)
    }

    /// Elementwise `max(x, c)`; gradient flows where `x > c`.
    pub fn max_const(&mut self, x: Var, c: Real) -> Var {
        let out: Vec<Real> = self.value(x).iter().map(|&v| v.max(c)).collect();
        let shape = self.shape(x).to_vec();
        let rule = self
            .requires_grad(x)
            .then(|| Box::new(ClampBwd { x: x.0, c, is_max: true }) as Box<dyn BackwardRule>);
        self.push_node(out, shape, rule.is_some(), rule)
    }

    /// Elementwise `min(x, c)`; gradient flows where `x < c`.
    pub fn min_const(&mut self, x: Var, c: Real) -> Var {
        let out: Vec<Real> = self.value(x).iter().map(|&v| v.min(c)).collect();
        let shape = self.shape(x).to_vec();
        let rule = self
            .requires_grad(x)
            .then(|| Box::new(ClampBwd { x: x.0, c, is_max: false }) as Box<dyn BackwardRule>);
        self.push_node(out, shape, rule.is_some(), rule)
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: Real = self.value(x).iter().sum();
        let rule =
            self.requires_grad(x).then(|| Box::new(SumBwd { x: x.0 }) as Box<dyn BackwardRule>);
        self.push_node(vec![total], vec![1], rule.is_some(), rule)
    }

    /// Mean of scalar inputs; an empty list yields a constant 0.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Ok(self.scalar_const(0.0));
        }
        let mut total = 0.0;
        for &v in xs {
            if self.value(v).len() != 1 {
                return Err(Error::shape("mean_of", "inputs must be scalars".to_string()));
            }
            total += self.value(v)[0];
        }
        let n = xs.len();
        let rule = self.any_grad(xs).then(|| {
            Box::new(MeanOfBwd { xs: xs.iter().map(|v| v.0).collect() }) as Box<dyn BackwardRule>
        });
        Ok(self.push_node(vec![total / n as Real], vec![1], rule.is_some(), rule))
    }

    /// Stack same-length inputs (flattened) as rows of an `[n×d]` tensor.
    pub fn stack_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("stack_rows", "empty input list".to_string()));
        }
        let d = self.value(xs[0]).len();
        let mut out = Vec::with_capacity(xs.len() * d);
        for &v in xs {
            if self.value(v).len() != d {
                return Err(Error::shape(
                    "stack_rows",
                    format!("row length {} vs expected {d}", self.value(v).len()),
                ));
            }
            out.extend_from_slice(self.value(v));
        }
        let rule = self.any_grad(xs).then(|| {
            Box::new(StackRowsBwd { xs: xs.iter().map(|v| v.0).collect(), d })
                as Box<dyn BackwardRule>
        });
        Ok(self.push_node(out, vec![xs.len(), d], rule.is_some(), rule))
    }

    /// Concatenate `[m_i×n]` tensors along rows into `[Σm_i × n]`.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("concat_rows", "empty input list".to_string()));
        }
        let (_, n) = self.dims2(xs[0], "concat_rows")?;
        let mut total_rows = 0;
        let mut parts = Vec::with_capacity(xs.len());
        for &v in xs {
            let (m, nv) = self.dims2(v, "concat_rows")?;
            if nv != n {
                return Err(Error::shape(
                    "concat_rows",
                    format!("row width {nv} vs expected {n}"),
                ));
            }
            total_rows += m;
            parts.push((v.0, m));
        }
        let mut out = Vec::with_capacity(total_rows * n);
        for &v in xs {
            out.extend_from_slice(self.value(v));
        }
        let rule = self
            .any_grad(xs)
            .then(|| Box::new(ConcatRowsBwd { parts, n }) as Box<dyn BackwardRule>);
        Ok(self.push_node(out, vec![total_rows, n], rule.is_some(), rule))
    }

    /// Contiguous slice of the flattened tensor.
    pub fn slice_flat(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let total = self.value(x).len();
        if start + len > total {
            return Err(Error::index(
                "slice_flat",
                format!("range {start}..{} out of {total}", start + len),
            ));
        }
        let out = self.value(x)[start..start + len].to_vec();
        let rule = self.requires_grad(x).then(|| {
            Box::new(SliceBwd { x: x.0, start, total }) as Box<dyn BackwardRule>
        });
        Ok(self.push_node(out, vec![len], rule.is_some(), rule))
    }

    /// `[len]` slice of one row of an `[m×n]` tensor.
    pub fn slice_row(&mut self, x: Var, row: usize, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_row")?;
        if row >= m {
            return Err(Error::index("slice_row", format!("row {row} out of {m}")));
        }
        if start + len > n {
            return Err(Error::index(
                "slice_row",
                format!("cols {start}..{} out of {n}", start + len),
            ));
        }
        self.slice_flat(x, row * n + start, len)
    }

    pub fn element(&mut self, x: Var, idx: usize) -> Result<Var> {
        self.slice_flat(x, idx, 1)
    }

    /// Row-wise softmax of an `[m×n]` tensor, stabilized by max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "softmax_rows")?;
        let mut out = vec![0.0; m * n];
        for (row_out, row_in) in out.chunks_mut(n).zip(self.values[x.0].data.chunks(n)) {
            let max = row_in.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let mut denom = 0.0;
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = (v - max).exp();
                denom += *o;
            }
            for o in row_out.iter_mut() {
                *o /= denom;
            }
        }
        let id = self.len();
        let rule = self
            .requires_grad(x)
            .then(|| Box::new(SoftmaxRowsBwd { x: x.0, out: id, n }) as Box<dyn BackwardRule>);
        Ok(self.push_node(out, vec![m, n], rule.is_some(), rule))
    }

    /// `-log softmax(logits)[label]`, mean over rows.
    ///
    /// The log-sum-exp pulls one occurrence of the max out of the sum and
    /// uses `ln_1p`, which keeps tiny losses accurate near zero.
    pub fn softmax_cross_entropy_rows(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(logits, "softmax_cross_entropy")?;
        if n < 2 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("need at least 2 classes, got {n}"),
            ));
        }
        if labels.len() != m {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for {m} rows", labels.len()),
            ));
        }
        let mut total = 0.0;
        for (row, &label) in self.values[logits.0].data.chunks(n).zip(labels) {
            if label >= n {
                return Err(Error::index(
                    "softmax_cross_entropy",
                    format!("label {label} out of {n} classes"),
                ));
            }
            let (argmax, &max) = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .expect("non-empty row");
            let mut rest = 0.0;
            for (i, &v) in row.iter().enumerate() {
                if i != argmax {
                    rest += (v - max).exp();
                }
            }
            // lse - row[label], grouped so confident losses keep full
            // precision instead of vanishing into `max`
            total += (max - row[label]) + rest.ln_1p();
        }
        let rule = self.requires_grad(logits).then(|| {
            Box::new(CrossEntropyBwd { logits: logits.0, labels: labels.to_vec(), m, n })
                as Box<dyn BackwardRule>
        });
        Ok(self.push_node(vec![total / m as Real], vec![1], rule.is_some(), rule))
    }

    /// Single-vector cross entropy: `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let len = self.value(logits).len();
        if self.shape(logits).len() != 2 {
            let row = self.stack_rows(&[logits])?;
            debug_assert_eq!(self.shape(row), &[1, len]);
            return self.softmax_cross_entropy_rows(row, &[label]);
        }
        self.softmax_cross_entropy_rows(logits, &[label])
    }

    /// Smooth-L1 of `pred - target`, summed over coordinates.
    pub fn smooth_l1_sum(&mut self, pred: Var, target: &[Real]) -> Result<Var> {
        if self.value(pred).len() != target.len() {
            return Err(Error::shape(
                "smooth_l1_sum",
                format!("pred len {} vs target len {}", self.value(pred).len(), target.len()),
            ));
        }
        let mut total = 0.0;
        for (&p, &t) in self.value(pred).iter().zip(target) {
            let d = p - t;
            total += if d.abs() < SMOOTH_L1_TRANSITION { 0.5 * d * d } else { d.abs() - 0.5 };
        }
        let rule = self.requires_grad(pred).then(|| {
            Box::new(SmoothL1Bwd { pred: pred.0, target: target.to_vec() })
                as Box<dyn BackwardRule>
        });
        Ok(self.push_node(vec![total], vec![1], rule.is_some(), rule))
    }

    /// Bilinear read of a `[H×W×C]` map at fixed continuous coordinates.
    /// Out-of-bounds corners read 0.
    pub fn bilinear_sample(&mut self, map: Var, x: Real, y: Real) -> Result<Var> {
        let (h, w, c) = self.dims3(map, "bilinear_sample")?;
        let out = bilinear_forward(self.value(map), h, w, c, x, y);
        let rule = self.requires_grad(map).then(|| {
            Box::new(BilinearBwd { map: map.0, xy: None, h, w, c, x, y })
                as Box<dyn BackwardRule>
        });
        Ok(self.push_node(out, vec![c], rule.is_some(), rule))
    }

    /// Bilinear read whose coordinates are a 2-element tensor `(x, y)`;
    /// differentiable with respect to the map and the coordinates.
    pub fn bilinear_sample_var(&mut self, map: Var, xy: Var) -> Result<Var> {
        let (h, w, c) = self.dims3(map, "bilinear_sample")?;
        if self.value(xy).len() != 2 {
            return Err(Error::shape(
                "bilinear_sample",
                format!("xy must have 2 elements, got {}", self.value(xy).len()),
            ));
        }
        let (x, y) = (self.value(xy)[0], self.value(xy)[1]);
        let out = bilinear_forward(self.value(map), h, w, c, x, y);
        let rule = self.any_grad(&[map, xy]).then(|| {
            Box::new(BilinearBwd { map: map.0, xy: Some(xy.0), h, w, c, x, y })
                as Box<dyn BackwardRule>
        });
        Ok(self.push_node(out, vec![c], rule.is_some(), rule))
    }

    /// 2-d convolution over `[H×W×Cin]` with weight `[kh×kw×Cin×Cout]`,
    /// zero padding, square stride.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (h, w, cin) = self.dims3(input, "conv2d")?;
        let ws = self.shape(weight).to_vec();
        if ws.len() != 4 || ws[2] != cin {
            return Err(Error::shape(
                "conv2d",
                format!("weight shape {ws:?} incompatible with input channels {cin}"),
            ));
        }
        let (kh, kw, cout) = (ws[0], ws[1], ws[3]);
        if self.value(bias).len() != cout {
            return Err(Error::shape(
                "conv2d",
                format!("bias len {} vs out channels {cout}", self.value(bias).len()),
            ));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape("conv2d", "kernel larger than padded input".to_string()));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; ho * wo * cout];
        {
            let iv = self.value(input);
            let wv = self.value(weight);
            let bv = self.value(bias);
            conv2d_forward(iv, wv, bv, &mut out, h, w, cin, kh, kw, cout, ho, wo, stride, pad);
        }
        let rule = self.any_grad(&[input, weight, bias]).then(|| {
            Box::new(Conv2dBwd {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
                h,
                w,
                cin,
                kh,
                kw,
                cout,
                ho,
                wo,
                stride,
                pad,
            }) as Box<dyn BackwardRule>
        });
        Ok(self.push_node(out, vec![ho, wo, cout], rule.is_some(), rule))
    }

    pub(crate) fn dims3(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        let s = self.shape(v);
        if s.len() != 3 {
            return Err(Error::shape(op, format!("expected 3-d tensor, got shape {s:?}")));
        }
        Ok((s[0], s[1], s[2]))
    }
}

// ── forward kernels shared with backward rules ──────────────────────────

/// The four corners of a bilinear read: `(index, weight)` for in-bounds
/// corners of `(x, y)` on an `H×W` lattice with pixel centers at integers.
fn bilinear_corners(h: usize, w: usize, x: Real, y: Real) -> [(Option<(usize, usize)>, Real); 4] {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let mut corners = [(None, 0.0); 4];
    let coords = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1.0, y0, fx * (1.0 - fy)),
        (x0, y0 + 1.0, (1.0 - fx) * fy),
        (x0 + 1.0, y0 + 1.0, fx * fy),
    ];
    for (slot, (cx, cy, wgt)) in corners.iter_mut().zip(coords) {
        if cx >= 0.0 && cy >= 0.0 && (cx as usize) < w && (cy as usize) < h {
            *slot = (Some((cy as usize, cx as usize)), wgt);
        }
    }
    corners
}

fn bilinear_forward(map: &[Real], h: usize, w: usize, c: usize, x: Real, y: Real) -> Vec<Real> {
    let mut out = vec![0.0; c];
    for (idx, wgt) in bilinear_corners(h, w, x, y) {
        if let Some((iy, ix)) = idx {
            let base = (iy * w + ix) * c;
            for (o, &v) in out.iter_mut().zip(&map[base..base + c]) {
                *o += wgt * v;
            }
        }
    }
    out
}

/// d(sample)/dx and d(sample)/dy per channel, accumulated against `grad`.
fn bilinear_coord_grad(
    map: &[Real],
    h: usize,
    w: usize,
    c: usize,
    x: Real,
    y: Real,
    grad: &[Real],
) -> (Real, Real) {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let read = |cx: Real, cy: Real, ch: usize| -> Real {
        if cx >= 0.0 && cy >= 0.0 && (cx as usize) < w && (cy as usize) < h {
            map[((cy as usize) * w + cx as usize) * c + ch]
        } else {
            0.0
        }
    };
    let mut gx = 0.0;
    let mut gy = 0.0;
    for ch in 0..c {
        let v00 = read(x0, y0, ch);
        let v10 = read(x0 + 1.0, y0, ch);
        let v01 = read(x0, y0 + 1.0, ch);
        let v11 = read(x0 + 1.0, y0 + 1.0, ch);
        gx += grad[ch] * ((1.0 - fy) * (v10 - v00) + fy * (v11 - v01));
        gy += grad[ch] * ((1.0 - fx) * (v01 - v00) + fx * (v11 - v10));
    }
    (gx, gy)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    input: &[Real],
    weight: &[Real],
    bias: &[Real],
    out: &mut [Real],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
) {
    for oy in 0..ho {
        for ox in 0..wo {
            let acc = &mut out[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
            acc.copy_from_slice(bias);
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix as usize >= w {
                        continue;
                    }
                    let ibase = (iy as usize * w + ix as usize) * cin;
                    let wbase = (ky * kw + kx) * cin * cout;
                    for ic in 0..cin {
                        let v = input[ibase + ic];
                        let wrow = &weight[wbase + ic * cout..wbase + (ic + 1) * cout];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a += v * wv;
                        }
                    }
                }
            }
        }
    }
}

// ── backward rules ───────────────────────────────────────────────────────

struct MatMulBwd {
    a: usize,
    b: usize,
    m: usize,
    k: usize,
    n: usize,
}

impl BackwardRule for MatMulBwd {
    fn backward(&self, g: &[Real], ctx: &mut BwdCtx<'_>) {
        let (m, k, n) = (self.m, self.k, self.n);
        if ctx.needs_grad(self.a) {
            let bv = ctx.value(self.b).to_vec();
            let da = ctx.grad_mut(self.a);
            // dA = g · Bᵀ
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                let darow = &mut da[i * k..(i + 1) * k];
                for (p, d) in darow.iter_mut().enumerate() {
                    let brow = &bv[p * n..(p + 1) * n];
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += grow[j] * brow[j];
                    }
                    *d += acc;
                }
            }
        }
        if ctx.needs_grad(self.b) {
            let av = ctx.value(self.a).to_vec();
            let db = ctx.grad_mut(self.b);
            // dB = Aᵀ · g
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for p in 0..k {
                    let ap = av[i * k + p];
                    let dbrow = &mut db[p * n..(p + 1) * n];
                    for j in 0..n {
                        dbrow[j] += ap * grow[j];
                    }
                }
            }
        }
    }
}

struct MatMulNtBwd {
    a: usize,
    b: usize,
    m: usize,
    k: usize,
    n: usize,
}

impl BackwardRule for MatMulNtBwd {
    fn backward(&self, g: &[Real], ctx: &mut BwdCtx<'_>) {
        let (m, k, n) = (self.m, self.k, self.n);
        if ctx.needs_grad(self.a) {
            let bv = ctx.value(self.b).to_vec();
            let da = ctx.grad_mut(self.a);
            // dA = g · B   (B is [n×k])
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                let darow = &mut da[i * k..(i + 1) * k];
                for (j, &gj) in grow.iter().enumerate() {
                    let brow = &bv[j * k..(j + 1) * k];
                    for p in 0..k {
                        darow[p] += gj * brow[p];
                    }
                }
            }
        }
        if ctx.needs_grad(self.b) {
            let av = ctx.value(self.a).to_vec();
            let db = ctx.grad_mut(self.b);
            // dB = gᵀ · A
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                let arow = &av[i * k..(i + 1) * k];
                for (j, &gj) in grow.iter().enumerate() {
                    let dbrow = &mut db[j * k..(j + 1) * k];
                    for p in 0..k {
                        dbrow[p] += gj * arow[p];
                    }
                }
            }
        }
    }
}

enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct BinBwd {
    a: usize,
    b: usize,
    kind: BinKind,
}

impl BackwardRule for BinBwd {
    fn backward(&self, g: &[Real], ctx: &mut BwdCtx<'_>) {
        match self.kind {
            BinKind::Add => {
                if ctx.needs_grad(self.a) {
                    for (d, &gv) in ctx.grad_mut(self.a).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if ctx.needs_grad(self.b) {
                    for (d, &gv) in ctx.grad_mut(self.b).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            BinKind::Sub => {
                if ctx.needs_grad(self.a) {
                    for (d, &gv) in ctx.grad_mut(self.a).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if ctx.needs_grad(self.b) {
                    for (d, &gv) in ctx.grad_mut(self.b).iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            BinKind::Mul => {
                if ctx.needs_grad(self.a) {
                    let bv = ctx.value(self.b).to_vec();
                    for ((d, &gv), &bvv) in ctx.grad_mut(self.a).iter_mut().zip(g).zip(&bv) {
                        *d += gv * bvv;
                    }
                }
                if ctx.needs_grad(self.b) {
                    let av = ctx.value(self.a).to_vec();
                    for ((d, &gv), &avv) in ctx.grad_mut(self.b).iter_mut().zip(g).zip(&av) {
                        *d += gv * avv;
                    }
                }
            }
            BinKind::Div => {
                let av = ctx.value(self.a).to_vec();
                let bv = ctx.value(self.b).to_vec();
                if ctx.needs_grad(self.a) {
                    for ((d, &gv), &bvv) in ctx.grad_mut(self.a).iter_mut().zip(g).zip(&bv) {
                        *d += gv / bvv;
                    }
                }
                if ctx.needs_grad(self.b) {
                    let db = ctx.grad_mut(self.b);
                    for i in 0..g.len() {
                        db[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }
        }
    }
}

struct AffineBwd {
    x: usize,
    scale: Real,
}

impl BackwardRule for AffineBwd {
    fn backward(&self, g: &[Real], ctx: &mut BwdCtx<'_>) {
        let scale = self.scale;
        for (d, &gv) in ctx.grad_mut(self.x).iter_mut().zip(g) {
            *d += scale * gv;
        }
    }
}

struct MulConstBwd {
    x: usize,
    consts: Vec<Real>,
}

impl BackwardRule for MulConstBwd {
    fn backward(&self, g: &[Real], ctx: &mut BwdCtx<'_>) {
        let dx = ctx.grad_mut(self.x);
        for ((d, &gv), &c) in dx.iter_mut().zip(g).zip(&self.consts) {
            *d += gv * c;
        }
    }
}

struct AddRowsBwd {
    x: usize,
    bias: usize,
    m: usize,
    n: usize,
}

impl BackwardRule for AddRowsBwd {
    fn backward(&self, g: &[Real], ctx: &mut BwdCtx<'_>) {
        if ctx.needs_grad(self.x) {
            for (d, &gv) in ctx.grad_mut(self.x).iter_mut().zip(g) {
                *d += gv;
            }
        }
        if ctx.needs_grad(self.bias) {
            let db = ctx.grad_mut(self.bias);
            for i in 0..self.m {
                for (d, &gv) in db.iter_mut().zip(&g[i * self.n..(i + 1) * self.n]) {
                    *d += gv;
                }
            }
        }
    }
}

struct ReluBwd {
    x: usize,
}

impl BackwardRule for ReluBwd {
    fn backward(&self, g: &[Real], ctx: &mut BwdCtx<'_>) {
        let xv = ctx.value(self.x).to_vec();
        for ((d, &gv), &x) in ctx.grad_mut(self.x).iter_mut().zip(g).zip(&xv) {
            if x > 0.0 {
                *d += gv;
            }
        }
    }
}

struct ExpBwd {
    x: usize,
    out: usize,
}

impl BackwardRule for ExpBwd {
    fn backward(&self, g: &[Real], ctx: &mut BwdCtx<'_>) {
        let ov = ctx.value(self.out).to_vec();
        for ((d, &gv), &o) in ctx.grad_mut(self.x).iter_mut().zip(g).zip(&ov) {
            *d += gv * o;
        }
    }
}

struct ClampBwd {
    x: usize,
    c: Real,
    is_max: bool,
}

impl BackwardRule for ClampBwd {
    fn backward(&self, g: &[Real], ctx: &mut BwdCtx<'_>) {
        let xv = ctx.value(self.x).to_vec();
        let c = self.c;
        let is_max = self.is_max;
        for ((d, &gv), &x) in ctx.grad_mut(self.x).iter_mut().zip(g).zip(&xv) {
            let pass = if is_max { x > c } else { x < c };
            if pass {
                *d += gv;
            }
        }
    }
}

struct SumBwd {
    x: usize,
}

impl BackwardRule for SumBwd {
    fn backward(&self, g: &[Real], ctx: &mut BwdCtx<'_>) {
        let gv = g[0];
        for d in ctx.grad_mut(self.x).iter_mut() {
            *d += gv;
        }
    }
}

struct MeanOfBwd {
    xs: Vec<usize>,
}

impl BackwardRule for MeanOfBwd {
    fn backward(&self, g: &[Real], ctx: &mut BwdCtx<'_>) {
        let share = g[0] / self.xs.len() as Real;
        for &x in &self.xs {
            if ctx.needs_grad(x) {
                ctx.grad_mut(x)[0] += share;
            }
        }
    }
}

struct StackRowsBwd {
    xs: Vec<usize>,
    d: usize,
}

impl BackwardRule for StackRowsBwd {
    fn backward(&self, g: &[Real], ctx: &mut BwdCtx<'_>) {
        for (i, &x) in self.xs.iter().enumerate() {
            if ctx.needs_grad(x) {
                let src = &g[i * self.d..(i + 1) * self.d];
                for (d, &gv) in ctx.grad_mut(x).iter_mut().zip(src) {
                    *d += gv;
                }
            }
        }
    }
}

struct ConcatRowsBwd {
    parts: Vec<(usize, usize)>,
    n: usize,
}

impl BackwardRule for ConcatRowsBwd {
    fn backward(&self, g: &[Real], ctx: &mut BwdCtx<'_>) {
        let mut row = 0;
        for &(id, rows) in &self.parts {
            if ctx.needs_grad(id) {
                let src = &g[row * self.n..(row + rows) * self.n];
                for (d, &gv) in ctx.grad_mut(id).iter_mut().zip(src) {
                    *d += gv;
                }
            }
            row += rows;
        }
    }
}

struct SliceBwd {
    x: usize,
    start: usize,
    total: usize,
}

impl BackwardRule for SliceBwd {
    fn backward(&self, g: &[Real], ctx: &mut BwdCtx<'_>) {
        debug_assert!(self.start + g.len() <= self.total);
        let dx = ctx.grad_mut(self.x);
        for (d, &gv) in dx[self.start..self.start + g.len()].iter_mut().zip(g) {
            *d += gv;
        }
    }
}

struct SoftmaxRowsBwd {
    x: usize,
    out: usize,
    n: usize,
}

impl BackwardRule for SoftmaxRowsBwd {
    fn backward(&self, g: &[Real], ctx: &mut BwdCtx<'_>) {
        let probs = ctx.value(self.out).to_vec();
        let n = self.n;
        let dx = ctx.grad_mut(self.x);
        for ((drow, grow), prow) in dx.chunks_mut(n).zip(g.chunks(n)).zip(probs.chunks(n)) {
            let dot: Real = grow.iter().zip(prow).map(|(&gv, &p)| gv * p).sum();
            for ((d, &gv), &p) in drow.iter_mut().zip(grow).zip(prow) {
                *d += p * (gv - dot);
            }
        }
    }
}

struct CrossEntropyBwd {
    logits: usize,
    labels: Vec<usize>,
    m: usize,
    n: usize,
}

impl BackwardRule for CrossEntropyBwd {
    fn backward(&self, g: &[Real], ctx: &mut BwdCtx<'_>) {
        let scale = g[0] / self.m as Real;
        let logits = ctx.value(self.logits).to_vec();
        let n = self.n;
        let dx = ctx.grad_mut(self.logits);
        for ((drow, row), &label) in dx.chunks_mut(n).zip(logits.chunks(n)).zip(&self.labels) {
            let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let mut denom = 0.0;
            for &v in row {
                denom += (v - max).exp();
            }
            for (i, (d, &v)) in drow.iter_mut().zip(row).enumerate() {
                let p = (v - max).exp() / denom;
                let onehot = if i == label { 1.0 } else { 0.0 };
                *d += scale * (p - onehot);
            }
        }
    }
}

struct SmoothL1Bwd {
    pred: usize,
    target: Vec<Real>,
}

impl BackwardRule for SmoothL1Bwd {
    fn backward(&self, g: &[Real], ctx: &mut BwdCtx<'_>) {
        let gv = g[0];
        let pv = ctx.value(self.pred).to_vec();
        let dx = ctx.grad_mut(self.pred);
        for ((d, &p), &t) in dx.iter_mut().zip(&pv).zip(&self.target) {
            let diff = p - t;
            let slope = if diff.abs() < SMOOTH_L1_TRANSITION { diff } else { diff.signum() };
            *d += gv * slope;
        }
    }
}

struct BilinearBwd {
    map: usize,
    xy: Option<usize>,
    h: usize,
    w: usize,
    c: usize,
    x: Real,
    y: Real,
}

impl BackwardRule for BilinearBwd {
    fn backward(&self, g: &[Real], ctx: &mut BwdCtx<'_>) {
        let (h, w, c) = (self.h, self.w, self.c);
        if ctx.needs_grad(self.map) {
            let corners = bilinear_corners(h, w, self.x, self.y);
            let dmap = ctx.grad_mut(self.map);
            for (idx, wgt) in corners {
                if let Some((iy, ix)) = idx {
                    let base = (iy * w + ix) * c;
                    for (d, &gv) in dmap[base..base + c].iter_mut().zip(g) {
                        *d += wgt * gv;
                    }
                }
            }
        }
        if let Some(xy) = self.xy {
            if ctx.needs_grad(xy) {
                let map = ctx.value(self.map).to_vec();
                let (gx, gy) = bilinear_coord_grad(&map, h, w, c, self.x, self.y, g);
                let dxy = ctx.grad_mut(xy);
                dxy[0] += gx;
                dxy[1] += gy;
            }
        }
    }
}

struct Conv2dBwd {
    input: usize,
    weight: usize,
    bias: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl BackwardRule for Conv2dBwd {
    fn backward(&self, g: &[Real], ctx: &mut BwdCtx<'_>) {
        let Conv2dBwd { h, w, cin, kh, kw, cout, ho, wo, stride, pad, .. } = *self;
        if ctx.needs_grad(self.bias) {
            let db = ctx.grad_mut(self.bias);
            for cell in g.chunks(cout) {
                for (d, &gv) in db.iter_mut().zip(cell) {
                    *d += gv;
                }
            }
        }
        if ctx.needs_grad(self.weight) {
            let iv = ctx.value(self.input).to_vec();
            let dw = ctx.grad_mut(self.weight);
            for oy in 0..ho {
                for ox in 0..wo {
                    let grow = &g[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let ibase = (iy as usize * w + ix as usize) * cin;
                            let wbase = (ky * kw + kx) * cin * cout;
                            for ic in 0..cin {
                                let v = iv[ibase + ic];
                                let drow = &mut dw[wbase + ic * cout..wbase + (ic + 1) * cout];
                                for (d, &gv) in drow.iter_mut().zip(grow) {
                                    *d += v * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        if ctx.needs_grad(self.input) {
            let wv = ctx.value(self.weight).to_vec();
            let di = ctx.grad_mut(self.input);
            for oy in 0..ho {
                for ox in 0..wo {
                    let grow = &g[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let ibase = (iy as usize * w + ix as usize) * cin;
                            let wbase = (ky * kw + kx) * cin * cout;
                            for ic in 0..cin {
                                let wrow = &wv[wbase + ic * cout..wbase + (ic + 1) * cout];
                                let mut acc = 0.0;
                                for (g1, &wv1) in grow.iter().zip(wrow) {
                                    acc += g1 * wv1;
                                }
                                di[ibase + ic] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
}
