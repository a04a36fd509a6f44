use std::ops::Range;

use super::{gemm, Architecture, Matrix, ModelSpec, Real};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Dense {
        inp: usize,
        out: usize,
        w: usize,
        b: usize,
    },
    /// 3x3 convolution, stride 1, zero padding 1.
    Conv {
        cin: usize,
        cout: usize,
        h: usize,
        w: usize,
        wo: usize,
        bo: usize,
    },
    Relu,
    /// 2x2 max-pool, stride 2.
    MaxPool { c: usize, h: usize, w: usize },
    GlobalAvg { c: usize, hw: usize },
}

pub(crate) struct WeightBlock {
    pub range: Range<usize>,
    pub fan_in: usize,
    pub gain: f64,
}

/// Flat parameter layout: body ops produce the penultimate features, then a
/// dense head maps them to logits.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub body: Vec<Op>,
    pub input_len: usize,
    pub feature_dim: usize,
    pub classes: usize,
    pub head_w: usize,
    pub head_b: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(spec: &ModelSpec) -> Self {
        let mut body = Vec::new();
        let mut offset = 0usize;
        let input_len = spec.input_len();
        let feature_dim = match &spec.architecture {
            Architecture::Linear => input_len,
            Architecture::Mlp { hidden } => {
                let mut inp = input_len;
                for &out in hidden {
                    body.push(Op::Dense {
                        inp,
                        out,
                        w: offset,
                        b: offset + inp * out,
                    });
                    offset += inp * out + out;
                    body.push(Op::Relu);
                    inp = out;
                }
                inp
            }
            Architecture::ConvNet { widths } => {
                let (mut c, mut h, mut w) = (spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]);
                for (block, &cout) in widths.iter().enumerate() {
                    body.push(Op::Conv {
                        cin: c,
                        cout,
                        h,
                        w,
                        wo: offset,
                        bo: offset + cout * c * 9,
                    });
                    offset += cout * c * 9 + cout;
                    body.push(Op::Relu);
                    c = cout;
                    if block < 2 {
                        body.push(Op::MaxPool { c, h, w });
                        h /= 2;
                        w /= 2;
                    }
                }
                body.push(Op::GlobalAvg { c, hw: h * w });
                c
            }
        };
        let head_w = offset;
        let head_b = offset + feature_dim * spec.num_classes;
        let total = head_b + spec.num_classes;
        Layout {
            body,
            input_len,
            feature_dim,
            classes: spec.num_classes,
            head_w,
            head_b,
            total,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.total
    }

    pub fn weight_blocks(&self) -> Vec<WeightBlock> {
        let mut blocks = Vec::new();
        for op in &self.body {
            match *op {
                Op::Dense { inp, out, w, .. } => blocks.push(WeightBlock {
                    range: w..w + inp * out,
                    fan_in: inp,
                    gain: 2.0,
                }),
                Op::Conv { cin, cout, wo, .. } => blocks.push(WeightBlock {
                    range: wo..wo + cout * cin * 9,
                    fan_in: cin * 9,
                    gain: 2.0,
                }),
                _ => {}
            }
        }
        blocks.push(WeightBlock {
            range: self.head_w..self.head_b,
            fan_in: self.feature_dim,
            gain: 1.0,
        });
        blocks
    }

    /// Index into `body` of the last parametrised op (last conv for conv
    /// nets, last hidden dense layer for MLPs).
    pub fn last_hidden_op(&self) -> Option<usize> {
        self.body
            .iter()
            .rposition(|op| matches!(op, Op::Conv { .. } | Op::Dense { .. }))
    }

    /// For each unit (output channel or neuron) of the last hidden layer, the
    /// parameter indices that produce it: incoming weights and bias.
    pub fn last_hidden_units(&self) -> Option<Vec<Vec<usize>>> {
        let op = &self.body[self.last_hidden_op()?];
        let (units, fan, w, b) = match *op {
            Op::Conv { cin, cout, wo, bo, .. } => (cout, cin * 9, wo, bo),
            Op::Dense { inp, out, w, b } => (out, inp, w, b),
            _ => unreachable!(),
        };
        Some(
            (0..units)
                .map(|u| (w + u * fan..w + (u + 1) * fan).chain([b + u]).collect())
                .collect(),
        )
    }
}

/// Forward-pass record kept for backpropagation.
pub struct Trace<T> {
    pub(crate) batch: usize,
    /// Input of every body op, in order.
    pub(crate) op_inputs: Vec<Vec<T>>,
    /// Argmax positions for max-pool ops (empty for others).
    pub(crate) pool_index: Vec<Vec<u32>>,
    pub features: Vec<T>,
    pub logits: Vec<T>,
}

impl<T: Real> Trace<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn feature_row(&self, i: usize, dim: usize) -> &[T] {
        &self.features[i * dim..(i + 1) * dim]
    }

    pub fn logit_row(&self, i: usize, classes: usize) -> &[T] {
        &self.logits[i * classes..(i + 1) * classes]
    }
}

/// A model's architecture evaluated at a borrowed parameter vector.
pub struct Network<'a, T> {
    layout: Layout,
    params: &'a [T],
}

impl<'a, T: Real> Network<'a, T> {
    pub fn new(spec: &ModelSpec, params: &'a [T]) -> Self {
        let layout = Layout::new(spec);
        assert_eq!(layout.total, params.len(), "parameter vector does not match spec");
        Network { layout, params }
    }

    pub fn num_classes(&self) -> usize {
        self.layout.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.layout.feature_dim
    }

    pub fn input_len(&self) -> usize {
        self.layout.input_len
    }

    pub fn parameter_count(&self) -> usize {
        self.layout.total
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn batch_size_of(&self, inputs: &[T]) -> Result<usize> {
        let d = self.layout.input_len;
        if inputs.len() % d != 0 {
            return Err(Error::Input(format!(
                "batch buffer of length {} is not a multiple of the sample size {d}",
                inputs.len()
            )));
        }
        Ok(inputs.len() / d)
    }

    /// Full forward pass keeping every intermediate needed by `backward`.
    pub fn forward(&self, inputs: &[T]) -> Result<Trace<T>> {
        let n = self.batch_size_of(inputs)?;
        let mut op_inputs = Vec::with_capacity(self.layout.body.len());
        let mut pool_index = Vec::with_capacity(self.layout.body.len());
        let mut act = inputs.to_vec();
        for op in &self.layout.body {
            let (next, idx) = self.apply(op, &act, n);
            op_inputs.push(act);
            pool_index.push(idx);
            act = next;
        }
        let logits = self.head_forward(&act, n);
        Ok(Trace {
            batch: n,
            op_inputs,
            pool_index,
            features: act,
            logits,
        })
    }

    pub fn features(&self, inputs: &[T]) -> Result<Matrix<T>> {
        let n = self.batch_size_of(inputs)?;
        let mut act = inputs.to_vec();
        for op in &self.layout.body {
            act = self.apply(op, &act, n).0;
        }
        Ok(Matrix::from_vec(n, self.layout.feature_dim, act))
    }

    pub fn logits(&self, inputs: &[T]) -> Result<Matrix<T>> {
        let features = self.features(inputs)?;
        self.head(&features)
    }

    pub fn head(&self, features: &Matrix<T>) -> Result<Matrix<T>> {
        if features.cols() != self.layout.feature_dim {
            return Err(Error::Input(format!(
                "expected {} features per row, got {}",
                self.layout.feature_dim,
                features.cols()
            )));
        }
        let n = features.rows();
        Ok(Matrix::from_vec(
            n,
            self.layout.classes,
            self.head_forward(features.as_slice(), n),
        ))
    }

    /// Output of the last hidden layer after its ReLU, shaped
    /// `(batch, units, spatial)`; spatial is 1 for dense layers.
    pub(crate) fn last_hidden_activations(&self, inputs: &[T]) -> Result<(Vec<T>, usize, usize)> {
        let n = self.batch_size_of(inputs)?;
        let last = self
            .layout
            .last_hidden_op()
            .ok_or_else(|| Error::Domain("architecture has no hidden layer to inspect".into()))?;
        let mut act = inputs.to_vec();
        // run through the layer and its ReLU
        for op in &self.layout.body[..=last + 1] {
            act = self.apply(op, &act, n).0;
        }
        let (units, spatial) = match self.layout.body[last] {
            Op::Conv { cout, h, w, .. } => (cout, h * w),
            Op::Dense { out, .. } => (out, 1),
            _ => unreachable!(),
        };
        Ok((act, units, spatial))
    }

    fn head_forward(&self, features: &[T], n: usize) -> Vec<T> {
        let (p, k) = (self.layout.feature_dim, self.layout.classes);
        dense_forward(
            features,
            n,
            p,
            k,
            &self.params[self.layout.head_w..self.layout.head_b],
            &self.params[self.layout.head_b..self.layout.head_b + k],
        )
    }

    fn apply(&self, op: &Op, x: &[T], n: usize) -> (Vec<T>, Vec<u32>) {
        let p = self.params;
        match *op {
            Op::Dense { inp, out, w, b } => (
                dense_forward(x, n, inp, out, &p[w..w + inp * out], &p[b..b + out]),
                Vec::new(),
            ),
            Op::Conv {
                cin,
                cout,
                h,
                w,
                wo,
                bo,
            } => (
                conv_forward(x, n, cin, cout, h, w, &p[wo..bo], &p[bo..bo + cout]),
                Vec::new(),
            ),
            Op::Relu => (x.iter().map(|&v| v.max(T::zero())).collect(), Vec::new()),
            Op::MaxPool { c, h, w } => maxpool_forward(x, n, c, h, w),
            Op::GlobalAvg { c, hw } => {
                let scale = T::one() / T::of_f64(hw as f64);
                let out = x
                    .chunks_exact(hw)
                    .take(n * c)
                    .map(|plane| plane.iter().copied().sum::<T>() * scale)
                    .collect();
                (out, Vec::new())
            }
        }
    }

    /// Accumulates parameter gradients into `grad` given the loss gradient
    /// with respect to the logits and, optionally, an extra gradient with
    /// respect to the penultimate features.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        grad_logits: &[T],
        grad_features: Option<&[T]>,
        grad: &mut [T],
    ) {
        let n = trace.batch;
        let (pdim, k) = (self.layout.feature_dim, self.layout.classes);
        assert_eq!(grad_logits.len(), n * k);
        assert_eq!(grad.len(), self.layout.total);
        let (hw, hb) = (self.layout.head_w, self.layout.head_b);
        let mut g = match grad_features {
            Some(extra) => {
                assert_eq!(extra.len(), n * pdim);
                extra.to_vec()
            }
            None => vec![T::zero(); n * pdim],
        };
        {
            let (before_b, rest) = grad.split_at_mut(hb);
            dense_backward(
                &trace.features,
                grad_logits,
                n,
                pdim,
                k,
                &self.params[hw..hb],
                &mut before_b[hw..],
                &mut rest[..k],
                Some(&mut g),
            );
        }
        for (i, op) in self.layout.body.iter().enumerate().rev() {
            let x = &trace.op_inputs[i];
            let need_input_grad = i > 0;
            g = match *op {
                Op::Dense { inp, out, w, b } => {
                    let mut gx = if need_input_grad {
                        Some(vec![T::zero(); n * inp])
                    } else {
                        None
                    };
                    let (gw_part, gb_part) = grad.split_at_mut(b);
                    dense_backward(
                        x,
                        &g,
                        n,
                        inp,
                        out,
                        &self.params[w..b],
                        &mut gw_part[w..],
                        &mut gb_part[..out],
                        gx.as_deref_mut(),
                    );
                    gx.unwrap_or_default()
                }
                Op::Conv {
                    cin,
                    cout,
                    h,
                    w,
                    wo,
                    bo,
                } => {
                    let (gw_part, gb_part) = grad.split_at_mut(bo);
                    conv_backward(
                        x,
                        &g,
                        n,
                        cin,
                        cout,
                        h,
                        w,
                        &self.params[wo..bo],
                        &mut gw_part[wo..],
                        &mut gb_part[..cout],
                        need_input_grad,
                    )
                }
                Op::Relu => {
                    // x is the pre-activation; ReLU passes gradient where x > 0
                    g.iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect()
                }
                Op::MaxPool { c, h, w } => {
                    let mut gx = vec![T::zero(); n * c * h * w];
                    let plane_in = h * w;
                    let plane_out = (h / 2) * (w / 2);
                    for (plane, (gout, idx)) in g
                        .chunks_exact(plane_out)
                        .zip(trace.pool_index[i].chunks_exact(plane_out))
                        .enumerate()
                    {
                        let base = plane * plane_in;
                        for (&gv, &j) in gout.iter().zip(idx) {
                            gx[base + j as usize] += gv;
                        }
                    }
                    gx
                }
                Op::GlobalAvg { c, hw: plane } => {
                    let scale = T::one() / T::of_f64(plane as f64);
                    let mut gx = Vec::with_capacity(n * c * plane);
                    for &gv in &g {
                        gx.extend(std::iter::repeat(gv * scale).take(plane));
                    }
                    gx
                }
            };
        }
    }
}

fn dense_forward<T: Real>(x: &[T], n: usize, inp: usize, out: usize, w: &[T], b: &[T]) -> Vec<T> {
    let mut y = Vec::with_capacity(n * out);
    for _ in 0..n {
        y.extend_from_slice(b);
    }
    // y += x w^T, w stored [out][inp]
    gemm(n, inp, out, x, (inp, 1), w, (1, inp), &mut y, (out, 1), true);
    y
}

#[allow(clippy::too_many_arguments)]
fn dense_backward<T: Real>(
    x: &[T],
    gy: &[T],
    n: usize,
    inp: usize,
    out: usize,
    w: &[T],
    gw: &mut [T],
    gb: &mut [T],
    gx: Option<&mut [T]>,
) {
    for row in gy.chunks_exact(out).take(n) {
        for (g, &v) in gb.iter_mut().zip(row) {
            *g += v;
        }
    }
    gemm(out, n, inp, gy, (1, out), x, (inp, 1), gw, (inp, 1), true);
    if let Some(gx) = gx {
        gemm(n, out, inp, gy, (out, 1), w, (inp, 1), gx, (inp, 1), true);
    }
}

/// Samples per im2col block; bounds scratch memory on large batches.
fn im2col_chunk(hw: usize, taps: usize) -> usize {
    ((1 << 20) / (hw * taps).max(1)).max(1)
}

/// Rows are output positions `(sample, y, x)`, columns are `(ci, ky, kx)`.
fn im2col<T: Real>(x: &[T], n: usize, cin: usize, h: usize, w: usize, col: &mut Vec<T>) {
    let taps = cin * 9;
    col.clear();
    col.resize(n * h * w * taps, T::zero());
    for s in 0..n {
        for ci in 0..cin {
            let plane = &x[(s * cin + ci) * h * w..(s * cin + ci + 1) * h * w];
            for oy in 0..h {
                for ox in 0..w {
                    let row = ((s * h + oy) * w + ox) * taps + ci * 9;
                    for ky in 0..3 {
                        let iy = oy + ky;
                        if iy < 1 || iy > h {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = ox + kx;
                            if ix < 1 || ix > w {
                                continue;
                            }
                            col[row + ky * 3 + kx] = plane[(iy - 1) * w + ix - 1];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(col: &[T], n: usize, cin: usize, h: usize, w: usize, gx: &mut [T]) {
    let taps = cin * 9;
    for s in 0..n {
        for ci in 0..cin {
            let plane = &mut gx[(s * cin + ci) * h * w..(s * cin + ci + 1) * h * w];
            for oy in 0..h {
                for ox in 0..w {
                    let row = ((s * h + oy) * w + ox) * taps + ci * 9;
                    for ky in 0..3 {
                        let iy = oy + ky;
                        if iy < 1 || iy > h {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = ox + kx;
                            if ix < 1 || ix > w {
                                continue;
                            }
                            plane[(iy - 1) * w + ix - 1] += col[row + ky * 3 + kx];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Real>(
    x: &[T],
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    weights: &[T],
    bias: &[T],
) -> Vec<T> {
    let (hw, taps) = (h * w, cin * 9);
    let mut y = vec![T::zero(); n * cout * hw];
    let mut col = Vec::new();
    let chunk = im2col_chunk(hw, taps);
    let mut tmp = Vec::new();
    for s0 in (0..n).step_by(chunk) {
        let m = chunk.min(n - s0);
        im2col(&x[s0 * cin * hw..(s0 + m) * cin * hw], m, cin, h, w, &mut col);
        tmp.clear();
        tmp.resize(m * hw * cout, T::zero());
        gemm(m * hw, taps, cout, &col, (taps, 1), weights, (1, taps), &mut tmp, (cout, 1), false);
        for s in 0..m {
            for co in 0..cout {
                let out = &mut y[((s0 + s) * cout + co) * hw..((s0 + s) * cout + co + 1) * hw];
                for (p, o) in out.iter_mut().enumerate() {
                    *o = tmp[(s * hw + p) * cout + co] + bias[co];
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Real>(
    x: &[T],
    gy: &[T],
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    weights: &[T],
    gw: &mut [T],
    gb: &mut [T],
    need_input_grad: bool,
) -> Vec<T> {
    let (hw, taps) = (h * w, cin * 9);
    let mut gx = if need_input_grad {
        vec![T::zero(); n * cin * hw]
    } else {
        Vec::new()
    };
    let chunk = im2col_chunk(hw, taps);
    let (mut col, mut gyt, mut gcol) = (Vec::new(), Vec::new(), Vec::new());
    for s0 in (0..n).step_by(chunk) {
        let m = chunk.min(n - s0);
        im2col(&x[s0 * cin * hw..(s0 + m) * cin * hw], m, cin, h, w, &mut col);
        gyt.clear();
        gyt.resize(m * hw * cout, T::zero());
        for s in 0..m {
            for co in 0..cout {
                let g = &gy[((s0 + s) * cout + co) * hw..((s0 + s) * cout + co + 1) * hw];
                for (p, &v) in g.iter().enumerate() {
                    gyt[(s * hw + p) * cout + co] = v;
                    gb[co] += v;
                }
            }
        }
        gemm(cout, m * hw, taps, &gyt, (1, cout), &col, (taps, 1), gw, (taps, 1), true);
        if need_input_grad {
            gcol.clear();
            gcol.resize(m * hw * taps, T::zero());
            gemm(m * hw, cout, taps, &gyt, (cout, 1), weights, (taps, 1), &mut gcol, (taps, 1), false);
            col2im_add(&gcol, m, cin, h, w, &mut gx[s0 * cin * hw..(s0 + m) * cin * hw]);
        }
    }
    gx
}

fn maxpool_forward<T: Real>(x: &[T], n: usize, c: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in x.chunks_exact(h * w).take(n * c) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (2 * oy) * w + 2 * ox;
                for j in [(2 * oy) * w + 2 * ox + 1, (2 * oy + 1) * w + 2 * ox, (2 * oy + 1) * w + 2 * ox + 1] {
                    if plane[j] > plane[best] {
                        best = j;
                    }
                }
                y.push(plane[best]);
                idx.push(best as u32);
            }
        }
    }
    (y, idx)
}
