//! Tape-based reverse-mode differentiation over dense `f64` grids.
//!
//! Operations are recorded on a [`Tape`] as they execute. Each call returns a
//! [`Var`] handle naming the produced node; [`Tape::backward`] walks the tape
//! from a scalar loss back to the leaves and leaves `∂loss/∂node` for every
//! node that requires a gradient.
//!
//! The op set is the one the correspondence model composes: elementwise
//! arithmetic, matmul, direct 2D convolution, relu/exp/log, reductions,
//! row softmax (optionally masked), row L2 normalization and norms, flat
//! gathers, column concat/slice and `stop_gradient`.
//!
//! ```
//! use liir::diff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]), true).unwrap();
//! let s = tape.sum(x).unwrap();
//! tape.backward(s).unwrap();
//! assert_eq!(tape.grad(x).unwrap().values(), &[1.0, 1.0, 1.0]);
//! ```

use std::rc::Rc;

use crate::error::{shape_err, Error, Result};

const NORM_EPS: f64 = 1e-12;

/// Row-major dense grid of doubles.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(shape_err!(
                "shape {:?} holds {} values, got {}",
                shape,
                expected,
                values.len()
            ));
        }
        Ok(Tensor { shape, values })
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Tensor { shape: vec![values.len()], values }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, values: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: Vec::new(), values: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.values.len(), 1);
        self.values[0]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.values.len() {
            return Err(shape_err!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Geometry of a 2D convolution over a single `[C, H, W]` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad` is in bounds.
    fn valid_range(&self, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let start = if k >= p { 0 } else { (p - k).div_ceil(s) };
        if in_len + p <= k {
            return (0, 0);
        }
        let end = ((in_len - 1 + p - k) / s + 1).min(out_len);
        (start.min(end), end)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    // masked entries are exactly zero in the output, so the backward pass
    // needs no mask
    Softmax {
        input: Var,
    },
    NormalizeRows(Var),
    NormRows(Var),
    Gather {
        input: Var,
        index: Rc<[usize]>,
    },
    ConcatCols(Var, Var),
    SliceCols {
        input: Var,
        start: usize,
    },
    Transpose(Var),
    Reshape(Var),
    StopGradient,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations, in execution (and therefore topological) order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn check_finite(what: &str, v: &[f64]) -> Result<()> {
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("{what} produced {bad}")));
    }
    Ok(())
}

fn rows_cols(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [n] => Ok((1, *n)),
        [r, c] => Ok((*r, *c)),
        _ => Err(shape_err!("expected a 1D or 2D tensor, got {:?}", shape)),
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_vals(v: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = v[r * cols + c];
        }
    }
    out
}

fn conv2d_forward(x: &[f64], wt: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let (h, w, k, s, p) = (g.height, g.width, g.kernel, g.stride, g.pad);
    let mut out = vec![0.0; g.out_channels * ho * wo];
    let ranges: Vec<(usize, usize)> = (0..k).map(|kx| g.valid_range(kx, w, wo)).collect();
    let yranges: Vec<(usize, usize)> = (0..k).map(|ky| g.valid_range(ky, h, ho)).collect();
    for oc in 0..g.out_channels {
        let oplane = &mut out[oc * ho * wo..(oc + 1) * ho * wo];
        oplane.fill(bias[oc]);
        for ic in 0..g.in_channels {
            let iplane = &x[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                let (y0, y1) = yranges[ky];
                for kx in 0..k {
                    let wv = wt[((oc * g.in_channels + ic) * k + ky) * k + kx];
                    let (x0, x1) = ranges[kx];
                    for oy in y0..y1 {
                        let iy = oy * s + ky - p;
                        let irow = &iplane[iy * w..(iy + 1) * w];
                        let orow = &mut oplane[oy * wo..(oy + 1) * wo];
                        for ox in x0..x1 {
                            orow[ox] += wv * irow[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (grad_input, grad_weight, grad_bias).
fn conv2d_backward(
    x: &[f64],
    wt: &[f64],
    gout: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let (h, w, k, s, p) = (g.height, g.width, g.kernel, g.stride, g.pad);
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; g.out_channels];
    let ranges: Vec<(usize, usize)> = (0..k).map(|kx| g.valid_range(kx, w, wo)).collect();
    let yranges: Vec<(usize, usize)> = (0..k).map(|ky| g.valid_range(ky, h, ho)).collect();
    for oc in 0..g.out_channels {
        let gplane = &gout[oc * ho * wo..(oc + 1) * ho * wo];
        gb[oc] = gplane.iter().sum();
        for ic in 0..g.in_channels {
            let iplane = &x[ic * h * w..(ic + 1) * h * w];
            let gxplane = &mut gx[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                let (y0, y1) = yranges[ky];
                for kx in 0..k {
                    let widx = ((oc * g.in_channels + ic) * k + ky) * k + kx;
                    let wv = wt[widx];
                    let (x0, x1) = ranges[kx];
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let iy = oy * s + ky - p;
                        let grow = &gplane[oy * wo..(oy + 1) * wo];
                        let irow = &iplane[iy * w..(iy + 1) * w];
                        let gxrow = &mut gxplane[iy * w..(iy + 1) * w];
                        for ox in x0..x1 {
                            let ix = ox * s + kx - p;
                            acc += grow[ox] * irow[ix];
                            gxrow[ix] += wv * grow[ox];
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    (gx, gw, gb)
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: &[f64]) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        None => *slot = Some(contrib.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if one reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            values: g.clone(),
        })
    }

    /// Input node ids of every recorded op, in tape order.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf | Op::StopGradient => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::ConcatCols(a, b) => vec![*a, *b],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => vec![*input, *weight, *bias],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::NormalizeRows(a)
            | Op::NormRows(a)
            | Op::Transpose(a)
            | Op::Reshape(a) => vec![*a],
            Op::Softmax { input, .. } | Op::Gather { input, .. } | Op::SliceCols { input, .. } => {
                vec![*input]
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, what: &str) -> Result<Var> {
        check_finite(what, &value.values)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (&self.value(a).shape, &self.value(b).shape);
        if sa != sb {
            return Err(shape_err!("{what}: {:?} vs {:?}", sa, sb));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let va = self.value(a);
        let vb = self.value(b);
        let values = va.values.iter().zip(&vb.values).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor {
            shape: va.shape.clone(),
            values,
        };
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg, what)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let va = self.value(a);
        let out = Tensor {
            shape: va.shape.clone(),
            values: va.values.iter().map(|x| x * c).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg, "scale")
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape.clone(), self.value(b).shape.clone());
        let (m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(shape_err!("matmul: {:?} x {:?}", sa, sb)),
        };
        let mut out = vec![0.0; m * n];
        matmul_into(&self.value(a).values, &self.value(b).values, &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    /// Direct convolution of a `[C, H, W]` image with `[O, C, K, K]` weights and `[O]` bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let si = self.value(input).shape.clone();
        let sw = self.value(weight).shape.clone();
        let sb = self.value(bias).shape.clone();
        let geom = match (si.as_slice(), sw.as_slice(), sb.as_slice()) {
            ([c, h, w], [o, c2, k, k2], [o2]) if c == c2 && k == k2 && o == o2 && stride > 0 => ConvGeom {
                in_channels: *c,
                out_channels: *o,
                height: *h,
                width: *w,
                kernel: *k,
                stride,
                pad,
            },
            _ => return Err(shape_err!("conv2d: input {:?}, weight {:?}, bias {:?}", si, sw, sb)),
        };
        if geom.height + 2 * pad < geom.kernel || geom.width + 2 * pad < geom.kernel {
            return Err(shape_err!("conv2d: kernel {} larger than padded input {:?}", geom.kernel, si));
        }
        let out = conv2d_forward(
            &self.value(input).values,
            &self.value(weight).values,
            &self.value(bias).values,
            &geom,
        );
        let shape = vec![geom.out_channels, geom.out_height(), geom.out_width()];
        let rg = self.rg(&[input, weight, bias]);
        self.push(
            Tensor { shape, values: out },
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
            "conv2d",
        )
    }

    fn map(&mut self, a: Var, op: Op, what: &str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let va = self.value(a);
        let out = Tensor {
            shape: va.shape.clone(),
            values: va.values.iter().map(|x| f(*x)).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(out, op, rg, what)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), "relu", |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), "exp", f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Log(a), "log", f64::ln)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).values.iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1);
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Softmax along the last axis of a 1D or 2D tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, None)
    }

    /// Softmax along rows where only entries with `mask[i] == true` take part;
    /// masked-out entries are exactly zero. Every row needs one allowed entry.
    pub fn masked_softmax(&mut self, a: Var, mask: Rc<[bool]>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(shape_err!("softmax mask of {} for {} values", mask.len(), self.value(a).len()));
        }
        self.softmax_impl(a, Some(mask))
    }

    fn softmax_impl(&mut self, a: Var, mask: Option<Rc<[bool]>>) -> Result<Var> {
        let va = self.value(a);
        let (rows, cols) = rows_cols(&va.shape)?;
        let mut out = vec![0.0; va.len()];
        for r in 0..rows {
            let x = &va.values[r * cols..(r + 1) * cols];
            let allowed = |c: usize| mask.as_ref().is_none_or(|m| m[r * cols + c]);
            let max = (0..cols)
                .filter(|&c| allowed(c))
                .map(|c| x[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract(format!("softmax row {r} has no allowed entries")));
            }
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut z = 0.0;
            for c in 0..cols {
                if allowed(c) {
                    o[c] = (x[c] - max).exp();
                    z += o[c];
                }
            }
            for v in o.iter_mut() {
                *v /= z;
            }
        }
        let shape = va.shape.clone();
        let rg = self.rg(&[a]);
        self.push(Tensor { shape, values: out }, Op::Softmax { input: a }, rg, "softmax")
    }

    /// Divides each row of `[N, C]` by its L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (rows, cols) = rows_cols(&va.shape)?;
        let mut out = va.values.clone();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
            row.iter_mut().for_each(|x| *x /= n);
        }
        let shape = va.shape.clone();
        let rg = self.rg(&[a]);
        self.push(Tensor { shape, values: out }, Op::NormalizeRows(a), rg, "normalize_rows")
    }

    /// L2 norm of each row: `[N, C] → [N]`.
    pub fn norm_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (rows, cols) = rows_cols(&va.shape)?;
        let out: Vec<f64> = (0..rows)
            .map(|r| va.values[r * cols..(r + 1) * cols].iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_vec(out), Op::NormRows(a), rg, "norm_rows")
    }

    /// `out[k] = flat(input)[index[k]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Rc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        let va = self.value(a);
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(shape_err!("gather: {} indices for shape {:?}", index.len(), shape));
        }
        if let Some(bad) = index.iter().find(|&&i| i >= va.len()) {
            return Err(shape_err!("gather index {bad} out of {}", va.len()));
        }
        let values = index.iter().map(|&i| va.values[i]).collect();
        let rg = self.rg(&[a]);
        self.push(Tensor { shape, values }, Op::Gather { input: a, index }, rg, "gather")
    }

    /// `[N, A] ++ [N, B] → [N, A + B]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = rows_cols(&self.value(a).shape)?;
        let (rb, cb) = rows_cols(&self.value(b).shape)?;
        if ra != rb {
            return Err(shape_err!("concat_cols: {ra} rows vs {rb}"));
        }
        let (va, vb) = (&self.value(a).values, &self.value(b).values);
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&va[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&vb[r * cb..(r + 1) * cb]);
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![ra, ca + cb], out)?, Op::ConcatCols(a, b), rg, "concat_cols")
    }

    /// Columns `start..end` of a `[N, C]` tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = rows_cols(&self.value(a).shape)?;
        if start > end || end > cols {
            return Err(shape_err!("slice_cols {start}..{end} of {cols}"));
        }
        let va = &self.value(a).values;
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&va[r * cols + start..r * cols + end]);
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(vec![rows, end - start], out)?, Op::SliceCols { input: a, start }, rg, "slice_cols")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (rows, cols) = match va.shape.as_slice() {
            [r, c] => (*r, *c),
            s => return Err(shape_err!("transpose needs 2D, got {:?}", s)),
        };
        let out = transpose_vals(&va.values, rows, cols);
        let rg = self.rg(&[a]);
        self.push(Tensor::new(vec![cols, rows], out)?, Op::Transpose(a), rg, "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Reshape(a), rg, "reshape")
    }

    /// Same value; no gradient flows back through the result.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).clone();
        self.push(out, Op::StopGradient, false, "stop_gradient")
    }

    /// Back-propagates from a one-element `loss`, replacing any previous gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss is not on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value.values;
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g);
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g);
                }
                if wants(b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    accumulate(&mut grads[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value.values, &self.nodes[b.0].value.values);
                if wants(a) {
                    let d: Vec<f64> = g.iter().zip(vb).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads[a.0], &d);
                }
                if wants(b) {
                    let d: Vec<f64> = g.iter().zip(va).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads[b.0], &d);
                }
            }
            Op::Scale(a, c) => {
                let d: Vec<f64> = g.iter().map(|x| x * c).collect();
                accumulate(&mut grads[a.0], &d);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if wants(a) {
                    // dA = G Bᵀ
                    let bt = transpose_vals(&tb.values, k, n);
                    let mut d = vec![0.0; m * k];
                    matmul_into(g, &bt, &mut d, m, n, k);
                    accumulate(&mut grads[a.0], &d);
                }
                if wants(b) {
                    // dB = Aᵀ G
                    let at = transpose_vals(&ta.values, m, k);
                    let mut d = vec![0.0; k * n];
                    matmul_into(&at, g, &mut d, k, m, n);
                    accumulate(&mut grads[b.0], &d);
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (gx, gw, gb) = conv2d_backward(
                    &self.nodes[input.0].value.values,
                    &self.nodes[weight.0].value.values,
                    g,
                    geom,
                );
                if wants(input) {
                    accumulate(&mut grads[input.0], &gx);
                }
                if wants(weight) {
                    accumulate(&mut grads[weight.0], &gw);
                }
                if wants(bias) {
                    accumulate(&mut grads[bias.0], &gb);
                }
            }
            Op::Relu(a) => {
                let d: Vec<f64> = g.iter().zip(out).map(|(g, y)| if *y > 0.0 { *g } else { 0.0 }).collect();
                accumulate(&mut grads[a.0], &d);
            }
            Op::Exp(a) => {
                let d: Vec<f64> = g.iter().zip(out).map(|(g, y)| g * y).collect();
                accumulate(&mut grads[a.0], &d);
            }
            Op::Log(a) => {
                let x = &self.nodes[a.0].value.values;
                let d: Vec<f64> = g.iter().zip(x).map(|(g, x)| g / x).collect();
                accumulate(&mut grads[a.0], &d);
            }
            Op::Sum(a) => {
                let d = vec![g[0]; self.nodes[a.0].value.len()];
                accumulate(&mut grads[a.0], &d);
            }
            Op::Softmax { input, .. } => {
                let (rows, cols) = rows_cols(&node.value.shape).expect("checked in forward");
                let mut d = vec![0.0; out.len()];
                for r in 0..rows {
                    let y = &out[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        d[r * cols + c] = y[c] * (gr[c] - dot);
                    }
                }
                accumulate(&mut grads[input.0], &d);
            }
            Op::NormalizeRows(a) => {
                let x = &self.nodes[a.0].value;
                let (rows, cols) = rows_cols(&x.shape).expect("checked in forward");
                let mut d = vec![0.0; out.len()];
                for r in 0..rows {
                    let xr = &x.values[r * cols..(r + 1) * cols];
                    let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let y = &out[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    if n < NORM_EPS {
                        for c in 0..cols {
                            d[r * cols + c] = gr[c] / NORM_EPS;
                        }
                        continue;
                    }
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        d[r * cols + c] = (gr[c] - y[c] * dot) / n;
                    }
                }
                accumulate(&mut grads[a.0], &d);
            }
            Op::NormRows(a) => {
                let x = &self.nodes[a.0].value;
                let (rows, cols) = rows_cols(&x.shape).expect("checked in forward");
                let mut d = vec![0.0; x.len()];
                for r in 0..rows {
                    if out[r] == 0.0 {
                        continue;
                    }
                    for c in 0..cols {
                        d[r * cols + c] = g[r] * x.values[r * cols + c] / out[r];
                    }
                }
                accumulate(&mut grads[a.0], &d);
            }
            Op::Gather { input, index } => {
                let mut d = vec![0.0; self.nodes[input.0].value.len()];
                for (k, &i) in index.iter().enumerate() {
                    d[i] += g[k];
                }
                accumulate(&mut grads[input.0], &d);
            }
            Op::ConcatCols(a, b) => {
                let (_, ca) = rows_cols(&self.nodes[a.0].value.shape).expect("checked in forward");
                let (rows, cols) = rows_cols(&node.value.shape).expect("checked in forward");
                let cb = cols - ca;
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    da.extend_from_slice(&g[r * cols..r * cols + ca]);
                    db.extend_from_slice(&g[r * cols + ca..(r + 1) * cols]);
                }
                if wants(a) {
                    accumulate(&mut grads[a.0], &da);
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::SliceCols { input, start } => {
                let (rows, cols) = rows_cols(&self.nodes[input.0].value.shape).expect("checked in forward");
                let width = out.len() / rows.max(1);
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + width].copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                accumulate(&mut grads[input.0], &d);
            }
            Op::Transpose(a) => {
                let s = &node.value.shape;
                let d = transpose_vals(g, s[0], s[1]);
                accumulate(&mut grads[a.0], &d);
            }
            Op::Reshape(a) => accumulate(&mut grads[a.0], g),
        }
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences with the given `step`. Returns, over all inputs, the largest
/// `max|analytic − numeric| / max(max|analytic|, max|numeric|)`.
pub fn gradient_check(inputs: &[Tensor], step: f64, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<f64> {
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values.iter().map(|t| tape.leaf(t.clone(), true)).collect::<Result<Vec<_>>>()?;
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map_or_else(|| vec![0.0; inputs[k].len()], Tensor::into_values);
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..inputs[k].len() {
            let x = inputs[k].values[i];
            probe[k].values[i] = x + step;
            let up = eval(&probe)?;
            probe[k].values[i] = x - step;
            let down = eval(&probe)?;
            probe[k].values[i] = x;
            numeric.push((up - down) / (2.0 * step));
        }
        let err = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        let scale = analytic.iter().chain(&numeric).map(|x| x.abs()).fold(0.0, f64::max);
        if err > 0.0 {
            worst = worst.max(err / scale);
        }
    }
    Ok(worst)
}
