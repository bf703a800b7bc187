//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is an arena of nodes built eagerly during the forward pass:
//! every operation computes its value immediately and records what it needs
//! for the reverse sweep (argmax indices, row norms). [`Graph::backward`]
//! replays the recorded operations in reverse order and accumulates
//! vector-Jacobian products into every node that requires a gradient.
//!
//! Subgradient conventions: max reductions and max pooling route the
//! gradient to the first maximal element in scan order; `relu` uses the
//! zero subgradient at the kink; row normalization of a zero row yields a
//! zero gradient. The graph tracks how close the forward pass came to any
//! of these kinks (see [`Graph::kink_margin`]) so finite-difference checks
//! can exclude ill-conditioned points.
//!
//! All arithmetic is in double precision and every loop runs in a fixed
//! order, so identical inputs give bit-identical values and gradients.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor inside one specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorRef {
    graph: u64,
    index: usize,
}

struct Node {
    values: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    name: Option<String>,
    op: Op,
}

enum Op {
    Leaf,
    Add(usize, usize),
    AddScalar(usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    /// `a (m,k) @ b (n,k)^T -> (m,n)`; every entry is a row inner product.
    MatmulNt { a: usize, b: usize, m: usize, k: usize, n: usize },
    Relu(usize),
    MaxAxis { input: usize, axis: usize, rows: usize, cols: usize, argmax: Vec<usize> },
    SumAll(usize),
    MeanAll(usize),
    Dot(usize, usize),
    NormalizeRows { input: usize, rows: usize, dim: usize, norms: Vec<f64> },
    Conv2d { input: usize, weight: usize, bias: usize, dims: Conv2dDims },
    Conv1d { input: usize, weight: usize, bias: usize, dims: Conv1dDims },
    MaxPool2d { input: usize, c: usize, h: usize, w: usize, argmax: Vec<usize> },
    MaxPool1d { input: usize, c: usize, t: usize, argmax: Vec<usize> },
    Reshape(usize),
    Transpose { input: usize, rows: usize, cols: usize },
    Lookup { table: usize, ids: Vec<usize>, dim: usize },
}

#[derive(Clone, Copy)]
struct Conv2dDims {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    hout: usize,
    wout: usize,
}

#[derive(Clone, Copy)]
struct Conv1dDims {
    cin: usize,
    t: usize,
    cout: usize,
    k: usize,
    pad: usize,
    tout: usize,
}

/// Eagerly-evaluated computation graph.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    min_kink_margin: f64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            min_kink_margin: f64::INFINITY,
        }
    }

    fn check(&self, t: TensorRef) -> Result<usize> {
        if t.graph != self.id || t.index >= self.nodes.len() {
            let name = self
                .nodes
                .get(t.index)
                .and_then(|n| n.name.clone())
                .unwrap_or_else(|| format!("#{}", t.index));
            return Err(Error::ForeignTensor { name });
        }
        Ok(t.index)
    }

    fn push(&mut self, values: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorRef {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { values, shape, requires_grad, grad: None, name: None, op });
        TensorRef { graph: self.id, index: self.nodes.len() - 1 }
    }

    fn observe_margin(&mut self, margin: f64) {
        if margin < self.min_kink_margin {
            self.min_kink_margin = margin;
        }
    }

    /// Smallest distance any forward value came to a subgradient kink
    /// (relu zero crossing, max tie, zero row under normalization).
    pub fn kink_margin(&self) -> f64 {
        self.min_kink_margin
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, values: Vec<f64>, shape: &[usize]) -> Result<TensorRef> {
        self.leaf(None, values, shape, false)
    }

    /// Named leaf that accumulates a gradient during [`Graph::backward`].
    pub fn param(&mut self, name: &str, values: &[f64], shape: &[usize]) -> Result<TensorRef> {
        self.leaf(Some(name.to_string()), values.to_vec(), shape, true)
    }

    fn leaf(&mut self, name: Option<String>, values: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<TensorRef> {
        let len: usize = shape.iter().product();
        if len != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "leaf has {} values but shape {:?} holds {}",
                values.len(),
                shape,
                len
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("zero-sized dimension in shape {shape:?}")));
        }
        let r = self.push(values, shape.to_vec(), requires_grad, Op::Leaf);
        self.nodes[r.index].name = name;
        Ok(r)
    }

    pub fn value(&self, t: TensorRef) -> Result<&[f64]> {
        let i = self.check(t)?;
        Ok(&self.nodes[i].values)
    }

    pub fn scalar_value(&self, t: TensorRef) -> Result<f64> {
        let i = self.check(t)?;
        if self.nodes[i].values.len() != 1 {
            return Err(Error::NonScalarOutput { shape: self.nodes[i].shape.clone() });
        }
        Ok(self.nodes[i].values[0])
    }

    pub fn shape(&self, t: TensorRef) -> Result<&[usize]> {
        let i = self.check(t)?;
        Ok(&self.nodes[i].shape)
    }

    /// Gradient accumulated by the last [`Graph::backward`] call.
    ///
    /// `None` for tensors that do not require a gradient; zero-filled for
    /// tensors that require one but did not participate in the output.
    pub fn grad(&self, t: TensorRef) -> Result<Option<&[f64]>> {
        let i = self.check(t)?;
        Ok(self.nodes[i].grad.as_deref())
    }

    pub fn requires_grad(&self, t: TensorRef) -> Result<bool> {
        let i = self.check(t)?;
        Ok(self.nodes[i].requires_grad)
    }

    // ---- elementwise -------------------------------------------------

    fn binary_same_shape(&mut self, a: TensorRef, b: TensorRef, op_name: &str) -> Result<(usize, usize)> {
        let ia = self.check(a)?;
        let ib = self.check(b)?;
        if self.nodes[ia].shape != self.nodes[ib].shape {
            return Err(Error::ShapeMismatch(format!(
                "{op_name}: {:?} vs {:?}",
                self.nodes[ia].shape, self.nodes[ib].shape
            )));
        }
        Ok((ia, ib))
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (ia, ib) = self.binary_same_shape(a, b, "add")?;
        let values: Vec<f64> = self.nodes[ia]
            .values
            .iter()
            .zip(&self.nodes[ib].values)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.nodes[ia].requires_grad || self.nodes[ib].requires_grad;
        let shape = self.nodes[ia].shape.clone();
        Ok(self.push(values, shape, rg, Op::Add(ia, ib)))
    }

    pub fn add_scalar(&mut self, a: TensorRef, c: f64) -> Result<TensorRef> {
        let ia = self.check(a)?;
        let values: Vec<f64> = self.nodes[ia].values.iter().map(|x| x + c).collect();
        let rg = self.nodes[ia].requires_grad;
        let shape = self.nodes[ia].shape.clone();
        Ok(self.push(values, shape, rg, Op::AddScalar(ia)))
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (ia, ib) = self.binary_same_shape(a, b, "sub")?;
        let values: Vec<f64> = self.nodes[ia]
            .values
            .iter()
            .zip(&self.nodes[ib].values)
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.nodes[ia].requires_grad || self.nodes[ib].requires_grad;
        let shape = self.nodes[ia].shape.clone();
        Ok(self.push(values, shape, rg, Op::Sub(ia, ib)))
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (ia, ib) = self.binary_same_shape(a, b, "mul")?;
        let values: Vec<f64> = self.nodes[ia]
            .values
            .iter()
            .zip(&self.nodes[ib].values)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.nodes[ia].requires_grad || self.nodes[ib].requires_grad;
        let shape = self.nodes[ia].shape.clone();
        Ok(self.push(values, shape, rg, Op::Mul(ia, ib)))
    }

    pub fn scale(&mut self, a: TensorRef, c: f64) -> Result<TensorRef> {
        let ia = self.check(a)?;
        let values: Vec<f64> = self.nodes[ia].values.iter().map(|x| x * c).collect();
        let rg = self.nodes[ia].requires_grad;
        let shape = self.nodes[ia].shape.clone();
        Ok(self.push(values, shape, rg, Op::Scale(ia, c)))
    }

    pub fn relu(&mut self, a: TensorRef) -> Result<TensorRef> {
        let ia = self.check(a)?;
        let mut margin = f64::INFINITY;
        let values: Vec<f64> = self.nodes[ia]
            .values
            .iter()
            .map(|&x| {
                let d = x.abs();
                if d < margin {
                    margin = d;
                }
                if x > 0.0 { x } else { 0.0 }
            })
            .collect();
        self.observe_margin(margin);
        let rg = self.nodes[ia].requires_grad;
        let shape = self.nodes[ia].shape.clone();
        Ok(self.push(values, shape, rg, Op::Relu(ia)))
    }

    // ---- linear algebra ----------------------------------------------

    fn dims_2d(&self, i: usize, op_name: &str) -> Result<(usize, usize)> {
        match self.nodes[i].shape[..] {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::ShapeMismatch(format!("{op_name} needs a 2-d tensor, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let ia = self.check(a)?;
        let ib = self.check(b)?;
        let (m, k) = self.dims_2d(ia, "matmul")?;
        let (k2, n) = self.dims_2d(ib, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!("matmul: ({m},{k}) @ ({k2},{n})")));
        }
        let mut values = vec![0.0; m * n];
        let av = &self.nodes[ia].values;
        let bv = &self.nodes[ib].values;
        for i in 0..m {
            for kk in 0..k {
                let aik = av[i * k + kk];
                let brow = &bv[kk * n..(kk + 1) * n];
                let crow = &mut values[i * n..(i + 1) * n];
                for (cv, bvv) in crow.iter_mut().zip(brow) {
                    *cv += aik * bvv;
                }
            }
        }
        let rg = self.nodes[ia].requires_grad || self.nodes[ib].requires_grad;
        Ok(self.push(values, vec![m, n], rg, Op::Matmul { a: ia, b: ib, m, k, n }))
    }

    /// Row-by-row inner products: `out[i][j] = <a[i, :], b[j, :]>`.
    pub fn matmul_nt(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let ia = self.check(a)?;
        let ib = self.check(b)?;
        let (m, k) = self.dims_2d(ia, "matmul_nt")?;
        let (n, k2) = self.dims_2d(ib, "matmul_nt")?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul_nt: rows of ({m},{k}) against rows of ({n},{k2})"
            )));
        }
        let mut values = vec![0.0; m * n];
        let av = &self.nodes[ia].values;
        let bv = &self.nodes[ib].values;
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bv[j * k..(j + 1) * k];
                let mut s = 0.0;
                for (x, y) in arow.iter().zip(brow) {
                    s += x * y;
                }
                values[i * n + j] = s;
            }
        }
        let rg = self.nodes[ia].requires_grad || self.nodes[ib].requires_grad;
        Ok(self.push(values, vec![m, n], rg, Op::MatmulNt { a: ia, b: ib, m, k, n }))
    }

    pub fn dot(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (ia, ib) = self.binary_same_shape(a, b, "dot")?;
        let s: f64 = self.nodes[ia]
            .values
            .iter()
            .zip(&self.nodes[ib].values)
            .map(|(x, y)| x * y)
            .sum();
        let rg = self.nodes[ia].requires_grad || self.nodes[ib].requires_grad;
        Ok(self.push(vec![s], vec![1], rg, Op::Dot(ia, ib)))
    }

    pub fn transpose(&mut self, a: TensorRef) -> Result<TensorRef> {
        let ia = self.check(a)?;
        let (r, c) = self.dims_2d(ia, "transpose")?;
        let av = &self.nodes[ia].values;
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                values[j * r + i] = av[i * c + j];
            }
        }
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(values, vec![c, r], rg, Op::Transpose { input: ia, rows: r, cols: c }))
    }

    pub fn reshape(&mut self, a: TensorRef, shape: &[usize]) -> Result<TensorRef> {
        let ia = self.check(a)?;
        let len: usize = shape.iter().product();
        if len != self.nodes[ia].values.len() {
            return Err(Error::ShapeMismatch(format!(
                "reshape: {:?} -> {shape:?}",
                self.nodes[ia].shape
            )));
        }
        let values = self.nodes[ia].values.clone();
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(values, shape.to_vec(), rg, Op::Reshape(ia)))
    }

    // ---- reductions --------------------------------------------------

    /// Max over one axis of a 2-d tensor; gradient goes to the first
    /// maximal element in scan order.
    pub fn max_axis(&mut self, a: TensorRef, axis: usize) -> Result<TensorRef> {
        let ia = self.check(a)?;
        let (rows, cols) = self.dims_2d(ia, "max_axis")?;
        if axis > 1 {
            return Err(Error::InvalidArgument(format!("max_axis axis {axis} out of range")));
        }
        let av = &self.nodes[ia].values;
        let (out_len, group_len) = if axis == 1 { (rows, cols) } else { (cols, rows) };
        let mut values = vec![0.0; out_len];
        let mut argmax = vec![0usize; out_len];
        let mut margin = f64::INFINITY;
        for o in 0..out_len {
            let mut best = f64::NEG_INFINITY;
            let mut second = f64::NEG_INFINITY;
            let mut best_g = 0usize;
            for g in 0..group_len {
                let v = if axis == 1 { av[o * cols + g] } else { av[g * cols + o] };
                if v > best {
                    second = best;
                    best = v;
                    best_g = g;
                } else if v > second {
                    second = v;
                }
            }
            if group_len > 1 {
                let gap = best - second;
                if gap < margin {
                    margin = gap;
                }
            }
            values[o] = best;
            argmax[o] = best_g;
        }
        self.observe_margin(margin);
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(values, vec![out_len], rg, Op::MaxAxis { input: ia, axis, rows, cols, argmax }))
    }

    pub fn sum_all(&mut self, a: TensorRef) -> Result<TensorRef> {
        let ia = self.check(a)?;
        let s: f64 = self.nodes[ia].values.iter().sum();
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(vec![s], vec![1], rg, Op::SumAll(ia)))
    }

    pub fn mean_all(&mut self, a: TensorRef) -> Result<TensorRef> {
        let ia = self.check(a)?;
        let n = self.nodes[ia].values.len() as f64;
        let s: f64 = self.nodes[ia].values.iter().sum();
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(vec![s / n], vec![1], rg, Op::MeanAll(ia)))
    }

    /// L2-normalize each row of a 2-d tensor; zero rows stay zero.
    pub fn normalize_rows(&mut self, a: TensorRef) -> Result<TensorRef> {
        let ia = self.check(a)?;
        let (rows, dim) = self.dims_2d(ia, "normalize_rows")?;
        let av = &self.nodes[ia].values;
        let mut values = vec![0.0; rows * dim];
        let mut norms = vec![0.0; rows];
        let mut margin = f64::INFINITY;
        for r in 0..rows {
            let row = &av[r * dim..(r + 1) * dim];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            norms[r] = norm;
            if norm < margin {
                margin = norm;
            }
            if norm > 0.0 {
                for (o, x) in values[r * dim..(r + 1) * dim].iter_mut().zip(row) {
                    *o = x / norm;
                }
            }
        }
        self.observe_margin(margin);
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(values, vec![rows, dim], rg, Op::NormalizeRows { input: ia, rows, dim, norms }))
    }

    // ---- convolution and pooling --------------------------------------

    /// 2-d convolution, stride 1. `input` is `(c_in, h, w)`, `weight` is
    /// `(c_out, c_in, kh, kw)`, `bias` is `(c_out)`.
    pub fn conv2d(&mut self, input: TensorRef, weight: TensorRef, bias: TensorRef, pad: (usize, usize)) -> Result<TensorRef> {
        let ii = self.check(input)?;
        let iw = self.check(weight)?;
        let ib = self.check(bias)?;
        let (cin, h, w) = match self.nodes[ii].shape[..] {
            [c, h, w] => (c, h, w),
            ref s => return Err(Error::ShapeMismatch(format!("conv2d input must be 3-d, got {s:?}"))),
        };
        let (cout, wcin, kh, kw) = match self.nodes[iw].shape[..] {
            [o, i, kh, kw] => (o, i, kh, kw),
            ref s => return Err(Error::ShapeMismatch(format!("conv2d weight must be 4-d, got {s:?}"))),
        };
        if wcin != cin {
            return Err(Error::ShapeMismatch(format!("conv2d: input has {cin} channels, weight expects {wcin}")));
        }
        if self.nodes[ib].shape != [cout] {
            return Err(Error::ShapeMismatch(format!("conv2d bias must be ({cout})")));
        }
        let (ph, pw) = pad;
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::ShapeMismatch(format!("conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")));
        }
        let hout = h + 2 * ph - kh + 1;
        let wout = w + 2 * pw - kw + 1;
        let dims = Conv2dDims { cin, h, w, cout, kh, kw, ph, pw, hout, wout };
        let xv = &self.nodes[ii].values;
        let wv = &self.nodes[iw].values;
        let bv = &self.nodes[ib].values;
        let mut values = vec![0.0; cout * hout * wout];
        for co in 0..cout {
            let out_base = co * hout * wout;
            for v in values[out_base..out_base + hout * wout].iter_mut() {
                *v = bv[co];
            }
            for ci in 0..cin {
                let in_base = ci * h * w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wgt = wv[((co * cin + ci) * kh + ky) * kw + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        for oy in 0..hout {
                            let iy = oy + ky;
                            if iy < ph || iy - ph >= h {
                                continue;
                            }
                            let iy = iy - ph;
                            for ox in 0..wout {
                                let ix = ox + kx;
                                if ix < pw || ix - pw >= w {
                                    continue;
                                }
                                values[out_base + oy * wout + ox] += wgt * xv[in_base + iy * w + ix - pw];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.nodes[ii].requires_grad || self.nodes[iw].requires_grad || self.nodes[ib].requires_grad;
        Ok(self.push(values, vec![cout, hout, wout], rg, Op::Conv2d { input: ii, weight: iw, bias: ib, dims }))
    }

    /// 1-d convolution over time, stride 1. `input` is `(c_in, t)`,
    /// `weight` is `(c_out, c_in, k)`, `bias` is `(c_out)`.
    pub fn conv1d(&mut self, input: TensorRef, weight: TensorRef, bias: TensorRef, pad: usize) -> Result<TensorRef> {
        let ii = self.check(input)?;
        let iw = self.check(weight)?;
        let ib = self.check(bias)?;
        let (cin, t) = match self.nodes[ii].shape[..] {
            [c, t] => (c, t),
            ref s => return Err(Error::ShapeMismatch(format!("conv1d input must be 2-d, got {s:?}"))),
        };
        let (cout, wcin, k) = match self.nodes[iw].shape[..] {
            [o, i, k] => (o, i, k),
            ref s => return Err(Error::ShapeMismatch(format!("conv1d weight must be 3-d, got {s:?}"))),
        };
        if wcin != cin {
            return Err(Error::ShapeMismatch(format!("conv1d: input has {cin} channels, weight expects {wcin}")));
        }
        if self.nodes[ib].shape != [cout] {
            return Err(Error::ShapeMismatch(format!("conv1d bias must be ({cout})")));
        }
        if t + 2 * pad < k {
            return Err(Error::ShapeMismatch(format!("conv1d: kernel {k} larger than padded input {t}")));
        }
        let tout = t + 2 * pad - k + 1;
        let dims = Conv1dDims { cin, t, cout, k, pad, tout };
        let xv = &self.nodes[ii].values;
        let wv = &self.nodes[iw].values;
        let bv = &self.nodes[ib].values;
        let mut values = vec![0.0; cout * tout];
        for co in 0..cout {
            let out_base = co * tout;
            for v in values[out_base..out_base + tout].iter_mut() {
                *v = bv[co];
            }
            for ci in 0..cin {
                let in_base = ci * t;
                for kk in 0..k {
                    let wgt = wv[(co * cin + ci) * k + kk];
                    if wgt == 0.0 {
                        continue;
                    }
                    for ot in 0..tout {
                        let it = ot + kk;
                        if it < pad || it - pad >= t {
                            continue;
                        }
                        values[out_base + ot] += wgt * xv[in_base + it - pad];
                    }
                }
            }
        }
        let rg = self.nodes[ii].requires_grad || self.nodes[iw].requires_grad || self.nodes[ib].requires_grad;
        Ok(self.push(values, vec![cout, tout], rg, Op::Conv1d { input: ii, weight: iw, bias: ib, dims }))
    }

    /// 2x2 max pooling with stride 2 over `(c, h, w)`; trailing odd
    /// rows/columns are dropped.
    pub fn max_pool2d(&mut self, input: TensorRef) -> Result<TensorRef> {
        let ii = self.check(input)?;
        let (c, h, w) = match self.nodes[ii].shape[..] {
            [c, h, w] => (c, h, w),
            ref s => return Err(Error::ShapeMismatch(format!("max_pool2d input must be 3-d, got {s:?}"))),
        };
        let hout = h / 2;
        let wout = w / 2;
        if hout == 0 || wout == 0 {
            return Err(Error::ShapeMismatch(format!("max_pool2d: input {h}x{w} too small")));
        }
        let xv = &self.nodes[ii].values;
        let mut values = vec![0.0; c * hout * wout];
        let mut argmax = vec![0usize; c * hout * wout];
        let mut margin = f64::INFINITY;
        for ch in 0..c {
            for oy in 0..hout {
                for ox in 0..wout {
                    let mut best = f64::NEG_INFINITY;
                    let mut second = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = (ch * h + oy * 2 + dy) * w + ox * 2 + dx;
                            let v = xv[idx];
                            if v > best {
                                second = best;
                                best = v;
                                best_idx = idx;
                            } else if v > second {
                                second = v;
                            }
                        }
                    }
                    let gap = best - second;
                    if gap < margin {
                        margin = gap;
                    }
                    let o = (ch * hout + oy) * wout + ox;
                    values[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        self.observe_margin(margin);
        let rg = self.nodes[ii].requires_grad;
        Ok(self.push(values, vec![c, hout, wout], rg, Op::MaxPool2d { input: ii, c, h, w, argmax }))
    }

    /// Max pooling over time with kernel 2, stride 2 on `(c, t)`.
    pub fn max_pool1d(&mut self, input: TensorRef) -> Result<TensorRef> {
        let ii = self.check(input)?;
        let (c, t) = match self.nodes[ii].shape[..] {
            [c, t] => (c, t),
            ref s => return Err(Error::ShapeMismatch(format!("max_pool1d input must be 2-d, got {s:?}"))),
        };
        let tout = t / 2;
        if tout == 0 {
            return Err(Error::ShapeMismatch(format!("max_pool1d: input length {t} too small")));
        }
        let xv = &self.nodes[ii].values;
        let mut values = vec![0.0; c * tout];
        let mut argmax = vec![0usize; c * tout];
        let mut margin = f64::INFINITY;
        for ch in 0..c {
            for ot in 0..tout {
                let i0 = ch * t + ot * 2;
                let (a, b) = (xv[i0], xv[i0 + 1]);
                let gap = (a - b).abs();
                if gap < margin {
                    margin = gap;
                }
                let o = ch * tout + ot;
                // strict > keeps the first maximum on ties
                if b > a {
                    values[o] = b;
                    argmax[o] = i0 + 1;
                } else {
                    values[o] = a;
                    argmax[o] = i0;
                }
            }
        }
        self.observe_margin(margin);
        let rg = self.nodes[ii].requires_grad;
        Ok(self.push(values, vec![c, tout], rg, Op::MaxPool1d { input: ii, c, t, argmax }))
    }

    /// Embedding lookup: row `i` of the output is `table[ids[i], :]`.
    pub fn lookup(&mut self, table: TensorRef, ids: &[usize]) -> Result<TensorRef> {
        let it = self.check(table)?;
        let (vocab, dim) = self.dims_2d(it, "lookup")?;
        if ids.is_empty() {
            return Err(Error::InvalidArgument("lookup needs at least one token id".into()));
        }
        for &id in ids {
            if id >= vocab {
                return Err(Error::OutOfVocabulary { id, vocab_size: vocab });
            }
        }
        let tv = &self.nodes[it].values;
        let mut values = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            values.extend_from_slice(&tv[id * dim..(id + 1) * dim]);
        }
        let rg = self.nodes[it].requires_grad;
        Ok(self.push(values, vec![ids.len(), dim], rg, Op::Lookup { table: it, ids: ids.to_vec(), dim }))
    }

    // ---- backward ------------------------------------------------------

    /// Accumulate `d output / d node` into every node that requires a
    /// gradient. `output` must be scalar.
    pub fn backward(&mut self, output: TensorRef) -> Result<()> {
        let out = self.check(output)?;
        if self.nodes[out].values.len() != 1 {
            return Err(Error::NonScalarOutput { shape: self.nodes[out].shape.clone() });
        }
        for idx in 0..self.nodes.len() {
            let node = &mut self.nodes[idx];
            node.grad = if node.requires_grad && idx <= out {
                Some(vec![0.0; node.values.len()])
            } else {
                None
            };
        }
        if !self.nodes[out].requires_grad {
            return Ok(());
        }
        self.nodes[out].grad.as_mut().unwrap()[0] = 1.0;
        for idx in (0..=out).rev() {
            if self.nodes[idx].grad.is_none() {
                continue;
            }
            let g = self.nodes[idx].grad.take().unwrap();
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            let contributions = self.vjp(idx, &g, &op);
            self.nodes[idx].op = op;
            self.nodes[idx].grad = Some(g);
            for (target, c) in contributions {
                let tg = self.nodes[target].grad.as_mut().expect("grad buffer");
                for (acc, v) in tg.iter_mut().zip(&c) {
                    *acc += v;
                }
            }
        }
        Ok(())
    }

    fn wants(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn vjp(&self, _idx: usize, g: &[f64], op: &Op) -> Vec<(usize, Vec<f64>)> {
        let mut out = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.wants(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::AddScalar(a) => {
                if self.wants(*a) {
                    out.push((*a, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.wants(*b) {
                    out.push((*b, g.iter().map(|x| -x).collect()));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d: Vec<f64> = g.iter().zip(&self.nodes[*b].values).map(|(x, y)| x * y).collect();
                    out.push((*a, d));
                }
                if self.wants(*b) {
                    let d: Vec<f64> = g.iter().zip(&self.nodes[*a].values).map(|(x, y)| x * y).collect();
                    out.push((*b, d));
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    out.push((*a, g.iter().map(|x| x * c).collect()));
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.wants(*a) {
                    // dA = g @ B^T
                    let bv = &self.nodes[*b].values;
                    let mut d = vec![0.0; m * k];
                    for i in 0..m {
                        for kk in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[kk * n + j];
                            }
                            d[i * k + kk] = s;
                        }
                    }
                    out.push((*a, d));
                }
                if self.wants(*b) {
                    // dB = A^T @ g
                    let av = &self.nodes[*a].values;
                    let mut d = vec![0.0; k * n];
                    for kk in 0..k {
                        for i in 0..m {
                            let aik = av[i * k + kk];
                            for j in 0..n {
                                d[kk * n + j] += aik * g[i * n + j];
                            }
                        }
                    }
                    out.push((*b, d));
                }
            }
            Op::MatmulNt { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.wants(*a) {
                    // dA = g @ B
                    let bv = &self.nodes[*b].values;
                    let mut d = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let brow = &bv[j * k..(j + 1) * k];
                            for (dv, bvv) in d[i * k..(i + 1) * k].iter_mut().zip(brow) {
                                *dv += gij * bvv;
                            }
                        }
                    }
                    out.push((*a, d));
                }
                if self.wants(*b) {
                    // dB = g^T @ A
                    let av = &self.nodes[*a].values;
                    let mut d = vec![0.0; n * k];
                    for i in 0..m {
                        let arow = &av[i * k..(i + 1) * k];
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for (dv, avv) in d[j * k..(j + 1) * k].iter_mut().zip(arow) {
                                *dv += gij * avv;
                            }
                        }
                    }
                    out.push((*b, d));
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[*a].values)
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    out.push((*a, d));
                }
            }
            Op::MaxAxis { input, axis, rows, cols, argmax } => {
                if self.wants(*input) {
                    let mut d = vec![0.0; rows * cols];
                    for (o, &am) in argmax.iter().enumerate() {
                        let idx = if *axis == 1 { o * cols + am } else { am * cols + o };
                        d[idx] += g[o];
                    }
                    out.push((*input, d));
                }
            }
            Op::SumAll(a) => {
                if self.wants(*a) {
                    out.push((*a, vec![g[0]; self.nodes[*a].values.len()]));
                }
            }
            Op::MeanAll(a) => {
                if self.wants(*a) {
                    let n = self.nodes[*a].values.len();
                    out.push((*a, vec![g[0] / n as f64; n]));
                }
            }
            Op::Dot(a, b) => {
                if self.wants(*a) {
                    out.push((*a, self.nodes[*b].values.iter().map(|x| g[0] * x).collect()));
                }
                if self.wants(*b) {
                    out.push((*b, self.nodes[*a].values.iter().map(|x| g[0] * x).collect()));
                }
            }
            Op::NormalizeRows { input, rows, dim, norms } => {
                if self.wants(*input) {
                    let xv = &self.nodes[*input].values;
                    let mut d = vec![0.0; rows * dim];
                    for r in 0..*rows {
                        let norm = norms[r];
                        if norm == 0.0 {
                            continue;
                        }
                        let row = &xv[r * dim..(r + 1) * dim];
                        let grow = &g[r * dim..(r + 1) * dim];
                        let mut dot = 0.0;
                        for (gv, x) in grow.iter().zip(row) {
                            dot += gv * x / norm;
                        }
                        for i in 0..*dim {
                            d[r * dim + i] = (grow[i] - row[i] / norm * dot) / norm;
                        }
                    }
                    out.push((*input, d));
                }
            }
            Op::Conv2d { input, weight, bias, dims } => {
                let Conv2dDims { cin, h, w, cout, kh, kw, ph, pw, hout, wout } = *dims;
                if self.wants(*input) {
                    let wv = &self.nodes[*weight].values;
                    let mut d = vec![0.0; cin * h * w];
                    for co in 0..cout {
                        let out_base = co * hout * wout;
                        for ci in 0..cin {
                            let in_base = ci * h * w;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let wgt = wv[((co * cin + ci) * kh + ky) * kw + kx];
                                    if wgt == 0.0 {
                                        continue;
                                    }
                                    for oy in 0..hout {
                                        let iy = oy + ky;
                                        if iy < ph || iy - ph >= h {
                                            continue;
                                        }
                                        let iy = iy - ph;
                                        for ox in 0..wout {
                                            let ix = ox + kx;
                                            if ix < pw || ix - pw >= w {
                                                continue;
                                            }
                                            d[in_base + iy * w + ix - pw] += wgt * g[out_base + oy * wout + ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    out.push((*input, d));
                }
                if self.wants(*weight) {
                    let xv = &self.nodes[*input].values;
                    let mut d = vec![0.0; cout * cin * kh * kw];
                    for co in 0..cout {
                        let out_base = co * hout * wout;
                        for ci in 0..cin {
                            let in_base = ci * h * w;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let mut s = 0.0;
                                    for oy in 0..hout {
                                        let iy = oy + ky;
                                        if iy < ph || iy - ph >= h {
                                            continue;
                                        }
                                        let iy = iy - ph;
                                        for ox in 0..wout {
                                            let ix = ox + kx;
                                            if ix < pw || ix - pw >= w {
                                                continue;
                                            }
                                            s += xv[in_base + iy * w + ix - pw] * g[out_base + oy * wout + ox];
                                        }
                                    }
                                    d[((co * cin + ci) * kh + ky) * kw + kx] = s;
                                }
                            }
                        }
                    }
                    out.push((*weight, d));
                }
                if self.wants(*bias) {
                    let mut d = vec![0.0; cout];
                    for co in 0..cout {
                        d[co] = g[co * hout * wout..(co + 1) * hout * wout].iter().sum();
                    }
                    out.push((*bias, d));
                }
            }
            Op::Conv1d { input, weight, bias, dims } => {
                let Conv1dDims { cin, t, cout, k, pad, tout } = *dims;
                if self.wants(*input) {
                    let wv = &self.nodes[*weight].values;
                    let mut d = vec![0.0; cin * t];
                    for co in 0..cout {
                        let out_base = co * tout;
                        for ci in 0..cin {
                            for kk in 0..k {
                                let wgt = wv[(co * cin + ci) * k + kk];
                                if wgt == 0.0 {
                                    continue;
                                }
                                for ot in 0..tout {
                                    let it = ot + kk;
                                    if it < pad || it - pad >= t {
                                        continue;
                                    }
                                    d[ci * t + it - pad] += wgt * g[out_base + ot];
                                }
                            }
                        }
                    }
                    out.push((*input, d));
                }
                if self.wants(*weight) {
                    let xv = &self.nodes[*input].values;
                    let mut d = vec![0.0; cout * cin * k];
                    for co in 0..cout {
                        let out_base = co * tout;
                        for ci in 0..cin {
                            for kk in 0..k {
                                let mut s = 0.0;
                                for ot in 0..tout {
                                    let it = ot + kk;
                                    if it < pad || it - pad >= t {
                                        continue;
                                    }
                                    s += xv[ci * t + it - pad] * g[out_base + ot];
                                }
                                d[(co * cin + ci) * k + kk] = s;
                            }
                        }
                    }
                    out.push((*weight, d));
                }
                if self.wants(*bias) {
                    let mut d = vec![0.0; cout];
                    for co in 0..cout {
                        d[co] = g[co * tout..(co + 1) * tout].iter().sum();
                    }
                    out.push((*bias, d));
                }
            }
            Op::MaxPool2d { input, c, h, w, argmax } => {
                if self.wants(*input) {
                    let mut d = vec![0.0; c * h * w];
                    for (o, &am) in argmax.iter().enumerate() {
                        d[am] += g[o];
                    }
                    out.push((*input, d));
                }
            }
            Op::MaxPool1d { input, c, t, argmax } => {
                if self.wants(*input) {
                    let mut d = vec![0.0; c * t];
                    for (o, &am) in argmax.iter().enumerate() {
                        d[am] += g[o];
                    }
                    out.push((*input, d));
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    out.push((*a, g.to_vec()));
                }
            }
            Op::Transpose { input, rows, cols } => {
                if self.wants(*input) {
                    let mut d = vec![0.0; rows * cols];
                    for j in 0..*cols {
                        for i in 0..*rows {
                            d[i * cols + j] = g[j * rows + i];
                        }
                    }
                    out.push((*input, d));
                }
            }
            Op::Lookup { table, ids, dim } => {
                if self.wants(*table) {
                    let vocab = self.nodes[*table].shape[0];
                    let mut d = vec![0.0; vocab * dim];
                    for (row, &id) in ids.iter().enumerate() {
                        for i in 0..*dim {
                            d[id * dim + i] += g[row * dim + i];
                        }
                    }
                    out.push((*table, d));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(g: &mut Graph, v: f64, grad: bool) -> TensorRef {
        if grad {
            g.param("x", &[v], &[1]).unwrap()
        } else {
            g.constant(vec![v], &[1]).unwrap()
        }
    }

    #[test]
    fn square_gradient() {
        // f(x) = x*x at x = 3 -> df/dx = 6
        let mut g = Graph::new();
        let x = scalar(&mut g, 3.0, true);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().unwrap(), &[6.0]);
    }

    #[test]
    fn inactive_relu_gradient_is_zero() {
        let mut g = Graph::new();
        let x = scalar(&mut g, -1.0, true);
        let y = g.relu(x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().unwrap(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param("x", &[1.0, 2.0], &[2]).unwrap();
        let y = g.relu(x).unwrap();
        let err = g.backward(y).unwrap_err();
        assert!(matches!(err, Error::NonScalarOutput { .. }));
    }

    #[test]
    fn foreign_tensor_is_rejected_by_name() {
        let mut g1 = Graph::new();
        let mut g2 = Graph::new();
        let a = g1.param("weights", &[1.0], &[1]).unwrap();
        let b = g2.param("other", &[1.0], &[1]).unwrap();
        let err = g2.add(a, b).unwrap_err();
        match err {
            Error::ForeignTensor { name } => assert_eq!(name, "weights"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let mut g = Graph::new();
        let a = g.param("a", &[1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = g.constant(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).unwrap(), &[19.0, 22.0, 43.0, 50.0]);
        let s = g.sum_all(c).unwrap();
        g.backward(s).unwrap();
        // d sum / dA = ones @ B^T
        assert_eq!(g.grad(a).unwrap().unwrap(), &[11.0, 15.0, 11.0, 15.0]);
    }

    #[test]
    fn matmul_nt_is_row_inner_products() {
        let mut g = Graph::new();
        let a = g.constant(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let b = g.constant(vec![3.0, 4.0, 5.0, 6.0], &[2, 2]).unwrap();
        let c = g.matmul_nt(a, b).unwrap();
        assert_eq!(g.value(c).unwrap(), &[3.0, 5.0, 4.0, 6.0]);
    }

    #[test]
    fn max_axis_routes_gradient_to_first_maximum() {
        let mut g = Graph::new();
        let a = g.param("a", &[1.0, 5.0, 5.0, 2.0], &[2, 2]).unwrap();
        let m = g.max_axis(a, 1).unwrap();
        assert_eq!(g.value(m).unwrap(), &[5.0, 5.0]);
        let s = g.sum_all(m).unwrap();
        g.backward(s).unwrap();
        // row 0: max at col 1; row 1: tie, first max at col 0
        assert_eq!(g.grad(a).unwrap().unwrap(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn normalize_rows_zero_row_stays_zero() {
        let mut g = Graph::new();
        let a = g.param("a", &[3.0, 4.0, 0.0, 0.0], &[2, 2]).unwrap();
        let n = g.normalize_rows(a).unwrap();
        assert_eq!(g.value(n).unwrap(), &[0.6, 0.8, 0.0, 0.0]);
        let s = g.sum_all(n).unwrap();
        g.backward(s).unwrap();
        let grad = g.grad(a).unwrap().unwrap();
        assert_eq!(&grad[2..], &[0.0, 0.0]);
    }

    #[test]
    fn lookup_copies_rows_and_scatters_gradient() {
        let mut g = Graph::new();
        let table = g.param("table", &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]).unwrap();
        let e = g.lookup(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(e).unwrap(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = g.sum_all(e).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(table).unwrap().unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn lookup_rejects_out_of_vocabulary() {
        let mut g = Graph::new();
        let table = g.constant(vec![0.0; 6], &[3, 2]).unwrap();
        let err = g.lookup(table, &[3]).unwrap_err();
        assert!(matches!(err, Error::OutOfVocabulary { id: 3, vocab_size: 3 }));
    }

    #[test]
    fn frozen_table_receives_no_gradient() {
        let mut g = Graph::new();
        let table = g.constant(vec![1.0; 6], &[3, 2]).unwrap();
        let e = g.lookup(table, &[1]).unwrap();
        let s = g.sum_all(e).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(table).unwrap().is_none());
    }

    #[test]
    fn max_pool2d_halves_and_routes() {
        let mut g = Graph::new();
        let a = g
            .param("a", &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0, 13.0, 14.0, 15.0, 16.0], &[1, 4, 4])
            .unwrap();
        let p = g.max_pool2d(a).unwrap();
        assert_eq!(g.shape(p).unwrap(), &[1, 2, 2]);
        assert_eq!(g.value(p).unwrap(), &[6.0, 8.0, 14.0, 16.0]);
        let s = g.sum_all(p).unwrap();
        g.backward(s).unwrap();
        let grad = g.grad(a).unwrap().unwrap();
        assert_eq!(grad.iter().sum::<f64>(), 4.0);
        assert_eq!(grad[5], 1.0);
        assert_eq!(grad[15], 1.0);
    }

    #[test]
    fn backward_can_run_twice() {
        let mut g = Graph::new();
        let x = scalar(&mut g, 2.0, true);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().unwrap(), &[4.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = scalar(&mut g, 2.0, true);
        let unused = g.param("unused", &[1.0, 1.0], &[2]).unwrap();
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(unused).unwrap().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn kink_margin_tracks_relu_and_max() {
        let mut g = Graph::new();
        let x = g.param("x", &[0.5, -0.2, 0.9, 0.901], &[2, 2]).unwrap();
        let r = g.relu(x).unwrap();
        let _ = g.max_axis(r, 1).unwrap();
        // relu margin 0.2, max gap row 0 = 0.5, row 1 = |0.9-0.901| ~ 1e-3
        assert!((g.kink_margin() - 0.001).abs() < 1e-12);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut g = Graph::new();
        let x = g.constant(vec![1.0, 2.0, 3.0, 4.0], &[1, 2, 2]).unwrap();
        let w = g.constant(vec![1.0], &[1, 1, 1, 1]).unwrap();
        let b = g.constant(vec![0.5], &[1]).unwrap();
        let y = g.conv2d(x, w, b, (0, 0)).unwrap();
        assert_eq!(g.value(y).unwrap(), &[1.5, 2.5, 3.5, 4.5]);
    }

    #[test]
    fn conv1d_shapes_and_padding() {
        let mut g = Graph::new();
        let x = g.constant(vec![1.0, 2.0, 3.0, 4.0], &[1, 4]).unwrap();
        let w = g.constant(vec![1.0, 1.0, 1.0], &[1, 1, 3]).unwrap();
        let b = g.constant(vec![0.0], &[1]).unwrap();
        let y = g.conv1d(x, w, b, 1).unwrap();
        assert_eq!(g.shape(y).unwrap(), &[1, 4]);
        assert_eq!(g.value(y).unwrap(), &[3.0, 6.0, 9.0, 7.0]);
    }

    #[test]
    fn linearity_of_backward() {
        // grad(a*f + b*g) == a*grad(f) + b*grad(g)
        let xs = [0.7, -1.3, 2.1];
        let run = |a: f64, b: f64| -> Vec<f64> {
            let mut g = Graph::new();
            let x = g.param("x", &xs, &[3]).unwrap();
            let r = g.relu(x).unwrap();
            let f = g.sum_all(r).unwrap();
            let m = g.mul(x, x).unwrap();
            let h = g.mean_all(m).unwrap();
            let fa = g.scale(f, a).unwrap();
            let hb = g.scale(h, b).unwrap();
            let y = g.add(fa, hb).unwrap();
            g.backward(y).unwrap();
            g.grad(x).unwrap().unwrap().to_vec()
        };
        let gf = run(1.0, 0.0);
        let gh = run(0.0, 1.0);
        let combined = run(2.0, -3.0);
        for i in 0..3 {
            assert!((combined[i] - (2.0 * gf[i] - 3.0 * gh[i])).abs() < 1e-12);
        }
    }
}
