//! Dynamic reverse-mode tape.
//!
//! Every forward operation appends one node holding its value and the inputs
//! it was computed from. Nodes are appended in evaluation order, so the node
//! list is already a topological order and `backward` is a single reverse
//! sweep.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{gemm, Im2col, MatRef};
use super::params::{Gradients, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stride and zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, pad: usize) -> Self {
        ConvGeom { stride, pad }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Bmm(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f32>,
        probs: Vec<f32>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A recording of primitive applications, rebuilt on every forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(t),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Bind a named parameter as a gradient-requiring leaf. Binding the same
    /// name twice returns the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let value = store
            .get_shared(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // ---------------------------------------------------------------- forward

    /// `[m,k] · [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            MatRef::rows(self.value(a).data(), k),
            MatRef::rows(self.value(b).data(), n),
            0.0,
            &mut out,
        );
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(a, b),
            "matmul",
            &[a, b],
        )
    }

    /// Batched matmul `[g,m,k] · [g,k,n] -> [g,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; g * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                MatRef::rows(&da[i * m * k..(i + 1) * m * k], k),
                MatRef::rows(&db[i * k * n..(i + 1) * k * n], n),
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.push(
            Tensor::from_parts(vec![g, m, n], out),
            Op::Bmm(a, b),
            "bmm",
            &[a, b],
        )
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b), "add", &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b), "sub", &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b), "mul", &[a, b])
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_bcast", format!("{sa:?} + {sb:?}")));
        }
        let inner = self.value(b).numel();
        let tb = self.value(b).data();
        let ta = self.value(a);
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(inner) {
            for (x, y) in chunk.iter_mut().zip(tb) {
                *x += y;
            }
        }
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(t, Op::AddBcast(a, b), "add_bcast", &[a, b])
    }

    fn map(&self, a: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let ta = self.value(a);
        Tensor::from_parts(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| f(x)).collect(),
        )
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let t = self.map(a, |x| x * s);
        self.push(t, Op::Scale(a, s), "scale", &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        let t = self.map(a, |x| x + s);
        self.push(t, Op::AddScalar(a), "add_scalar", &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let d = *ta.shape().last().unwrap_or(&1);
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(t, Op::Softmax(a), "softmax", &[a])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let sx = self.shape(x);
        let d = *sx
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {sx:?}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let tx = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = tx.numel() / d;
        let mut out = vec![0.0; tx.numel()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for (r, row) in tx.data().chunks(d).enumerate() {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps as f64).sqrt();
            for (i, &v) in row.iter().enumerate() {
                let xhat = ((v as f64 - mean) * rstd) as f32;
                out[r * d + i] = xhat * g[i] + b[i];
            }
            means.push(mean as f32);
            rstds.push(rstd as f32);
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            "layer_norm",
            &[x, gamma, beta],
        )
    }

    /// Row lookup: `table [V,D]`, ids -> `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 || ids.is_empty() {
            return Err(Error::shape(
                "embedding",
                format!("table {st:?}, {} ids", ids.len()),
            ));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape(
                "embedding",
                format!("id {bad} out of range for table {st:?}"),
            ));
        }
        let tt = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tt[i * d..(i + 1) * d]);
        }
        let t = Tensor::from_parts(vec![ids.len(), d], out);
        self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            "embedding",
            &[table],
        )
    }

    fn conv_plan(
        &self,
        op: &'static str,
        plane: &[usize],
        kernel: (usize, usize),
        geom: ConvGeom,
        out_hw: (usize, usize),
    ) -> Result<Im2col> {
        if geom.stride == 0 {
            return Err(Error::shape(op, "stride must be positive"));
        }
        Ok(Im2col {
            channels: plane[0],
            height: plane[1],
            width: plane[2],
            kh: kernel.0,
            kw: kernel.1,
            stride: geom.stride,
            pad: geom.pad,
            out_h: out_hw.0,
            out_w: out_hw.1,
        })
    }

    /// `x [B,C,H,W]`, `w [O,C,kh,kw]`, optional bias `[O]` -> `[B,O,Ho,Wo]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input {sx:?}, weight {sw:?}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {} filters", self.shape(b), sw[0]),
                ));
            }
        }
        let (bsz, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * geom.pad < kh || wd + 2 * geom.pad < kw || geom.stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {sx:?}"),
            ));
        }
        let out_h = (h + 2 * geom.pad - kh) / geom.stride + 1;
        let out_w = (wd + 2 * geom.pad - kw) / geom.stride + 1;
        let plan = self.conv_plan("conv2d", &[c, h, wd], (kh, kw), geom, (out_h, out_w))?;
        let (rows, cols) = (plan.rows(), plan.cols());
        let mut col = vec![0.0; rows * cols];
        let mut out = vec![0.0; bsz * o * cols];
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        for n in 0..bsz {
            plan.expand(&xd[n * c * h * wd..(n + 1) * c * h * wd], &mut col);
            let dst = &mut out[n * o * cols..(n + 1) * o * cols];
            gemm(
                o,
                rows,
                cols,
                MatRef::rows(wdat, rows),
                MatRef::rows(&col, cols),
                0.0,
                dst,
            );
            if let Some(b) = b {
                for (f, plane) in dst.chunks_mut(cols).enumerate() {
                    let bias = self.value(b).data()[f];
                    plane.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let t = Tensor::from_parts(vec![bsz, o, out_h, out_w], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(t, Op::Conv2d { x, w, b, geom }, "conv2d", &inputs)
    }

    /// `x [B,C,H,W]`, `w [C,O,kh,kw]`, optional bias `[O]` ->
    /// `[B,O,(H-1)s-2p+kh,(W-1)s-2p+kw]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || geom.stride == 0 {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input {sx:?}, weight {sw:?}"),
            ));
        }
        let (bsz, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[1], sw[2], sw[3]);
        let full_h = (h - 1) * geom.stride + kh;
        let full_w = (wd - 1) * geom.stride + kw;
        if full_h <= 2 * geom.pad || full_w <= 2 * geom.pad {
            return Err(Error::shape(
                "conv_transpose2d",
                "padding removes the whole output",
            ));
        }
        let (out_h, out_w) = (full_h - 2 * geom.pad, full_w - 2 * geom.pad);
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape(
                    "conv_transpose2d",
                    format!("bias {:?} for {o} filters", self.shape(b)),
                ));
            }
        }
        // The output plane is the "input" of the equivalent forward convolution.
        let plan = self.conv_plan(
            "conv_transpose2d",
            &[o, out_h, out_w],
            (kh, kw),
            geom,
            (h, wd),
        )?;
        let (rows, cols) = (plan.rows(), plan.cols());
        let mut col = vec![0.0; rows * cols];
        let mut out = vec![0.0; bsz * o * out_h * out_w];
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        for n in 0..bsz {
            gemm(
                rows,
                c,
                cols,
                MatRef::transposed(wdat, rows),
                MatRef::rows(&xd[n * c * cols..(n + 1) * c * cols], cols),
                0.0,
                &mut col,
            );
            let dst = &mut out[n * o * out_h * out_w..(n + 1) * o * out_h * out_w];
            plan.fold(&col, dst);
            if let Some(b) = b {
                for (f, plane) in dst.chunks_mut(out_h * out_w).enumerate() {
                    let bias = self.value(b).data()[f];
                    plane.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let t = Tensor::from_parts(vec![bsz, o, out_h, out_w], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            t,
            Op::ConvTranspose2d { x, w, b, geom },
            "conv_transpose2d",
            &inputs,
        )
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        let mut seen = vec![false; sx.len()];
        if axes.len() != sx.len()
            || axes
                .iter()
                .any(|&a| a >= sx.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::shape(
                "permute",
                format!("axes {axes:?} for shape {sx:?}"),
            ));
        }
        let t = permute_tensor(self.value(x), axes);
        self.push(
            t,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            "permute",
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(t, Op::Reshape(x), "reshape", &[x])
    }

    /// `out[i] = x.flat[idx[i]]`, reshaped to `shape`. Indices may repeat;
    /// their gradients add up.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let xd = self.value(x).data();
        if idx.len() != shape.iter().product::<usize>() || idx.iter().any(|&i| i >= xd.len()) {
            return Err(Error::shape(
                "gather",
                format!(
                    "{} indices into {} values for shape {shape:?}",
                    idx.len(),
                    xd.len()
                ),
            ));
        }
        let t = Tensor::from_parts(shape.to_vec(), idx.iter().map(|&i| xd[i]).collect());
        self.push(t, Op::Gather { x, idx }, "gather", &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, gelu);
        self.push(t, Op::Gelu(x), "gelu", &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| v.max(0.0));
        self.push(t, Op::Relu(x), "relu", &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, sigmoid);
        self.push(t, Op::Sigmoid(x), "sigmoid", &[x])
    }

    /// Mean cross-entropy of `logits [N,V]` against `targets`, counting only
    /// rows where `mask` is true (all rows when `mask` is `None`).
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let sl = self.shape(logits);
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {sl:?} for {} targets", targets.len()),
            ));
        }
        let (n, v) = (sl[0], sl[1]);
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("mask of {} for {n} rows", m.len()),
                ));
            }
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::shape(
                "cross_entropy",
                format!("target {bad} outside vocabulary {v}"),
            ));
        }
        let active = |i: usize| mask.is_none_or(|m| m[i]);
        let count = (0..n).filter(|&i| active(i)).count();
        if count == 0 {
            return Err(Error::InvalidArgument(
                "cross_entropy: every position is masked".into(),
            ));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0f64;
        for (i, row) in probs.chunks_mut(v).enumerate() {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max as f64
                + row
                    .iter()
                    .map(|&z| ((z - max) as f64).exp())
                    .sum::<f64>()
                    .ln();
            if active(i) {
                total += lse - row[targets[i]] as f64;
            }
            for z in row.iter_mut() {
                *z = ((*z as f64) - lse).exp() as f32;
            }
        }
        let weights = (0..n)
            .map(|i| if active(i) { 1.0 / count as f32 } else { 0.0 })
            .collect();
        let t = Tensor::scalar((total / count as f64) as f32);
        self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
            },
            "cross_entropy",
            &[logits],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x), "sum", &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).mean());
        self.push(t, Op::Mean(x), "mean", &[x])
    }

    /// Mean squared difference between two same-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    // --------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`. Leaves that require gradients but
    /// do not reach the loss receive zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.value(loss);
        if ls.numel() != 1 {
            return Err(Error::NonScalarLoss(ls.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(ls.shape().to_vec(), vec![1.0]));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }

        let mut leaves = Vec::with_capacity(self.nodes.len());
        for (i, slot) in grads.into_iter().enumerate() {
            let node = &self.nodes[i];
            let keep = matches!(node.op, Op::Leaf) && node.requires_grad;
            leaves.push(if keep {
                Some(slot.unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec())))
            } else {
                None
            });
        }
        Ok(Gradients::new(leaves, self.params.clone()))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        MatRef::rows(gd, n),
                        MatRef::transposed(self.value(*b).data(), n),
                        0.0,
                        &mut da,
                    );
                    self.accumulate(grads, *a, Tensor::from_parts(sa.to_vec(), da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        MatRef::transposed(self.value(*a).data(), k),
                        MatRef::rows(gd, n),
                        0.0,
                        &mut db,
                    );
                    self.accumulate(grads, *b, Tensor::from_parts(sb.to_vec(), db));
                }
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (grp, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; grp * m * k];
                    for i in 0..grp {
                        gemm(
                            m,
                            n,
                            k,
                            MatRef::rows(&gd[i * m * n..(i + 1) * m * n], n),
                            MatRef::transposed(&bd[i * k * n..(i + 1) * k * n], n),
                            0.0,
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    self.accumulate(grads, *a, Tensor::from_parts(sa.clone(), da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; grp * k * n];
                    for i in 0..grp {
                        gemm(
                            k,
                            m,
                            n,
                            MatRef::transposed(&ad[i * m * k..(i + 1) * m * k], k),
                            MatRef::rows(&gd[i * m * n..(i + 1) * m * n], n),
                            0.0,
                            &mut db[i * k * n..(i + 1) * k * n],
                        );
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(sb, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let neg = gd.iter().map(|v| -v).collect();
                self.accumulate(grads, *b, Tensor::from_parts(g.shape().to_vec(), neg));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let da = gd.iter().zip(bv).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), da));
                }
                if self.requires_grad(*b) {
                    let db = gd.iter().zip(av).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, Tensor::from_parts(g.shape().to_vec(), db));
                }
            }
            Op::AddBcast(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    let inner = self.value(*b).numel();
                    let mut db = vec![0.0; inner];
                    for chunk in gd.chunks(inner) {
                        db.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(self.shape(*b).to_vec(), db));
                }
            }
            Op::Scale(a, s) => {
                let da = gd.iter().map(|v| v * s).collect();
                self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), da));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Softmax(a) => {
                let d = *out.shape().last().unwrap_or(&1);
                let mut da = vec![0.0; gd.len()];
                for ((drow, grow), yrow) in
                    da.chunks_mut(d).zip(gd.chunks(d)).zip(out.data().chunks(d))
                {
                    let dot: f32 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for ((dx, gv), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dx = y * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), da));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let d = *xv.shape().last().unwrap();
                let gam = self.value(*gamma).data();
                let mut dx = vec![0.0; xv.numel()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..xv.numel() / d {
                    let row = &xv.data()[r * d..(r + 1) * d];
                    let grow = &gd[r * d..(r + 1) * d];
                    for i in 0..d {
                        xhat[i] = (row[i] - mean[r]) * rstd[r];
                        dxhat[i] = grow[i] * gam[i];
                        dgamma[i] += grow[i] * xhat[i];
                        dbeta[i] += grow[i];
                    }
                    let m1 = dxhat.iter().sum::<f32>() / d as f32;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f32>() / d as f32;
                    for i in 0..d {
                        dx[r * d + i] = rstd[r] * (dxhat[i] - m1 - xhat[i] * m2);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                self.accumulate(grads, *gamma, Tensor::from_parts(vec![d], dgamma));
                self.accumulate(grads, *beta, Tensor::from_parts(vec![d], dbeta));
            }
            Op::Embedding { table, ids } => {
                if self.requires_grad(*table) {
                    let st = self.shape(*table);
                    let d = st[1];
                    let mut dt = vec![0.0; st[0] * d];
                    for (r, &id) in ids.iter().enumerate() {
                        dt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&gd[r * d..(r + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                    self.accumulate(grads, *table, Tensor::from_parts(st.to_vec(), dt));
                }
            }
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(*x, *w, *b, *geom, g, grads),
            Op::ConvTranspose2d { x, w, b, geom } => {
                self.conv_t_backward(*x, *w, *b, *geom, g, grads)
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                self.accumulate(grads, *x, permute_tensor(g, &inv));
            }
            Op::Reshape(x) => {
                let t = Tensor::from_parts(self.shape(*x).to_vec(), gd.to_vec());
                self.accumulate(grads, *x, t);
            }
            Op::Gather { x, idx } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                idx.iter().zip(gd).for_each(|(&i, &v)| dx[i] += v);
                self.accumulate(grads, *x, Tensor::from_parts(self.shape(*x).to_vec(), dx));
            }
            Op::Gelu(x) => {
                let dx = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, &v)| g * gelu_grad(v))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::Relu(x) => {
                let dx = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::Sigmoid(x) => {
                let dx = gd
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let v = self.shape(*logits)[1];
                let scale = gd[0];
                let mut dl = probs.clone();
                for (i, row) in dl.chunks_mut(v).enumerate() {
                    let w = weights[i] * scale;
                    if w == 0.0 {
                        row.fill(0.0);
                        continue;
                    }
                    row[targets[i]] -= 1.0;
                    row.iter_mut().for_each(|z| *z *= w);
                }
                self.accumulate(
                    grads,
                    *logits,
                    Tensor::from_parts(self.shape(*logits).to_vec(), dl),
                );
            }
            Op::Sum(x) => {
                let s = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::full(s, gd[0]));
            }
            Op::Mean(x) => {
                let s = self.shape(*x).to_vec();
                let n = self.value(*x).numel() as f32;
                self.accumulate(grads, *x, Tensor::full(s, gd[0] / n));
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (bsz, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        let (out_h, out_w) = (g.shape()[2], g.shape()[3]);
        let plan = Im2col {
            channels: c,
            height: h,
            width: wd,
            kh,
            kw,
            stride: geom.stride,
            pad: geom.pad,
            out_h,
            out_w,
        };
        let (rows, cols) = (plan.rows(), plan.cols());
        let gd = g.data();
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        let mut dx = if need_x {
            vec![0.0; xd.len()]
        } else {
            Vec::new()
        };
        let mut dw = vec![0.0; if need_w { wdat.len() } else { 0 }];
        let mut col = vec![0.0; rows * cols];
        for n in 0..bsz {
            let gn = &gd[n * o * cols..(n + 1) * o * cols];
            if need_w {
                plan.expand(&xd[n * c * h * wd..(n + 1) * c * h * wd], &mut col);
                gemm(
                    o,
                    cols,
                    rows,
                    MatRef::rows(gn, cols),
                    MatRef::transposed(&col, cols),
                    1.0,
                    &mut dw,
                );
            }
            if need_x {
                gemm(
                    rows,
                    o,
                    cols,
                    MatRef::transposed(wdat, rows),
                    MatRef::rows(gn, cols),
                    0.0,
                    &mut col,
                );
                plan.fold(&col, &mut dx[n * c * h * wd..(n + 1) * c * h * wd]);
            }
        }
        if need_x {
            self.accumulate(grads, x, Tensor::from_parts(sx, dx));
        }
        if need_w {
            self.accumulate(grads, w, Tensor::from_parts(sw, dw));
        }
        if let Some(b) = b {
            self.accumulate(
                grads,
                b,
                Tensor::from_parts(vec![o], channel_sums(gd, bsz, o, cols)),
            );
        }
    }

    fn conv_t_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (bsz, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[1], sw[2], sw[3]);
        let (out_h, out_w) = (g.shape()[2], g.shape()[3]);
        let plan = Im2col {
            channels: o,
            height: out_h,
            width: out_w,
            kh,
            kw,
            stride: geom.stride,
            pad: geom.pad,
            out_h: h,
            out_w: wd,
        };
        let (rows, cols) = (plan.rows(), plan.cols());
        let gd = g.data();
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        let mut dx = vec![0.0; if need_x { xd.len() } else { 0 }];
        let mut dw = vec![0.0; if need_w { wdat.len() } else { 0 }];
        let mut col = vec![0.0; rows * cols];
        let plane = o * out_h * out_w;
        for n in 0..bsz {
            plan.expand(&gd[n * plane..(n + 1) * plane], &mut col);
            if need_x {
                gemm(
                    c,
                    rows,
                    cols,
                    MatRef::rows(wdat, rows),
                    MatRef::rows(&col, cols),
                    0.0,
                    &mut dx[n * c * cols..(n + 1) * c * cols],
                );
            }
            if need_w {
                gemm(
                    c,
                    cols,
                    rows,
                    MatRef::rows(&xd[n * c * cols..(n + 1) * c * cols], cols),
                    MatRef::transposed(&col, cols),
                    1.0,
                    &mut dw,
                );
            }
        }
        if need_x {
            self.accumulate(grads, x, Tensor::from_parts(sx, dx));
        }
        if need_w {
            self.accumulate(grads, w, Tensor::from_parts(sw, dw));
        }
        if let Some(b) = b {
            self.accumulate(
                grads,
                b,
                Tensor::from_parts(vec![o], channel_sums(gd, bsz, o, out_h * out_w)),
            );
        }
    }
}

fn channel_sums(gd: &[f32], bsz: usize, channels: usize, plane: usize) -> Vec<f32> {
    let mut db = vec![0.0f32; channels];
    for n in 0..bsz {
        for (f, acc) in db.iter_mut().enumerate() {
            let start = (n * channels + f) * plane;
            *acc += gd[start..start + plane].iter().sum::<f32>();
        }
    }
    db
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn permute_tensor(t: &Tensor, axes: &[usize]) -> Tensor {
    let shape = t.shape();
    let nd = shape.len();
    let mut strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    if nd == 0 {
        out.extend_from_slice(src);
        return Tensor::from_parts(out_shape, out);
    }
    let last = nd - 1;
    let (inner_n, inner_s) = (out_shape[last], src_strides[last]);
    let mut idx = vec![0usize; nd];
    let outer: usize = out_shape[..last].iter().product();
    for _ in 0..outer {
        let base: usize = idx[..last]
            .iter()
            .zip(&src_strides)
            .map(|(i, s)| i * s)
            .sum();
        out.extend((0..inner_n).map(|j| src[base + j * inner_s]));
        for d in (0..last).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn square_derivative_at_three() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_shapes_and_gradient_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::full(vec![2, 3], 1.0), true);
        let b = tape.leaf(Tensor::full(vec![3, 4], 2.0), true);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 4]);
        let loss = tape.sum(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.grad(a).unwrap().shape(), &[2, 3]);
        assert_eq!(grads.grad(b).unwrap().shape(), &[3, 4]);
        assert!(grads.grad(a).unwrap().data().iter().all(|&v| v == 8.0));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![4, 4]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 4]"), "{msg}");
    }

    #[test]
    fn linear_map_gradient_is_weight() {
        let mut tape = Tape::new();
        let w = tape.constant(t(&[3], &[0.5, -1.0, 2.0]));
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let wx = tape.mul(w, x).unwrap();
        let loss = tape.sum(wx).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.grad(x).unwrap().data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let unused = tape.leaf(Tensor::full(vec![2, 2], 5.0), true);
        let y = tape.scale(x, 3.0).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.grad(unused).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2]), true);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn permute_round_trips() {
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let x = tape.constant(t(&[2, 3, 4], &data));
        let y = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(y), &[4, 2, 3]);
        // y[i,j,k] = x[j,k,i]
        assert_eq!(tape.value(y).data()[6 + 3 + 2], data[12 + 2 * 4 + 1]);
        let z = tape.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(z).data(), &data[..]);
    }

    #[test]
    fn masked_cross_entropy_ignores_masked_rows() {
        let mut tape = Tape::new();
        let logits = tape.leaf(t(&[2, 2], &[0.0, 0.0, 100.0, -100.0]), true);
        let loss = tape
            .cross_entropy(logits, &[0, 1], Some(&[true, false]))
            .unwrap();
        assert!((tape.value(loss).item().unwrap() - std::f32::consts::LN_2).abs() < 1e-6);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(&grads.grad(logits).unwrap().data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn conv_transpose_inverts_conv_grid() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![1, 2, 8, 8], 1.0));
        let w = tape.constant(Tensor::full(vec![3, 2, 4, 4], 0.1));
        let y = tape.conv2d(x, w, None, ConvGeom::new(2, 1)).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 4, 4]);
        let wt = tape.constant(Tensor::full(vec![3, 2, 4, 4], 0.1));
        let z = tape
            .conv_transpose2d(y, wt, None, ConvGeom::new(2, 1))
            .unwrap();
        assert_eq!(tape.shape(z), &[1, 2, 8, 8]);
    }
}
