use super::linalg::gemm;
use super::{suffix_broadcast, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One output row of [`Graph::mix_rows`]:
/// `out = in[anchor] + Σ w · (in[i] − in[anchor])`.
///
/// Writing the mix relative to an anchor row makes constant inputs exact
/// fixed points whenever the weights sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct RowMix {
    pub anchor: usize,
    pub terms: Vec<(usize, f64)>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddScalar { a: Var },
    Exp { a: Var },
    Log { a: Var },
    Powf { a: Var, p: f64 },
    Abs { a: Var },
    Gelu { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    SumAxis { a: Var, axis: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    Softmax { a: Var, inv_temp: f64 },
    LogSoftmax { a: Var, inv_temp: f64 },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    L2Normalize { a: Var, norms: Vec<f64> },
    SelectRows { a: Var, rows: Vec<usize> },
    Gather { a: Var, index: Vec<Option<usize>> },
    RowDistance { a: Var, b: Var },
    MixRows { a: Var, mix: Vec<RowMix> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is always topologically sorted.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out, out_shape);
    }
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            counter[d] += 1;
            offset += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    (out, out_shape)
}

fn softmax_rows(x: &[f64], cols: usize, inv_temp: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = ((s - max) * inv_temp).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf, false)
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

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(Tensor::from_parts(shape, data), op, rg)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---- linear algebra -------------------------------------------------

    /// `a · b` (or `a · bᵀ` when `trans_b`). `a` may have any rank ≥ 1 and is
    /// contracted over its last axis; `b` must be rank 2.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() != 2 {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let k = *sa.last().unwrap();
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?} (trans_b={})", sa, sb, trans_b),
            ));
        }
        let m = if k == 0 { sa[..sa.len() - 1].iter().product() } else { self.value(a).numel() / k };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), trans_b, &mut out, 0.0);
        check_finite("matmul", &out)?;
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        Ok(self.push(shape, out, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    /// Batched `a[i] · b[i]` (or `a[i] · b[i]ᵀ`) over the leading axis.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", format!("{:?} x {:?}", sa, sb)));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(Error::shape("bmm", format!("{:?} x {:?}", sa, sb)));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let da = self.data(a);
            let db = self.data(b);
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    false,
                    &db[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        check_finite("bmm", &out)?;
        Ok(self.push(vec![batch, m, n], out, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    // ---- element-wise -----------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        let shape = self.shape(a).to_vec();
        let inner = suffix_broadcast(name, &shape, self.shape(b))?;
        let (da, db) = (self.data(a), self.data(b));
        let out: Vec<f64> = if inner == 0 {
            Vec::new()
        } else {
            da.iter().enumerate().map(|(i, &x)| f(x, db[i % inner])).collect()
        };
        check_finite(name, &out)?;
        Ok((shape, out))
    }

    /// `a + b`, with `b` broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(s, d, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(s, d, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(s, d, Op::Mul { a, b }, &[a, b]))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        check_finite(name, &out)?;
        Ok((self.shape(a).to_vec(), out))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let (s, d) = self.unary("scale", a, |x| x * c)?;
        Ok(self.push(s, d, Op::Scale { a, c }, &[a]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let (s, d) = self.unary("add_scalar", a, |x| x + c)?;
        Ok(self.push(s, d, Op::AddScalar { a }, &[a]))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let (s, d) = self.unary("exp", a, f64::exp)?;
        Ok(self.push(s, d, Op::Exp { a }, &[a]))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let (s, d) = self.unary("log", a, f64::ln)?;
        Ok(self.push(s, d, Op::Log { a }, &[a]))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let (s, d) = self.unary("powf", a, |x| x.powf(p))?;
        Ok(self.push(s, d, Op::Powf { a, p }, &[a]))
    }

    /// Absolute value; the derivative at zero is taken to be zero.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let (s, d) = self.unary("abs", a, f64::abs)?;
        Ok(self.push(s, d, Op::Abs { a }, &[a]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (s, d) = self.unary("gelu", a, |x| gelu_parts(x).0)?;
        Ok(self.push(s, d, Op::Gelu { a }, &[a]))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.data(a).iter().sum();
        check_finite("sum", &[total])?;
        Ok(self.push(vec![], vec![total], Op::Sum { a }, &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let total: f64 = self.data(a).iter().sum::<f64>() / n as f64;
        check_finite("mean", &[total])?;
        Ok(self.push(vec![], vec![total], Op::Mean { a }, &[a]))
    }

    /// Sum over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {} of {:?}", axis, shape)));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        check_finite("sum_axis", &out)?;
        let mut s = shape;
        s.remove(axis);
        Ok(self.push(s, out, Op::SumAxis { a, axis }, &[a]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", format!("axis {}", axis)))?;
        if len == 0 {
            return Err(Error::shape("mean_axis", "zero-length axis"));
        }
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / len as f64)
    }

    // ---- structural -------------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {} of {:?}", axis, first)));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", s, first)));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(shape, out, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{}..{}) on axis {} of {:?}", start, start + len, axis, shape),
            ));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        Ok(self.push(s, out, Op::Slice { a, axis, start }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", self.shape(a), shape)));
        }
        let data = self.data(a).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape { a }, &[a]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true))
        {
            return Err(Error::shape("permute", format!("axes {:?} for {:?}", axes, shape)));
        }
        let (data, out_shape) = permute_data(self.data(a), &shape, axes);
        Ok(self.push(out_shape, data, Op::Permute { a, axes: axes.to_vec() }, &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::shape("transpose", format!("rank {}", r)));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    // ---- fused ------------------------------------------------------------

    /// Softmax of `a / temperature` along the last axis.
    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid(format!("softmax temperature must be > 0, got {}", temperature)));
        }
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        if cols == 0 {
            return Err(Error::shape("softmax", "zero-length axis"));
        }
        let inv_temp = 1.0 / temperature;
        let out = softmax_rows(self.data(a), cols, inv_temp);
        check_finite("softmax", &out)?;
        Ok(self.push(shape, out, Op::Softmax { a, inv_temp }, &[a]))
    }

    /// Softmax along an arbitrary axis.
    pub fn softmax_axis(&mut self, a: Var, axis: usize, temperature: f64) -> Result<Var> {
        let r = self.shape(a).len();
        if axis >= r {
            return Err(Error::shape("softmax", format!("axis {} of rank {}", axis, r)));
        }
        if axis == r - 1 {
            return self.softmax(a, temperature);
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(axis, r - 1);
        let p = self.permute(a, &axes)?;
        let s = self.softmax(p, temperature)?;
        self.permute(s, &axes)
    }

    /// Log-softmax of `a / temperature` along the last axis.
    pub fn log_softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid(format!("softmax temperature must be > 0, got {}", temperature)));
        }
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().ok_or_else(|| Error::shape("log_softmax", "scalar input"))?;
        if cols == 0 {
            return Err(Error::shape("log_softmax", "zero-length axis"));
        }
        let inv_temp = 1.0 / temperature;
        let mut out = vec![0.0; self.value(a).numel()];
        for (src, dst) in self.data(a).chunks(cols).zip(out.chunks_mut(cols)) {
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = src.iter().map(|&s| ((s - max) * inv_temp).exp()).sum::<f64>().ln();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - max) * inv_temp - lse;
            }
        }
        check_finite("log_softmax", &out)?;
        Ok(self.push(shape, out, Op::LogSoftmax { a, inv_temp }, &[a]))
    }

    /// Layer normalization over the last axis followed by `gain`/`bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layernorm", "scalar input"))?;
        if d == 0 {
            return Err(Error::shape("layernorm", "zero-length normalization axis"));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layernorm",
                format!("gain {:?} / bias {:?} for axis of {}", self.shape(gain), self.shape(bias), d),
            ));
        }
        let src = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        check_finite("layernorm", &out)?;
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
            &[x, gain, bias],
        ))
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("l2_normalize", "scalar input"))?;
        if d == 0 {
            return Err(Error::shape("l2_normalize", "zero-length axis"));
        }
        let src = self.data(a);
        let mut norms = Vec::with_capacity(src.len() / d);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::invalid("l2_normalize of a zero vector"));
            }
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        check_finite("l2_normalize", &out)?;
        Ok(self.push(shape, out, Op::L2Normalize { a, norms }, &[a]))
    }

    /// Picks entries along the leading axis.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(Error::shape("select_rows", "scalar input"));
        }
        let width: usize = shape[1..].iter().product();
        if let Some(&bad) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(Error::shape("select_rows", format!("row {} of {:?}", bad, shape)));
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&src[r * width..(r + 1) * width]);
        }
        let mut s = shape;
        s[0] = rows.len();
        Ok(self.push(s, out, Op::SelectRows { a, rows: rows.to_vec() }, &[a]))
    }

    /// `out[i] = a.flat[index[i]]`, or zero where the index is `None`.
    pub fn gather(&mut self, a: Var, index: Vec<Option<usize>>, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::shape("gather", format!("{} indices for {:?}", index.len(), shape)));
        }
        let src = self.data(a);
        if index.iter().flatten().any(|&i| i >= src.len()) {
            return Err(Error::shape("gather", "index out of range"));
        }
        let out = index.iter().map(|i| i.map_or(0.0, |i| src[i])).collect();
        Ok(self.push(shape.to_vec(), out, Op::Gather { a, index }, &[a]))
    }

    /// Row-wise Euclidean distance between two `[n, d]` operands. The
    /// gradient at zero distance is taken to be zero.
    pub fn row_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sa != sb {
            return Err(Error::shape("row_distance", format!("{:?} vs {:?}", sa, sb)));
        }
        let d = sa[1];
        let (xa, xb) = (self.data(a), self.data(b));
        let out: Vec<f64> = (0..sa[0])
            .map(|r| {
                (0..d)
                    .map(|j| {
                        let t = xa[r * d + j] - xb[r * d + j];
                        t * t
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        check_finite("row_distance", &out)?;
        Ok(self.push(vec![sa[0]], out, Op::RowDistance { a, b }, &[a, b]))
    }

    /// Linear recombination of the rows (leading axis) of `a`.
    pub fn mix_rows(&mut self, a: Var, mix: Vec<RowMix>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(Error::shape("mix_rows", "scalar input"));
        }
        let width: usize = shape[1..].iter().product();
        let n = shape[0];
        if mix.iter().any(|m| m.anchor >= n || m.terms.iter().any(|&(i, _)| i >= n)) {
            return Err(Error::shape("mix_rows", "row index out of range"));
        }
        let src = self.data(a);
        let out = mix_rows_forward(src, width, &mix);
        check_finite("mix_rows", &out)?;
        let mut s = shape;
        s[0] = mix.len();
        Ok(self.push(s, out, Op::MixRows { a, mix }, &[a]))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse pass from a scalar `loss`. Consumes the tape: a second call
    /// returns [`Error::GraphConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, g, lower);
        }
        for g in grads.iter().flatten() {
            check_finite("backward", g)?;
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| g.map(|d| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), d)))
                .collect(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();
        let shp = |v: Var| nodes[v.0].value.shape();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let k = *shp(a).last().unwrap();
                let n = *node.value.shape().last().unwrap();
                let m = if k == 0 { 0 } else { val(a).len() / k };
                if wants(a) {
                    // dA = dC · op(B)ᵀ
                    acc(a, &mut |da| gemm(m, n, k, g, false, val(b), !trans_b, da, 1.0));
                }
                if wants(b) {
                    if trans_b {
                        acc(b, &mut |db| gemm(n, m, k, g, true, val(a), false, db, 1.0));
                    } else {
                        acc(b, &mut |db| gemm(k, m, n, val(a), true, g, false, db, 1.0));
                    }
                }
            }
            &Op::BatchMatMul { a, b, trans_b } => {
                let sa = shp(a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (va, vb) = (val(a), val(b));
                if wants(a) {
                    acc(a, &mut |da| {
                        for i in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..(i + 1) * m * n],
                                false,
                                &vb[i * k * n..(i + 1) * k * n],
                                !trans_b,
                                &mut da[i * m * k..(i + 1) * m * k],
                                1.0,
                            );
                        }
                    });
                }
                if wants(b) {
                    acc(b, &mut |db| {
                        for i in 0..batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let ai = &va[i * m * k..(i + 1) * m * k];
                            let dbi = &mut db[i * k * n..(i + 1) * k * n];
                            if trans_b {
                                gemm(n, m, k, gi, true, ai, false, dbi, 1.0);
                            } else {
                                gemm(k, m, n, ai, true, gi, false, dbi, 1.0);
                            }
                        }
                    });
                }
            }
            &Op::Add { a, b } | &Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                acc(a, &mut |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
                let inner = val(b).len();
                if inner > 0 {
                    acc(b, &mut |db| {
                        for (i, &x) in g.iter().enumerate() {
                            db[i % inner] += sign * x;
                        }
                    });
                }
            }
            &Op::Mul { a, b } => {
                let (va, vb) = (val(a), val(b));
                let inner = vb.len();
                if inner > 0 {
                    acc(a, &mut |da| {
                        for (i, &x) in g.iter().enumerate() {
                            da[i] += x * vb[i % inner];
                        }
                    });
                    acc(b, &mut |db| {
                        for (i, &x) in g.iter().enumerate() {
                            db[i % inner] += x * va[i];
                        }
                    });
                }
            }
            &Op::Scale { a, c } => acc(a, &mut |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += c * x)),
            &Op::AddScalar { a } => acc(a, &mut |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += x)),
            &Op::Exp { a } => {
                let y = node.value.data();
                acc(a, &mut |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * y[i];
                    }
                })
            }
            &Op::Log { a } => {
                let x = val(a);
                acc(a, &mut |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] / x[i];
                    }
                })
            }
            &Op::Powf { a, p } => {
                let x = val(a);
                acc(a, &mut |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * p * x[i].powf(p - 1.0);
                    }
                })
            }
            &Op::Abs { a } => {
                let x = val(a);
                acc(a, &mut |da| {
                    for i in 0..g.len() {
                        if x[i] != 0.0 {
                            da[i] += g[i] * x[i].signum();
                        }
                    }
                })
            }
            &Op::Gelu { a } => {
                let x = val(a);
                acc(a, &mut |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * gelu_parts(x[i]).1;
                    }
                })
            }
            &Op::Sum { a } => acc(a, &mut |da| da.iter_mut().for_each(|d| *d += g[0])),
            &Op::Mean { a } => {
                let n = val(a).len() as f64;
                acc(a, &mut |da| da.iter_mut().for_each(|d| *d += g[0] / n))
            }
            &Op::SumAxis { a, axis } => {
                let (outer, len, inner) = split_axis(shp(a), axis);
                acc(a, &mut |da| {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                da[base + i] += g[o * inner + i];
                            }
                        }
                    }
                })
            }
            Op::Concat { inputs, axis } => {
                let axis = *axis;
                let (outer, _, inner) = split_axis(node.value.shape(), axis);
                let total = node.value.shape()[axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = shp(v)[axis] * inner;
                    acc(v, &mut |dv| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            dv[o * len..(o + 1) * len].iter_mut().zip(src).for_each(|(d, &x)| *d += x);
                        }
                    });
                    offset += len;
                }
            }
            &Op::Slice { a, axis, start } => {
                let (outer, full, inner) = split_axis(shp(a), axis);
                let len = node.value.shape()[axis];
                acc(a, &mut |da| {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        da[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(d, &x)| *d += x);
                    }
                })
            }
            &Op::Reshape { a } => acc(a, &mut |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += x)),
            Op::Permute { a, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &x) in axes.iter().enumerate() {
                    inverse[x] = i;
                }
                let (back, _) = permute_data(g, node.value.shape(), &inverse);
                acc(*a, &mut |da| da.iter_mut().zip(&back).for_each(|(d, &x)| *d += x));
            }
            &Op::Softmax { a, inv_temp } => {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap();
                acc(a, &mut |da| {
                    for ((dr, gr), yr) in da.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for j in 0..cols {
                            dr[j] += inv_temp * yr[j] * (gr[j] - dot);
                        }
                    }
                })
            }
            &Op::LogSoftmax { a, inv_temp } => {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap();
                acc(a, &mut |da| {
                    for ((dr, gr), yr) in da.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let gs: f64 = gr.iter().sum();
                        for j in 0..cols {
                            dr[j] += inv_temp * (gr[j] - yr[j].exp() * gs);
                        }
                    }
                })
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = *node.value.shape().last().unwrap();
                let gv = val(*gain);
                if wants(*x) {
                    acc(*x, &mut |dx| {
                        for (r, &inv) in inv_std.iter().enumerate() {
                            let gr = &g[r * d..(r + 1) * d];
                            let hr = &xhat[r * d..(r + 1) * d];
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..d {
                                let dh = gr[j] * gv[j];
                                s1 += dh;
                                s2 += dh * hr[j];
                            }
                            let df = d as f64;
                            for j in 0..d {
                                let dh = gr[j] * gv[j];
                                dx[r * d + j] += inv / df * (df * dh - s1 - hr[j] * s2);
                            }
                        }
                    });
                }
                acc(*gain, &mut |dg| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*bias, &mut |db| {
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                });
            }
            Op::L2Normalize { a, norms } => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                acc(*a, &mut |da| {
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            da[r * d + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                });
            }
            Op::SelectRows { a, rows } => {
                let width: usize = shp(*a)[1..].iter().product();
                acc(*a, &mut |da| {
                    for (k, &r) in rows.iter().enumerate() {
                        da[r * width..(r + 1) * width]
                            .iter_mut()
                            .zip(&g[k * width..(k + 1) * width])
                            .for_each(|(d, &x)| *d += x);
                    }
                });
            }
            Op::Gather { a, index } => acc(*a, &mut |da| {
                for (k, i) in index.iter().enumerate() {
                    if let Some(i) = *i {
                        da[i] += g[k];
                    }
                }
            }),
            &Op::RowDistance { a, b } => {
                let d = shp(a)[1];
                let (xa, xb) = (val(a), val(b));
                let dist = node.value.data();
                let coef = |r: usize, j: usize| {
                    if dist[r] == 0.0 {
                        0.0
                    } else {
                        g[r] * (xa[r * d + j] - xb[r * d + j]) / dist[r]
                    }
                };
                acc(a, &mut |da| {
                    for r in 0..dist.len() {
                        for j in 0..d {
                            da[r * d + j] += coef(r, j);
                        }
                    }
                });
                acc(b, &mut |db| {
                    for r in 0..dist.len() {
                        for j in 0..d {
                            db[r * d + j] -= coef(r, j);
                        }
                    }
                });
            }
            Op::MixRows { a, mix } => {
                let width: usize = shp(*a)[1..].iter().product();
                acc(*a, &mut |da| {
                    for (r, m) in mix.iter().enumerate() {
                        let gr = &g[r * width..(r + 1) * width];
                        let wsum: f64 = m.terms.iter().map(|t| t.1).sum();
                        for &(i, w) in &m.terms {
                            for j in 0..width {
                                da[i * width + j] += w * gr[j];
                            }
                        }
                        for j in 0..width {
                            da[m.anchor * width + j] += (1.0 - wsum) * gr[j];
                        }
                    }
                });
            }
        }
    }
}

pub(crate) fn mix_rows_forward(src: &[f64], width: usize, mix: &[RowMix]) -> Vec<f64> {
    let mut out = Vec::with_capacity(mix.len() * width);
    for m in mix {
        let anchor = &src[m.anchor * width..(m.anchor + 1) * width];
        for j in 0..width {
            let base = anchor[j];
            let mut v = 0.0;
            for &(i, w) in &m.terms {
                v += w * (src[i * width + j] - base);
            }
            out.push(base + v);
        }
    }
    out
}
