use std::cell::RefCell;
use std::sync::Arc;

use crate::tensor::numel;
use crate::{fault, Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds, one per backward rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    MatMul,
    Softmax,
    LayerNorm,
    Gelu,
    Silu,
    Sum,
    Mean,
    Concat,
    Slice,
    Reshape,
    Permute,
    Gather,
    CrossEntropy,
    Im2Col,
    Upsample,
}

/// Patch-extraction geometry of a channels-last `[H, W, C]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Calls `f(out_row, col, in_index)` for every in-bounds patch element.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let c = self.channels;
        for oy in 0..ho {
            for ox in 0..wo {
                let row = oy * wo + ox;
                for ky in 0..self.kernel {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.height as isize {
                        continue;
                    }
                    for kx in 0..self.kernel {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.width as isize {
                            continue;
                        }
                        let src = (iy as usize * self.width + ix as usize) * c;
                        let dst = (ky * self.kernel + kx) * c;
                        for ch in 0..c {
                            f(row, dst + ch, src + ch);
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct MatMulSpec {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
}

impl MatMulSpec {
    fn b_strides(&self) -> (isize, isize) {
        if self.trans_b {
            (1, self.k as isize)
        } else {
            (self.n as isize, 1)
        }
    }
}

enum Op<T> {
    Leaf,
    Add { a: Var, b: Var, broadcast: bool },
    Sub { a: Var, b: Var, broadcast: bool },
    Mul { a: Var, b: Var, broadcast: bool },
    Scale { a: Var, factor: T },
    AddScalar { a: Var },
    MatMul { a: Var, b: Var, spec: MatMulSpec },
    Softmax { a: Var },
    LayerNorm { x: Var, gain: Option<Var>, bias: Option<Var>, mean: Vec<T>, rstd: Vec<T> },
    Gelu { a: Var },
    Silu { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Gather { table: Var, rows: Vec<Vec<(usize, T)>> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Im2Col { a: Var, geom: Conv2dGeometry },
    Upsample { a: Var, height: usize, width: usize, channels: usize },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::AddScalar { .. } => OpKind::AddScalar,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Silu { .. } => OpKind::Silu,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Gather { .. } => OpKind::Gather,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Im2Col { .. } => OpKind::Im2Col,
            Op::Upsample { .. } => OpKind::Upsample,
        }
    }
}

struct Node<T> {
    value: Arc<Vec<T>>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Gradient tape: an append-only record of primitive applications.
///
/// Node indices are assigned in creation order, which is a topological order
/// of the computation; [`Graph::backward`] walks it in reverse.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::from_f64(SQRT_2_OVER_PI);
    let k = T::from_f64(GELU_CUBIC);
    let half = T::from_f64(0.5);
    let one = T::one();
    let inner = c * (x + k * x * x * x);
    let th = inner.tanh();
    let y = half * x * (one + th);
    let dinner = c * (one + T::from_f64(3.0) * k * x * x);
    let dy = half * (one + th) + half * x * (one - th * th) * dinner;
    (y, dy)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// For an output of `perm`-permuted shape, the flat input index of each
/// output element.
fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let total = numel(shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..total {
        let src: usize = idx
            .iter()
            .zip(perm)
            .map(|(&i, &p)| i * in_strides[p])
            .sum();
        map.push(src);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, v)| *e += v),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node. Previously issued [`Var`]s become invalid.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    fn push(&self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            shape,
            op,
            requires_grad,
            grad: None,
        });
        Var(nodes.len() - 1)
    }

    fn info(&self, v: Var) -> (Vec<usize>, Arc<Vec<T>>, bool) {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        (n.shape.clone(), Arc::clone(&n.value), n.requires_grad)
    }

    // ---- leaves -------------------------------------------------------

    /// Records a leaf. When `requires_grad` is set, [`backward`](Self::backward)
    /// accumulates into its gradient buffer.
    pub fn leaf(&self, t: Tensor<T>, requires_grad: bool) -> Var {
        let (shape, data) = t.into_parts();
        self.push(data, shape, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub(crate) fn shared_leaf(&self, shape: Vec<usize>, value: Arc<Vec<T>>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            shape,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(nodes.len() - 1)
    }

    // ---- inspection ---------------------------------------------------

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.as_ref().clone()).expect("node shape is consistent")
    }

    pub fn item(&self, v: Var) -> Result<T> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        if n.value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "item() on tensor of shape {:?}",
                n.shape
            )));
        }
        Ok(n.value[0])
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.shape.clone(), g.clone()).expect("grad matches value shape"))
    }

    pub(crate) fn take_grad(&self, v: Var) -> Option<Vec<T>> {
        self.nodes.borrow_mut()[v.0].grad.take()
    }

    /// Zeroes the gradient buffers of every leaf on this tape.
    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Index of the first node whose value contains a NaN, with its kind.
    pub fn first_nan(&self) -> Option<(Var, OpKind)> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .find(|(_, n)| n.value.iter().any(|v| v.is_nan()))
            .map(|(i, n)| (Var(i), n.op.kind()))
    }

    // ---- elementwise --------------------------------------------------

    fn broadcast_rule(op: &'static str, sa: &[usize], sb: &[usize]) -> Result<bool> {
        if sa == sb {
            Ok(false)
        } else if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            Ok(true)
        } else {
            Err(TensorError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: impl FnOnce(Var, Var, bool) -> Op<T>,
    ) -> Result<Var> {
        let (sa, va, ra) = self.info(a);
        let (sb, vb, rb) = self.info(b);
        let broadcast = Self::broadcast_rule(name, &sa, &sb)?;
        let out: Vec<T> = if broadcast {
            let d = sb[0];
            va.iter()
                .enumerate()
                .map(|(i, &x)| f(x, vb[i % d]))
                .collect()
        } else {
            va.iter().zip(vb.iter()).map(|(&x, &y)| f(x, y)).collect()
        };
        Ok(self.push(out, sa, make(a, b, broadcast), ra || rb))
    }

    /// `a + b`; `b` may be a vector matching the last axis of `a`.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |a, b, broadcast| Op::Add { a, b, broadcast })
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |a, b, broadcast| Op::Sub { a, b, broadcast })
    }

    /// Elementwise product; same broadcast rule as [`add`](Self::add).
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |a, b, broadcast| Op::Mul { a, b, broadcast })
    }

    pub fn scale(&self, a: Var, factor: T) -> Var {
        let (s, v, r) = self.info(a);
        let out = v.iter().map(|&x| x * factor).collect();
        self.push(out, s, Op::Scale { a, factor }, r)
    }

    pub fn add_scalar(&self, a: Var, c: T) -> Var {
        let (s, v, r) = self.info(a);
        let out = v.iter().map(|&x| x + c).collect();
        self.push(out, s, Op::AddScalar { a }, r)
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, a: Var) -> Var {
        let (s, v, r) = self.info(a);
        let out = v.iter().map(|&x| gelu_parts(x).0).collect();
        self.push(out, s, Op::Gelu { a }, r)
    }

    pub fn silu(&self, a: Var) -> Var {
        let (s, v, r) = self.info(a);
        let out = v.iter().map(|&x| x * sigmoid(x)).collect();
        self.push(out, s, Op::Silu { a }, r)
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum(&self, a: Var) -> Var {
        let (_, v, r) = self.info(a);
        let total: T = v.iter().copied().sum();
        self.push(vec![total], Vec::new(), Op::Sum { a }, r)
    }

    pub fn mean(&self, a: Var) -> Var {
        let (_, v, r) = self.info(a);
        let total: T = v.iter().copied().sum();
        let n = T::from_f64(v.len().max(1) as f64);
        self.push(vec![total / n], Vec::new(), Op::Mean { a }, r)
    }

    // ---- linear algebra -----------------------------------------------

    fn matmul_impl(&self, a: Var, b: Var, spec: MatMulSpec, out_shape: Vec<usize>) -> Var {
        let (_, va, ra) = self.info(a);
        let (_, vb, rb) = self.info(b);
        let MatMulSpec { batch, m, k, n, .. } = spec;
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &va[bi * m * k..(bi + 1) * m * k],
                (k as isize, 1),
                &vb[bi * k * n..(bi + 1) * k * n],
                spec.b_strides(),
                &mut out[bi * m * n..(bi + 1) * m * n],
                false,
            );
        }
        self.push(out, out_shape, Op::MatMul { a, b, spec }, ra || rb)
    }

    /// Matrix product `a·b` with `b: [k, n]`. Leading axes of `a` are treated
    /// as independent rows, so `[..., k]·[k, n] → [..., n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(TensorError::Shape { op: "matmul", lhs: sa, rhs: sb });
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(&sa) / k.max(1);
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = n;
        let spec = MatMulSpec { batch: 1, m, k, n, trans_b: false };
        Ok(self.matmul_impl(a, b, spec, out_shape))
    }

    /// `a·bᵀ` with `b: [n, k]`; leading axes of `a` as in [`matmul`](Self::matmul).
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[1] {
            return Err(TensorError::Shape { op: "matmul_nt", lhs: sa, rhs: sb });
        }
        let k = sb[1];
        let n = sb[0];
        let m = numel(&sa) / k.max(1);
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = n;
        let spec = MatMulSpec { batch: 1, m, k, n, trans_b: true };
        Ok(self.matmul_impl(a, b, spec, out_shape))
    }

    /// Batched product over a leading axis: `[B, m, k]·[B, k, n]`, or
    /// `[B, m, k]·[B, n, k]ᵀ` when `trans_b`.
    pub fn bmm(&self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(TensorError::Shape { op: "bmm", lhs: sa, rhs: sb });
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let spec = MatMulSpec { batch, m, k, n, trans_b };
        Ok(self.matmul_impl(a, b, spec, vec![batch, m, n]))
    }

    // ---- normalization ------------------------------------------------

    /// Softmax over the last axis with per-row max subtraction.
    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let (s, v, r) = self.info(a);
        let d = *s.last().ok_or_else(|| TensorError::Contract("softmax of a scalar".into()))?;
        let mut out = vec![T::zero(); v.len()];
        for (row_in, row_out) in v.chunks(d).zip(out.chunks_mut(d)) {
            if row_in.iter().any(|x| x.is_nan()) {
                return Err(TensorError::Numeric { op: "softmax_rows", msg: "NaN input".into() });
            }
            let max = row_in.iter().copied().fold(T::neg_infinity(), T::max);
            if !max.is_finite() {
                return Err(TensorError::Numeric {
                    op: "softmax_rows",
                    msg: format!("row maximum is {max}"),
                });
            }
            let mut total = T::zero();
            for (o, &x) in row_out.iter_mut().zip(row_in) {
                *o = (x - max).exp();
                total += *o;
            }
            for o in row_out.iter_mut() {
                *o = *o / total;
            }
        }
        Ok(self.push(out, s, Op::Softmax { a }, r))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// the optional per-channel `gain` and `bias`.
    pub fn layer_norm(&self, x: Var, gain: Option<Var>, bias: Option<Var>, eps: T) -> Result<Var> {
        let (s, v, mut r) = self.info(x);
        let d = *s.last().ok_or_else(|| TensorError::Contract("layer_norm of a scalar".into()))?;
        let fetch = |p: Option<Var>, name: &'static str| -> Result<Option<Arc<Vec<T>>>> {
            match p {
                None => Ok(None),
                Some(p) => {
                    let (sp, vp, _) = self.info(p);
                    if sp != [d] {
                        return Err(TensorError::Shape { op: name, lhs: s.clone(), rhs: sp });
                    }
                    Ok(Some(vp))
                }
            }
        };
        let gv = fetch(gain, "layer_norm gain")?;
        let bv = fetch(bias, "layer_norm bias")?;
        r = r || gain.is_some_and(|g| self.requires_grad(g)) || bias.is_some_and(|b| self.requires_grad(b));
        let rows = v.len() / d.max(1);
        let inv_d = T::from_f64(1.0 / d as f64);
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); v.len()];
        for (row_in, row_out) in v.chunks(d).zip(out.chunks_mut(d)) {
            let mu = row_in.iter().copied().sum::<T>() * inv_d;
            let var = row_in.iter().map(|&a| (a - mu) * (a - mu)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            for (j, (o, &a)) in row_out.iter_mut().zip(row_in).enumerate() {
                let mut y = (a - mu) * rs;
                if let Some(g) = &gv {
                    y = y * g[j];
                }
                if let Some(b) = &bv {
                    y += b[j];
                }
                *o = y;
            }
            mean.push(mu);
            rstd.push(rs);
        }
        Ok(self.push(out, s, Op::LayerNorm { x, gain, bias, mean, rstd }, r))
    }

    // ---- structure ----------------------------------------------------

    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let s0 = self.shape(first);
        if axis >= s0.len() {
            return Err(TensorError::Contract(format!("concat axis {axis} for shape {s0:?}")));
        }
        let mut out_shape = s0.clone();
        out_shape[axis] = 0;
        let mut parts = Vec::with_capacity(inputs.len());
        let mut r = false;
        for &v in inputs {
            let (s, val, rg) = self.info(v);
            let compatible = s.len() == s0.len()
                && s.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::Shape { op: "concat", lhs: s0, rhs: s });
            }
            out_shape[axis] += s[axis];
            r |= rg;
            parts.push((s[axis], val));
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for (extent, val) in &parts {
                let chunk = extent * inner;
                out.extend_from_slice(&val[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(self.push(out, out_shape, Op::Concat { inputs: inputs.to_vec(), axis }, r))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let (s, v, r) = self.info(a);
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(TensorError::Contract(format!(
                "slice {start}..{end} on axis {axis} of shape {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out_shape = s.clone();
        out_shape[axis] = end - start;
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            let base = o * s[axis] * inner;
            out.extend_from_slice(&v[base + start * inner..base + end * inner]);
        }
        Ok(self.push(out, out_shape, Op::Slice { a, axis, start }, r))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let (s, v, r) = self.info(a);
        if numel(&s) != numel(shape) {
            return Err(TensorError::Shape { op: "reshape", lhs: s, rhs: shape.to_vec() });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: v,
            shape: shape.to_vec(),
            op: Op::Reshape { a },
            requires_grad: r,
            grad: None,
        });
        Ok(Var(nodes.len() - 1))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let (s, v, r) = self.info(a);
        let mut seen = vec![false; s.len()];
        let valid = perm.len() == s.len()
            && perm.iter().all(|&p| p < s.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::Contract(format!("permutation {perm:?} for shape {s:?}")));
        }
        let map = permute_map(&s, perm);
        let out = map.iter().map(|&i| v[i]).collect();
        let out_shape = perm.iter().map(|&p| s[p]).collect();
        Ok(self.push(out, out_shape, Op::Permute { a, perm: perm.to_vec() }, r))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        self.permute(a, &[1, 0])
    }

    // ---- indexing -----------------------------------------------------

    /// Each output row is a weighted sum of rows of `table: [R, C]`.
    pub fn weighted_gather(&self, table: Var, rows: Vec<Vec<(usize, T)>>) -> Result<Var> {
        let (s, v, r) = self.info(table);
        if s.len() != 2 {
            return Err(TensorError::Contract(format!("gather table must be 2-D, got {s:?}")));
        }
        let c = s[1];
        let mut out = vec![T::zero(); rows.len() * c];
        for (row, dst) in rows.iter().zip(out.chunks_mut(c.max(1))) {
            for &(idx, w) in row {
                if idx >= s[0] {
                    return Err(TensorError::Contract(format!("gather index {idx} >= {}", s[0])));
                }
                for (d, &x) in dst.iter_mut().zip(&v[idx * c..(idx + 1) * c]) {
                    *d += w * x;
                }
            }
        }
        let shape = vec![rows.len(), c];
        Ok(self.push(out, shape, Op::Gather { table, rows }, r))
    }

    /// Row lookup `table[ids]`; gradients scatter-add back into the table.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let rows = ids.iter().map(|&i| vec![(i, T::one())]).collect();
        self.weighted_gather(table, rows)
    }

    /// Sum over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (s, v, r) = self.info(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![targets.len()],
            });
        }
        let vocab = s[1];
        let mut probs = vec![T::zero(); v.len()];
        let mut loss = T::zero();
        for (i, (&t, row)) in targets.iter().zip(v.chunks(vocab)).enumerate() {
            if t >= vocab {
                return Err(TensorError::Contract(format!("target {t} >= vocabulary {vocab}")));
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = row.iter().map(|&x| (x - max).exp()).sum();
            let log_z = max + total.ln();
            loss += log_z - row[t];
            for (p, &x) in probs[i * vocab..(i + 1) * vocab].iter_mut().zip(row) {
                *p = (x - log_z).exp();
            }
        }
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        Ok(self.push(vec![loss], Vec::new(), op, r))
    }

    // ---- convolution plumbing -----------------------------------------

    /// Unfolds a channels-last `[H, W, C]` tensor into rows of flattened
    /// `k×k×C` patches, zero-padded; output `[Ho·Wo, k·k·C]`.
    pub fn im2col(&self, a: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (s, v, r) = self.info(a);
        if s.len() != 3 || kernel == 0 || stride == 0 || s[0] + 2 * pad < kernel || s[1] + 2 * pad < kernel {
            return Err(TensorError::Contract(format!(
                "im2col kernel {kernel} stride {stride} pad {pad} on shape {s:?}"
            )));
        }
        let geom = Conv2dGeometry { height: s[0], width: s[1], channels: s[2], kernel, stride, pad };
        let cols = geom.patch_len();
        let rows = geom.out_height() * geom.out_width();
        let mut out = vec![T::zero(); rows * cols];
        geom.for_each(|row, col, src| out[row * cols + col] = v[src]);
        Ok(self.push(out, vec![rows, cols], Op::Im2Col { a, geom }, r))
    }

    /// Nearest-neighbour 2× upsampling of a channels-last `[H, W, C]` tensor.
    pub fn upsample2x(&self, a: Var) -> Result<Var> {
        let (s, v, r) = self.info(a);
        if s.len() != 3 {
            return Err(TensorError::Contract(format!("upsample2x expects [H, W, C], got {s:?}")));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let mut out = vec![T::zero(); 4 * h * w * c];
        for y in 0..2 * h {
            for x in 0..2 * w {
                let src = ((y / 2) * w + x / 2) * c;
                let dst = (y * 2 * w + x) * c;
                out[dst..dst + c].copy_from_slice(&v[src..src + c]);
            }
        }
        let op = Op::Upsample { a, height: h, width: w, channels: c };
        Ok(self.push(out, vec![2 * h, 2 * w, c], op, r))
    }

    // ---- backward -----------------------------------------------------

    /// Propagates `d loss / d leaf` into every reachable leaf that requires
    /// gradients. Calling it again accumulates additively.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let root = nodes
            .get(loss.0)
            .ok_or_else(|| TensorError::Contract("loss is not on this tape".into()))?;
        if root.value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((i, g));
                continue;
            }
            let mut contributions = backward_rule(&nodes, node, g);
            if fault::flipped(node.op.kind()) {
                if let Some((_, first)) = contributions.first_mut() {
                    first.iter_mut().for_each(|x| *x = -*x);
                }
            }
            for (v, gv) in contributions {
                accumulate(&mut grads[v.0], gv);
            }
        }
        for (i, g) in leaf_grads {
            accumulate(&mut nodes[i].grad, g);
        }
        Ok(())
    }
}

fn reduce_rows<T: Scalar>(g: &[T], d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); d];
    for row in g.chunks(d) {
        out.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
    }
    out
}

/// Gradient contributions of one node to its differentiable inputs.
fn backward_rule<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: Vec<T>) -> Vec<(Var, Vec<T>)> {
    let needs = |v: Var| nodes[v.0].requires_grad;
    let val = |v: Var| -> &Vec<T> { &nodes[v.0].value };
    let mut out = Vec::with_capacity(2);
    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b, broadcast } | Op::Sub { a, b, broadcast } => {
            let negate = matches!(node.op, Op::Sub { .. });
            if needs(*b) {
                let mut gb = if *broadcast {
                    reduce_rows(&g, nodes[b.0].value.len())
                } else {
                    g.clone()
                };
                if negate {
                    gb.iter_mut().for_each(|x| *x = -*x);
                }
                out.push((*b, gb));
            }
            if needs(*a) {
                out.insert(0, (*a, g));
            }
        }
        Op::Mul { a, b, broadcast } => {
            let (va, vb) = (val(*a), val(*b));
            if needs(*a) {
                let ga = if *broadcast {
                    let d = vb.len();
                    g.iter().enumerate().map(|(i, &x)| x * vb[i % d]).collect()
                } else {
                    g.iter().zip(vb.iter()).map(|(&x, &y)| x * y).collect()
                };
                out.push((*a, ga));
            }
            if needs(*b) {
                let prod: Vec<T> = g.iter().zip(va.iter()).map(|(&x, &y)| x * y).collect();
                let gb = if *broadcast { reduce_rows(&prod, vb.len()) } else { prod };
                out.push((*b, gb));
            }
        }
        Op::Scale { a, factor } => {
            if needs(*a) {
                out.push((*a, g.iter().map(|&x| x * *factor).collect()));
            }
        }
        Op::AddScalar { a } | Op::Reshape { a } => {
            if needs(*a) {
                out.push((*a, g));
            }
        }
        Op::MatMul { a, b, spec } => {
            let MatMulSpec { batch, m, k, n, trans_b } = *spec;
            let (va, vb) = (val(*a), val(*b));
            if needs(*a) {
                // dA = G · op(B)ᵀ
                let sb = spec.b_strides();
                let mut ga = vec![T::zero(); batch * m * k];
                for bi in 0..batch {
                    T::gemm(
                        m,
                        n,
                        k,
                        &g[bi * m * n..(bi + 1) * m * n],
                        (n as isize, 1),
                        &vb[bi * k * n..(bi + 1) * k * n],
                        (sb.1, sb.0),
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        false,
                    );
                }
                out.push((*a, ga));
            }
            if needs(*b) {
                let mut gb = vec![T::zero(); batch * k * n];
                for bi in 0..batch {
                    let ga_blk = &g[bi * m * n..(bi + 1) * m * n];
                    let a_blk = &va[bi * m * k..(bi + 1) * m * k];
                    let dst = &mut gb[bi * k * n..(bi + 1) * k * n];
                    if trans_b {
                        // dB [n, k] = Gᵀ · A
                        T::gemm(n, m, k, ga_blk, (1, n as isize), a_blk, (k as isize, 1), dst, false);
                    } else {
                        // dB [k, n] = Aᵀ · G
                        T::gemm(k, m, n, a_blk, (1, k as isize), ga_blk, (n as isize, 1), dst, false);
                    }
                }
                out.push((*b, gb));
            }
        }
        Op::Softmax { a } => {
            if needs(*a) {
                let y = &node.value;
                let d = *node.shape.last().unwrap();
                let mut ga = vec![T::zero(); g.len()];
                for ((gr, yr), dst) in g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                    let dot: T = gr.iter().zip(yr).map(|(&x, &p)| x * p).sum();
                    for ((o, &x), &p) in dst.iter_mut().zip(gr).zip(yr) {
                        *o = p * (x - dot);
                    }
                }
                out.push((*a, ga));
            }
        }
        Op::LayerNorm { x, gain, bias, mean, rstd } => {
            let vx = val(*x);
            let d = *node.shape.last().unwrap();
            let gv = gain.map(&val);
            let inv_d = T::from_f64(1.0 / d as f64);
            if needs(*x) {
                let mut gx = vec![T::zero(); vx.len()];
                let mut dxhat = vec![T::zero(); d];
                for (r, ((xr, gr), dst)) in vx.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for j in 0..d {
                        let dh = match gv {
                            Some(gw) => gr[j] * gw[j],
                            None => gr[j],
                        };
                        dxhat[j] = dh;
                        sum_d += dh;
                        sum_dx += dh * (xr[j] - mu) * rs;
                    }
                    for j in 0..d {
                        let xhat = (xr[j] - mu) * rs;
                        dst[j] = rs * (dxhat[j] - sum_d * inv_d - xhat * sum_dx * inv_d);
                    }
                }
                out.push((*x, gx));
            }
            if let Some(p) = gain.filter(|p| needs(*p)) {
                let mut gg = vec![T::zero(); d];
                for (r, (xr, gr)) in vx.chunks(d).zip(g.chunks(d)).enumerate() {
                    for j in 0..d {
                        gg[j] += gr[j] * (xr[j] - mean[r]) * rstd[r];
                    }
                }
                out.push((p, gg));
            }
            if let Some(p) = bias.filter(|p| needs(*p)) {
                out.push((p, reduce_rows(&g, d)));
            }
        }
        Op::Gelu { a } => {
            if needs(*a) {
                let ga = g.iter().zip(val(*a).iter()).map(|(&x, &v)| x * gelu_parts(v).1).collect();
                out.push((*a, ga));
            }
        }
        Op::Silu { a } => {
            if needs(*a) {
                let ga = g
                    .iter()
                    .zip(val(*a).iter())
                    .map(|(&x, &v)| {
                        let s = sigmoid(v);
                        x * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                out.push((*a, ga));
            }
        }
        Op::Sum { a } => {
            if needs(*a) {
                out.push((*a, vec![g[0]; val(*a).len()]));
            }
        }
        Op::Mean { a } => {
            if needs(*a) {
                let n = val(*a).len();
                out.push((*a, vec![g[0] / T::from_f64(n.max(1) as f64); n]));
            }
        }
        Op::Concat { inputs, axis } => {
            let shape = &node.shape;
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &v in inputs {
                let extent = nodes[v.0].shape[*axis];
                let chunk = extent * inner;
                if needs(v) {
                    let mut gv = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let base = o * total + offset;
                        gv.extend_from_slice(&g[base..base + chunk]);
                    }
                    out.push((v, gv));
                }
                offset += chunk;
            }
        }
        Op::Slice { a, axis, start } => {
            if needs(*a) {
                let s = &nodes[a.0].shape;
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = node.shape[*axis] * inner;
                let mut ga = vec![T::zero(); nodes[a.0].value.len()];
                for o in 0..outer {
                    let dst = o * s[*axis] * inner + start * inner;
                    ga[dst..dst + len].copy_from_slice(&g[o * len..(o + 1) * len]);
                }
                out.push((*a, ga));
            }
        }
        Op::Permute { a, perm } => {
            if needs(*a) {
                let map = permute_map(&nodes[a.0].shape, perm);
                let mut ga = vec![T::zero(); g.len()];
                for (o, &src) in map.iter().enumerate() {
                    ga[src] = g[o];
                }
                out.push((*a, ga));
            }
        }
        Op::Gather { table, rows } => {
            if needs(*table) {
                let c = nodes[table.0].shape[1];
                let mut gt = vec![T::zero(); nodes[table.0].value.len()];
                for (row, gr) in rows.iter().zip(g.chunks(c.max(1))) {
                    for &(idx, w) in row {
                        for (d, &x) in gt[idx * c..(idx + 1) * c].iter_mut().zip(gr) {
                            *d += w * x;
                        }
                    }
                }
                out.push((*table, gt));
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            if needs(*logits) {
                let vocab = nodes[logits.0].shape[1];
                let mut gl: Vec<T> = probs.iter().map(|&p| p * g[0]).collect();
                for (i, &t) in targets.iter().enumerate() {
                    gl[i * vocab + t] = gl[i * vocab + t] - g[0];
                }
                out.push((*logits, gl));
            }
        }
        Op::Im2Col { a, geom } => {
            if needs(*a) {
                let cols = geom.patch_len();
                let mut ga = vec![T::zero(); nodes[a.0].value.len()];
                geom.for_each(|row, col, src| ga[src] += g[row * cols + col]);
                out.push((*a, ga));
            }
        }
        Op::Upsample { a, height, width, channels } => {
            if needs(*a) {
                let (h, w, c) = (*height, *width, *channels);
                let mut ga = vec![T::zero(); h * w * c];
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        let dst = ((y / 2) * w + x / 2) * c;
                        let src = (y * 2 * w + x) * c;
                        for ch in 0..c {
                            ga[dst + ch] += g[src + ch];
                        }
                    }
                }
                out.push((*a, ga));
            }
        }
    }
    out
}
