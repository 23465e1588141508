//! Reverse-mode automatic differentiation over a fixed operator catalog.
//!
//! A [`Graph`] is the tape: every operation appends a node holding its output
//! value, so node order is always a valid topological order. [`Graph::backward`]
//! walks the nodes once in reverse and returns gradients for every leaf that
//! requires them.
//!
//! Nodes whose operands are all constants are stored without an op record;
//! only nodes reachable from a parameter carry backward information.

pub mod gradcheck;
pub mod kernels;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{numel, Real, Tensor};
use kernels::{BilinearGeom, ConvGeom};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The operator catalog.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Abs,
    Square,
    Sqrt,
    Sum,
    Mean,
    MatMul,
    Conv2d,
    SpaceToDepth,
    DepthToSpace,
    BilinearSample,
    TopK,
    Gather,
    InnerProduct,
    L1Norm,
    L2Norm,
    Softmax,
    Reshape,
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Abs,
        OpKind::Square,
        OpKind::Sqrt,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::MatMul,
        OpKind::Conv2d,
        OpKind::SpaceToDepth,
        OpKind::DepthToSpace,
        OpKind::BilinearSample,
        OpKind::TopK,
        OpKind::Gather,
        OpKind::InnerProduct,
        OpKind::L1Norm,
        OpKind::L2Norm,
        OpKind::Softmax,
        OpKind::Reshape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Abs => "abs",
            OpKind::Square => "square",
            OpKind::Sqrt => "sqrt",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::MatMul => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::SpaceToDepth => "space_to_depth",
            OpKind::DepthToSpace => "depth_to_space",
            OpKind::BilinearSample => "bilinear_sample",
            OpKind::TopK => "topk",
            OpKind::Gather => "gather",
            OpKind::InnerProduct => "inner_product",
            OpKind::L1Norm => "l1_norm",
            OpKind::L2Norm => "l2_norm",
            OpKind::Softmax => "softmax",
            OpKind::Reshape => "reshape",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnsupportedOp(s.to_string()))
    }
}

/// Attributes for [`Graph::execute`]. Each operator reads only the fields it needs.
#[derive(Clone, Debug, Default)]
pub struct Attrs {
    pub scale: Option<f64>,
    pub factor: Option<usize>,
    pub k: Option<usize>,
    pub indices: Option<Arc<[usize]>>,
    pub shape: Option<Vec<usize>>,
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Permute { x: Var, map: Arc<[usize]>, kind: OpKind },
    Bilinear { src: Var, coords: Var },
    TopK { x: Var, cols: usize, k: usize, sel: Vec<usize> },
    Gather { x: Var, idx: Arc<[usize]> },
    InnerProduct(Var, Var),
    L1Norm(Var),
    L2Norm(Var),
    Softmax(Var),
    Reshape(Var),
}

impl<F> Op<F> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::Abs(_) => OpKind::Abs,
            Op::Square(_) => OpKind::Square,
            Op::Sqrt(_) => OpKind::Sqrt,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Permute { kind, .. } => *kind,
            Op::Bilinear { .. } => OpKind::BilinearSample,
            Op::TopK { .. } => OpKind::TopK,
            Op::Gather { .. } => OpKind::Gather,
            Op::InnerProduct(..) => OpKind::InnerProduct,
            Op::L1Norm(_) => OpKind::L1Norm,
            Op::L2Norm(_) => OpKind::L2Norm,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Reshape(_) => OpKind::Reshape,
        })
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`; a zero tensor when `v` is disconnected from the loss.
    pub fn wrt(&self, v: Var) -> Tensor<F> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

/// A single-writer differentiation tape.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    fault: Option<OpKind>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<F: Real>(a: &Tensor<F>, b: &Tensor<F>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("{op}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_map<F: Real>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), fault: None }
    }

    /// Test fixture: corrupts the backward rule of one operator so harnesses
    /// can prove they detect a wrong gradient.
    #[doc(hidden)]
    pub fn with_fault(mut self, op: Option<OpKind>) -> Self {
        self.fault = op;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf that gradients are computed for.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    /// Records a leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Dispatches an operator by kind. Typed methods such as [`Graph::conv2d`]
    /// are equivalent and usually more convenient.
    pub fn execute(&mut self, op: OpKind, operands: &[Var], attrs: &Attrs) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if operands.len() < n {
                return shape_err(format!("{op} needs {n} operands, got {}", operands.len()));
            }
            Ok(())
        };
        let need = |field: Option<usize>, name: &str| -> Result<usize> {
            field.ok_or_else(|| Error::Contract(format!("{op} requires attribute `{name}`")))
        };
        match op {
            OpKind::Add => arity(2).and_then(|_| self.add(operands[0], operands[1])),
            OpKind::Sub => arity(2).and_then(|_| self.sub(operands[0], operands[1])),
            OpKind::Mul => arity(2).and_then(|_| self.mul(operands[0], operands[1])),
            OpKind::Scale => {
                arity(1)?;
                let s = attrs
                    .scale
                    .ok_or_else(|| Error::Contract("scale requires attribute `scale`".into()))?;
                Ok(self.scale(operands[0], s))
            }
            OpKind::Relu => arity(1).map(|_| self.relu(operands[0])),
            OpKind::Abs => arity(1).map(|_| self.abs(operands[0])),
            OpKind::Square => arity(1).map(|_| self.square(operands[0])),
            OpKind::Sqrt => arity(1).map(|_| self.sqrt(operands[0])),
            OpKind::Sum => arity(1).map(|_| self.sum(operands[0])),
            OpKind::Mean => arity(1).map(|_| self.mean(operands[0])),
            OpKind::MatMul => arity(2).and_then(|_| self.matmul(operands[0], operands[1])),
            OpKind::Conv2d => {
                arity(2)?;
                self.conv2d(operands[0], operands[1], operands.get(2).copied())
            }
            OpKind::SpaceToDepth => {
                arity(1)?;
                self.space_to_depth(operands[0], need(attrs.factor, "factor")?)
            }
            OpKind::DepthToSpace => {
                arity(1)?;
                self.depth_to_space(operands[0], need(attrs.factor, "factor")?)
            }
            OpKind::BilinearSample => {
                arity(2).and_then(|_| self.bilinear_sample(operands[0], operands[1]))
            }
            OpKind::TopK => {
                arity(1)?;
                self.topk(operands[0], need(attrs.k, "k")?).map(|(v, _)| v)
            }
            OpKind::Gather => {
                arity(1)?;
                let idx = attrs
                    .indices
                    .clone()
                    .ok_or_else(|| Error::Contract("gather requires attribute `indices`".into()))?;
                let shape = attrs
                    .shape
                    .clone()
                    .unwrap_or_else(|| vec![idx.len()]);
                self.gather(operands[0], idx, &shape)
            }
            OpKind::InnerProduct => {
                arity(2).and_then(|_| self.inner_product(operands[0], operands[1]))
            }
            OpKind::L1Norm => arity(1).map(|_| self.l1_norm(operands[0])),
            OpKind::L2Norm => arity(1).map(|_| self.l2_norm(operands[0])),
            OpKind::Softmax => arity(1).and_then(|_| self.softmax(operands[0])),
            OpKind::Reshape => {
                arity(1)?;
                let shape = attrs
                    .shape
                    .clone()
                    .ok_or_else(|| Error::Contract("reshape requires attribute `shape`".into()))?;
                self.reshape(operands[0], &shape)
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "add")?;
        let out = zip_map(va, vb, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "sub")?;
        let out = zip_map(va, vb, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "mul")?;
        let out = zip_map(va, vb, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = F::lit(s);
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > F::zero() { x } else { F::zero() });
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.abs());
        self.push(out, Op::Abs(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.sqrt());
        self.push(out, Op::Sqrt(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = F::lit(v.numel().max(1) as f64);
        let s: F = v.data().iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(a), &[a])
    }

    /// Matrix product of (m, k)·(k, n), or batched (b, m, k)·(b, k, n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, k2, n) = match (&sa[..], &sb[..]) {
            ([m, k], [k2, n]) => (1, *m, *k, *k2, *n),
            ([b1, m, k], [b2, k2, n]) if b1 == b2 => (*b1, *m, *k, *k2, *n),
            _ => return shape_err(format!("matmul: {sa:?} · {sb:?}")),
        };
        if k != k2 {
            return shape_err(format!("matmul inner extents: {sa:?} · {sb:?}"));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![F::zero(); batch * m * n];
        for i in 0..batch {
            kernels::gemm_nn(
                m,
                k,
                n,
                &va[i * m * k..(i + 1) * m * k],
                &vb[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MatMul { a, b, batch, m, k, n }, &[a, b]))
    }

    /// Same-size, stride-1, zero-padded convolution with a 1×1 or 3×3 kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (n, ci, h, wd) = self.value(x).dims4()?;
        let ws = self.shape(w).to_vec();
        let (co, wci, kh, kw) = match ws[..] {
            [a, b, c, d] => (a, b, c, d),
            _ => return shape_err(format!("conv2d weight must be rank 4, got {ws:?}")),
        };
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::UnsupportedOp(format!("conv2d with {kh}×{kw} kernel")));
        }
        if wci != ci {
            return shape_err(format!("conv2d: input has {ci} channels, weight expects {wci}"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [co] {
                return shape_err(format!("conv2d bias {:?} for {co} outputs", self.shape(b)));
            }
        }
        let geom = ConvGeom { n, ci, co, h, w: wd, k: kh };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(vec![n, co, h, wd], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(t, Op::Conv2d { x, w, b: bias, geom }, &inputs))
    }

    fn permute(&mut self, x: Var, map: Arc<[usize]>, shape: Vec<usize>, kind: OpKind) -> Var {
        let src = self.value(x).data();
        let data: Vec<F> = map.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape, data).expect("permutation preserves size");
        self.push(t, Op::Permute { x, map, kind }, &[x])
    }

    /// (N, C, H, W) → (N, C·f², H/f, W/f); output channel `c·f² + dy·f + dx`
    /// holds input pixel `(f·y + dy, f·x + dx)` of channel `c`.
    pub fn space_to_depth(&mut self, x: Var, f: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if f == 0 || h % f != 0 || w % f != 0 {
            return shape_err(format!("space_to_depth({f}) on {h}×{w}"));
        }
        let map: Arc<[usize]> = kernels::space_to_depth_map(n, c, h, w, f).into();
        Ok(self.permute(x, map, vec![n, c * f * f, h / f, w / f], OpKind::SpaceToDepth))
    }

    /// Exact inverse of [`Graph::space_to_depth`].
    pub fn depth_to_space(&mut self, x: Var, f: usize) -> Result<Var> {
        let (n, cf, h, w) = self.value(x).dims4()?;
        if f == 0 || cf % (f * f) != 0 {
            return shape_err(format!("depth_to_space({f}) on {cf} channels"));
        }
        let c = cf / (f * f);
        let fwd = kernels::space_to_depth_map(n, c, h * f, w * f, f);
        let mut inv = vec![0usize; fwd.len()];
        for (i, &j) in fwd.iter().enumerate() {
            inv[j] = i;
        }
        Ok(self.permute(x, inv.into(), vec![n, c, h * f, w * f], OpKind::DepthToSpace))
    }

    /// Samples `src` (N, C, H, W) at absolute pixel coordinates `coords`
    /// (N, 2, Ho, Wo; channel 0 = x, channel 1 = y). Coordinates clamp to the border.
    pub fn bilinear_sample(&mut self, src: Var, coords: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(src).dims4()?;
        let (cn, two, ho, wo) = self.value(coords).dims4()?;
        if cn != n || two != 2 {
            return shape_err(format!(
                "bilinear_sample: coords {:?} for source {:?}",
                self.shape(coords),
                self.shape(src)
            ));
        }
        let geom = BilinearGeom { n, c, h, w, ho, wo };
        let out = kernels::bilinear_forward(&geom, self.value(src).data(), self.value(coords).data());
        let t = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(t, Op::Bilinear { src, coords }, &[src, coords]))
    }

    /// Keeps the `k` largest entries of each row (last axis). Returns the
    /// values, shape (.., k), and the selected column of each output entry.
    /// Ties resolve to the lowest column.
    pub fn topk(&mut self, x: Var, k: usize) -> Result<(Var, Vec<usize>)> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or_else(|| Error::Shape("topk on a scalar".into()))?;
        if k > cols {
            return shape_err(format!("topk: k = {k} exceeds row length {cols}"));
        }
        let data = self.value(x).data();
        let sel = kernels::topk_rows(data, cols, k);
        let vals: Vec<F> = sel
            .iter()
            .enumerate()
            .map(|(i, &c)| data[(i / k.max(1)) * cols + c])
            .collect();
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = k;
        let t = Tensor::new(oshape, vals)?;
        let v = self.push(t, Op::TopK { x, cols, k, sel: sel.clone() }, &[x]);
        Ok((v, sel))
    }

    /// `out.flat[i] = x.flat[indices[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, indices: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if numel(shape) != indices.len() {
            return shape_err(format!("gather: {} indices for shape {shape:?}", indices.len()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return shape_err(format!("gather index {bad} out of range {}", src.len()));
        }
        let data: Vec<F> = indices.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(t, Op::Gather { x, idx: indices }, &[x]))
    }

    /// Dot product along the last axis: (.., L)·(.., L) → (..).
    pub fn inner_product(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "inner_product")?;
        let shape = va.shape().to_vec();
        let l = *shape.last().ok_or_else(|| Error::Shape("inner_product on scalars".into()))?;
        let out: Vec<F> = va
            .data()
            .chunks(l.max(1))
            .zip(vb.data().chunks(l.max(1)))
            .map(|(x, y)| x.iter().zip(y).fold(F::zero(), |acc, (&p, &q)| acc + p * q))
            .collect();
        let t = Tensor::new(shape[..shape.len() - 1].to_vec(), out)?;
        Ok(self.push(t, Op::InnerProduct(a, b), &[a, b]))
    }

    pub fn l1_norm(&mut self, a: Var) -> Var {
        let s: F = self.value(a).data().iter().map(|x| x.abs()).sum();
        self.push(Tensor::scalar(s), Op::L1Norm(a), &[a])
    }

    pub fn l2_norm(&mut self, a: Var) -> Var {
        let s: F = self.value(a).data().iter().map(|&x| x * x).sum();
        self.push(Tensor::scalar(s.sqrt()), Op::L2Norm(a), &[a])
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let l = *v.shape().last().ok_or_else(|| Error::Shape("softmax on a scalar".into()))?;
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(l.max(1)) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z = z + *x;
            }
            for x in row.iter_mut() {
                *x = *x / z;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// `a + c` for a constant tensor `c`.
    pub fn add_const(&mut self, a: Var, c: Tensor<F>) -> Result<Var> {
        let cv = self.constant(c);
        self.add(a, cv)
    }

    /// Clamps to [0, 1] as `x − relu(x − 1) + relu(−x)`.
    pub fn clamp01(&mut self, x: Var) -> Result<Var> {
        let ones = self.constant(Tensor::full(self.shape(x), F::one()));
        let over = self.sub(x, ones)?;
        let over = self.relu(over);
        let neg = self.scale(x, -1.0);
        let under = self.relu(neg);
        let t = self.sub(x, over)?;
        self.add(t, under)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<F>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), F::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let faulty = self.fault.is_some() && self.fault == node.op.kind();
            let mut contributions = self.node_backward(node, &g)?;
            if faulty {
                for (_, t) in contributions.iter_mut() {
                    *t = t.map(|v| v * F::lit(0.5));
                }
            }
            for (v, t) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot => *slot = Some(t),
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, node: &Node<F>, g: &Tensor<F>) -> Result<Vec<(Var, Tensor<F>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                if self.needs(*b) {
                    out.push((*b, g.map(|x| -x)));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    out.push((*a, zip_map(g, val(*b), |x, y| x * y)));
                }
                if self.needs(*b) {
                    out.push((*b, zip_map(g, val(*a), |x, y| x * y)));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.map(|x| x * *s))),
            Op::Relu(a) => {
                out.push((*a, zip_map(g, val(*a), |gx, x| if x > F::zero() { gx } else { F::zero() })))
            }
            Op::Abs(a) => out.push((*a, zip_map(g, val(*a), |gx, x| sign(x) * gx))),
            Op::Square(a) => out.push((*a, zip_map(g, val(*a), |gx, x| F::lit(2.0) * x * gx))),
            Op::Sqrt(a) => out.push((
                *a,
                zip_map(g, &node.value, |gx, y| {
                    if y > F::zero() {
                        gx * F::lit(0.5) / y
                    } else {
                        F::zero()
                    }
                }),
            )),
            Op::Sum(a) => out.push((*a, Tensor::full(val(*a).shape(), g.item()))),
            Op::Mean(a) => {
                let n = F::lit(val(*a).numel().max(1) as f64);
                out.push((*a, Tensor::full(val(*a).shape(), g.item() / n)));
            }
            Op::MatMul { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (val(*a).data(), val(*b).data());
                if self.needs(*a) {
                    let mut ga = vec![F::zero(); batch * m * k];
                    for i in 0..*batch {
                        kernels::gemm_nt(
                            m,
                            n,
                            k,
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &vb[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                    out.push((*a, Tensor::new(val(*a).shape().to_vec(), ga)?));
                }
                if self.needs(*b) {
                    let mut gb = vec![F::zero(); batch * k * n];
                    for i in 0..*batch {
                        kernels::gemm_tn(
                            k,
                            m,
                            n,
                            &va[i * m * k..(i + 1) * m * k],
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                    }
                    out.push((*b, Tensor::new(val(*b).shape().to_vec(), gb)?));
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let mut dx = self.needs(*x).then(|| Tensor::zeros(val(*x).shape()));
                let mut dw = self.needs(*w).then(|| Tensor::zeros(val(*w).shape()));
                let mut db = b.filter(|b| self.needs(*b)).map(|b| Tensor::zeros(val(b).shape()));
                kernels::conv2d_backward(
                    geom,
                    val(*x).data(),
                    val(*w).data(),
                    g.data(),
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                if let Some(t) = dx {
                    out.push((*x, t));
                }
                if let Some(t) = dw {
                    out.push((*w, t));
                }
                if let (Some(t), Some(bv)) = (db, b) {
                    out.push((*bv, t));
                }
            }
            Op::Permute { x, map, .. } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                let d = gx.data_mut();
                for (i, &j) in map.iter().enumerate() {
                    d[j] = g.data()[i];
                }
                out.push((*x, gx));
            }
            Op::Bilinear { src, coords } => {
                let (n, c, h, w) = val(*src).dims4()?;
                let (_, _, ho, wo) = val(*coords).dims4()?;
                let geom = BilinearGeom { n, c, h, w, ho, wo };
                let mut ds = self.needs(*src).then(|| Tensor::zeros(val(*src).shape()));
                let mut dc = self.needs(*coords).then(|| Tensor::zeros(val(*coords).shape()));
                kernels::bilinear_backward(
                    &geom,
                    val(*src).data(),
                    val(*coords).data(),
                    g.data(),
                    ds.as_mut().map(|t| t.data_mut()),
                    dc.as_mut().map(|t| t.data_mut()),
                );
                if let Some(t) = ds {
                    out.push((*src, t));
                }
                if let Some(t) = dc {
                    out.push((*coords, t));
                }
            }
            Op::TopK { x, cols, k, sel } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                let d = gx.data_mut();
                for (i, &c) in sel.iter().enumerate() {
                    let j = (i / k) * cols + c;
                    d[j] = d[j] + g.data()[i];
                }
                out.push((*x, gx));
            }
            Op::Gather { x, idx } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                let d = gx.data_mut();
                for (i, &j) in idx.iter().enumerate() {
                    d[j] = d[j] + g.data()[i];
                }
                out.push((*x, gx));
            }
            Op::InnerProduct(a, b) => {
                let l = *val(*a).shape().last().unwrap();
                let expand = |other: &Tensor<F>| {
                    let data = other
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &o)| g.data()[i / l] * o)
                        .collect();
                    Tensor::new(other.shape().to_vec(), data)
                };
                if self.needs(*a) {
                    out.push((*a, expand(val(*b))?));
                }
                if self.needs(*b) {
                    out.push((*b, expand(val(*a))?));
                }
            }
            Op::L1Norm(a) => {
                let gs = g.item();
                out.push((*a, val(*a).map(|x| sign(x) * gs)));
            }
            Op::L2Norm(a) => {
                let norm = node.value.item();
                let gs = g.item();
                let t = if norm > F::zero() {
                    val(*a).map(|x| gs * x / norm)
                } else {
                    Tensor::zeros(val(*a).shape())
                };
                out.push((*a, t));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let l = *y.shape().last().unwrap();
                let mut gx = vec![F::zero(); y.numel()];
                for ((gr, yr), out_r) in
                    g.data().chunks(l).zip(y.data().chunks(l)).zip(gx.chunks_mut(l))
                {
                    let dot = gr.iter().zip(yr).fold(F::zero(), |acc, (&p, &q)| acc + p * q);
                    for ((o, &gi), &yi) in out_r.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - dot);
                    }
                }
                out.push((*a, Tensor::new(y.shape().to_vec(), gx)?));
            }
            Op::Reshape(a) => out.push((*a, g.clone().reshape(val(*a).shape())?)),
        }
        Ok(out)
    }
}

fn sign<F: Real>(x: F) -> F {
    if x > F::zero() {
        F::one()
    } else if x < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}
