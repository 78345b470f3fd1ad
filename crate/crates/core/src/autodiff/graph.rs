//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value; `backward` walks the
//! tape once in reverse and accumulates parameter gradients into a
//! [`GradStore`]. Nodes that cannot reach a trainable parameter are skipped.

use alloc::vec;
use alloc::vec::Vec;

use super::{AutodiffError, GradStore, ParamId, ParamStore, Shape, Tensor};

/// Norms below this are clamped inside cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;
/// Probability floor used by the cross-entropy on probability inputs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation selector for [`Graph::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Hadamard,
    Concat,
    Slice { start: usize, len: usize },
    Sigmoid,
    Tanh,
    Relu,
    Softmax,
    EmbeddingLookup(Vec<usize>),
    CosineSimilarity,
    CrossEntropy { target: usize, from_logits: bool },
    MaxReduce,
    MeanReduce,
    SumReduce,
    Scale(f64),
    MulScalar,
    Outer,
    Conv2d,
    MaxPool2d { size: usize, stride: usize, pad: usize },
}

#[derive(Clone, Debug)]
enum Op {
    Param(ParamId),
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f64),
    MulScalar(NodeId, NodeId),
    Concat(Vec<NodeId>),
    Slice(NodeId, usize),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    Embedding { table: NodeId, ids: Vec<usize> },
    Cosine(NodeId, NodeId),
    ColumnCosine { matrix: NodeId, key: NodeId },
    CrossEntropy { input: NodeId, target: usize, from_logits: bool },
    MaxReduce { input: NodeId, argmax: usize },
    MeanReduce(NodeId),
    SumReduce(NodeId),
    Outer(NodeId, NodeId),
    Conv2d { input: NodeId, weight: NodeId, bias: NodeId },
    MaxPool2d { input: NodeId, argmax: Vec<usize> },
    Reshape(NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Shape,
    value: Vec<f64>,
    needs_grad: bool,
}

type Result<T> = core::result::Result<T, AutodiffError>;

/// A forward computation recorded against a borrowed parameter store.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        let node = &self.nodes[id.0];
        match node.op {
            Op::Param(pid) => self.params.get(pid).data(),
            _ => &node.value,
        }
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.shape(id), self.value(id).to_vec())
    }

    /// First element of a node; intended for scalars.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id)[0]
    }

    fn push(&mut self, op: Op, shape: Shape, value: Vec<f64>, needs_grad: bool) -> NodeId {
        debug_assert!(matches!(op, Op::Param(_)) || shape.numel() == value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── leaves ───────────────────────────────────────────────────────

    /// Leaf referencing a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        let shape = self.params.get(id).shape();
        let trainable = self.params.is_trainable(id);
        let n = self.push(Op::Param(id), shape, Vec::new(), trainable);
        self.param_nodes[id.0] = Some(n);
        n
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape();
        self.push(Op::Constant, shape, t.into_data(), false)
    }

    pub fn constant_vec(&mut self, v: Vec<f64>) -> NodeId {
        self.constant(Tensor::vector(v))
    }

    /// Copies the value of `x` into a new leaf that blocks gradient flow.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let t = self.tensor(x);
        self.constant(t)
    }

    // ── generic dispatch ─────────────────────────────────────────────

    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        let arity = |n: usize, op: &'static str| -> Result<()> {
            if inputs.len() != n {
                Err(AutodiffError::Arity {
                    op,
                    expected: n,
                    found: inputs.len(),
                })
            } else {
                Ok(())
            }
        };
        match kind {
            OpKind::MatMul => {
                arity(2, "matmul")?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add => {
                arity(2, "add")?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Sub => {
                arity(2, "sub")?;
                self.sub(inputs[0], inputs[1])
            }
            OpKind::Hadamard => {
                arity(2, "hadamard")?;
                self.hadamard(inputs[0], inputs[1])
            }
            OpKind::Concat => self.concat(inputs),
            OpKind::Slice { start, len } => {
                arity(1, "slice")?;
                self.slice(inputs[0], start, len)
            }
            OpKind::Sigmoid => {
                arity(1, "sigmoid")?;
                Ok(self.sigmoid(inputs[0]))
            }
            OpKind::Tanh => {
                arity(1, "tanh")?;
                Ok(self.tanh(inputs[0]))
            }
            OpKind::Relu => {
                arity(1, "relu")?;
                Ok(self.relu(inputs[0]))
            }
            OpKind::Softmax => {
                arity(1, "softmax")?;
                self.softmax(inputs[0])
            }
            OpKind::EmbeddingLookup(ids) => {
                arity(1, "embedding_lookup")?;
                self.embedding_lookup(inputs[0], &ids)
            }
            OpKind::CosineSimilarity => {
                arity(2, "cosine_similarity")?;
                self.cosine_similarity(inputs[0], inputs[1])
            }
            OpKind::CrossEntropy {
                target,
                from_logits,
            } => {
                arity(1, "cross_entropy")?;
                self.cross_entropy(inputs[0], target, from_logits)
            }
            OpKind::MaxReduce => {
                arity(1, "max_reduce")?;
                Ok(self.max_reduce(inputs[0]))
            }
            OpKind::MeanReduce => {
                arity(1, "mean_reduce")?;
                Ok(self.mean_reduce(inputs[0]))
            }
            OpKind::SumReduce => {
                arity(1, "sum_reduce")?;
                Ok(self.sum_reduce(inputs[0]))
            }
            OpKind::Scale(k) => {
                arity(1, "scale")?;
                Ok(self.scale(inputs[0], k))
            }
            OpKind::MulScalar => {
                arity(2, "mul_scalar")?;
                self.mul_scalar(inputs[0], inputs[1])
            }
            OpKind::Outer => {
                arity(2, "outer")?;
                self.outer(inputs[0], inputs[1])
            }
            OpKind::Conv2d => {
                arity(3, "conv2d")?;
                self.conv2d(inputs[0], inputs[1], inputs[2])
            }
            OpKind::MaxPool2d { size, stride, pad } => {
                arity(1, "max_pool2d")?;
                self.max_pool2d(inputs[0], size, stride, pad)
            }
        }
    }

    // ── linear algebra ───────────────────────────────────────────────

    /// `[m,k]·[k,n]`, `[m,k]·[k]` or `[k]·[k,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let mismatch = || AutodiffError::ShapeMismatch {
            op: "matmul",
            lhs: sa,
            rhs: sb,
        };
        let (m, k, n, out_shape) = match (sa.rank(), sb.rank()) {
            (2, 2) => {
                if sa.dim(1) != sb.dim(0) {
                    return Err(mismatch());
                }
                (
                    sa.dim(0),
                    sa.dim(1),
                    sb.dim(1),
                    Shape::matrix(sa.dim(0), sb.dim(1)),
                )
            }
            (2, 1) => {
                if sa.dim(1) != sb.dim(0) {
                    return Err(mismatch());
                }
                (sa.dim(0), sa.dim(1), 1, Shape::vector(sa.dim(0)))
            }
            (1, 2) => {
                if sa.dim(0) != sb.dim(0) {
                    return Err(mismatch());
                }
                (1, sa.dim(0), sb.dim(1), Shape::vector(sb.dim(1)))
            }
            _ => return Err(mismatch()),
        };
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        if n == 1 {
            for (i, o) in out.iter_mut().enumerate() {
                *o = dot(&av[i * k..(i + 1) * k], bv);
            }
        } else {
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let x = av[i * k + p];
                    if x != 0.0 {
                        axpy(x, &bv[p * n..(p + 1) * n], row);
                    }
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::MatMul(a, b), out_shape, out, ng))
    }

    pub fn outer(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.rank() != 1 || sb.rank() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "outer",
                lhs: sa,
                rhs: sb,
            });
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(av.len() * bv.len());
        for x in av {
            out.extend(bv.iter().map(|y| x * y));
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Op::Outer(a, b),
            Shape::matrix(sa.dim(0), sb.dim(0)),
            out,
            ng,
        ))
    }

    // ── elementwise ──────────────────────────────────────────────────

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Shape, Vec<f64>, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op: name,
                lhs: sa,
                rhs: sb,
            });
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok((sa, out, self.ng(a) || self.ng(b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (s, v, ng) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), s, v, ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (s, v, ng) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), s, v, ng))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (s, v, ng) = self.binary(a, b, "hadamard", |x, y| x * y)?;
        Ok(self.push(Op::Hadamard(a, b), s, v, ng))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).iter().map(|x| x * k).collect();
        let (s, ng) = (self.shape(a), self.ng(a));
        self.push(Op::Scale(a, k), s, v, ng)
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if !self.shape(s).is_scalar() {
            return Err(AutodiffError::ShapeMismatch {
                op: "mul_scalar",
                lhs: self.shape(a),
                rhs: self.shape(s),
            });
        }
        let k = self.scalar(s);
        let v = self.value(a).iter().map(|x| x * k).collect();
        let ng = self.ng(a) || self.ng(s);
        let shape = self.shape(a);
        Ok(self.push(Op::MulScalar(a, s), shape, v, ng))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).iter().map(|x| sigmoid(*x)).collect();
        let (s, ng) = (self.shape(a), self.ng(a));
        self.push(Op::Sigmoid(a), s, v, ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).iter().map(|x| libm::tanh(*x)).collect();
        let (s, ng) = (self.shape(a), self.ng(a));
        self.push(Op::Tanh(a), s, v, ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).iter().map(|x| x.max(0.0)).collect();
        let (s, ng) = (self.shape(a), self.ng(a));
        self.push(Op::Relu(a), s, v, ng)
    }

    // ── structural ───────────────────────────────────────────────────

    /// Concatenates rank-1 inputs.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut out = Vec::new();
        let mut ng = false;
        for &p in parts {
            let s = self.shape(p);
            if s.rank() != 1 {
                return Err(AutodiffError::InvalidShape {
                    op: "concat",
                    shape: s,
                });
            }
            out.extend_from_slice(self.value(p));
            ng |= self.ng(p);
        }
        if out.is_empty() {
            return Err(AutodiffError::Empty { op: "concat" });
        }
        let shape = Shape::vector(out.len());
        Ok(self.push(Op::Concat(parts.to_vec()), shape, out, ng))
    }

    /// Contiguous range of a rank-1 input.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if s.rank() != 1 || len == 0 || start + len > s.dim(0) {
            return Err(AutodiffError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                extent: s.numel(),
            });
        }
        let v = self.value(a)[start..start + len].to_vec();
        let ng = self.ng(a);
        Ok(self.push(Op::Slice(a, start), Shape::vector(len), v, ng))
    }

    /// Same values under a new shape with equal element count.
    pub fn reshape(&mut self, a: NodeId, shape: Shape) -> Result<NodeId> {
        let s = self.shape(a);
        if s.numel() != shape.numel() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: s,
                rhs: shape,
            });
        }
        let v = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(Op::Reshape(a), shape, v, ng))
    }

    /// Rows `ids` of a `[k, d]` table. A single id yields a `[d]` vector,
    /// several ids a `[n, d]` matrix.
    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let s = self.shape(table);
        if s.rank() != 2 {
            return Err(AutodiffError::InvalidShape {
                op: "embedding_lookup",
                shape: s,
            });
        }
        if ids.is_empty() {
            return Err(AutodiffError::Empty {
                op: "embedding_lookup",
            });
        }
        let (k, d) = (s.dim(0), s.dim(1));
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= k {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "embedding_lookup",
                    index: i,
                    extent: k,
                });
            }
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let shape = if ids.len() == 1 {
            Shape::vector(d)
        } else {
            Shape::matrix(ids.len(), d)
        };
        let ng = self.ng(table);
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            shape,
            out,
            ng,
        ))
    }

    // ── normalisation and similarity ─────────────────────────────────

    /// Softmax over a rank-1 input, computed with max subtraction.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.rank() != 1 {
            return Err(AutodiffError::InvalidShape {
                op: "softmax",
                shape: s,
            });
        }
        let v = softmax(self.value(a));
        let ng = self.ng(a);
        Ok(self.push(Op::Softmax(a), s, v, ng))
    }

    pub fn cosine_similarity(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.rank() != 1 || sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op: "cosine_similarity",
                lhs: sa,
                rhs: sb,
            });
        }
        let c = cosine(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Cosine(a, b), Shape::scalar(), vec![c], ng))
    }

    /// Cosine similarity between `key` (`[m]`) and every column of
    /// `matrix` (`[m, n]`), giving `[n]`.
    pub fn column_cosine(&mut self, matrix: NodeId, key: NodeId) -> Result<NodeId> {
        let (sm, sk) = (self.shape(matrix), self.shape(key));
        if sm.rank() != 2 || sk.rank() != 1 || sm.dim(0) != sk.dim(0) {
            return Err(AutodiffError::ShapeMismatch {
                op: "column_cosine",
                lhs: sm,
                rhs: sk,
            });
        }
        let (m, n) = (sm.dim(0), sm.dim(1));
        let mv = self.value(matrix);
        let kv = self.value(key);
        let kn = norm(kv).max(COSINE_EPS);
        let mut out = vec![0.0; n];
        for (j, o) in out.iter_mut().enumerate() {
            let mut dotp = 0.0;
            let mut nn = 0.0;
            for i in 0..m {
                let x = mv[i * n + j];
                dotp += x * kv[i];
                nn += x * x;
            }
            *o = dotp / (libm::sqrt(nn).max(COSINE_EPS) * kn);
        }
        let ng = self.ng(matrix) || self.ng(key);
        Ok(self.push(
            Op::ColumnCosine { matrix, key },
            Shape::vector(n),
            out,
            ng,
        ))
    }

    // ── losses and reductions ────────────────────────────────────────

    /// Negative log-likelihood of `target`. With `from_logits` the input is
    /// passed through a fused log-softmax; otherwise it is a probability
    /// vector floored at [`PROB_FLOOR`].
    pub fn cross_entropy(&mut self, x: NodeId, target: usize, from_logits: bool) -> Result<NodeId> {
        let s = self.shape(x);
        if s.rank() != 1 {
            return Err(AutodiffError::InvalidShape {
                op: "cross_entropy",
                shape: s,
            });
        }
        if target >= s.dim(0) {
            return Err(AutodiffError::IndexOutOfRange {
                op: "cross_entropy",
                index: target,
                extent: s.dim(0),
            });
        }
        let v = self.value(x);
        let loss = if from_logits {
            log_sum_exp(v) - v[target]
        } else {
            -libm::log(v[target].max(PROB_FLOOR))
        };
        let ng = self.ng(x);
        Ok(self.push(
            Op::CrossEntropy {
                input: x,
                target,
                from_logits,
            },
            Shape::scalar(),
            vec![loss],
            ng,
        ))
    }

    pub fn max_reduce(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let argmax = argmax(v);
        let m = v[argmax];
        let ng = self.ng(a);
        self.push(
            Op::MaxReduce { input: a, argmax },
            Shape::scalar(),
            vec![m],
            ng,
        )
    }

    pub fn mean_reduce(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(a);
        self.push(Op::MeanReduce(a), Shape::scalar(), vec![m], ng)
    }

    pub fn sum_reduce(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a).iter().sum::<f64>();
        let ng = self.ng(a);
        self.push(Op::SumReduce(a), Shape::scalar(), vec![m], ng)
    }

    /// Sum of scalar nodes; `None` for an empty list.
    pub fn add_all(&mut self, terms: &[NodeId]) -> Result<Option<NodeId>> {
        let mut it = terms.iter();
        let Some(&first) = it.next() else {
            return Ok(None);
        };
        let mut acc = first;
        for &t in it {
            acc = self.add(acc, t)?;
        }
        Ok(Some(acc))
    }

    // ── convolution ──────────────────────────────────────────────────

    /// Stride-1 "same" convolution. `input` is `[c, h, w]`, `weight`
    /// `[f, c, k, k]` with odd `k`, `bias` `[f]`.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (si, sw, sb) = (self.shape(input), self.shape(weight), self.shape(bias));
        if si.rank() != 3
            || sw.rank() != 4
            || sw.dim(1) != si.dim(0)
            || sw.dim(2) != sw.dim(3)
            || sw.dim(2) % 2 == 0
            || sb.rank() != 1
            || sb.dim(0) != sw.dim(0)
        {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                lhs: si,
                rhs: sw,
            });
        }
        let (c, h, w) = (si.dim(0), si.dim(1), si.dim(2));
        let (f, k) = (sw.dim(0), sw.dim(2));
        let pad = (k / 2) as isize;
        let x = self.value(input);
        let wt = self.value(weight);
        let bv = self.value(bias);
        let mut out = vec![0.0; f * h * w];
        for fo in 0..f {
            let plane = &mut out[fo * h * w..(fo + 1) * h * w];
            plane.iter_mut().for_each(|v| *v = bv[fo]);
            for ci in 0..c {
                let xin = &x[ci * h * w..(ci + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wt[((fo * c + ci) * k + ky) * k + kx];
                        let dy = ky as isize - pad;
                        let dx = kx as isize - pad;
                        for oy in 0..h {
                            let iy = oy as isize + dy;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let (x0, x1) = valid_range(w, dx);
                            let irow = iy as usize * w;
                            let orow = oy * w;
                            for ox in x0..x1 {
                                plane[orow + ox] += wv * xin[irow + (ox as isize + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(input) || self.ng(weight) || self.ng(bias);
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
            },
            Shape::volume(f, h, w),
            out,
            ng,
        ))
    }

    /// Max pooling over `[c, h, w]` with implicit `-inf` padding.
    pub fn max_pool2d(&mut self, input: NodeId, size: usize, stride: usize, pad: usize) -> Result<NodeId> {
        let s = self.shape(input);
        if s.rank() != 3 || size == 0 || stride == 0 || s.dim(1) + 2 * pad < size || s.dim(2) + 2 * pad < size {
            return Err(AutodiffError::InvalidShape {
                op: "max_pool2d",
                shape: s,
            });
        }
        let (c, h, w) = (s.dim(0), s.dim(1), s.dim(2));
        let oh = (h + 2 * pad - size) / stride + 1;
        let ow = (w + 2 * pad - size) / stride + 1;
        let x = self.value(input);
        let mut out = vec![0.0; c * oh * ow];
        let mut arg = vec![0usize; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = usize::MAX;
                    for py in 0..size {
                        let iy = (oy * stride + py) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for px in 0..size {
                            let ix = (ox * stride + px) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = (ch * h + iy as usize) * w + ix as usize;
                            if x[idx] > best {
                                best = x[idx];
                                bi = idx;
                            }
                        }
                    }
                    let o = (ch * oh + oy) * ow + ox;
                    out[o] = best;
                    arg[o] = bi;
                }
            }
        }
        let ng = self.ng(input);
        Ok(self.push(
            Op::MaxPool2d { input, argmax: arg },
            Shape::volume(c, oh, ow),
            out,
            ng,
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Gradients of a scalar `loss` with respect to every trainable parameter.
    pub fn backward(&self, loss: NodeId) -> Result<GradStore> {
        let mut grads = GradStore::zeros_like(self.params);
        self.backward_into(loss, 1.0, &mut grads)?;
        Ok(grads)
    }

    /// Adds `weight * ∂loss/∂θ` into `out`.
    pub fn backward_into(&self, loss: NodeId, weight: f64, out: &mut GradStore) -> Result<()> {
        let ls = self.shape(loss);
        if !ls.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(ls));
        }
        if !self.ng(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![weight]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &gy, &mut grads, out);
        }
        Ok(())
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], id: NodeId) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[id.0];
        if !node.needs_grad {
            return None;
        }
        let n = node.shape.numel();
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>], out: &mut GradStore) {
        let y = &node.value;
        match &node.op {
            Op::Param(pid) => {
                for (o, g) in out.get_mut(*pid).iter_mut().zip(gy) {
                    *o += g;
                }
            }
            Op::Constant => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let av = self.value(*a);
                let bv = self.value(*b);
                match (sa.rank(), sb.rank()) {
                    (2, 2) => {
                        let (m, k, n) = (sa.dim(0), sa.dim(1), sb.dim(1));
                        if let Some(ga) = self.buf(grads, *a) {
                            for i in 0..m {
                                for p in 0..k {
                                    ga[i * k + p] += dot(&gy[i * n..(i + 1) * n], &bv[p * n..(p + 1) * n]);
                                }
                            }
                        }
                        if let Some(gb) = self.buf(grads, *b) {
                            for i in 0..m {
                                for p in 0..k {
                                    let x = av[i * k + p];
                                    if x != 0.0 {
                                        axpy(x, &gy[i * n..(i + 1) * n], &mut gb[p * n..(p + 1) * n]);
                                    }
                                }
                            }
                        }
                    }
                    (2, 1) => {
                        let (m, k) = (sa.dim(0), sa.dim(1));
                        if let Some(ga) = self.buf(grads, *a) {
                            for i in 0..m {
                                if gy[i] != 0.0 {
                                    axpy(gy[i], bv, &mut ga[i * k..(i + 1) * k]);
                                }
                            }
                        }
                        if let Some(gb) = self.buf(grads, *b) {
                            for i in 0..m {
                                if gy[i] != 0.0 {
                                    axpy(gy[i], &av[i * k..(i + 1) * k], gb);
                                }
                            }
                        }
                    }
                    _ => {
                        let (k, n) = (sb.dim(0), sb.dim(1));
                        if let Some(ga) = self.buf(grads, *a) {
                            for p in 0..k {
                                ga[p] += dot(gy, &bv[p * n..(p + 1) * n]);
                            }
                        }
                        if let Some(gb) = self.buf(grads, *b) {
                            for p in 0..k {
                                if av[p] != 0.0 {
                                    axpy(av[p], gy, &mut gb[p * n..(p + 1) * n]);
                                }
                            }
                        }
                    }
                }
            }
            Op::Outer(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let n = bv.len();
                if let Some(ga) = self.buf(grads, *a) {
                    for (i, g) in ga.iter_mut().enumerate() {
                        *g += dot(&gy[i * n..(i + 1) * n], bv);
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for (i, x) in av.iter().enumerate() {
                        axpy(*x, &gy[i * n..(i + 1) * n], gb);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.buf(grads, *a) {
                    axpy(1.0, gy, ga);
                }
                if let Some(gb) = self.buf(grads, *b) {
                    axpy(1.0, gy, gb);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.buf(grads, *a) {
                    axpy(1.0, gy, ga);
                }
                if let Some(gb) = self.buf(grads, *b) {
                    axpy(-1.0, gy, gb);
                }
            }
            Op::Hadamard(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if let Some(ga) = self.buf(grads, *a) {
                    for i in 0..gy.len() {
                        ga[i] += gy[i] * bv[i];
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for i in 0..gy.len() {
                        gb[i] += gy[i] * av[i];
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(ga) = self.buf(grads, *a) {
                    axpy(*k, gy, ga);
                }
            }
            Op::MulScalar(a, s) => {
                let k = self.scalar(*s);
                let av = self.value(*a);
                if let Some(ga) = self.buf(grads, *a) {
                    axpy(k, gy, ga);
                }
                if let Some(gs) = self.buf(grads, *s) {
                    gs[0] += dot(gy, av);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.shape(*p).numel();
                    if let Some(gp) = self.buf(grads, *p) {
                        axpy(1.0, &gy[off..off + n], gp);
                    }
                    off += n;
                }
            }
            Op::Slice(a, start) => {
                if let Some(ga) = self.buf(grads, *a) {
                    axpy(1.0, gy, &mut ga[*start..*start + gy.len()]);
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.buf(grads, *a) {
                    axpy(1.0, gy, ga);
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.buf(grads, *a) {
                    for i in 0..gy.len() {
                        ga[i] += gy[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.buf(grads, *a) {
                    for i in 0..gy.len() {
                        ga[i] += gy[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = self.buf(grads, *a) {
                    for i in 0..gy.len() {
                        if y[i] > 0.0 {
                            ga[i] += gy[i];
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(ga) = self.buf(grads, *a) {
                    let s = dot(gy, y);
                    for i in 0..gy.len() {
                        ga[i] += y[i] * (gy[i] - s);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table).dim(1);
                if let Some(gt) = self.buf(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(1.0, &gy[r * d..(r + 1) * d], &mut gt[id * d..(id + 1) * d]);
                    }
                }
            }
            Op::Cosine(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (na, nb) = (norm(av), norm(bv));
                let (ca, cb) = (na.max(COSINE_EPS), nb.max(COSINE_EPS));
                let c = y[0];
                let g = gy[0];
                if let Some(ga) = self.buf(grads, *a) {
                    for i in 0..av.len() {
                        let mut d = bv[i] / (ca * cb);
                        if na > COSINE_EPS {
                            d -= c * av[i] / (na * na);
                        }
                        ga[i] += g * d;
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for i in 0..bv.len() {
                        let mut d = av[i] / (ca * cb);
                        if nb > COSINE_EPS {
                            d -= c * bv[i] / (nb * nb);
                        }
                        gb[i] += g * d;
                    }
                }
            }
            Op::ColumnCosine { matrix, key } => {
                let sm = self.shape(*matrix);
                let (m, n) = (sm.dim(0), sm.dim(1));
                let mv = self.value(*matrix);
                let kv = self.value(*key);
                let kn = norm(kv);
                let kc = kn.max(COSINE_EPS);
                let col_norms: Vec<f64> = (0..n)
                    .map(|j| libm::sqrt((0..m).map(|i| mv[i * n + j] * mv[i * n + j]).sum::<f64>()))
                    .collect();
                if let Some(gm) = self.buf(grads, *matrix) {
                    for j in 0..n {
                        let cn = col_norms[j];
                        let cc = cn.max(COSINE_EPS);
                        for i in 0..m {
                            let x = mv[i * n + j];
                            let mut d = kv[i] / (cc * kc);
                            if cn > COSINE_EPS {
                                d -= y[j] * x / (cn * cn);
                            }
                            gm[i * n + j] += gy[j] * d;
                        }
                    }
                }
                if let Some(gk) = self.buf(grads, *key) {
                    for j in 0..n {
                        let cc = col_norms[j].max(COSINE_EPS);
                        for i in 0..m {
                            let mut d = mv[i * n + j] / (cc * kc);
                            if kn > COSINE_EPS {
                                d -= y[j] * kv[i] / (kn * kn);
                            }
                            gk[i] += gy[j] * d;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                input,
                target,
                from_logits,
            } => {
                let xv = self.value(*input);
                let g = gy[0];
                if let Some(gx) = self.buf(grads, *input) {
                    if *from_logits {
                        let p = softmax(xv);
                        for i in 0..xv.len() {
                            gx[i] += g * p[i];
                        }
                        gx[*target] -= g;
                    } else if xv[*target] > PROB_FLOOR {
                        gx[*target] -= g / xv[*target];
                    }
                }
            }
            Op::MaxReduce { input, argmax } => {
                if let Some(ga) = self.buf(grads, *input) {
                    ga[*argmax] += gy[0];
                }
            }
            Op::MeanReduce(a) => {
                let n = self.shape(*a).numel() as f64;
                if let Some(ga) = self.buf(grads, *a) {
                    ga.iter_mut().for_each(|v| *v += gy[0] / n);
                }
            }
            Op::SumReduce(a) => {
                if let Some(ga) = self.buf(grads, *a) {
                    ga.iter_mut().for_each(|v| *v += gy[0]);
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
            } => self.conv2d_backward(*input, *weight, *bias, gy, grads),
            Op::MaxPool2d { input, argmax } => {
                if let Some(ga) = self.buf(grads, *input) {
                    for (o, &src) in argmax.iter().enumerate() {
                        if src != usize::MAX {
                            ga[src] += gy[o];
                        }
                    }
                }
            }
        }
    }

    fn conv2d_backward(
        &self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (si, sw) = (self.shape(input), self.shape(weight));
        let (c, h, w) = (si.dim(0), si.dim(1), si.dim(2));
        let (f, k) = (sw.dim(0), sw.dim(2));
        let pad = (k / 2) as isize;
        let x = self.value(input);
        let wt = self.value(weight);
        if let Some(gb) = self.buf(grads, bias) {
            for fo in 0..f {
                gb[fo] += gy[fo * h * w..(fo + 1) * h * w].iter().sum::<f64>();
            }
        }
        let mut gw = self.buf(grads, weight).map(core::mem::take);
        let mut gx = self.buf(grads, input).map(core::mem::take);
        for fo in 0..f {
            let gplane = &gy[fo * h * w..(fo + 1) * h * w];
            for ci in 0..c {
                let xoff = ci * h * w;
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((fo * c + ci) * k + ky) * k + kx;
                        let wv = wt[widx];
                        let dy = ky as isize - pad;
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(w, dx);
                        let mut acc = 0.0;
                        for oy in 0..h {
                            let iy = oy as isize + dy;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let irow = xoff + iy as usize * w;
                            let orow = oy * w;
                            for ox in x0..x1 {
                                let ii = irow + (ox as isize + dx) as usize;
                                let g = gplane[orow + ox];
                                acc += g * x[ii];
                                if let Some(gx) = gx.as_mut() {
                                    gx[ii] += g * wv;
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
        if let Some(v) = gw {
            grads[weight.0] = Some(v);
        }
        if let Some(v) = gx {
            grads[input.0] = Some(v);
        }
    }
}

// ── numeric helpers ──────────────────────────────────────────────────

#[inline]
fn valid_range(w: usize, dx: isize) -> (usize, usize) {
    let x0 = if dx < 0 { (-dx) as usize } else { 0 };
    let x1 = if dx > 0 { w - dx as usize } else { w };
    (x0, x1.max(x0))
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (o, v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

pub fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| libm::exp(x - m)).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= s);
    out
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + libm::log(v.iter().map(|x| libm::exp(x - m)).sum::<f64>())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a).max(COSINE_EPS) * norm(b).max(COSINE_EPS))
}

/// Index of the first maximal element.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
