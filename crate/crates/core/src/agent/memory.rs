//! Paired visual-key / sentence-content memory with least-used slot writes.
//!
//! Usage bookkeeping: every read adds its weights to the slot usage; every
//! write decays usage by `usage_decay` and then adds the one-hot write
//! weight. Writes target the slot with the smallest usage (lowest index on
//! ties).

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{AutodiffError, Graph, NodeId, Shape, Tensor};

#[derive(Clone, Debug)]
pub struct Memory {
    /// Visual keys, `key_dim × slots`.
    pub m_v: NodeId,
    /// Sentence contents, `embed_dim × slots`.
    pub m_s: NodeId,
    pub usage: Vec<f64>,
    pub last_read: Vec<f64>,
    key_dim: usize,
    content_dim: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct MemoryRead {
    pub r: NodeId,
    pub alpha: NodeId,
}

/// Index of the smallest usage, lowest index first on ties.
pub fn least_used(usage: &[f64]) -> usize {
    let mut best = 0;
    for (i, &u) in usage.iter().enumerate() {
        if u < usage[best] {
            best = i;
        }
    }
    best
}

impl Memory {
    /// All-zero memory of `slots` columns.
    pub fn new(g: &mut Graph<'_>, key_dim: usize, content_dim: usize, slots: usize) -> Self {
        Memory {
            m_v: g.constant(Tensor::zeros(Shape::matrix(key_dim, slots))),
            m_s: g.constant(Tensor::zeros(Shape::matrix(content_dim, slots))),
            usage: vec![0.0; slots],
            last_read: vec![0.0; slots],
            key_dim,
            content_dim,
        }
    }

    /// Memory with given contents, for tests and probes.
    pub fn from_tensors(g: &mut Graph<'_>, m_v: Tensor, m_s: Tensor) -> Result<Self, AutodiffError> {
        let m_v = g.constant(m_v);
        let m_s = g.constant(m_s);
        Self::from_nodes(g, m_v, m_s)
    }

    /// Memory over existing graph nodes (usage starts at zero).
    pub fn from_nodes(g: &mut Graph<'_>, m_v: NodeId, m_s: NodeId) -> Result<Self, AutodiffError> {
        let (sv, ss) = (g.shape(m_v), g.shape(m_s));
        if sv.rank() != 2 || ss.rank() != 2 || sv.dim(1) != ss.dim(1) {
            return Err(AutodiffError::ShapeMismatch {
                op: "memory",
                lhs: sv,
                rhs: ss,
            });
        }
        let slots = sv.dim(1);
        Ok(Memory {
            key_dim: sv.dim(0),
            content_dim: ss.dim(0),
            m_v,
            m_s,
            usage: vec![0.0; slots],
            last_read: vec![0.0; slots],
        })
    }

    pub fn slots(&self) -> usize {
        self.usage.len()
    }

    /// `α = softmax(τ · cos(key, M_v[:, j]))`, `r = M_s α`. A zero column
    /// (or zero key) has cosine 0.
    pub fn read(&mut self, g: &mut Graph<'_>, key: NodeId, temperature: f64) -> Result<MemoryRead, AutodiffError> {
        let cos = g.column_cosine(self.m_v, key)?;
        let logits = g.scale(cos, temperature);
        let alpha = g.softmax(logits)?;
        let r = g.matmul(self.m_s, alpha)?;
        let a = g.value(alpha).to_vec();
        for (u, w) in self.usage.iter_mut().zip(&a) {
            *u += w;
        }
        self.last_read = a;
        Ok(MemoryRead { r, alpha })
    }

    /// Writes `(key, content)` with strength `importance` into the least-used
    /// slot `j`: `M ← M − M ⊙ (g · 1 βᵀ) + g · x βᵀ` on both modalities.
    /// Returns `j`.
    pub fn write(
        &mut self,
        g: &mut Graph<'_>,
        key: NodeId,
        content: NodeId,
        importance: NodeId,
        usage_decay: f64,
    ) -> Result<usize, AutodiffError> {
        let j = least_used(&self.usage);
        self.write_slot(g, j, key, content, importance)?;
        for u in self.usage.iter_mut() {
            *u *= usage_decay;
        }
        self.usage[j] += 1.0;
        Ok(j)
    }

    /// Erase/add at slot `j` without touching usage.
    pub fn write_slot(
        &mut self,
        g: &mut Graph<'_>,
        j: usize,
        key: NodeId,
        content: NodeId,
        importance: NodeId,
    ) -> Result<(), AutodiffError> {
        let n = self.slots();
        if j >= n {
            return Err(AutodiffError::IndexOutOfRange {
                op: "memory_write",
                index: j,
                extent: n,
            });
        }
        let mut beta = vec![0.0; n];
        beta[j] = 1.0;
        let beta = g.constant_vec(beta);
        self.m_v = erase_add(g, self.m_v, key, beta, importance, self.key_dim)?;
        self.m_s = erase_add(g, self.m_s, content, beta, importance, self.content_dim)?;
        Ok(())
    }
}

fn erase_add(
    g: &mut Graph<'_>,
    m: NodeId,
    x: NodeId,
    beta: NodeId,
    gate: NodeId,
    rows: usize,
) -> Result<NodeId, AutodiffError> {
    let ones = g.constant_vec(vec![1.0; rows]);
    let mask = g.outer(ones, beta)?;
    let mask = g.mul_scalar(mask, gate)?;
    let erased = g.hadamard(m, mask)?;
    let kept = g.sub(m, erased)?;
    let add = g.outer(x, beta)?;
    let add = g.mul_scalar(add, gate)?;
    g.add(kept, add)
}
