//! Reverse-mode differentiation over a linear tape of vector-valued ops.
//!
//! The tape records one node per primitive op during the forward pass; node
//! ids are append-ordered, so every op's inputs precede it and a single
//! reverse sweep visits each node exactly once. All arithmetic is f64 and
//! single-threaded, so forward values and gradients replay bit-for-bit.

use crate::diffcore::param::ParameterBlock;
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Stable softmax with max subtraction. Shared by the tape op and every
/// non-tape evaluation path so the two stay bit-identical.
pub fn softmax_stable(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

/// log(sigmoid(x)) without overflow on either tail.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
enum Op {
    /// Data, constants, or registered parameters; no backward rule.
    Leaf,
    /// out[r] = sum_c w[r*cols + c] * x[c]
    MatVec { w: NodeId, x: NodeId, rows: usize, cols: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    Tanh { x: NodeId },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    LogSigmoid { x: NodeId },
    Ln { x: NodeId },
    Abs { x: NodeId },
    Clamp { x: NodeId, lo: f64, hi: f64 },
    Softmax { x: NodeId },
    Concat { parts: Vec<NodeId> },
    Gather { x: NodeId, idx: Vec<usize> },
    Dot { a: NodeId, b: NodeId },
    Sum { x: NodeId },
    Mean { x: NodeId },
    /// out = s[si] * x, with gradient to both the scalar slot and x.
    ScaleByElem { s: NodeId, si: usize, x: NodeId },
}

#[derive(Debug, Default)]
pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<Vec<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.vals[id]
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.vals[id].len(), 1);
        self.vals[id][0]
    }

    fn push(&mut self, op: Op, val: Vec<f64>) -> NodeId {
        self.ops.push(op);
        self.vals.push(val);
        self.ops.len() - 1
    }

    pub fn leaf(&mut self, data: &[f64]) -> NodeId {
        self.push(Op::Leaf, data.to_vec())
    }

    pub fn leaf_scalar(&mut self, v: f64) -> NodeId {
        self.push(Op::Leaf, vec![v])
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        if self.vals[w].len() != rows * cols {
            return Err(Error::dim("matvec weights", rows * cols, self.vals[w].len()));
        }
        if self.vals[x].len() != cols {
            return Err(Error::dim("matvec input", cols, self.vals[x].len()));
        }
        let mut out = vec![0.0; rows];
        let wv = &self.vals[w];
        let xv = &self.vals[x];
        for r in 0..rows {
            let mut acc = 0.0;
            let row = &wv[r * cols..(r + 1) * cols];
            for c in 0..cols {
                acc += row[c] * xv[c];
            }
            out[r] = acc;
        }
        Ok(self.push(Op::MatVec { w, x, rows, cols }, out))
    }

    fn binary_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        context: &str,
    ) -> Result<NodeId> {
        if self.vals[a].len() != self.vals[b].len() {
            return Err(Error::dim(context, self.vals[a].len(), self.vals[b].len()));
        }
        let out = self.vals[a]
            .iter()
            .zip(self.vals[b].iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(op, out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, |x, y| x + y, Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, |x, y| x - y, Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, |x, y| x * y, Op::Mul { a, b }, "mul")
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.vals[x].iter().map(|&v| c * v).collect();
        self.push(Op::Scale { x, c }, out)
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let out = self.vals[x].iter().map(|&v| f(v)).collect();
        self.push(op, out)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::tanh, Op::Tanh { x })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn log_sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, log_sigmoid, Op::LogSigmoid { x })
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::ln, Op::Ln { x })
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::abs, Op::Abs { x })
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let out = softmax_stable(&self.vals[x]);
        self.push(Op::Softmax { x }, out)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(&self.vals[p]);
        }
        self.push(Op::Concat { parts: parts.to_vec() }, out)
    }

    pub fn gather(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let src = &self.vals[x];
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= src.len() {
                return Err(Error::dim("gather index", src.len(), i));
            }
            out.push(src[i]);
        }
        Ok(self.push(Op::Gather { x, idx: idx.to_vec() }, out))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.vals[a].len() != self.vals[b].len() {
            return Err(Error::dim("dot", self.vals[a].len(), self.vals[b].len()));
        }
        let v = self.vals[a]
            .iter()
            .zip(self.vals[b].iter())
            .map(|(&x, &y)| x * y)
            .sum();
        Ok(self.push(Op::Dot { a, b }, vec![v]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = self.vals[x].iter().sum();
        self.push(Op::Sum { x }, vec![v])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.vals[x].len() as f64;
        let v = self.vals[x].iter().sum::<f64>() / n;
        self.push(Op::Mean { x }, vec![v])
    }

    pub fn scale_by_elem(&mut self, s: NodeId, si: usize, x: NodeId) -> Result<NodeId> {
        if si >= self.vals[s].len() {
            return Err(Error::dim("scale_by_elem index", self.vals[s].len(), si));
        }
        let c = self.vals[s][si];
        let out = self.vals[x].iter().map(|&v| c * v).collect();
        Ok(self.push(Op::ScaleByElem { s, si, x }, out))
    }

    /// Reverse sweep from a scalar loss node. Returns one gradient buffer per
    /// node (same length as the node's value).
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Vec<f64>>> {
        if self.vals[loss].len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss node, got length {}",
                self.vals[loss].len()
            )));
        }
        let mut grads: Vec<Vec<f64>> = self.vals.iter().map(|v| vec![0.0; v.len()]).collect();
        grads[loss][0] = 1.0;

        for id in (0..=loss).rev() {
            let g = std::mem::take(&mut grads[id]);
            if g.iter().all(|&v| v == 0.0) {
                grads[id] = g;
                continue;
            }
            match &self.ops[id] {
                Op::Leaf => {}
                Op::MatVec { w, x, rows, cols } => {
                    let xv = &self.vals[*x];
                    let wv = &self.vals[*w];
                    for r in 0..*rows {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        let row = r * cols;
                        for c in 0..*cols {
                            grads[*w][row + c] += gr * xv[c];
                            grads[*x][c] += wv[row + c] * gr;
                        }
                    }
                }
                Op::Add { a, b } => {
                    for (i, &gi) in g.iter().enumerate() {
                        grads[*a][i] += gi;
                        grads[*b][i] += gi;
                    }
                }
                Op::Sub { a, b } => {
                    for (i, &gi) in g.iter().enumerate() {
                        grads[*a][i] += gi;
                        grads[*b][i] -= gi;
                    }
                }
                Op::Mul { a, b } => {
                    for (i, &gi) in g.iter().enumerate() {
                        grads[*a][i] += self.vals[*b][i] * gi;
                        grads[*b][i] += self.vals[*a][i] * gi;
                    }
                }
                Op::Scale { x, c } => {
                    for (i, &gi) in g.iter().enumerate() {
                        grads[*x][i] += c * gi;
                    }
                }
                Op::Tanh { x } => {
                    for (i, &gi) in g.iter().enumerate() {
                        let y = self.vals[id][i];
                        grads[*x][i] += (1.0 - y * y) * gi;
                    }
                }
                Op::Relu { x } => {
                    for (i, &gi) in g.iter().enumerate() {
                        if self.vals[*x][i] > 0.0 {
                            grads[*x][i] += gi;
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    for (i, &gi) in g.iter().enumerate() {
                        let y = self.vals[id][i];
                        grads[*x][i] += y * (1.0 - y) * gi;
                    }
                }
                Op::LogSigmoid { x } => {
                    for (i, &gi) in g.iter().enumerate() {
                        grads[*x][i] += (1.0 - sigmoid(self.vals[*x][i])) * gi;
                    }
                }
                Op::Ln { x } => {
                    for (i, &gi) in g.iter().enumerate() {
                        grads[*x][i] += gi / self.vals[*x][i];
                    }
                }
                Op::Abs { x } => {
                    for (i, &gi) in g.iter().enumerate() {
                        let v = self.vals[*x][i];
                        // subgradient 0 at the kink
                        grads[*x][i] += v.signum() * gi * if v == 0.0 { 0.0 } else { 1.0 };
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    for (i, &gi) in g.iter().enumerate() {
                        let v = self.vals[*x][i];
                        if v >= *lo && v <= *hi {
                            grads[*x][i] += gi;
                        }
                    }
                }
                Op::Softmax { x } => {
                    let y = &self.vals[id];
                    let gy: f64 = g.iter().zip(y.iter()).map(|(&gi, &yi)| gi * yi).sum();
                    for (i, &gi) in g.iter().enumerate() {
                        grads[*x][i] += y[i] * (gi - gy);
                    }
                }
                Op::Concat { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.vals[p].len();
                        for i in 0..len {
                            grads[p][i] += g[off + i];
                        }
                        off += len;
                    }
                }
                Op::Gather { x, idx } => {
                    for (j, &i) in idx.iter().enumerate() {
                        grads[*x][i] += g[j];
                    }
                }
                Op::Dot { a, b } => {
                    let gs = g[0];
                    for i in 0..self.vals[*a].len() {
                        grads[*a][i] += gs * self.vals[*b][i];
                        grads[*b][i] += gs * self.vals[*a][i];
                    }
                }
                Op::Sum { x } => {
                    let gs = g[0];
                    for v in grads[*x].iter_mut() {
                        *v += gs;
                    }
                }
                Op::Mean { x } => {
                    let gs = g[0] / self.vals[*x].len() as f64;
                    for v in grads[*x].iter_mut() {
                        *v += gs;
                    }
                }
                Op::ScaleByElem { s, si, x } => {
                    let c = self.vals[*s][*si];
                    let mut gs = 0.0;
                    for (i, &gi) in g.iter().enumerate() {
                        grads[*x][i] += c * gi;
                        gs += self.vals[*x][i] * gi;
                    }
                    grads[*s][*si] += gs;
                }
            }
            grads[id] = g;
        }
        Ok(grads)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockId(pub usize);

struct BlockBinding {
    /// One leaf node per shape entry, in shape order.
    nodes: Vec<NodeId>,
    lens: Vec<usize>,
    trainable: bool,
}

/// A tape plus bindings from [`ParameterBlock`]s to leaf nodes, so gradients
/// can be harvested back into flat vectors aligned with each block.
pub struct Graph {
    pub tape: Tape,
    blocks: Vec<BlockBinding>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            tape: Tape::new(),
            blocks: Vec::new(),
        }
    }

    fn bind(&mut self, block: &ParameterBlock, trainable: bool) -> BlockId {
        let mut nodes = Vec::with_capacity(block.shapes.len());
        let mut lens = Vec::with_capacity(block.shapes.len());
        for i in 0..block.shapes.len() {
            nodes.push(self.tape.leaf(block.view(i)));
            lens.push(block.shapes[i].len());
        }
        self.blocks.push(BlockBinding { nodes, lens, trainable });
        BlockId(self.blocks.len() - 1)
    }

    pub fn add_block(&mut self, block: &ParameterBlock) -> BlockId {
        self.bind(block, true)
    }

    /// Frozen parameters participate in the forward pass and carry gradient
    /// through to their inputs, but are never harvested for updates.
    pub fn add_frozen_block(&mut self, block: &ParameterBlock) -> BlockId {
        self.bind(block, false)
    }

    pub fn block_entry_node(&self, block: BlockId, entry: usize) -> NodeId {
        self.blocks[block.0].nodes[entry]
    }

    pub fn input(&mut self, data: &[f64]) -> NodeId {
        self.tape.leaf(data)
    }

    /// Run backward from `loss` and return the flat gradient of each
    /// trainable block (None for frozen blocks), aligned with block storage.
    pub fn backward(&mut self, loss: NodeId) -> Result<Vec<Option<Vec<f64>>>> {
        let node_grads = self.tape.backward(loss)?;
        let mut out = Vec::with_capacity(self.blocks.len());
        for binding in &self.blocks {
            if !binding.trainable {
                out.push(None);
                continue;
            }
            let total: usize = binding.lens.iter().sum();
            let mut flat = Vec::with_capacity(total);
            for &node in &binding.nodes {
                flat.extend_from_slice(&node_grads[node]);
            }
            out.push(Some(flat));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.leaf(&[1.0, 2.0]);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn square_gradient() {
        // loss = x^2 at x = 3 -> dloss/dx = 6
        let mut t = Tape::new();
        let x = t.leaf(&[3.0]);
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        assert_eq!(g[x], vec![6.0]);
    }

    #[test]
    fn softmax_first_component_gradient() {
        // loss = softmax(x)[0] at x = [0, 0] -> gradient [0.25, -0.25]
        let mut t = Tape::new();
        let x = t.leaf(&[0.0, 0.0]);
        let s = t.softmax(x);
        let first = t.gather(s, &[0]).unwrap();
        let loss = t.sum(first);
        let g = t.backward(loss).unwrap();
        assert!((g[x][0] - 0.25).abs() < 1e-12);
        assert!((g[x][1] + 0.25).abs() < 1e-12);
    }

    #[test]
    fn tape_replay_is_bit_identical() {
        let build = || {
            let mut t = Tape::new();
            let x = t.leaf(&[0.3, -1.2, 0.7]);
            let w = t.leaf(&[0.1, -0.4, 0.2, 0.5, 0.9, -0.3]);
            let h = t.matvec(w, x, 2, 3).unwrap();
            let a = t.tanh(h);
            let s = t.softmax(a);
            let l = t.ln(s);
            let loss = t.mean(l);
            let g = t.backward(loss).unwrap();
            (t.value(loss).to_vec(), g[x].clone(), g[w].clone())
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn gather_scatter_adds() {
        let mut t = Tape::new();
        let x = t.leaf(&[1.0, 2.0, 3.0]);
        let g2 = t.gather(x, &[2, 2]).unwrap();
        let loss = t.sum(g2);
        let g = t.backward(loss).unwrap();
        assert_eq!(g[x], vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let mut t = Tape::new();
        let x = t.leaf(&[40.0, 5.0]);
        let c = t.clamp(x, -30.0, 30.0);
        let loss = t.sum(c);
        let g = t.backward(loss).unwrap();
        assert_eq!(g[x], vec![0.0, 1.0]);
    }
}
