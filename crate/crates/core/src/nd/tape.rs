//! Define-by-run computation tape with reverse-mode gradients.
//!
//! Ops execute eagerly as they are recorded, so node order is already a
//! topological order and backward is a single reverse sweep. Tapes are cheap
//! and rebuilt per minibatch; nothing is cached across batches.
//!
//! Time-series ops (`causal_conv1d`, `last_rows`) treat a 2-D tensor of shape
//! [(batch*time) x channels] as `batch` independent blocks of `time` rows, so
//! one node covers a whole minibatch.

use crate::error::{Error, Result};
use crate::nd::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    LastRows { input: NodeId, batch: usize, time: usize },
    CausalConv1d { input: NodeId, kernel: NodeId, dilation: usize, batch: usize, time: usize },
    LogSumExpRows(NodeId),
    SelectCols { input: NodeId, indices: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients indexed by the node they belong to.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a node that must have received one.
    pub fn wrt(&self, id: NodeId) -> Result<&Tensor> {
        self.get(id)
            .ok_or_else(|| Error::Usage(format!("no gradient recorded for node {}", id.0)))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all recorded nodes so the tape can be reused for a fresh forward pass.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<NodeId> {
        value.check_finite(name)?;
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        Ok(id)
    }

    /// Record an input or parameter value.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op: Op::Leaf });
        id
    }

    fn binary_same_shape(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(name, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(value, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(value, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(value, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let value = self.value(a).map(|v| v * factor);
        self.push(value, Op::Scale(a, factor), "scale")
    }

    /// [m x k] . [k x n] -> [m x n]
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.rows() {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", va.shape(), vb.shape())));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let data = matmul_raw(va.data(), vb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        self.push(value, Op::Matmul(a, b), "matmul")
    }

    /// [m x n] + [n], bias broadcast over rows.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(bias));
        if va.shape().len() != 2 || vb.shape().len() != 1 || va.cols() != vb.numel() {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", va.shape(), vb.shape())));
        }
        let n = va.cols();
        let mut data = va.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += vb.data()[i % n];
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, Op::AddBias(a, bias), "add_bias")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a), "relu")
    }

    /// Sum of all elements -> scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    /// Mean of all elements -> scalar.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let s: f64 = v.data().iter().sum();
        let m = s / v.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), "mean")
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(a).reshaped(shape)?;
        self.push(value, Op::Reshape(a), "reshape")
    }

    /// [(batch*time) x c] -> [batch x c], keeping each block's final row.
    pub fn last_rows(&mut self, a: NodeId, batch: usize, time: usize) -> Result<NodeId> {
        let v = self.value(a);
        if v.shape().len() != 2 || v.rows() != batch * time {
            return Err(Error::shape(
                "last_rows",
                format!("{:?} does not split into {} blocks of {} rows", v.shape(), batch, time),
            ));
        }
        let c = v.cols();
        let mut data = Vec::with_capacity(batch * c);
        for b in 0..batch {
            data.extend_from_slice(v.row(b * time + time - 1));
        }
        let value = Tensor::new(vec![batch, c], data)?;
        self.push(value, Op::LastRows { input: a, batch, time }, "last_rows")
    }

    /// Causal dilated 1-D convolution over each time block.
    ///
    /// `input` is [(batch*time) x c_in], `kernel` is [k x c_in x c_out] with
    /// taps ordered oldest to newest (the last tap multiplies the current
    /// step). Output at step t depends only on steps <= t of the same block;
    /// missing history is zero-padded.
    pub fn causal_conv1d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        dilation: usize,
        batch: usize,
        time: usize,
    ) -> Result<NodeId> {
        if dilation < 1 {
            return Err(Error::Config(format!("conv dilation must be >= 1, got {}", dilation)));
        }
        let (vx, vw) = (self.value(input), self.value(kernel));
        if vx.shape().len() != 2 || vx.rows() != batch * time {
            return Err(Error::shape(
                "causal_conv1d",
                format!("input {:?} does not split into {} x {} rows", vx.shape(), batch, time),
            ));
        }
        if vw.shape().len() != 3 || vw.shape()[1] != vx.cols() {
            return Err(Error::shape(
                "causal_conv1d",
                format!("kernel {:?} incompatible with input {:?}", vw.shape(), vx.shape()),
            ));
        }
        let (k, c_in, c_out) = (vw.shape()[0], vw.shape()[1], vw.shape()[2]);
        let data = conv_forward(vx.data(), vw.data(), batch, time, c_in, c_out, k, dilation);
        let value = Tensor::new(vec![batch * time, c_out], data)?;
        self.push(
            value,
            Op::CausalConv1d { input, kernel, dilation, batch, time },
            "causal_conv1d",
        )
    }

    /// Row-wise log(sum(exp(x))) of a [r x c] tensor -> [r x 1].
    pub fn log_sum_exp_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if v.shape().len() != 2 {
            return Err(Error::shape("log_sum_exp_rows", format!("{:?} is not 2-D", v.shape())));
        }
        let mut data = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            let row = v.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|x| (x - m).exp()).sum();
            data.push(m + s.ln());
        }
        let value = Tensor::new(vec![v.rows(), 1], data)?;
        self.push(value, Op::LogSumExpRows(a), "log_sum_exp_rows")
    }

    /// Pick one element per row: out[i] = x[i, indices[i]] -> [r x 1].
    pub fn select_cols(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a);
        if v.shape().len() != 2 || indices.len() != v.rows() {
            return Err(Error::shape(
                "select_cols",
                format!("{:?} with {} indices", v.shape(), indices.len()),
            ));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= v.cols()) {
            return Err(Error::shape("select_cols", format!("index {} out of {} cols", bad, v.cols())));
        }
        let data = indices.iter().enumerate().map(|(r, &c)| v.at2(r, c)).collect();
        let value = Tensor::new(vec![v.rows(), 1], data)?;
        self.push(value, Op::SelectCols { input: a, indices }, "select_cols")
    }

    /// Reverse sweep from a scalar loss node; seed gradient 1.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let v = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Usage("backward before forward: node not on tape".into()))?;
        if !v.value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?} (use backward_seeded)",
                v.value.shape()
            )));
        }
        self.backward_seeded(loss, Tensor::scalar(1.0))
    }

    /// Reverse sweep seeding an arbitrary output node with `seed` (same shape).
    pub fn backward_seeded(&self, output: NodeId, seed: Tensor) -> Result<Gradients> {
        let node = self
            .nodes
            .get(output.0)
            .ok_or_else(|| Error::Usage("backward before forward: node not on tape".into()))?;
        if node.value.shape() != seed.shape() {
            return Err(Error::shape(
                "backward_seeded",
                format!("seed {:?} vs output {:?}", seed.shape(), node.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != self.nodes[i].value.shape() {
                    return Err(Error::shape(
                        "backward",
                        format!(
                            "gradient shape {:?} != value shape {:?} at node {}",
                            g.shape(),
                            self.nodes[i].value.shape(),
                            i
                        ),
                    ));
                }
                g.check_finite("backward")?;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let add_into = |grads: &mut [Option<Tensor>], id: NodeId, contrib: Tensor| {
            match &mut grads[id.0] {
                Some(existing) => {
                    for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_into(grads, *a, g.clone());
                add_into(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_into(grads, *a, g.clone());
                add_into(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let ga = Tensor::new(
                    self.value(*a).shape().to_vec(),
                    g.data().iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect(),
                )?;
                let gb = Tensor::new(
                    self.value(*b).shape().to_vec(),
                    g.data().iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect(),
                )?;
                add_into(grads, *a, ga);
                add_into(grads, *b, gb);
            }
            Op::Scale(a, f) => {
                let f = *f;
                add_into(grads, *a, g.map(|v| v * f));
            }
            Op::Matmul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                // dA = G . B^T, dB = A^T . G
                let da = matmul_bt_raw(g.data(), vb.data(), m, n, k);
                let db = matmul_at_raw(va.data(), g.data(), m, k, n);
                add_into(grads, *a, Tensor::new(vec![m, k], da)?);
                add_into(grads, *b, Tensor::new(vec![k, n], db)?);
            }
            Op::AddBias(a, bias) => {
                add_into(grads, *a, g.clone());
                let n = self.value(*bias).numel();
                let mut gb = vec![0.0; n];
                for (i, v) in g.data().iter().enumerate() {
                    gb[i % n] += v;
                }
                add_into(grads, *bias, Tensor::vector(gb));
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                add_into(grads, *a, Tensor::new(va.shape().to_vec(), data)?);
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                add_into(grads, *a, Tensor::filled(va.shape().to_vec(), g.scalar_value()));
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                let v = g.scalar_value() / va.numel() as f64;
                add_into(grads, *a, Tensor::filled(va.shape().to_vec(), v));
            }
            Op::Reshape(a) => {
                let va = self.value(*a);
                add_into(grads, *a, g.reshaped(va.shape().to_vec())?);
            }
            Op::LastRows { input, batch, time } => {
                let vx = self.value(*input);
                let c = vx.cols();
                let mut dx = vec![0.0; vx.numel()];
                for b in 0..*batch {
                    let dst = (b * time + time - 1) * c;
                    dx[dst..dst + c].copy_from_slice(g.row(b));
                }
                add_into(grads, *input, Tensor::new(vx.shape().to_vec(), dx)?);
            }
            Op::CausalConv1d { input, kernel, dilation, batch, time } => {
                let (vx, vw) = (self.value(*input), self.value(*kernel));
                let (k, c_in, c_out) = (vw.shape()[0], vw.shape()[1], vw.shape()[2]);
                let (dx, dw) = conv_backward(
                    vx.data(),
                    vw.data(),
                    g.data(),
                    *batch,
                    *time,
                    c_in,
                    c_out,
                    k,
                    *dilation,
                );
                add_into(grads, *input, Tensor::new(vx.shape().to_vec(), dx)?);
                add_into(grads, *kernel, Tensor::new(vw.shape().to_vec(), dw)?);
            }
            Op::LogSumExpRows(a) => {
                let va = self.value(*a);
                let out = &self.nodes[i].value;
                let (r, c) = (va.rows(), va.cols());
                let mut dx = vec![0.0; va.numel()];
                for row in 0..r {
                    let gv = out.data()[row];
                    let up = g.data()[row];
                    for col in 0..c {
                        dx[row * c + col] = up * (va.at2(row, col) - gv).exp();
                    }
                }
                add_into(grads, *a, Tensor::new(va.shape().to_vec(), dx)?);
            }
            Op::SelectCols { input, indices } => {
                let vx = self.value(*input);
                let c = vx.cols();
                let mut dx = vec![0.0; vx.numel()];
                for (row, &col) in indices.iter().enumerate() {
                    dx[row * c + col] += g.data()[row];
                }
                add_into(grads, *input, Tensor::new(vx.shape().to_vec(), dx)?);
            }
        }
        Ok(())
    }
}

/// Standalone causal dilated convolution on a single [time x c_in] sequence.
pub fn temporal_conv1d(input: &Tensor, kernel: &Tensor, dilation: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let w = tape.leaf(kernel.clone());
    let out = tape.causal_conv1d(x, w, dilation, 1, input.rows())?;
    Ok(tape.value(out).clone())
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// G [m x n] . B^T where B is [k x n]; result [m x k].
fn matmul_bt_raw(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            *o = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// A^T . G where A is [m x k], G is [m x n]; result [k x n].
fn matmul_at_raw(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

fn conv_forward(
    x: &[f64],
    w: &[f64],
    batch: usize,
    time: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    dilation: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * time * c_out];
    for b in 0..batch {
        let x_base = b * time;
        for t in 0..time {
            let orow = &mut out[(x_base + t) * c_out..(x_base + t + 1) * c_out];
            for j in 0..k {
                let offset = (k - 1 - j) * dilation;
                if offset > t {
                    continue;
                }
                let xrow = &x[(x_base + t - offset) * c_in..(x_base + t - offset + 1) * c_in];
                let wtap = &w[j * c_in * c_out..(j + 1) * c_in * c_out];
                for (ci, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &wtap[ci * c_out..(ci + 1) * c_out];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    batch: usize,
    time: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    dilation: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; batch * time * c_in];
    let mut dw = vec![0.0; k * c_in * c_out];
    for b in 0..batch {
        let base = b * time;
        for t in 0..time {
            let grow = &gout[(base + t) * c_out..(base + t + 1) * c_out];
            for j in 0..k {
                let offset = (k - 1 - j) * dilation;
                if offset > t {
                    continue;
                }
                let src = base + t - offset;
                let xrow = &x[src * c_in..(src + 1) * c_in];
                let dxrow = &mut dx[src * c_in..(src + 1) * c_in];
                let wtap = &w[j * c_in * c_out..(j + 1) * c_in * c_out];
                let dwtap = &mut dw[j * c_in * c_out..(j + 1) * c_in * c_out];
                for ci in 0..c_in {
                    let wrow = &wtap[ci * c_out..(ci + 1) * c_out];
                    let dwrow = &mut dwtap[ci * c_out..(ci + 1) * c_out];
                    let xv = xrow[ci];
                    let mut acc = 0.0;
                    for ((&gv, &wv), dwv) in grow.iter().zip(wrow).zip(dwrow.iter_mut()) {
                        acc += gv * wv;
                        *dwv += gv * xv;
                    }
                    dxrow[ci] += acc;
                }
            }
        }
    }
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_identity_graph() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert_eq!(tape.value(x).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn test_matmul_hand_case() {
        // 1x2 [1,1] . 2x1 [2,3]^T = [5]
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 1, vec![2.0, 3.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[5.0]);
    }

    #[test]
    fn test_relu_definition() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn test_shape_mismatch_names_op() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2]") && msg.contains("[3]"));
    }

    #[test]
    fn test_backward_square() {
        // loss = x^2 at x = 3 -> dL/dx = 6
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let grads = tape.backward(sq).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn test_backward_linear_map() {
        // loss = sum(W . v) with v = [1,1]: dL/dW = ones
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::matrix(3, 2, vec![0.5; 6]).unwrap());
        let v = tape.leaf(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let prod = tape.matmul(w, v).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn test_backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn test_backward_on_empty_tape_is_usage_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        tape.clear();
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn test_conv_identity_kernel() {
        // k=1 identity weight per channel: output equals input
        let x = Tensor::matrix(4, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let w = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = temporal_conv1d(&x, &w, 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn test_conv_current_step_tap() {
        // k=2 with taps [0, 1]: newest tap passes the current step through
        let x = Tensor::matrix(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new(vec![2, 1, 1], vec![0.0, 1.0]).unwrap();
        let y = temporal_conv1d(&x, &w, 1).unwrap();
        assert_eq!(y.data(), x.data());
        // taps [1, 0]: pure one-step delay with zero padding
        let w = Tensor::new(vec![2, 1, 1], vec![1.0, 0.0]).unwrap();
        let y = temporal_conv1d(&x, &w, 1).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn test_conv_rejects_zero_dilation() {
        let x = Tensor::matrix(4, 1, vec![1.0; 4]).unwrap();
        let w = Tensor::new(vec![2, 1, 1], vec![1.0, 1.0]).unwrap();
        assert!(matches!(temporal_conv1d(&x, &w, 0), Err(Error::Config(_))));
    }

    #[test]
    fn test_conv_causality_perturbation_sweep() {
        // Perturbing input at step t changes outputs only at steps >= t.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let time = 16;
        let (c_in, c_out, k, dil) = (3, 2, 3, 2);
        let x: Vec<f64> = (0..time * c_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..k * c_in * c_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xt = Tensor::matrix(time, c_in, x.clone()).unwrap();
        let wt = Tensor::new(vec![k, c_in, c_out], w).unwrap();
        let base = temporal_conv1d(&xt, &wt, dil).unwrap();
        for t in 0..time {
            let mut xp = x.clone();
            xp[t * c_in] += 0.5;
            let yp = temporal_conv1d(&Tensor::matrix(time, c_in, xp).unwrap(), &wt, dil).unwrap();
            for s in 0..time {
                let differs = base.row(s) != yp.row(s);
                if s < t {
                    assert!(!differs, "output at {} changed by perturbation at {}", s, t);
                }
            }
            // The perturbed step itself must change (identity tap contributes).
            let self_diff: f64 =
                (0..c_out).map(|c| (base.at2(t, c) - yp.at2(t, c)).abs()).sum();
            assert!(self_diff > 0.0 || (0..c_out).all(|co| wt.data()[(k - 1) * c_in * c_out + co] == 0.0));
        }
    }

    #[test]
    fn test_last_rows_and_scatter() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(4, 2, (0..8).map(|v| v as f64).collect()).unwrap());
        let y = tape.last_rows(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 3.0, 6.0, 7.0]);
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn test_log_sum_exp_matches_direct() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.log_sum_exp_rows(x).unwrap();
        let direct = (1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp()).ln();
        assert!((tape.value(y).data()[0] - direct).abs() < 1e-12);
    }

    #[test]
    fn test_select_cols() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = tape.select_cols(x, vec![2, 0]).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn test_non_finite_result_is_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1e308));
        let err = tape.add(x, x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }
}
