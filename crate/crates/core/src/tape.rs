//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Operations execute eagerly and record enough metadata to replay the
//! chain rule in reverse. Gradients accumulate additively when a node is
//! consumed by several downstream operations.

use crate::error::{PlmError, Result};
use crate::linalg;
use crate::EPS_CLIP;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddBias { x: NodeId, bias: NodeId },
    Scale { x: NodeId, factor: f64 },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    ClampMin { x: NodeId, floor: f64 },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    SoftmaxRows { x: NodeId },
    BatchedVecMat { p: NodeId, u: NodeId },
    GatherClass { x: NodeId, labels: Vec<usize> },
    LogClamped { x: NodeId },
    MeanAll { x: NodeId },
    CrossEntropyMean { probs: NodeId, labels: Vec<usize> },
    BceMean { probs: NodeId, targets: Vec<f64> },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

/// Append-only computation tape. One tape per training step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape,
            data,
            requires_grad,
        });
        id
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input or parameter buffer.
    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(PlmError::Shape(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(Op::Leaf, shape, data, requires_grad))
    }

    /// Overwrite a leaf's values in place (used to reuse a tape layout).
    pub fn set_leaf(&mut self, id: NodeId, data: &[f64]) -> Result<()> {
        if !matches!(self.nodes[id].op, Op::Leaf) {
            return Err(PlmError::Domain("set_leaf target is not a leaf".into()));
        }
        if data.len() != self.nodes[id].data.len() {
            return Err(PlmError::Shape("set_leaf length mismatch".into()));
        }
        self.nodes[id].data.copy_from_slice(data);
        Ok(())
    }

    fn dims2(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        match self.nodes[id].shape[..] {
            [r, c] => Ok((r, c)),
            ref s => Err(PlmError::Shape(format!("{what} must be 2-d, got {s:?}"))),
        }
    }

    /// out = a . b for a [m,k], b [k,n]
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a, "matmul lhs")?;
        let (kb, n) = self.dims2(b, "matmul rhs")?;
        if ka != kb {
            return Err(PlmError::Shape(format!(
                "matmul inner dims {ka} vs {kb} differ"
            )));
        }
        let mut out = vec![0.0; m * n];
        linalg::matmul(m, ka, n, &self.nodes[a].data, &self.nodes[b].data, &mut out);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul { a, b }, vec![m, n], out, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(PlmError::Shape("add operands differ in shape".into()));
        }
        let data = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.needs(&[a, b]);
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::Add { a, b }, shape, data, rg))
    }

    /// Broadcast-add a bias row vector onto each row of x.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "add_bias input")?;
        if self.nodes[bias].shape != [n] {
            return Err(PlmError::Shape(format!(
                "bias shape {:?} does not match row width {n}",
                self.nodes[bias].shape
            )));
        }
        let mut data = self.nodes[x].data.clone();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(&self.nodes[bias].data) {
                *v += b;
            }
        }
        let rg = self.needs(&[x, bias]);
        Ok(self.push(Op::AddBias { x, bias }, vec![m, n], data, rg))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let data = self.nodes[x].data.iter().map(|v| v * factor).collect();
        let shape = self.nodes[x].shape.clone();
        let rg = self.needs(&[x]);
        self.push(Op::Scale { x, factor }, shape, data, rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(PlmError::Shape("mul operands differ in shape".into()));
        }
        let data = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.needs(&[a, b]);
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::Mul { a, b }, shape, data, rg))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(PlmError::Shape("div operands differ in shape".into()));
        }
        let data = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x / y)
            .collect();
        let rg = self.needs(&[a, b]);
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::Div { a, b }, shape, data, rg))
    }

    /// Elementwise max(x, floor).
    pub fn clamp_min(&mut self, x: NodeId, floor: f64) -> NodeId {
        let data = self.nodes[x].data.iter().map(|v| v.max(floor)).collect();
        let shape = self.nodes[x].shape.clone();
        let rg = self.needs(&[x]);
        self.push(Op::ClampMin { x, floor }, shape, data, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data = self.nodes[x].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x].shape.clone();
        let rg = self.needs(&[x]);
        self.push(Op::Relu { x }, shape, data, rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let data = self
            .nodes[x]
            .data
            .iter()
            .map(|&v| linalg::sigmoid_scalar(v))
            .collect();
        let shape = self.nodes[x].shape.clone();
        let rg = self.needs(&[x]);
        self.push(Op::Sigmoid { x }, shape, data, rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "softmax input")?;
        if self.nodes[x].data.iter().any(|v| !v.is_finite()) {
            return Err(PlmError::Numeric("softmax input is not finite".into()));
        }
        let mut out = vec![0.0; m * n];
        linalg::softmax_rows(m, n, &self.nodes[x].data, &mut out);
        let rg = self.needs(&[x]);
        Ok(self.push(Op::SoftmaxRows { x }, vec![m, n], out, rg))
    }

    /// q[b][j] = sum_i p[b][i] * u[b][i*c + j] for p [m,c] and u [m,c*c].
    ///
    /// Applies each instance's transition matrix (stored row-major as a
    /// flat c*c row) to that instance's probability row.
    pub fn batched_vecmat(&mut self, p: NodeId, u: NodeId) -> Result<NodeId> {
        let (m, c) = self.dims2(p, "batched_vecmat probabilities")?;
        let (mu, cc) = self.dims2(u, "batched_vecmat matrices")?;
        if mu != m || cc != c * c {
            return Err(PlmError::Shape(format!(
                "batched_vecmat expects [{m},{}] matrices, got [{mu},{cc}]",
                c * c
            )));
        }
        let mut out = vec![0.0; m * c];
        for b in 0..m {
            let pr = &self.nodes[p].data[b * c..(b + 1) * c];
            let ur = &self.nodes[u].data[b * c * c..(b + 1) * c * c];
            let qr = &mut out[b * c..(b + 1) * c];
            for (i, &pv) in pr.iter().enumerate() {
                for (q, &uv) in qr.iter_mut().zip(&ur[i * c..(i + 1) * c]) {
                    *q += pv * uv;
                }
            }
        }
        let rg = self.needs(&[p, u]);
        Ok(self.push(Op::BatchedVecMat { p, u }, vec![m, c], out, rg))
    }

    /// out[b] = x[b][labels[b]]
    pub fn gather_class(&mut self, x: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "gather input")?;
        if labels.len() != m {
            return Err(PlmError::Shape(format!(
                "{} labels for {m} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(PlmError::Domain(format!(
                "class label {bad} out of range for {n} classes"
            )));
        }
        let data: Vec<f64> = labels
            .iter()
            .enumerate()
            .map(|(b, &l)| self.nodes[x].data[b * n + l])
            .collect();
        let rg = self.needs(&[x]);
        Ok(self.push(
            Op::GatherClass {
                x,
                labels: labels.to_vec(),
            },
            vec![m],
            data,
            rg,
        ))
    }

    /// Elementwise ln of the input clamped into [EPS_CLIP, 1 - EPS_CLIP].
    pub fn log_clamped(&mut self, x: NodeId) -> NodeId {
        let data = self
            .nodes[x]
            .data
            .iter()
            .map(|v| v.clamp(EPS_CLIP, 1.0 - EPS_CLIP).ln())
            .collect();
        let shape = self.nodes[x].shape.clone();
        let rg = self.needs(&[x]);
        self.push(Op::LogClamped { x }, shape, data, rg)
    }

    /// Mean over every entry, producing a scalar node.
    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.nodes[x].data.len();
        if n == 0 {
            return Err(PlmError::Domain("mean of an empty tensor".into()));
        }
        let mean = self.nodes[x].data.iter().sum::<f64>() / n as f64;
        let rg = self.needs(&[x]);
        Ok(self.push(Op::MeanAll { x }, vec![1], vec![mean], rg))
    }

    /// Mean over the batch of -ln(probs[b][label_b]), probabilities clamped.
    pub fn cross_entropy_mean(&mut self, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (m, c) = self.dims2(probs, "cross-entropy probabilities")?;
        if labels.len() != m {
            return Err(PlmError::Shape(format!(
                "{} labels for batch of {m}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(PlmError::Domain(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        for (b, row) in self.nodes[probs].data.chunks(c).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-4 {
                return Err(PlmError::Domain(format!(
                    "cross-entropy row {b} sums to {s}, not a distribution"
                )));
            }
        }
        let mut total = 0.0;
        for (b, &l) in labels.iter().enumerate() {
            let p = self.nodes[probs].data[b * c + l].clamp(EPS_CLIP, 1.0 - EPS_CLIP);
            total -= p.ln();
        }
        let rg = self.needs(&[probs]);
        Ok(self.push(
            Op::CrossEntropyMean {
                probs,
                labels: labels.to_vec(),
            },
            vec![1],
            vec![total / m as f64],
            rg,
        ))
    }

    /// Mean over batch and classes of the binary cross entropy against
    /// 0/1 targets, probabilities clamped on both sides.
    pub fn bce_mean(&mut self, probs: NodeId, targets: &[f64]) -> Result<NodeId> {
        let numel = self.nodes[probs].data.len();
        if targets.len() != numel {
            return Err(PlmError::Shape(format!(
                "{} targets for {numel} probabilities",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(PlmError::Domain(format!(
                "binary cross entropy target {bad} is not 0 or 1"
            )));
        }
        let mut total = 0.0;
        for (&p, &t) in self.nodes[probs].data.iter().zip(targets) {
            let pc = p.clamp(EPS_CLIP, 1.0 - EPS_CLIP);
            let qc = (1.0 - p).clamp(EPS_CLIP, 1.0 - EPS_CLIP);
            total -= t * pc.ln() + (1.0 - t) * qc.ln();
        }
        let rg = self.needs(&[probs]);
        Ok(self.push(
            Op::BceMean {
                probs,
                targets: targets.to_vec(),
            },
            vec![1],
            vec![total / numel as f64],
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss. Returns per-node gradients;
    /// leaves that do not require grad get `None`.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss].data.len() != 1 {
            return Err(PlmError::Domain(format!(
                "backward requires a scalar loss, got {} elements",
                self.nodes[loss].data.len()
            )));
        }
        if !self.nodes[loss].data[0].is_finite() {
            return Err(PlmError::Numeric("loss is not finite".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, numel: usize, f: impl FnOnce(&mut [f64])) {
        let slot = grads[id].get_or_insert_with(|| vec![0.0; numel]);
        f(slot);
    }

    fn propagate(&self, id: NodeId, gout: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                if self.nodes[*a].requires_grad {
                    let mut da = vec![0.0; m * k];
                    linalg::matmul_nt(m, n, k, gout, &self.nodes[*b].data, &mut da);
                    Self::acc(grads, *a, m * k, |g| {
                        for (gi, di) in g.iter_mut().zip(&da) {
                            *gi += di;
                        }
                    });
                }
                if self.nodes[*b].requires_grad {
                    let mut db = vec![0.0; k * n];
                    linalg::matmul_tn(m, k, n, &self.nodes[*a].data, gout, &mut db);
                    Self::acc(grads, *b, k * n, |g| {
                        for (gi, di) in g.iter_mut().zip(&db) {
                            *gi += di;
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                for &t in &[*a, *b] {
                    if self.nodes[t].requires_grad {
                        Self::acc(grads, t, gout.len(), |g| {
                            for (gi, go) in g.iter_mut().zip(gout) {
                                *gi += go;
                            }
                        });
                    }
                }
            }
            Op::AddBias { x, bias } => {
                let n = self.nodes[*bias].data.len();
                if self.nodes[*x].requires_grad {
                    Self::acc(grads, *x, gout.len(), |g| {
                        for (gi, go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    });
                }
                if self.nodes[*bias].requires_grad {
                    Self::acc(grads, *bias, n, |g| {
                        for row in gout.chunks(n) {
                            for (gi, go) in g.iter_mut().zip(row) {
                                *gi += go;
                            }
                        }
                    });
                }
            }
            Op::Scale { x, factor } => {
                if self.nodes[*x].requires_grad {
                    Self::acc(grads, *x, gout.len(), |g| {
                        for (gi, go) in g.iter_mut().zip(gout) {
                            *gi += factor * go;
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].requires_grad {
                    let bd = &self.nodes[*b].data;
                    Self::acc(grads, *a, gout.len(), |g| {
                        for ((gi, go), bv) in g.iter_mut().zip(gout).zip(bd) {
                            *gi += go * bv;
                        }
                    });
                }
                if self.nodes[*b].requires_grad {
                    let ad = &self.nodes[*a].data;
                    Self::acc(grads, *b, gout.len(), |g| {
                        for ((gi, go), av) in g.iter_mut().zip(gout).zip(ad) {
                            *gi += go * av;
                        }
                    });
                }
            }
            Op::Div { a, b } => {
                let bd = &self.nodes[*b].data;
                if self.nodes[*a].requires_grad {
                    Self::acc(grads, *a, gout.len(), |g| {
                        for ((gi, go), bv) in g.iter_mut().zip(gout).zip(bd) {
                            *gi += go / bv;
                        }
                    });
                }
                if self.nodes[*b].requires_grad {
                    let yd = &node.data;
                    Self::acc(grads, *b, gout.len(), |g| {
                        for (((gi, go), yv), bv) in g.iter_mut().zip(gout).zip(yd).zip(bd) {
                            *gi -= go * yv / bv;
                        }
                    });
                }
            }
            Op::ClampMin { x, floor } => {
                if self.nodes[*x].requires_grad {
                    let xd = &self.nodes[*x].data;
                    Self::acc(grads, *x, gout.len(), |g| {
                        for ((gi, go), xv) in g.iter_mut().zip(gout).zip(xd) {
                            if *xv > *floor {
                                *gi += go;
                            }
                        }
                    });
                }
            }
            Op::Relu { x } => {
                if self.nodes[*x].requires_grad {
                    let xd = &self.nodes[*x].data;
                    Self::acc(grads, *x, gout.len(), |g| {
                        for ((gi, go), xv) in g.iter_mut().zip(gout).zip(xd) {
                            if *xv > 0.0 {
                                *gi += go;
                            }
                        }
                    });
                }
            }
            Op::Sigmoid { x } => {
                if self.nodes[*x].requires_grad {
                    let yd = &node.data;
                    Self::acc(grads, *x, gout.len(), |g| {
                        for ((gi, go), yv) in g.iter_mut().zip(gout).zip(yd) {
                            *gi += go * yv * (1.0 - yv);
                        }
                    });
                }
            }
            Op::SoftmaxRows { x } => {
                if self.nodes[*x].requires_grad {
                    let n = node.shape[1];
                    let yd = &node.data;
                    Self::acc(grads, *x, gout.len(), |g| {
                        for ((grow, gorow), yrow) in
                            g.chunks_mut(n).zip(gout.chunks(n)).zip(yd.chunks(n))
                        {
                            let dot: f64 = gorow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for ((gi, go), yv) in grow.iter_mut().zip(gorow).zip(yrow) {
                                *gi += yv * (go - dot);
                            }
                        }
                    });
                }
            }
            Op::BatchedVecMat { p, u } => {
                let c = node.shape[1];
                let pd = &self.nodes[*p].data;
                let ud = &self.nodes[*u].data;
                if self.nodes[*p].requires_grad {
                    Self::acc(grads, *p, pd.len(), |g| {
                        for (b, gorow) in gout.chunks(c).enumerate() {
                            let ur = &ud[b * c * c..(b + 1) * c * c];
                            let gp = &mut g[b * c..(b + 1) * c];
                            for (i, gi) in gp.iter_mut().enumerate() {
                                let mut acc = 0.0;
                                for (go, uv) in gorow.iter().zip(&ur[i * c..(i + 1) * c]) {
                                    acc += go * uv;
                                }
                                *gi += acc;
                            }
                        }
                    });
                }
                if self.nodes[*u].requires_grad {
                    Self::acc(grads, *u, ud.len(), |g| {
                        for (b, gorow) in gout.chunks(c).enumerate() {
                            let pr = &pd[b * c..(b + 1) * c];
                            let gu = &mut g[b * c * c..(b + 1) * c * c];
                            for (i, &pv) in pr.iter().enumerate() {
                                for (gi, go) in gu[i * c..(i + 1) * c].iter_mut().zip(gorow) {
                                    *gi += pv * go;
                                }
                            }
                        }
                    });
                }
            }
            Op::GatherClass { x, labels } => {
                if self.nodes[*x].requires_grad {
                    let n = self.nodes[*x].shape[1];
                    let numel = self.nodes[*x].data.len();
                    Self::acc(grads, *x, numel, |g| {
                        for (b, &l) in labels.iter().enumerate() {
                            g[b * n + l] += gout[b];
                        }
                    });
                }
            }
            Op::LogClamped { x } => {
                if self.nodes[*x].requires_grad {
                    let xd = &self.nodes[*x].data;
                    Self::acc(grads, *x, gout.len(), |g| {
                        for ((gi, go), xv) in g.iter_mut().zip(gout).zip(xd) {
                            if *xv > EPS_CLIP && *xv < 1.0 - EPS_CLIP {
                                *gi += go / xv;
                            }
                        }
                    });
                }
            }
            Op::MeanAll { x } => {
                if self.nodes[*x].requires_grad {
                    let numel = self.nodes[*x].data.len();
                    let share = gout[0] / numel as f64;
                    Self::acc(grads, *x, numel, |g| {
                        for gi in g.iter_mut() {
                            *gi += share;
                        }
                    });
                }
            }
            Op::CrossEntropyMean { probs, labels } => {
                if self.nodes[*probs].requires_grad {
                    let c = self.nodes[*probs].shape[1];
                    let m = labels.len() as f64;
                    let pd = &self.nodes[*probs].data;
                    let numel = pd.len();
                    Self::acc(grads, *probs, numel, |g| {
                        for (b, &l) in labels.iter().enumerate() {
                            let p = pd[b * c + l];
                            if p > EPS_CLIP && p < 1.0 - EPS_CLIP {
                                g[b * c + l] -= gout[0] / (m * p);
                            }
                        }
                    });
                }
            }
            Op::BceMean { probs, targets } => {
                if self.nodes[*probs].requires_grad {
                    let pd = &self.nodes[*probs].data;
                    let numel = pd.len();
                    let scale = gout[0] / numel as f64;
                    Self::acc(grads, *probs, numel, |g| {
                        for ((gi, &p), &t) in g.iter_mut().zip(pd).zip(targets) {
                            if p > EPS_CLIP && p < 1.0 - EPS_CLIP {
                                *gi += scale * (-t / p + (1.0 - t) / (1.0 - p));
                            }
                        }
                    });
                }
            }
        }
    }
}

/// Gradients produced by one backward pass, indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Gradient of a node that must have received one.
    pub fn expect(&self, id: NodeId) -> Result<&[f64]> {
        self.get(id)
            .ok_or_else(|| PlmError::Domain(format!("node {id} received no gradient")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![3], vec![1.0, -2.0, 5.0], true).unwrap();
        let mean = tape.mean_all(x).unwrap();
        let total = tape.scale(mean, 3.0); // mean * 3 == sum
        let grads = tape.backward(total).unwrap();
        assert_eq!(grads.expect(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1], vec![3.0], true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let grads = tape.backward(sq).unwrap();
        assert_eq!(grads.expect(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![2], vec![1.0, 2.0], true).unwrap();
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(PlmError::Domain(_))));
    }

    #[test]
    fn gradient_accumulates_across_uses() {
        // z = mean(x * x + x * x) -> dz/dx = 4x / n with n = 2
        let mut tape = Tape::new();
        let x = tape.leaf(vec![2], vec![1.0, 2.0], true).unwrap();
        let a = tape.mul(x, x).unwrap();
        let b = tape.mul(x, x).unwrap();
        let s = tape.add(a, b).unwrap();
        let z = tape.mean_all(s).unwrap();
        let grads = tape.backward(z).unwrap();
        assert_eq!(grads.expect(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1, 2], vec![f64::NAN, 0.0], false).unwrap();
        assert!(matches!(
            tape.softmax_rows(x),
            Err(PlmError::Numeric(_))
        ));
    }

    #[test]
    fn cross_entropy_rejects_bad_labels_and_rows() {
        let mut tape = Tape::new();
        let p = tape.leaf(vec![1, 2], vec![0.5, 0.5], false).unwrap();
        assert!(matches!(
            tape.cross_entropy_mean(p, &[2]),
            Err(PlmError::Domain(_))
        ));
        let q = tape.leaf(vec![1, 2], vec![0.9, 0.3], false).unwrap();
        assert!(matches!(
            tape.cross_entropy_mean(q, &[0]),
            Err(PlmError::Domain(_))
        ));
    }

    #[test]
    fn bce_rejects_non_binary_targets() {
        let mut tape = Tape::new();
        let p = tape.leaf(vec![1, 2], vec![0.5, 0.5], false).unwrap();
        assert!(matches!(
            tape.bce_mean(p, &[1.0, 0.5]),
            Err(PlmError::Domain(_))
        ));
    }
}
