//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every differentiable operation records its inputs and output on a [`Tape`];
//! [`Tape::backward`] replays the records in exact reverse execution order and
//! accumulates adjoints additively, so using a value twice yields the sum of
//! its single-use gradients. Convolution and the linear layer are lowered to
//! GEMM (im2col) since they dominate the training cost.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Parameter, Tensor};

/// Epsilon inside the batch-norm variance denominator.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add { lhs: Var, rhs: Var },
    Sub { lhs: Var, rhs: Var },
    Mul { lhs: Var, rhs: Var },
    /// Elementwise minimum; ties route the gradient to `lhs`.
    Min { lhs: Var, rhs: Var },
    Neg { input: Var },
    Shift { input: Var },
    Scale { input: Var, factor: f64 },
    SqrtEps { input: Var },
    Relu { input: Var },
    LogSoftmax { input: Var },
    SumAll { input: Var },
    MeanAll { input: Var },
    Conv1d { input: Var, weight: Var, bias: Var },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        /// In train mode the normalization statistics are functions of the
        /// input, which changes the adjoint; in eval mode they are constants.
        train: bool,
    },
    GlobalAvgPool { input: Var },
    Linear { input: Var, weight: Var, bias: Var },
    /// Per-class mean of embedding rows; `rows[i]` is the centroid row fed by
    /// sample `i` and `counts[j]` the population of centroid `j`.
    ClassMean {
        input: Var,
        rows: Vec<usize>,
        counts: Vec<usize>,
    },
    PairwiseSqDist { emb: Var, centroids: Var },
    /// Mean negative log-probability of the true class.
    NllLoss { log_probs: Var, labels: Vec<usize> },
}

/// Ordered record of executed differentiable operations.
pub struct Tape {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameter-name → tape-leaf mapping for one forward pass.
pub struct TapeBinding {
    vars: BTreeMap<String, Var>,
}

impl TapeBinding {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::State(format!("parameter {:?} not bound to this tape", name)))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            consumed: false,
        }
    }

    /// Record a leaf value. Gradient tracking follows the tensor's own flag.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let id = self.nodes.len();
        self.nodes.push(value);
        self.ops.push(Op::Leaf);
        Var(id)
    }

    /// Register every parameter as a tracked leaf (values are copied in).
    pub fn bind<'a>(&mut self, params: impl IntoIterator<Item = &'a Parameter>) -> TapeBinding {
        let mut vars = BTreeMap::new();
        for p in params {
            let leaf = Tensor::new(p.value.shape(), p.value.data().to_vec())
                .expect("parameter tensors are internally consistent")
                .tracked();
            vars.insert(p.name.clone(), self.leaf(leaf));
        }
        TapeBinding { vars }
    }

    /// Add each bound leaf's gradient into the matching parameter's gradient.
    pub fn accumulate_grads(
        &self,
        binding: &TapeBinding,
        params: Vec<&mut Parameter>,
    ) -> Result<()> {
        for p in params {
            let var = binding.var(&p.name)?;
            let node_grad = self.nodes[var.0].grad().ok_or_else(|| {
                Error::State(format!(
                    "gradient for parameter {:?} not populated; was backward run?",
                    p.name
                ))
            })?;
            let grad = p
                .value
                .grad_mut()
                .ok_or_else(|| Error::State(format!("parameter {:?} has no gradient", p.name)))?;
            for (g, ng) in grad.iter_mut().zip(node_grad) {
                *g += ng;
            }
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0]
    }

    /// Gradient of a recorded value (populated by `backward` for tracked nodes).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad()
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        self.nodes[v.0].scalar_value()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: &[usize], data: Vec<f64>, tracked: bool, op: Op) -> Result<Var> {
        if self.consumed {
            return Err(Error::State(
                "tape already consumed by backward; record on a fresh tape".into(),
            ));
        }
        let mut t = Tensor::new(shape, data)?;
        if tracked {
            t = t.tracked();
        }
        let id = self.nodes.len();
        self.nodes.push(t);
        self.ops.push(op);
        Ok(Var(id))
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.nodes[a.0].shape() != self.nodes[b.0].shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.nodes[a.0].shape(),
                self.nodes[b.0].shape()
            )));
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.same_shape(lhs, rhs, "add")?;
        let data = zip_map(self.nodes[lhs.0].data(), self.nodes[rhs.0].data(), |a, b| a + b);
        let tracked = self.tracked(lhs) || self.tracked(rhs);
        let shape = self.nodes[lhs.0].shape().to_vec();
        self.push(&shape, data, tracked, Op::Add { lhs, rhs })
    }

    pub fn sub(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.same_shape(lhs, rhs, "sub")?;
        let data = zip_map(self.nodes[lhs.0].data(), self.nodes[rhs.0].data(), |a, b| a - b);
        let tracked = self.tracked(lhs) || self.tracked(rhs);
        let shape = self.nodes[lhs.0].shape().to_vec();
        self.push(&shape, data, tracked, Op::Sub { lhs, rhs })
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.same_shape(lhs, rhs, "mul")?;
        let data = zip_map(self.nodes[lhs.0].data(), self.nodes[rhs.0].data(), |a, b| a * b);
        let tracked = self.tracked(lhs) || self.tracked(rhs);
        let shape = self.nodes[lhs.0].shape().to_vec();
        self.push(&shape, data, tracked, Op::Mul { lhs, rhs })
    }

    pub fn min_elem(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.same_shape(lhs, rhs, "min")?;
        let data = zip_map(self.nodes[lhs.0].data(), self.nodes[rhs.0].data(), f64::min);
        let tracked = self.tracked(lhs) || self.tracked(rhs);
        let shape = self.nodes[lhs.0].shape().to_vec();
        self.push(&shape, data, tracked, Op::Min { lhs, rhs })
    }

    pub fn neg(&mut self, input: Var) -> Result<Var> {
        let data = self.nodes[input.0].data().iter().map(|v| -v).collect();
        let tracked = self.tracked(input);
        let shape = self.nodes[input.0].shape().to_vec();
        self.push(&shape, data, tracked, Op::Neg { input })
    }

    /// Elementwise `x + offset`.
    pub fn shift(&mut self, input: Var, offset: f64) -> Result<Var> {
        let data = self.nodes[input.0].data().iter().map(|v| v + offset).collect();
        let tracked = self.tracked(input);
        let shape = self.nodes[input.0].shape().to_vec();
        self.push(&shape, data, tracked, Op::Shift { input })
    }

    /// Elementwise `factor * x`.
    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let data = self.nodes[input.0].data().iter().map(|v| factor * v).collect();
        let tracked = self.tracked(input);
        let shape = self.nodes[input.0].shape().to_vec();
        self.push(&shape, data, tracked, Op::Scale { input, factor })
    }

    /// Elementwise `sqrt(x + eps)` with the 1e-12 guard used by the
    /// euclidean-eps distance metric.
    pub fn sqrt_eps(&mut self, input: Var, eps: f64) -> Result<Var> {
        let data = self.nodes[input.0]
            .data()
            .iter()
            .map(|v| (v + eps).sqrt())
            .collect();
        let tracked = self.tracked(input);
        let shape = self.nodes[input.0].shape().to_vec();
        self.push(&shape, data, tracked, Op::SqrtEps { input })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let data = self.nodes[input.0].data().iter().map(|v| v.max(0.0)).collect();
        let tracked = self.tracked(input);
        let shape = self.nodes[input.0].shape().to_vec();
        self.push(&shape, data, tracked, Op::Relu { input })
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, input: Var) -> Result<Var> {
        let s: f64 = self.nodes[input.0].data().iter().sum();
        let tracked = self.tracked(input);
        self.push(&[1], vec![s], tracked, Op::SumAll { input })
    }

    pub fn mean_all(&mut self, input: Var) -> Result<Var> {
        let data = self.nodes[input.0].data();
        let m = data.iter().sum::<f64>() / data.len() as f64;
        let tracked = self.tracked(input);
        self.push(&[1], vec![m], tracked, Op::MeanAll { input })
    }

    // ---- rows of [N, C] ----

    /// Numerically stabilized log-softmax over the rows of an `[N, C]` tensor.
    pub fn log_softmax(&mut self, input: Var) -> Result<Var> {
        let t = &self.nodes[input.0];
        let shape = t.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Rank(format!(
                "log_softmax expects [N, C], got {:?}",
                shape
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        let x = t.data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &x[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - max - log_sum;
            }
        }
        let tracked = self.tracked(input);
        self.push(&shape, out, tracked, Op::LogSoftmax { input })
    }

    /// Mean of `-log_probs[i, labels[i]]`; the scalar head of both losses.
    pub fn nll_loss(&mut self, log_probs: Var, labels: &[usize]) -> Result<Var> {
        let t = &self.nodes[log_probs.0];
        let shape = t.shape();
        if shape.len() != 2 {
            return Err(Error::Rank(format!(
                "nll_loss expects [N, C] log-probabilities, got {:?}",
                shape
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        if labels.len() != n {
            return Err(Error::argument(format!(
                "nll_loss: {} labels for {} rows",
                labels.len(),
                n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::argument(format!(
                "label {bad} outside [0, {c})"
            )));
        }
        let data = t.data();
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(i, &y)| data[i * c + y])
            .sum::<f64>()
            / n as f64;
        let tracked = self.tracked(log_probs);
        self.push(
            &[1],
            vec![loss],
            tracked,
            Op::NllLoss {
                log_probs,
                labels: labels.to_vec(),
            },
        )
    }

    // ---- network layers ----

    /// Stride-1 same-padded 1-D convolution.
    ///
    /// `input` is `[N, C_in, T]`, `weight` `[C_out, C_in, K]`, `bias`
    /// `[C_out]`; the output keeps the input time length. Zero padding is
    /// `(K-1)/2` on each side for odd `K`; even kernels pad one extra column
    /// on the right.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.nodes[input.0].shape(),
            self.nodes[weight.0].shape(),
            self.nodes[bias.0].shape(),
        );
        if xs.len() != 3 || ws.len() != 3 || bs.len() != 1 {
            return Err(Error::shape(format!(
                "conv1d expects x[N,C,T], w[O,C,K], b[O]; got {:?}, {:?}, {:?}",
                xs, ws, bs
            )));
        }
        let (n, c_in, t) = (xs[0], xs[1], xs[2]);
        let (c_out, wc_in, k) = (ws[0], ws[1], ws[2]);
        if wc_in != c_in {
            return Err(Error::shape(format!(
                "conv1d: input has {c_in} channels, weight expects {wc_in}"
            )));
        }
        if bs[0] != c_out {
            return Err(Error::shape(format!(
                "conv1d: bias length {} != {c_out} output channels",
                bs[0]
            )));
        }
        let x = self.nodes[input.0].data();
        let w = self.nodes[weight.0].data();
        let b = self.nodes[bias.0].data();

        let cols = im2col(x, n, c_in, t, k);
        let nt = n * t;
        let mut y2d = vec![0.0; c_out * nt];
        dgemm(
            c_out,
            c_in * k,
            nt,
            w,
            (c_in * k) as isize,
            1,
            &cols,
            nt as isize,
            1,
            &mut y2d,
        );

        // y2d is [C_out, N*T]; scatter into [N, C_out, T] adding the bias.
        let mut y = vec![0.0; n * c_out * t];
        for i in 0..n {
            for co in 0..c_out {
                let src = &y2d[co * nt + i * t..co * nt + (i + 1) * t];
                let dst = &mut y[(i * c_out + co) * t..(i * c_out + co + 1) * t];
                let bv = b[co];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }

        let tracked = self.tracked(input) || self.tracked(weight) || self.tracked(bias);
        self.push(&[n, c_out, t], y, tracked, Op::Conv1d { input, weight, bias })
    }

    /// Batch normalization of `[N, C, T]` with externally supplied per-channel
    /// statistics. In train mode the statistics must be the current batch's
    /// (their dependence on the input is differentiated); in eval mode they
    /// are treated as constants.
    pub fn batchnorm1d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        train: bool,
    ) -> Result<Var> {
        let xs = self.nodes[input.0].shape();
        if xs.len() != 3 {
            return Err(Error::shape(format!("batchnorm1d expects [N,C,T], got {:?}", xs)));
        }
        let (n, c, t) = (xs[0], xs[1], xs[2]);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[v.0].shape() != [c] {
                return Err(Error::shape(format!(
                    "batchnorm1d: {name} shape {:?} != [{c}]",
                    self.nodes[v.0].shape()
                )));
            }
        }
        if mean.len() != c || var.len() != c {
            return Err(Error::shape(format!(
                "batchnorm1d: stats of length {}/{} for {c} channels",
                mean.len(),
                var.len()
            )));
        }

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let x = self.nodes[input.0].data();
        let g = self.nodes[gamma.0].data();
        let bt = self.nodes[beta.0].data();
        let mut y = vec![0.0; x.len()];
        for i in 0..n {
            for ch in 0..c {
                let scale = g[ch] * inv_std[ch];
                let off = bt[ch] - mean[ch] * scale;
                let base = (i * c + ch) * t;
                for j in 0..t {
                    y[base + j] = x[base + j] * scale + off;
                }
            }
        }

        let tracked = self.tracked(input) || self.tracked(gamma) || self.tracked(beta);
        self.push(
            &[n, c, t],
            y,
            tracked,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
                train,
            },
        )
    }

    /// Mean over the time axis: `[N, C, T] -> [N, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let xs = self.nodes[input.0].shape();
        if xs.len() != 3 {
            return Err(Error::shape(format!(
                "global_avg_pool expects [N,C,T], got {:?}",
                xs
            )));
        }
        let (n, c, t) = (xs[0], xs[1], xs[2]);
        let x = self.nodes[input.0].data();
        let mut y = vec![0.0; n * c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * t;
                y[i * c + ch] = x[base..base + t].iter().sum::<f64>() / t as f64;
            }
        }
        let tracked = self.tracked(input);
        self.push(&[n, c], y, tracked, Op::GlobalAvgPool { input })
    }

    /// Affine map `x @ weightᵀ + bias` with `x [N, E]`, `weight [C, E]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.nodes[input.0].shape(),
            self.nodes[weight.0].shape(),
            self.nodes[bias.0].shape(),
        );
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 {
            return Err(Error::shape(format!(
                "linear expects x[N,E], w[C,E], b[C]; got {:?}, {:?}, {:?}",
                xs, ws, bs
            )));
        }
        let (n, e) = (xs[0], xs[1]);
        let (c, we) = (ws[0], ws[1]);
        if we != e {
            return Err(Error::shape(format!(
                "linear: inner dimension mismatch, x has {e}, weight has {we}"
            )));
        }
        if bs[0] != c {
            return Err(Error::shape(format!("linear: bias length {} != {c}", bs[0])));
        }
        let x = self.nodes[input.0].data();
        let w = self.nodes[weight.0].data();
        let b = self.nodes[bias.0].data();
        let mut y = vec![0.0; n * c];
        dgemm(n, e, c, x, e as isize, 1, w, 1, e as isize, &mut y);
        for i in 0..n {
            for j in 0..c {
                y[i * c + j] += b[j];
            }
        }
        let tracked = self.tracked(input) || self.tracked(weight) || self.tracked(bias);
        self.push(&[n, c], y, tracked, Op::Linear { input, weight, bias })
    }

    /// Per-class mean of embedding rows. Returns the centroid matrix `[C, E]`
    /// (rows ordered by ascending class id) together with the class ids and
    /// per-class sample counts.
    pub fn class_mean(
        &mut self,
        input: Var,
        labels: &[usize],
    ) -> Result<(Var, Vec<usize>, Vec<usize>)> {
        let xs = self.nodes[input.0].shape();
        if xs.len() != 2 {
            return Err(Error::shape(format!("class_mean expects [N,E], got {:?}", xs)));
        }
        let (n, e) = (xs[0], xs[1]);
        if n == 0 || labels.is_empty() {
            return Err(Error::argument("class_mean: empty input"));
        }
        if labels.len() != n {
            return Err(Error::argument(format!(
                "class_mean: {} labels for {n} rows",
                labels.len()
            )));
        }

        let mut class_ids: Vec<usize> = labels.to_vec();
        class_ids.sort_unstable();
        class_ids.dedup();
        let c = class_ids.len();
        let row_of = |y: usize| class_ids.binary_search(&y).expect("label seen above");

        let mut counts = vec![0usize; c];
        let mut kappa = vec![0.0; c * e];
        let x = self.nodes[input.0].data();
        let mut rows = Vec::with_capacity(n);
        for (i, &y) in labels.iter().enumerate() {
            let r = row_of(y);
            rows.push(r);
            counts[r] += 1;
            for j in 0..e {
                kappa[r * e + j] += x[i * e + j];
            }
        }
        for r in 0..c {
            let inv = 1.0 / counts[r] as f64;
            for j in 0..e {
                kappa[r * e + j] *= inv;
            }
        }

        let tracked = self.tracked(input);
        let var = self.push(
            &[c, e],
            kappa,
            tracked,
            Op::ClassMean {
                input,
                rows,
                counts: counts.clone(),
            },
        )?;
        Ok((var, class_ids, counts))
    }

    /// Squared euclidean distances between embedding rows and centroid rows:
    /// `[N, E] x [C, E] -> [N, C]`.
    pub fn pairwise_sqdist(&mut self, emb: Var, centroids: Var) -> Result<Var> {
        let (es, cs) = (self.nodes[emb.0].shape(), self.nodes[centroids.0].shape());
        if es.len() != 2 || cs.len() != 2 {
            return Err(Error::shape(format!(
                "pairwise_sqdist expects [N,E] and [C,E], got {:?}, {:?}",
                es, cs
            )));
        }
        if es[1] != cs[1] {
            return Err(Error::shape(format!(
                "pairwise_sqdist: embedding size {} vs centroid size {}",
                es[1], cs[1]
            )));
        }
        let (n, e, c) = (es[0], es[1], cs[0]);
        let x = self.nodes[emb.0].data();
        let k = self.nodes[centroids.0].data();
        let mut d = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                let mut acc = 0.0;
                for q in 0..e {
                    let diff = x[i * e + q] - k[j * e + q];
                    acc += diff * diff;
                }
                d[i * c + j] = acc;
            }
        }
        let tracked = self.tracked(emb) || self.tracked(centroids);
        self.push(&[n, c], d, tracked, Op::PairwiseSqDist { emb, centroids })
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Populates the gradient of every
    /// tracked node (leaves included) and consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::State("tape already consumed by backward".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::State("backward on an empty tape".into()));
        }
        if self.nodes[loss.0].numel() != 1 {
            return Err(Error::Rank(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape()
            )));
        }

        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.numel()]).collect();
        grads[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            if grads[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            self.backprop_node(i, &g, &mut grads);
            grads[i] = g;
        }

        for (node, grad) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad() {
                node.set_grad(grad);
            }
        }
        self.consumed = true;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Add { lhs, rhs } => {
                add_into(&mut grads[lhs.0], g);
                add_into(&mut grads[rhs.0], g);
            }
            Op::Sub { lhs, rhs } => {
                add_into(&mut grads[lhs.0], g);
                for (d, s) in grads[rhs.0].iter_mut().zip(g) {
                    *d -= s;
                }
            }
            Op::Mul { lhs, rhs } => {
                let (a, b) = (self.nodes[lhs.0].data(), self.nodes[rhs.0].data());
                for (j, &gj) in g.iter().enumerate() {
                    grads[lhs.0][j] += gj * b[j];
                }
                for (j, &gj) in g.iter().enumerate() {
                    grads[rhs.0][j] += gj * a[j];
                }
            }
            Op::Min { lhs, rhs } => {
                let (a, b) = (self.nodes[lhs.0].data(), self.nodes[rhs.0].data());
                for (j, &gj) in g.iter().enumerate() {
                    if a[j] <= b[j] {
                        grads[lhs.0][j] += gj;
                    } else {
                        grads[rhs.0][j] += gj;
                    }
                }
            }
            Op::Neg { input } => {
                for (d, s) in grads[input.0].iter_mut().zip(g) {
                    *d -= s;
                }
            }
            Op::Shift { input } => add_into(&mut grads[input.0], g),
            Op::Scale { input, factor } => {
                for (d, s) in grads[input.0].iter_mut().zip(g) {
                    *d += factor * s;
                }
            }
            Op::SqrtEps { input } => {
                let y = self.nodes[i].data();
                for (j, &gj) in g.iter().enumerate() {
                    grads[input.0][j] += gj * 0.5 / y[j];
                }
            }
            Op::Relu { input } => {
                let x = self.nodes[input.0].data();
                for (j, &gj) in g.iter().enumerate() {
                    if x[j] > 0.0 {
                        grads[input.0][j] += gj;
                    }
                }
            }
            Op::LogSoftmax { input } => {
                let out = self.nodes[i].data();
                let c = self.nodes[i].shape()[1];
                let n = self.nodes[i].shape()[0];
                for r in 0..n {
                    let row_sum: f64 = g[r * c..(r + 1) * c].iter().sum();
                    for j in 0..c {
                        let idx = r * c + j;
                        grads[input.0][idx] += g[idx] - out[idx].exp() * row_sum;
                    }
                }
            }
            Op::SumAll { input } => {
                let gv = g[0];
                for d in grads[input.0].iter_mut() {
                    *d += gv;
                }
            }
            Op::MeanAll { input } => {
                let gv = g[0] / self.nodes[input.0].numel() as f64;
                for d in grads[input.0].iter_mut() {
                    *d += gv;
                }
            }
            Op::Conv1d { input, weight, bias } => {
                self.conv1d_backward(i, *input, *weight, *bias, g, grads);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                self.batchnorm_backward(i, *input, *gamma, *beta, mean, inv_std, *train, g, grads);
            }
            Op::GlobalAvgPool { input } => {
                let shape = self.nodes[input.0].shape();
                let (n, c, t) = (shape[0], shape[1], shape[2]);
                let inv_t = 1.0 / t as f64;
                for r in 0..n * c {
                    let gv = g[r] * inv_t;
                    for j in 0..t {
                        grads[input.0][r * t + j] += gv;
                    }
                }
            }
            Op::Linear { input, weight, bias } => {
                let xs = self.nodes[input.0].shape();
                let ws = self.nodes[weight.0].shape();
                let (n, e, c) = (xs[0], xs[1], ws[0]);
                let x = self.nodes[input.0].data();
                let w = self.nodes[weight.0].data();
                // dx[N,E] = g[N,C] @ w[C,E]
                let mut dx = vec![0.0; n * e];
                dgemm(n, c, e, g, c as isize, 1, w, e as isize, 1, &mut dx);
                add_into(&mut grads[input.0], &dx);
                // dw[C,E] = gᵀ[C,N] @ x[N,E]
                let mut dw = vec![0.0; c * e];
                dgemm(c, n, e, g, 1, c as isize, x, e as isize, 1, &mut dw);
                add_into(&mut grads[weight.0], &dw);
                for r in 0..n {
                    for j in 0..c {
                        grads[bias.0][j] += g[r * c + j];
                    }
                }
            }
            Op::ClassMean { input, rows, counts } => {
                let e = self.nodes[i].shape()[1];
                for (s, &r) in rows.iter().enumerate() {
                    let inv = 1.0 / counts[r] as f64;
                    for j in 0..e {
                        grads[input.0][s * e + j] += g[r * e + j] * inv;
                    }
                }
            }
            Op::PairwiseSqDist { emb, centroids } => {
                let es = self.nodes[emb.0].shape();
                let (n, e) = (es[0], es[1]);
                let c = self.nodes[centroids.0].shape()[0];
                let x = self.nodes[emb.0].data();
                let k = self.nodes[centroids.0].data();
                for s in 0..n {
                    for j in 0..c {
                        let gd = 2.0 * g[s * c + j];
                        if gd == 0.0 {
                            continue;
                        }
                        for q in 0..e {
                            let diff = x[s * e + q] - k[j * e + q];
                            grads[emb.0][s * e + q] += gd * diff;
                            grads[centroids.0][j * e + q] -= gd * diff;
                        }
                    }
                }
            }
            Op::NllLoss { log_probs, labels } => {
                let c = self.nodes[log_probs.0].shape()[1];
                let gv = g[0] / labels.len() as f64;
                for (s, &y) in labels.iter().enumerate() {
                    grads[log_probs.0][s * c + y] -= gv;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv1d_backward(
        &self,
        out: usize,
        input: Var,
        weight: Var,
        bias: Var,
        g: &[f64],
        grads: &mut [Vec<f64>],
    ) {
        let xs = self.nodes[input.0].shape();
        let ws = self.nodes[weight.0].shape();
        let (n, c_in, t) = (xs[0], xs[1], xs[2]);
        let (c_out, k) = (ws[0], ws[2]);
        debug_assert_eq!(self.nodes[out].shape(), [n, c_out, t]);
        let nt = n * t;
        let pad = (k - 1) / 2;

        // Pack g [N, C_out, T] into [C_out, N*T].
        let mut g2d = vec![0.0; c_out * nt];
        for i in 0..n {
            for co in 0..c_out {
                let src = &g[(i * c_out + co) * t..(i * c_out + co + 1) * t];
                g2d[co * nt + i * t..co * nt + (i + 1) * t].copy_from_slice(src);
            }
        }

        for co in 0..c_out {
            grads[bias.0][co] += g2d[co * nt..(co + 1) * nt].iter().sum::<f64>();
        }

        // The im2col matrix is recomputed rather than saved: it is pure data
        // movement and saving it would multiply peak memory by the kernel size.
        let x = self.nodes[input.0].data();
        let cols = im2col(x, n, c_in, t, k);

        // dW[C_out, C_in*K] = g2d [C_out, N*T] @ colsᵀ [N*T, C_in*K]
        let mut dw = vec![0.0; c_out * c_in * k];
        dgemm(
            c_out,
            nt,
            c_in * k,
            &g2d,
            nt as isize,
            1,
            &cols,
            1,
            nt as isize,
            &mut dw,
        );
        add_into(&mut grads[weight.0], &dw);

        // dCols[C_in*K, N*T] = wᵀ [C_in*K, C_out] @ g2d [C_out, N*T]
        let w = self.nodes[weight.0].data();
        let mut dcols = vec![0.0; c_in * k * nt];
        dgemm(
            c_in * k,
            c_out,
            nt,
            w,
            1,
            (c_in * k) as isize,
            &g2d,
            nt as isize,
            1,
            &mut dcols,
        );

        // col2im scatter-add back into dx.
        let dx = &mut grads[input.0];
        for ci in 0..c_in {
            for kk in 0..k {
                let shift = kk as isize - pad as isize;
                let row = &dcols[(ci * k + kk) * nt..(ci * k + kk + 1) * nt];
                let lo = (-shift).max(0) as usize;
                let hi = (t as isize - shift).min(t as isize).max(0) as usize;
                for i in 0..n {
                    let dst_base = ((i * c_in + ci) * t) as isize + shift;
                    for j in lo..hi {
                        dx[(dst_base + j as isize) as usize] += row[i * t + j];
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn batchnorm_backward(
        &self,
        _out: usize,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        train: bool,
        g: &[f64],
        grads: &mut [Vec<f64>],
    ) {
        let xs = self.nodes[input.0].shape();
        let (n, c, t) = (xs[0], xs[1], xs[2]);
        let x = self.nodes[input.0].data();
        let gam = self.nodes[gamma.0].data();
        let m = (n * t) as f64;

        for ch in 0..c {
            let mut sum_dy = 0.0;
            let mut sum_dy_xh = 0.0;
            for i in 0..n {
                let base = (i * c + ch) * t;
                for j in 0..t {
                    let dy = g[base + j];
                    let xh = (x[base + j] - mean[ch]) * inv_std[ch];
                    sum_dy += dy;
                    sum_dy_xh += dy * xh;
                }
            }
            grads[beta.0][ch] += sum_dy;
            grads[gamma.0][ch] += sum_dy_xh;

            let scale = gam[ch] * inv_std[ch];
            if train {
                let mean_dy = sum_dy / m;
                let mean_dy_xh = sum_dy_xh / m;
                for i in 0..n {
                    let base = (i * c + ch) * t;
                    for j in 0..t {
                        let dy = g[base + j];
                        let xh = (x[base + j] - mean[ch]) * inv_std[ch];
                        grads[input.0][base + j] += scale * (dy - mean_dy - xh * mean_dy_xh);
                    }
                }
            } else {
                for i in 0..n {
                    let base = (i * c + ch) * t;
                    for j in 0..t {
                        grads[input.0][base + j] += scale * g[base + j];
                    }
                }
            }
        }
    }
}

/// Per-channel mean and population variance of an `[N, C, T]` tensor over the
/// batch and time axes. Errors when fewer than two values per channel exist.
pub fn channel_stats(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::shape(format!("channel_stats expects [N,C,T], got {:?}", shape)));
    }
    let (n, c, t) = (shape[0], shape[1], shape[2]);
    if n * t < 2 {
        return Err(Error::DegenerateBatch(format!(
            "batch norm needs at least 2 values per channel, got N*T = {}",
            n * t
        )));
    }
    let data = x.data();
    let m = (n * t) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for i in 0..n {
            let base = (i * c + ch) * t;
            acc += data[base..base + t].iter().sum::<f64>();
        }
        mean[ch] = acc / m;
    }
    for ch in 0..c {
        let mut acc = 0.0;
        for i in 0..n {
            let base = (i * c + ch) * t;
            for j in 0..t {
                let d = data[base + j] - mean[ch];
                acc += d * d;
            }
        }
        var[ch] = acc / m;
    }
    Ok((mean, var))
}

/// Row-major GEMM: `c[m,n] = a @ b` where `a` is `m×k` with strides
/// `(rsa, csa)` and `b` is `k×n` with strides `(rsb, csb)`.
#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    debug_assert!(c.len() == m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Lower `[N, C, T]` input into the `[C*K, N*T]` patch matrix of a stride-1
/// same-padded length-K convolution.
fn im2col(x: &[f64], n: usize, c: usize, t: usize, k: usize) -> Vec<f64> {
    let pad = (k - 1) / 2;
    let nt = n * t;
    let mut cols = vec![0.0; c * k * nt];
    for ci in 0..c {
        for kk in 0..k {
            let shift = kk as isize - pad as isize;
            let row = &mut cols[(ci * k + kk) * nt..(ci * k + kk + 1) * nt];
            let lo = (-shift).max(0) as usize;
            let hi = ((t as isize - shift).min(t as isize)).max(0) as usize;
            if lo >= hi {
                continue;
            }
            for i in 0..n {
                let src_base = ((i * c + ci) * t) as isize + shift;
                row[i * t + lo..i * t + hi]
                    .copy_from_slice(&x[(src_base + lo as isize) as usize..(src_base + hi as isize) as usize]);
            }
        }
    }
    cols
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: &[usize], data: &[f64]) -> Var {
        tape.leaf(Tensor::new(shape, data.to_vec()).unwrap().tracked())
    }

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
            assert!(
                (a - e).abs() <= tol,
                "index {i}: {a} vs {e} (tol {tol})"
            );
        }
    }

    #[test]
    fn conv1d_unit_kernel_scales() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 3], &[1.0, 2.0, 3.0]);
        let w = leaf(&mut tape, &[1, 1, 1], &[2.0]);
        let b = leaf(&mut tape, &[1], &[0.0]);
        let y = tape.conv1d(x, w, b).unwrap();
        assert_close(tape.value(y).data(), &[2.0, 4.0, 6.0], 0.0);
    }

    #[test]
    fn conv1d_box_kernel_with_padding() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 3], &[1.0, 2.0, 3.0]);
        let w = leaf(&mut tape, &[1, 1, 3], &[1.0, 1.0, 1.0]);
        let b = leaf(&mut tape, &[1], &[0.0]);
        let y = tape.conv1d(x, w, b).unwrap();
        assert_close(tape.value(y).data(), &[3.0, 6.0, 5.0], 1e-12);
    }

    #[test]
    fn conv1d_zero_weight_yields_bias() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 2, 4], &[0.5; 16]);
        let w = leaf(&mut tape, &[3, 2, 3], &[0.0; 18]);
        let b = leaf(&mut tape, &[3], &[-1.5, 0.0, 2.5]);
        let y = tape.conv1d(x, w, b).unwrap();
        let out = tape.value(y).data();
        for n in 0..2 {
            for co in 0..3 {
                for t in 0..4 {
                    assert_eq!(out[(n * 3 + co) * 4 + t], [-1.5, 0.0, 2.5][co]);
                }
            }
        }
    }

    #[test]
    fn conv1d_channel_mismatch_is_shape_error() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2, 3], &[0.0; 6]);
        let w = leaf(&mut tape, &[1, 1, 3], &[0.0; 3]);
        let b = leaf(&mut tape, &[1], &[0.0]);
        assert!(matches!(tape.conv1d(x, w, b), Err(Error::Shape(_))));
    }

    /// Direct-summation convolution oracle, independent of the GEMM path.
    fn conv1d_reference(
        x: &[f64],
        w: &[f64],
        b: &[f64],
        n: usize,
        c_in: usize,
        t: usize,
        c_out: usize,
        k: usize,
    ) -> Vec<f64> {
        let pad = (k as isize - 1) / 2;
        let mut y = vec![0.0; n * c_out * t];
        for i in 0..n {
            for co in 0..c_out {
                for tt in 0..t {
                    let mut acc = b[co];
                    for ci in 0..c_in {
                        for kk in 0..k {
                            let src = tt as isize + kk as isize - pad;
                            if src >= 0 && (src as usize) < t {
                                acc += x[(i * c_in + ci) * t + src as usize]
                                    * w[(co * c_in + ci) * k + kk];
                            }
                        }
                    }
                    y[(i * c_out + co) * t + tt] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv1d_matches_reference_on_random_shapes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let n = rng.gen_range(1..=3);
            let c_in = rng.gen_range(1..=4);
            let c_out = rng.gen_range(1..=4);
            let t = rng.gen_range(1..=16);
            let k = [1, 2, 3, 5, 8][rng.gen_range(0..5)];
            let x: Vec<f64> = (0..n * c_in * t).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let w: Vec<f64> = (0..c_out * c_in * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..c_out).map(|_| rng.gen_range(-2.0..2.0)).collect();

            let mut tape = Tape::new();
            let xv = leaf(&mut tape, &[n, c_in, t], &x);
            let wv = leaf(&mut tape, &[c_out, c_in, k], &w);
            let bv = leaf(&mut tape, &[c_out], &b);
            let y = tape.conv1d(xv, wv, bv).unwrap();
            let expected = conv1d_reference(&x, &w, &b, n, c_in, t, c_out, k);
            assert_close(tape.value(y).data(), &expected, 1e-12);
        }
    }

    #[test]
    fn batchnorm_constant_input_returns_beta() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 2, 3], &[4.2; 12]);
        let gamma = leaf(&mut tape, &[2], &[1.0, 3.0]);
        let beta = leaf(&mut tape, &[2], &[0.5, -0.5]);
        let (mean, var) = channel_stats(tape.value(x)).unwrap();
        assert_close(&var, &[0.0, 0.0], 0.0);
        let y = tape.batchnorm1d(x, gamma, beta, &mean, &var, true).unwrap();
        let out = tape.value(y).data();
        for i in 0..2 {
            for ch in 0..2 {
                for t in 0..3 {
                    assert_eq!(out[(i * 2 + ch) * 3 + t], [0.5, -0.5][ch]);
                }
            }
        }
    }

    #[test]
    fn batchnorm_standardized_input_is_nearly_identity() {
        // Batch mean 0 and population variance 1 per channel.
        let vals = [-1.0, 1.0, -1.0, 1.0];
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 1, 2], &vals);
        let gamma = leaf(&mut tape, &[1], &[1.0]);
        let beta = leaf(&mut tape, &[1], &[0.0]);
        let (mean, var) = channel_stats(tape.value(x)).unwrap();
        let y = tape.batchnorm1d(x, gamma, beta, &mean, &var, true).unwrap();
        assert_close(tape.value(y).data(), &vals, 1e-4);
    }

    #[test]
    fn batchnorm_eval_matches_scalar_closed_form() {
        let (m, v, g, b, u) = (0.3, 2.0, 1.7, -0.2, 5.0);
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 2], &[u, u]);
        let gamma = leaf(&mut tape, &[1], &[g]);
        let beta = leaf(&mut tape, &[1], &[b]);
        let y = tape.batchnorm1d(x, gamma, beta, &[m], &[v], false).unwrap();
        let expected = g * (u - m) / (v + BN_EPS).sqrt() + b;
        assert_close(tape.value(y).data(), &[expected, expected], 1e-12);
    }

    #[test]
    fn channel_stats_rejects_single_value_batches() {
        let x = Tensor::new(&[1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(channel_stats(&x), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], &[-1.0, 0.0, 2.0]);
        let y = tape.relu(x).unwrap();
        assert_close(tape.value(y).data(), &[0.0, 0.0, 2.0], 0.0);
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_close(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0], 0.0);
    }

    #[test]
    fn relu_all_negative_zeroes_gradient() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], &[-3.0, -0.5, -1e-9]);
        let y = tape.relu(x).unwrap();
        assert_close(tape.value(y).data(), &[0.0, 0.0, 0.0], 0.0);
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_close(tape.grad(x).unwrap(), &[0.0, 0.0, 0.0], 0.0);
    }

    #[test]
    fn relu_all_positive_passes_through() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], &[3.0, 0.5, 1e-9]);
        let y = tape.relu(x).unwrap();
        assert_close(tape.value(y).data(), &[3.0, 0.5, 1e-9], 0.0);
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_close(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0], 0.0);
    }

    #[test]
    fn global_avg_pool_examples() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let y = tape.global_avg_pool(x).unwrap();
        assert_close(tape.value(y).data(), &[2.5], 1e-15);

        let x2 = leaf(&mut tape, &[1, 2, 2], &[1.0, 1.0, 2.0, 4.0]);
        let y2 = tape.global_avg_pool(x2).unwrap();
        assert_close(tape.value(y2).data(), &[1.0, 3.0], 1e-15);
    }

    #[test]
    fn global_avg_pool_backward_distributes() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let y = tape.global_avg_pool(x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_close(tape.grad(x).unwrap(), &[0.25; 4], 1e-15);
    }

    #[test]
    fn linear_identity_weight_is_identity() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = leaf(&mut tape, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = leaf(&mut tape, &[2], &[0.0, 0.0]);
        let y = tape.linear(x, w, b).unwrap();
        assert_close(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0], 1e-15);
    }

    #[test]
    fn linear_dot_product_example() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2], &[1.0, 2.0]);
        let w = leaf(&mut tape, &[1, 2], &[3.0, 4.0]);
        let b = leaf(&mut tape, &[1], &[1.0]);
        let y = tape.linear(x, w, b).unwrap();
        assert_close(tape.value(y).data(), &[12.0], 1e-15);
    }

    #[test]
    fn linear_zero_weight_repeats_bias() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3, 2], &[9.0; 6]);
        let w = leaf(&mut tape, &[2, 2], &[0.0; 4]);
        let b = leaf(&mut tape, &[2], &[0.5, -0.5]);
        let y = tape.linear(x, w, b).unwrap();
        assert_close(tape.value(y).data(), &[0.5, -0.5, 0.5, -0.5, 0.5, -0.5], 0.0);
    }

    #[test]
    fn linear_inner_dim_mismatch_errors() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 3], &[0.0; 3]);
        let w = leaf(&mut tape, &[2, 2], &[0.0; 4]);
        let b = leaf(&mut tape, &[2], &[0.0; 2]);
        assert!(matches!(tape.linear(x, w, b), Err(Error::Shape(_))));
    }

    #[test]
    fn log_softmax_uniform_row() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2], &[0.0, 0.0]);
        let y = tape.log_softmax(x).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert_close(tape.value(y).data(), &[-ln2, -ln2], 1e-15);
    }

    #[test]
    fn log_softmax_shift_invariance_and_normalization() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 3], &[0.3, -1.2, 2.0]);
        let y = tape.log_softmax(x).unwrap();
        let xs = leaf(&mut tape, &[1, 3], &[0.3 + 17.5, -1.2 + 17.5, 2.0 + 17.5]);
        let ys = tape.log_softmax(xs).unwrap();
        let (a, b) = (tape.value(y).data().to_vec(), tape.value(ys).data().to_vec());
        assert_close(&a, &b, 1e-12);
        let sum_exp: f64 = a.iter().map(|v| v.exp()).sum();
        assert!((sum_exp - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_extreme_values_do_not_overflow() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2], &[1000.0, 0.0]);
        let y = tape.log_softmax(x).unwrap();
        let out = tape.value(y).data();
        assert!(out[0].abs() < 1e-12);
        assert!((out[1] + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn backward_through_squared_value_accumulates() {
        // f(x) = sum(x * x) uses x twice; gradient must be 2x.
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1], &[3.0]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_close(tape.grad(x).unwrap(), &[6.0], 0.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], &[1.0, 2.0]);
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Rank(_))));
    }

    #[test]
    fn backward_consumes_the_tape() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1], &[2.0]);
        let loss = tape.sum_all(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::State(_))));
        assert!(matches!(tape.relu(x), Err(Error::State(_))));
    }

    #[test]
    fn class_mean_two_point_average() {
        let mut tape = Tape::new();
        let emb = leaf(&mut tape, &[2, 2], &[1.0, 1.0, 3.0, 3.0]);
        let (kappa, ids, counts) = tape.class_mean(emb, &[0, 0]).unwrap();
        assert_eq!(ids, vec![0]);
        assert_eq!(counts, vec![2]);
        assert_close(tape.value(kappa).data(), &[2.0, 2.0], 1e-15);
    }

    #[test]
    fn class_mean_per_class_rows() {
        let mut tape = Tape::new();
        let emb = leaf(&mut tape, &[3, 2], &[0.0, 0.0, 2.0, 0.0, 0.0, 4.0]);
        let (kappa, ids, counts) = tape.class_mean(emb, &[0, 0, 1]).unwrap();
        assert_eq!(ids, vec![0, 1]);
        assert_eq!(counts, vec![2, 1]);
        assert_close(tape.value(kappa).data(), &[1.0, 0.0, 0.0, 4.0], 1e-15);
    }

    #[test]
    fn pairwise_sqdist_triangle() {
        let mut tape = Tape::new();
        let emb = leaf(&mut tape, &[1, 2], &[0.0, 0.0]);
        let kappa = leaf(&mut tape, &[1, 2], &[3.0, 4.0]);
        let d = tape.pairwise_sqdist(emb, kappa).unwrap();
        assert_close(tape.value(d).data(), &[25.0], 1e-12);
        let e = tape.sqrt_eps(d, 1e-12).unwrap();
        assert!((tape.value(e).data()[0] - 5.0).abs() < 1e-6);
    }

    #[test]
    fn min_elem_routes_gradient_to_smaller_side() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2], &[1.0, 5.0]);
        let b = leaf(&mut tape, &[2], &[2.0, 4.0]);
        let y = tape.min_elem(a, b).unwrap();
        assert_close(tape.value(y).data(), &[1.0, 4.0], 0.0);
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_close(tape.grad(a).unwrap(), &[1.0, 0.0], 0.0);
        assert_close(tape.grad(b).unwrap(), &[0.0, 1.0], 0.0);
    }

    #[test]
    fn binding_accumulates_into_parameter_grads() {
        let mut p = Parameter::new("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        for expected in [[2.0, -4.0], [4.0, -8.0]] {
            let mut tape = Tape::new();
            let binding = tape.bind([&p]);
            let w = binding.var("w").unwrap();
            let sq = tape.mul(w, w).unwrap();
            let loss = tape.sum_all(sq).unwrap();
            tape.backward(loss).unwrap();
            tape.accumulate_grads(&binding, vec![&mut p]).unwrap();
            assert_close(p.grad().unwrap(), &expected, 1e-15);
        }
    }
}
