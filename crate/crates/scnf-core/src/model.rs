//! The semi-conditional model: a large unconditional stack maps `x` to
//! `(z_f, z_aux)`, then a small class-conditional head scores `z_f` per
//! class. Marginalizing over the `K` labels costs one pass of the big
//! stack plus `K` cheap head passes; instrumented counters expose exactly
//! that.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Ctx, Node, ParamId, ParamStore};
use crate::layers::FlowStack;
use crate::tensor::Tensor;

pub const LN_2PI: f64 = 1.8378770664093453;

/// Forward-pass counters (per batch for the unconditional stack, per
/// evaluated class for the head).
#[derive(Debug, Default)]
pub struct PassCounters {
    fw: AtomicU64,
    hphi: AtomicU64,
}

impl PassCounters {
    pub fn reset(&self) {
        self.fw.store(0, Ordering::Relaxed);
        self.hphi.store(0, Ordering::Relaxed);
    }

    pub fn fw(&self) -> u64 {
        self.fw.load(Ordering::Relaxed)
    }

    pub fn hphi(&self) -> u64 {
        self.hphi.load(Ordering::Relaxed)
    }
}

/// Gaussian mixture head: one diagonal Gaussian over `z_f` per class.
#[derive(Debug, Clone)]
pub struct GmmHead {
    pub means: ParamId,
    pub log_vars: ParamId,
    pub k: usize,
    pub dim: usize,
}

impl GmmHead {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        k: usize,
        dim: usize,
        init_std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let means = store.register(
            format!("{prefix}.means"),
            crate::net::randn_tensor(vec![k, dim], init_std, rng),
        )?;
        let log_vars =
            store.register(format!("{prefix}.log_vars"), Tensor::zeros(vec![k, dim]))?;
        Ok(GmmHead {
            means,
            log_vars,
            k,
            dim,
        })
    }
}

/// Class-conditional part of the model.
#[derive(Debug, Clone)]
pub enum CondHead {
    Flow {
        stack: FlowStack,
        /// Log-variances of the zero-mean prior over the head output.
        prior_logvar: ParamId,
    },
    Gmm(GmmHead),
}

/// Full semi-conditional model.
#[derive(Debug)]
pub struct ScnfModel {
    pub store: ParamStore,
    pub fw: FlowStack,
    pub head: CondHead,
    pub k: usize,
    pub input_dim: usize,
    pub split_dim: usize,
    pub counters: PassCounters,
}

impl Clone for ScnfModel {
    fn clone(&self) -> Self {
        ScnfModel {
            store: self.store.clone(),
            fw: self.fw.clone(),
            head: self.head.clone(),
            k: self.k,
            input_dim: self.input_dim,
            split_dim: self.split_dim,
            counters: PassCounters::default(),
        }
    }
}

/// One-hot rows for a slice of class labels.
pub fn one_hot_rows(ys: &[usize], k: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(vec![ys.len(), k]);
    for (i, &y) in ys.iter().enumerate() {
        if y >= k {
            return Err(Error::Argument(format!("class index {y} out of range (K={k})")));
        }
        t.as_mut_slice()[i * k + y] = 1.0;
    }
    Ok(t)
}

/// log-sum-exp of a slice.
pub fn lse_slice(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax of a slice.
pub fn softmax_slice(v: &[f64]) -> Vec<f64> {
    let l = lse_slice(v);
    v.iter().map(|x| (x - l).exp()).collect()
}

/// Standard-normal log-density per row of a (rows, d) node.
fn log_normal_std(ctx: &mut Ctx, z: Node) -> Result<Node> {
    let d = ctx.value(z).cols();
    let sq = ctx.mul(z, z)?;
    let s = ctx.sum_rows(sq)?;
    let half = ctx.scale(s, -0.5)?;
    ctx.add_scalar(half, -0.5 * d as f64 * LN_2PI)
}

/// Zero-mean diagonal-covariance log-density per row; `logvar` is a (d,)
/// parameter node.
fn log_normal_diag(ctx: &mut Ctx, z: Node, logvar: Node) -> Result<Node> {
    let (rows, d) = {
        let t = ctx.value(z);
        (t.rows(), t.cols())
    };
    let lv_row = ctx.reshape(logvar, &[1, d])?;
    let lv_bc = ctx.broadcast(lv_row, &[rows, d])?;
    let neg_lv = ctx.scale(lv_bc, -1.0)?;
    let prec = ctx.exp(neg_lv);
    let sq = ctx.mul(z, z)?;
    let q = ctx.mul(sq, prec)?;
    let s = ctx.sum_rows(q)?;
    let lv_sum = ctx.sum_all(logvar);
    let lv_sum = ctx.broadcast(lv_sum, &[rows])?;
    let t = ctx.add(s, lv_sum)?;
    let half = ctx.scale(t, -0.5)?;
    ctx.add_scalar(half, -0.5 * d as f64 * LN_2PI)
}

/// log-sum-exp along rows of a (rows, k) node. The row max enters as a
/// detached constant, which leaves the gradient exact.
pub fn lse_rows(ctx: &mut Ctx, scores: Node) -> Result<Node> {
    let (rows, k) = {
        let t = ctx.value(scores);
        (t.rows(), t.cols())
    };
    let maxes: Vec<f64> = (0..rows)
        .map(|i| {
            ctx.value(scores)
                .row(i)
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let m = ctx.constant(Tensor::new(vec![rows, 1], maxes.clone())?);
    let m_bc = ctx.broadcast(m, &[rows, k])?;
    let shifted = ctx.sub(scores, m_bc)?;
    let e = ctx.exp(shifted);
    let s = ctx.sum_rows(e)?;
    let l = ctx.log(s)?;
    let m_flat = ctx.constant(Tensor::from_vec(maxes));
    ctx.add(l, m_flat)
}

/// Intermediate nodes produced while scoring a batch.
pub struct JointNodes {
    /// (rows, K): per-class joint log-likelihood log p(x, y=k).
    pub joint: Node,
    /// (rows, split_dim): deepest latent components.
    pub z_f: Node,
}

impl ScnfModel {
    // Layer ids index into the ctx's store; a store with the same layout is
    // interchangeable (gradcheck drives a structural clone this way).
    fn check_ctx(&self, ctx: &Ctx) {
        debug_assert_eq!(ctx.store.len(), self.store.len(), "param store layout mismatch");
    }

    /// Head log-score `log p(z_f | y=k) ` for all K classes: (rows, K).
    fn head_scores(&self, ctx: &mut Ctx, z_f: Node) -> Result<Node> {
        self.check_ctx(ctx);
        let (rows, d) = {
            let t = ctx.value(z_f);
            (t.rows(), t.cols())
        };
        let k = self.k;
        match &self.head {
            CondHead::Flow { stack, prior_logvar } => {
                // Replicate each row K times and condition on every class in
                // one batched pass: row r of the replica is (example r / K,
                // class r % K).
                let z3 = ctx.reshape(z_f, &[rows, 1, d])?;
                let zb = ctx.broadcast(z3, &[rows, k, d])?;
                let zrep = ctx.reshape(zb, &[rows * k, d])?;
                let ys: Vec<usize> = (0..rows * k).map(|r| r % k).collect();
                let oh = ctx.constant(one_hot_rows(&ys, k)?);
                let out = stack.forward(ctx, zrep, Some(oh))?;
                let mut parts = out.aux.clone();
                parts.push(out.z);
                let z_h = ctx.concat_cols(&parts)?;
                let lv = ctx.param(*prior_logvar);
                let prior = log_normal_diag(ctx, z_h, lv)?;
                let score = ctx.add(out.logdet, prior)?;
                self.counters.hphi.fetch_add(k as u64, Ordering::Relaxed);
                ctx.reshape(score, &[rows, k])
            }
            CondHead::Gmm(g) => {
                let means = ctx.param(g.means);
                let lvs = ctx.param(g.log_vars);
                let mut cols = Vec::with_capacity(k);
                for c in 0..k {
                    let mu = ctx.slice_rows(means, c, c + 1)?;
                    let mu = ctx.broadcast(mu, &[rows, d])?;
                    let lv = ctx.slice_rows(lvs, c, c + 1)?;
                    let lv_bc = ctx.broadcast(lv, &[rows, d])?;
                    let diff = ctx.sub(z_f, mu)?;
                    let sq = ctx.mul(diff, diff)?;
                    let neg_lv = ctx.scale(lv_bc, -1.0)?;
                    let prec = ctx.exp(neg_lv);
                    let q = ctx.mul(sq, prec)?;
                    let s = ctx.sum_rows(q)?;
                    let lv_s = ctx.sum_rows(lv)?;
                    let lv_s = ctx.broadcast(lv_s, &[rows])?;
                    let t = ctx.add(s, lv_s)?;
                    let half = ctx.scale(t, -0.5)?;
                    let sc = ctx.add_scalar(half, -0.5 * d as f64 * LN_2PI)?;
                    cols.push(ctx.reshape(sc, &[rows, 1])?);
                }
                self.counters.hphi.fetch_add(k as u64, Ordering::Relaxed);
                ctx.concat_cols(&cols)
            }
        }
    }

    /// Tape evaluation of log p(x, y=k) for every class of every row.
    /// Exactly one unconditional pass and K head passes.
    pub fn joint_matrix(&self, ctx: &mut Ctx, x: Node) -> Result<JointNodes> {
        self.check_ctx(ctx);
        let rows = ctx.value(x).rows();
        let out = self.fw.forward(ctx, x, None)?;
        self.counters.fw.fetch_add(1, Ordering::Relaxed);
        let mut base = out.logdet;
        for &aux in &out.aux {
            let lp = log_normal_std(ctx, aux)?;
            base = ctx.add(base, lp)?;
        }
        base = ctx.add_scalar(base, -(self.k as f64).ln())?;
        let scores = self.head_scores(ctx, out.z)?;
        let base2 = ctx.reshape(base, &[rows, 1])?;
        let base_bc = ctx.broadcast(base2, &[rows, self.k])?;
        let joint = ctx.add(scores, base_bc)?;
        Ok(JointNodes { joint, z_f: out.z })
    }

    /// Per-class joint values for a batch (plain, no gradients kept).
    pub fn joint_values(&self, x: &Tensor) -> Result<Tensor> {
        let mut ctx = Ctx::new(&self.store);
        let xn = ctx.input(x.clone());
        let jn = self.joint_matrix(&mut ctx, xn)?;
        Ok(ctx.value(jn.joint).clone())
    }

    /// `(z_f, z_aux, logdet)` for a batch. `z_aux` concatenates the
    /// factored-out parts in stack order (zero columns when there are none).
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor, Vec<f64>)> {
        let (z_f, aux, logdet) = self.fw.forward_values(&self.store, x, None)?;
        self.counters.fw.fetch_add(1, Ordering::Relaxed);
        let z_aux = if aux.is_empty() {
            Tensor::zeros(vec![x.rows(), 0])
        } else {
            let refs: Vec<&Tensor> = aux.iter().collect();
            concat_refs(&refs)
        };
        Ok((z_f, z_aux, logdet))
    }

    /// Factored parts of the unconditional stack for a batch, kept separate.
    pub fn encode_parts(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>, Vec<f64>)> {
        let out = self.fw.forward_values(&self.store, x, None)?;
        self.counters.fw.fetch_add(1, Ordering::Relaxed);
        Ok(out)
    }

    /// log p(x, y) for a single example (1, d) or flat (d,).
    pub fn log_joint(&self, x: &Tensor, y: usize) -> Result<f64> {
        if y >= self.k {
            return Err(Error::Argument(format!(
                "class index {y} out of range (K={})",
                self.k
            )));
        }
        let x = as_row(x, self.input_dim)?;
        Ok(self.joint_values(&x)?.as_slice()[y])
    }

    /// log p(x) for a single example, as a stabilized log-sum-exp over the
    /// per-class joints.
    pub fn log_marginal(&self, x: &Tensor) -> Result<f64> {
        let x = as_row(x, self.input_dim)?;
        let j = self.joint_values(&x)?;
        Ok(lse_slice(j.row(0)))
    }

    /// log p(x) for every row of a batch.
    pub fn log_marginal_batch(&self, x: &Tensor) -> Result<Vec<f64>> {
        let j = self.joint_values(x)?;
        Ok((0..j.rows()).map(|i| lse_slice(j.row(i))).collect())
    }

    /// Posterior over labels for a single example.
    pub fn posterior(&self, x: &Tensor) -> Result<Vec<f64>> {
        let x = as_row(x, self.input_dim)?;
        let j = self.joint_values(&x)?;
        Ok(softmax_slice(j.row(0)))
    }

    /// Argmax class per row, ties broken by the lowest index.
    pub fn classify_batch(&self, x: &Tensor) -> Result<Vec<usize>> {
        let j = self.joint_values(x)?;
        Ok((0..j.rows()).map(|i| argmax_first(j.row(i))).collect())
    }

    pub fn classify(&self, x: &Tensor) -> Result<usize> {
        let x = as_row(x, self.input_dim)?;
        Ok(self.classify_batch(&x)?[0])
    }

    /// Head output `z_h` (full split dimension) and its log-det for a batch
    /// encoded with the given per-row labels.
    pub fn head_forward(&self, z_f: &Tensor, ys: &[usize]) -> Result<(Tensor, Vec<f64>)> {
        match &self.head {
            CondHead::Flow { stack, .. } => {
                let oh = one_hot_rows(ys, self.k)?;
                let (zfinal, aux, ld) = stack.forward_values(&self.store, z_f, Some(&oh))?;
                self.counters.hphi.fetch_add(1, Ordering::Relaxed);
                let mut parts: Vec<&Tensor> = aux.iter().collect();
                parts.push(&zfinal);
                Ok((concat_refs(&parts), ld))
            }
            CondHead::Gmm(g) => {
                let means = self.store.value(g.means);
                let lvs = self.store.value(g.log_vars);
                let mut out = z_f.clone();
                let mut ld = vec![0.0; z_f.rows()];
                for (i, &y) in ys.iter().enumerate() {
                    if y >= self.k {
                        return Err(Error::Argument(format!(
                            "class index {y} out of range (K={})",
                            self.k
                        )));
                    }
                    let row = &mut out.as_mut_slice()[i * g.dim..(i + 1) * g.dim];
                    for j in 0..g.dim {
                        let mu = means.as_slice()[y * g.dim + j];
                        let lv = lvs.as_slice()[y * g.dim + j];
                        row[j] = (row[j] - mu) * (-0.5 * lv).exp();
                        ld[i] -= 0.5 * lv;
                    }
                }
                self.counters.hphi.fetch_add(1, Ordering::Relaxed);
                Ok((out, ld))
            }
        }
    }

    /// Inverse of [`Self::head_forward`].
    pub fn head_inverse(&self, z_h: &Tensor, ys: &[usize]) -> Result<Tensor> {
        match &self.head {
            CondHead::Flow { stack, .. } => {
                let oh = one_hot_rows(ys, self.k)?;
                // z_h = [aux parts..., final]; split it back
                let mut parts = Vec::new();
                let mut start = 0;
                for &d in &stack.aux_dims {
                    parts.push(slice_cols_plain(z_h, start, start + d));
                    start += d;
                }
                let zfinal = slice_cols_plain(z_h, start, z_h.cols());
                stack.inverse(&self.store, &zfinal, &parts, Some(&oh))
            }
            CondHead::Gmm(g) => {
                let means = self.store.value(g.means);
                let lvs = self.store.value(g.log_vars);
                let mut out = z_h.clone();
                for (i, &y) in ys.iter().enumerate() {
                    if y >= self.k {
                        return Err(Error::Argument(format!(
                            "class index {y} out of range (K={})",
                            self.k
                        )));
                    }
                    let row = &mut out.as_mut_slice()[i * g.dim..(i + 1) * g.dim];
                    for j in 0..g.dim {
                        let mu = means.as_slice()[y * g.dim + j];
                        let lv = lvs.as_slice()[y * g.dim + j];
                        row[j] = row[j] * (0.5 * lv).exp() + mu;
                    }
                }
                Ok(out)
            }
        }
    }

    /// Draw `n` samples of class `y`, deterministically for a given seed.
    pub fn sample(&self, y: usize, n: usize, seed: u64) -> Result<Tensor> {
        if y >= self.k {
            return Err(Error::Argument(format!(
                "class index {y} out of range (K={})",
                self.k
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.split_dim;
        let mut z_h = Tensor::zeros(vec![n, d]);
        match &self.head {
            CondHead::Flow { prior_logvar, .. } => {
                let lv = self.store.value(*prior_logvar);
                for i in 0..n {
                    for j in 0..d {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        z_h.as_mut_slice()[i * d + j] = g * (0.5 * lv.as_slice()[j]).exp();
                    }
                }
            }
            CondHead::Gmm(_) => {
                for v in z_h.as_mut_slice().iter_mut() {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    *v = g;
                }
            }
        }
        let mut aux_parts = Vec::new();
        for &ad in &self.fw.aux_dims {
            let mut t = Tensor::zeros(vec![n, ad]);
            for v in t.as_mut_slice().iter_mut() {
                let g: f64 = StandardNormal.sample(&mut rng);
                *v = g;
            }
            aux_parts.push(t);
        }
        let ys = vec![y; n];
        let z_f = self.head_inverse(&z_h, &ys)?;
        let x = self.fw.inverse(&self.store, &z_f, &aux_parts, None)?;
        if !x.all_finite() {
            return Err(Error::Numeric("sample: non-finite inverse output".into()));
        }
        Ok(x)
    }

    /// Encode with `y_encode`, optionally zero the factored-out latents,
    /// decode with `y_decode`.
    pub fn reconstruct(
        &self,
        x: &Tensor,
        y_encode: usize,
        y_decode: usize,
        zero_aux: bool,
    ) -> Result<Tensor> {
        let (z_f, aux_parts, _) = self.encode_parts(x)?;
        let n = x.rows();
        let z_h = self.head_forward(&z_f, &vec![y_encode; n])?.0;
        let z_f_dec = self.head_inverse(&z_h, &vec![y_decode; n])?;
        let aux_dec: Vec<Tensor> = if zero_aux {
            aux_parts
                .iter()
                .map(|a| Tensor::zeros(a.shape().to_vec()))
                .collect()
        } else {
            aux_parts
        };
        let out = self.fw.inverse(&self.store, &z_f_dec, &aux_dec, None)?;
        if !out.all_finite() {
            return Err(Error::Numeric("reconstruct: non-finite inverse output".into()));
        }
        Ok(out)
    }

    /// Initialize every actnorm from the batch statistics it sees in place.
    /// The head is initialized from the labeled batch (classes are needed
    /// to drive the conditional couplings).
    pub fn data_init(&mut self, x_all: &Tensor, x_lab: &Tensor, y_lab: &[usize]) -> Result<()> {
        let mut fw = std::mem::replace(&mut self.fw, empty_stack());
        fw.data_init(&mut self.store, x_all, None)?;
        self.fw = fw;
        if let CondHead::Flow { .. } = &self.head {
            if x_lab.rows() == 0 {
                return Err(Error::Argument(
                    "data_init: labeled batch required for the conditional head".into(),
                ));
            }
            let (z_f, _, _) = self.fw.forward_values(&self.store, x_lab, None)?;
            let oh = one_hot_rows(y_lab, self.k)?;
            if let CondHead::Flow { stack, .. } = &mut self.head {
                let mut s = std::mem::replace(stack, empty_stack());
                let res = s.data_init(&mut self.store, &z_f, Some(&oh));
                *stack = s;
                res?;
            }
        }
        Ok(())
    }
}

fn empty_stack() -> FlowStack {
    FlowStack {
        items: Vec::new(),
        in_features: 0,
        out_features: 0,
        aux_dims: Vec::new(),
        n_classes: None,
    }
}

fn as_row(x: &Tensor, d: usize) -> Result<Tensor> {
    if x.ndim() == 1 {
        x.reshaped(vec![1, x.len()])
    } else if x.rows() == 1 {
        Ok(x.clone())
    } else if x.len() == d {
        x.reshaped(vec![1, d])
    } else {
        Err(Error::Argument(format!(
            "expected a single example of dimension {d}, got shape {:?}",
            x.shape()
        )))
    }
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn concat_refs(parts: &[&Tensor]) -> Tensor {
    let r = parts[0].rows();
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(r * total);
    for i in 0..r {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Tensor::new(vec![r, total], data).expect("concat_refs")
}

fn slice_cols_plain(t: &Tensor, start: usize, end: usize) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(t.rows() * (end - start));
    for i in 0..t.rows() {
        data.extend_from_slice(&t.as_slice()[i * c + start..i * c + end]);
    }
    Tensor::new(vec![t.rows(), end - start], data).expect("slice_cols_plain")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Coupling, FlowLayer, Layout, MaskSpec, StackItem};
    use crate::net::randn_tensor;

    fn identity_flow_model(d: usize, k: usize) -> ScnfModel {
        let mut store = ParamStore::new();
        let prior = store.register("prior_h.logvar", Tensor::zeros(vec![d])).unwrap();
        ScnfModel {
            store,
            fw: empty_stack_dims(d),
            head: CondHead::Flow {
                stack: empty_stack_dims(d),
                prior_logvar: prior,
            },
            k,
            input_dim: d,
            split_dim: d,
            counters: PassCounters::default(),
        }
    }

    fn empty_stack_dims(d: usize) -> FlowStack {
        FlowStack {
            items: Vec::new(),
            in_features: d,
            out_features: d,
            aux_dims: Vec::new(),
            n_classes: None,
        }
    }

    fn gmm_model(d: usize, k: usize, seed: u64, mean_std: f64) -> ScnfModel {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = GmmHead::new(&mut store, "gmm", k, d, mean_std, &mut rng).unwrap();
        ScnfModel {
            store,
            fw: empty_stack_dims(d),
            head: CondHead::Gmm(head),
            k,
            input_dim: d,
            split_dim: d,
            counters: PassCounters::default(),
        }
    }

    /// Small conditional model with real coupling layers, for identity
    /// checks between the two likelihood routes.
    fn toy_cond_model(d: usize, k: usize, seed: u64) -> ScnfModel {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = Layout::flat(d);
        let mut items = Vec::new();
        for i in 0..2 {
            let c = Coupling::new(
                &mut store,
                &format!("fw.c{i}"),
                layout,
                MaskSpec::checkerboard(i % 2 == 1),
                8,
                1,
                None,
                &mut rng,
                i,
            )
            .unwrap();
            items.push(StackItem::Layer(FlowLayer::Coupling(c)));
        }
        let fw = FlowStack {
            items,
            in_features: d,
            out_features: d,
            aux_dims: vec![],
            n_classes: None,
        };
        let mut h_items = Vec::new();
        for i in 0..2 {
            let c = Coupling::new(
                &mut store,
                &format!("h.c{i}"),
                layout,
                MaskSpec::checkerboard(i % 2 == 1),
                8,
                1,
                Some(k),
                &mut rng,
                10 + i,
            )
            .unwrap();
            h_items.push(StackItem::Layer(FlowLayer::Coupling(c)));
        }
        let hstack = FlowStack {
            items: h_items,
            in_features: d,
            out_features: d,
            aux_dims: vec![],
            n_classes: Some(k),
        };
        // shake the zero-init nets so classes actually differ
        for name in ["fw.c0", "fw.c1", "h.c0", "h.c1"] {
            for net in ["s", "t"] {
                let id = store.find(&format!("{name}.{net}.w_out")).unwrap();
                let shape = store.value(id).shape().to_vec();
                *store.value_mut(id) = randn_tensor(shape, 0.3, &mut rng);
            }
        }
        let prior = store.register("prior_h.logvar", Tensor::zeros(vec![d])).unwrap();
        ScnfModel {
            store,
            fw,
            head: CondHead::Flow {
                stack: hstack,
                prior_logvar: prior,
            },
            k,
            input_dim: d,
            split_dim: d,
            counters: PassCounters::default(),
        }
    }

    #[test]
    fn identity_stack_encode_is_identity() {
        let m = identity_flow_model(3, 1);
        let x = Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 1.0, 2.0, 3.0]).unwrap();
        let (z_f, z_aux, ld) = m.encode(&x).unwrap();
        assert_eq!(z_f.as_slice(), x.as_slice());
        assert_eq!(z_aux.cols(), 0);
        assert!(ld.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_log_joint_is_standard_normal() {
        let m = identity_flow_model(4, 1);
        let x = Tensor::zeros(vec![1, 4]);
        let lj = m.log_joint(&x, 0).unwrap();
        let expect = -0.5 * 4.0 * LN_2PI;
        assert!((lj - expect).abs() < 1e-12, "{lj} vs {expect}");
    }

    #[test]
    fn gmm_head_matches_closed_form() {
        let m = gmm_model(3, 4, 5, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = randn_tensor(vec![1, 3], 1.0, &mut rng);
        let (means, lvs) = match &m.head {
            CondHead::Gmm(g) => (m.store.value(g.means).clone(), m.store.value(g.log_vars).clone()),
            _ => unreachable!(),
        };
        for y in 0..4 {
            let lj = m.log_joint(&x, y).unwrap();
            let mut expect = -(4.0f64).ln();
            for j in 0..3 {
                let mu = means.as_slice()[y * 3 + j];
                let lv = lvs.as_slice()[y * 3 + j];
                let d = x.as_slice()[j] - mu;
                expect += -0.5 * (d * d * (-lv).exp() + lv + LN_2PI);
            }
            assert!((lj - expect).abs() < 1e-10, "class {y}: {lj} vs {expect}");
        }
    }

    #[test]
    fn marginalization_identity() {
        let m = toy_cond_model(4, 3, 42);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let x = randn_tensor(vec![1, 4], 1.0, &mut rng);
            let lm = m.log_marginal(&x).unwrap();
            let joints: Vec<f64> = (0..3).map(|y| m.log_joint(&x, y).unwrap()).collect();
            let naive: f64 = joints.iter().map(|j| j.exp()).sum();
            assert!((lm.exp() - naive).abs() < 1e-12, "{} vs {naive}", lm.exp());
            assert!((lm - naive.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn pass_counters_contract() {
        let m = toy_cond_model(4, 3, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn_tensor(vec![1, 4], 1.0, &mut rng);
        m.counters.reset();
        let _ = m.log_marginal(&x).unwrap();
        assert_eq!(m.counters.fw(), 1);
        assert_eq!(m.counters.hphi(), 3);
    }

    #[test]
    fn posterior_uniform_for_identical_heads_and_tiebreak() {
        // fresh conditional nets are zero maps: every class scores the same
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = Coupling::new(
            &mut store,
            "h.c0",
            Layout::flat(4),
            MaskSpec::checkerboard(false),
            8,
            1,
            Some(3),
            &mut rng,
            0,
        )
        .unwrap();
        let hstack = FlowStack {
            items: vec![StackItem::Layer(FlowLayer::Coupling(c))],
            in_features: 4,
            out_features: 4,
            aux_dims: vec![],
            n_classes: Some(3),
        };
        let prior = store.register("prior_h.logvar", Tensor::zeros(vec![4])).unwrap();
        let m = ScnfModel {
            store,
            fw: empty_stack_dims(4),
            head: CondHead::Flow {
                stack: hstack,
                prior_logvar: prior,
            },
            k: 3,
            input_dim: 4,
            split_dim: 4,
            counters: PassCounters::default(),
        };
        let x = randn_tensor(vec![1, 4], 1.0, &mut rng);
        let p = m.posterior(&x).unwrap();
        for &v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-10);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        assert_eq!(m.classify(&x).unwrap(), 0);
    }

    #[test]
    fn posterior_hand_softmax() {
        // joints differing by ln 3 -> posterior (0.25, 0.75)
        let mut m = gmm_model(1, 2, 0, 0.0);
        if let CondHead::Gmm(g) = &m.head {
            let mu0 = (2.0 * 3.0f64.ln()).sqrt();
            m.store
                .set_value(g.means, Tensor::new(vec![2, 1], vec![mu0, 0.0]).unwrap())
                .unwrap();
        }
        let x = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let p = m.posterior(&x).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12, "{p:?}");
        assert!((p[1] - 0.75).abs() < 1e-12);
        assert_eq!(m.classify(&x).unwrap(), 1);
    }

    #[test]
    fn sample_is_seed_deterministic_and_roundtrips() {
        let m = toy_cond_model(4, 2, 11);
        let a = m.sample(1, 3, 123).unwrap();
        let b = m.sample(1, 3, 123).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        let c = m.sample(1, 3, 124).unwrap();
        assert!(a.as_slice() != c.as_slice());

        // encode(sample) reproduces the drawn latents
        let (z_f, _, _) = m.encode(&a).unwrap();
        let (z_h, _) = m.head_forward(&z_f, &[1, 1, 1]).unwrap();
        let z_f_back = m.head_inverse(&z_h, &[1, 1, 1]).unwrap();
        for (u, v) in z_f.as_slice().iter().zip(z_f_back.as_slice()) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn reconstruct_identity_and_label_independence() {
        let m = toy_cond_model(4, 2, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn_tensor(vec![3, 4], 1.0, &mut rng);
        let r = m.reconstruct(&x, 0, 0, false).unwrap();
        for (a, b) in x.as_slice().iter().zip(r.as_slice()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }

        // identity head: decoding label cannot matter
        let m = identity_flow_model(4, 3);
        let r0 = m.reconstruct(&x, 0, 1, false).unwrap();
        let r1 = m.reconstruct(&x, 0, 2, false).unwrap();
        assert_eq!(r0.as_slice(), r1.as_slice());
        assert_eq!(r0.as_slice(), x.as_slice());
    }

    #[test]
    fn lse_rows_matches_host_lse() {
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store);
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1000.0, -1001.0, -999.0]).unwrap();
        let rows: Vec<f64> = (0..2).map(|i| lse_slice(t.row(i))).collect();
        let n = ctx.constant(t);
        let l = lse_rows(&mut ctx, n).unwrap();
        for (a, b) in ctx.value(l).as_slice().iter().zip(&rows) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_class_is_argument_error() {
        let m = identity_flow_model(2, 2);
        let x = Tensor::zeros(vec![1, 2]);
        assert!(matches!(m.log_joint(&x, 2), Err(Error::Argument(_))));
        assert!(matches!(m.sample(5, 1, 0), Err(Error::Argument(_))));
    }
}
