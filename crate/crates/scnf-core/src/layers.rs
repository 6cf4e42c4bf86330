//! Invertible building blocks with exact log-determinants.
//!
//! Every layer offers a tape forward (`forward`) for training and a plain
//! inverse (`inverse`) for sampling/reconstruction. Tensors are stored
//! flattened, channel-major: feature index `j = c*H*W + h*W + w` for a
//! layout of `C` channels over an `H x W` grid (flat vectors use `H=W=1`).

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Ctx, Node, ParamId, ParamStore};
use crate::net::{randn_tensor, ResMlp};
use crate::tensor::Tensor;

/// Channel/spatial structure of a flattened feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Layout {
    pub fn flat(d: usize) -> Self {
        Layout { c: d, h: 1, w: 1 }
    }

    pub fn features(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Checkerboard,
    Channel,
}

/// Binary partition of the feature vector. `parity` swaps which side is
/// held fixed and which is transformed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub parity: bool,
}

impl MaskSpec {
    pub fn checkerboard(parity: bool) -> Self {
        MaskSpec {
            kind: MaskKind::Checkerboard,
            parity,
        }
    }

    pub fn channel(parity: bool) -> Self {
        MaskSpec {
            kind: MaskKind::Channel,
            parity,
        }
    }

    /// (fixed indices, transformed indices). The two sets are disjoint and
    /// cover every feature.
    pub fn partition(&self, layout: Layout) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut side_a = Vec::new();
        let mut side_b = Vec::new();
        for c in 0..layout.c {
            for h in 0..layout.h {
                for w in 0..layout.w {
                    let j = c * layout.spatial() + h * layout.w + w;
                    let is_a = match self.kind {
                        // Spatial checkerboard; degenerates to alternating
                        // features on flat vectors.
                        MaskKind::Checkerboard => {
                            if layout.spatial() > 1 {
                                (h + w) % 2 == 0
                            } else {
                                c % 2 == 0
                            }
                        }
                        MaskKind::Channel => c < layout.c / 2,
                    };
                    if is_a {
                        side_a.push(j);
                    } else {
                        side_b.push(j);
                    }
                }
            }
        }
        let (fixed, moved) = if self.parity {
            (side_b, side_a)
        } else {
            (side_a, side_b)
        };
        if fixed.is_empty() || moved.is_empty() {
            return Err(Error::Argument(format!(
                "mask {:?} leaves an empty side for layout {:?}",
                self.kind, layout
            )));
        }
        Ok((fixed, moved))
    }
}

fn take_cols(x: &Tensor, idx: &[usize]) -> Tensor {
    let c = x.cols();
    let mut data = Vec::with_capacity(x.rows() * idx.len());
    for i in 0..x.rows() {
        let row = &x.as_slice()[i * c..(i + 1) * c];
        data.extend(idx.iter().map(|&j| row[j]));
    }
    Tensor::new(vec![x.rows(), idx.len()], data).expect("take_cols")
}

fn concat_tensors(parts: &[&Tensor]) -> Tensor {
    let r = parts[0].rows();
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(r * total);
    for i in 0..r {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Tensor::new(vec![r, total], data).expect("concat_tensors")
}

/// Affine coupling: the fixed half drives scale/shift networks applied to
/// the other half. With `n_classes` set, a one-hot class row is appended
/// to the network input.
#[derive(Debug, Clone)]
pub struct Coupling {
    pub mask: MaskSpec,
    fixed_idx: Arc<Vec<usize>>,
    moved_idx: Arc<Vec<usize>>,
    merge_perm: Arc<Vec<usize>>,
    s_net: ResMlp,
    t_net: ResMlp,
    s_scale: ParamId,
    pub n_classes: Option<usize>,
    pub index: usize,
}

impl Coupling {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        layout: Layout,
        mask: MaskSpec,
        hidden: usize,
        res_blocks: usize,
        n_classes: Option<usize>,
        rng: &mut R,
        index: usize,
    ) -> Result<Self> {
        let (fixed, moved) = mask.partition(layout)?;
        let mut merge = vec![0usize; layout.features()];
        for (pos, &j) in fixed.iter().enumerate() {
            merge[j] = pos;
        }
        for (pos, &j) in moved.iter().enumerate() {
            merge[j] = fixed.len() + pos;
        }
        let net_in = fixed.len() + n_classes.unwrap_or(0);
        let s_net = ResMlp::new(
            store,
            &format!("{prefix}.s"),
            net_in,
            hidden,
            res_blocks,
            moved.len(),
            rng,
        )?;
        let t_net = ResMlp::new(
            store,
            &format!("{prefix}.t"),
            net_in,
            hidden,
            res_blocks,
            moved.len(),
            rng,
        )?;
        let s_scale = store.register(format!("{prefix}.s_scale"), Tensor::scalar(1.0))?;
        Ok(Coupling {
            mask,
            fixed_idx: Arc::new(fixed),
            moved_idx: Arc::new(moved),
            merge_perm: Arc::new(merge),
            s_net,
            t_net,
            s_scale,
            n_classes,
            index,
        })
    }

    fn net_input(&self, ctx: &mut Ctx, x1: Node, cond: Option<Node>) -> Result<Node> {
        match (self.n_classes, cond) {
            (Some(_), Some(oh)) => ctx.concat_cols(&[x1, oh]),
            (Some(_), None) => Err(Error::Argument(format!(
                "coupling layer {}: conditional layer called without class input",
                self.index
            ))),
            (None, _) => Ok(x1),
        }
    }

    /// Scale node `s = s_scale * tanh(s_net(x1[, y]))`, bounded so `exp(s)`
    /// cannot overflow early in training.
    fn scale_node(&self, ctx: &mut Ctx, net_in: Node) -> Result<Node> {
        let s_raw = self.s_net.forward(ctx, net_in)?;
        let st = ctx.tanh(s_raw);
        let sc = ctx.param(self.s_scale);
        let shape = ctx.value(st).shape().to_vec();
        let sc = ctx.broadcast(sc, &shape)?;
        let s = ctx.mul(st, sc)?;
        if !ctx.value(s).all_finite() {
            return Err(Error::Numeric(format!(
                "coupling layer {}: non-finite scale output",
                self.index
            )));
        }
        Ok(s)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Node, cond: Option<Node>) -> Result<(Node, Node)> {
        let x1 = ctx.gather_cols(x, self.fixed_idx.clone())?;
        let x2 = ctx.gather_cols(x, self.moved_idx.clone())?;
        let net_in = self.net_input(ctx, x1, cond)?;
        let s = self.scale_node(ctx, net_in)?;
        let t = self.t_net.forward(ctx, net_in)?;
        let es = ctx.exp(s);
        let z2 = ctx.mul(x2, es)?;
        let z2 = ctx.add(z2, t)?;
        let merged = ctx.concat_cols(&[x1, z2])?;
        let z = ctx.gather_cols(merged, self.merge_perm.clone())?;
        let logdet = ctx.sum_rows(s)?;
        Ok((z, logdet))
    }

    pub fn inverse(&self, store: &ParamStore, z: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        let z1 = take_cols(z, &self.fixed_idx);
        let z2 = take_cols(z, &self.moved_idx);
        let mut ctx = Ctx::new(store);
        let x1 = ctx.input(z1.clone());
        let cond_node = cond.map(|t| ctx.constant(t.clone()));
        let net_in = self.net_input(&mut ctx, x1, cond_node)?;
        let s = self.scale_node(&mut ctx, net_in)?;
        let t = self.t_net.forward(&mut ctx, net_in)?;
        let s = ctx.value(s);
        let t = ctx.value(t);
        let mut x2 = z2;
        for ((xv, sv), tv) in x2
            .as_mut_slice()
            .iter_mut()
            .zip(s.as_slice())
            .zip(t.as_slice())
        {
            *xv = (*xv - tv) * (-sv).exp();
        }
        let merged = concat_tensors(&[&z1, &x2]);
        Ok(take_cols(&merged, &self.merge_perm))
    }
}

/// Per-channel affine normalization. Scale is stored as a log so it stays
/// strictly positive; data-dependent initialization targets zero mean and
/// unit variance on the first training batch.
#[derive(Debug, Clone)]
pub struct ActNorm {
    log_scale: ParamId,
    bias: ParamId,
    pub layout: Layout,
    channel_map: Arc<Vec<usize>>,
    pub initialized: bool,
    pub index: usize,
}

impl ActNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, layout: Layout, index: usize) -> Result<Self> {
        let log_scale =
            store.register(format!("{prefix}.log_scale"), Tensor::zeros(vec![layout.c]))?;
        let bias = store.register(format!("{prefix}.bias"), Tensor::zeros(vec![layout.c]))?;
        let map = (0..layout.features()).map(|j| j / layout.spatial()).collect();
        Ok(ActNorm {
            log_scale,
            bias,
            layout,
            channel_map: Arc::new(map),
            initialized: false,
            index,
        })
    }

    /// Set explicit per-channel scale/bias (test and checkpoint path).
    pub fn set_scale_bias(
        &mut self,
        store: &mut ParamStore,
        scale: &[f64],
        bias: &[f64],
    ) -> Result<()> {
        if scale.iter().any(|s| s.abs() < 1e-12) {
            return Err(Error::Numeric(format!(
                "actnorm layer {}: zero scale",
                self.index
            )));
        }
        let ls: Vec<f64> = scale.iter().map(|s| s.abs().ln()).collect();
        store.set_value(self.log_scale, Tensor::from_vec(ls))?;
        store.set_value(self.bias, Tensor::from_vec(bias.to_vec()))?;
        self.initialized = true;
        Ok(())
    }

    /// Data-dependent init: per-channel bias = batch mean, scale = 1/std.
    pub fn init_from_batch(&mut self, store: &mut ParamStore, x: &Tensor) -> Result<()> {
        let sp = self.layout.spatial();
        let n = x.rows() * sp;
        let mut mean = vec![0.0; self.layout.c];
        let mut var = vec![0.0; self.layout.c];
        for i in 0..x.rows() {
            let row = x.row(i);
            for c in 0..self.layout.c {
                for p in 0..sp {
                    mean[c] += row[c * sp + p];
                }
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        for i in 0..x.rows() {
            let row = x.row(i);
            for c in 0..self.layout.c {
                for p in 0..sp {
                    let d = row[c * sp + p] - mean[c];
                    var[c] += d * d;
                }
            }
        }
        let mut log_scale = vec![0.0; self.layout.c];
        for c in 0..self.layout.c {
            let std = (var[c] / n as f64).sqrt();
            if std < 1e-12 {
                return Err(Error::Numeric(format!(
                    "actnorm layer {}: zero scale (constant channel {c} in init batch)",
                    self.index
                )));
            }
            log_scale[c] = -std.ln();
        }
        store.set_value(self.log_scale, Tensor::from_vec(log_scale))?;
        store.set_value(self.bias, Tensor::from_vec(mean))?;
        self.initialized = true;
        Ok(())
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Node) -> Result<(Node, Node)> {
        let rows = ctx.value(x).rows();
        let d = self.layout.features();
        let ls = ctx.param(self.log_scale);
        let b = ctx.param(self.bias);
        let ls_f = ctx.gather_cols(ls, self.channel_map.clone())?;
        let b_f = ctx.gather_cols(b, self.channel_map.clone())?;
        let ls_row = ctx.reshape(ls_f, &[1, d])?;
        let ls_bc = ctx.broadcast(ls_row, &[rows, d])?;
        let b_row = ctx.reshape(b_f, &[1, d])?;
        let b_bc = ctx.broadcast(b_row, &[rows, d])?;
        let centered = ctx.sub(x, b_bc)?;
        let scale = ctx.exp(ls_bc);
        let z = ctx.mul(centered, scale)?;
        let ld_sum = ctx.sum_all(ls);
        let ld = ctx.scale(ld_sum, self.layout.spatial() as f64)?;
        let ld = ctx.broadcast(ld, &[rows])?;
        Ok((z, ld))
    }

    pub fn inverse(&self, store: &ParamStore, z: &Tensor) -> Result<Tensor> {
        let ls = store.value(self.log_scale).as_slice();
        let b = store.value(self.bias).as_slice();
        let sp = self.layout.spatial();
        let mut out = z.clone();
        for i in 0..z.rows() {
            let row = &mut out.as_mut_slice()[i * self.layout.features()..];
            for c in 0..self.layout.c {
                for p in 0..sp {
                    let j = c * sp + p;
                    row[j] = row[j] * (-ls[c]).exp() + b[c];
                }
            }
        }
        Ok(out)
    }
}

fn lu_decompose(a: &[f64], n: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut lu = a.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let mut p = k;
        let mut best = lu[k * n + k].abs();
        for r in k + 1..n {
            let v = lu[r * n + k].abs();
            if v > best {
                best = v;
                p = r;
            }
        }
        if best < 1e-12 {
            return Err(Error::Numeric(format!(
                "invertible linear: pivot {best:.3e} below 1e-12 at column {k}"
            )));
        }
        if p != k {
            for j in 0..n {
                lu.swap(k * n + j, p * n + j);
            }
            perm.swap(k, p);
        }
        let piv = lu[k * n + k];
        for r in k + 1..n {
            let f = lu[r * n + k] / piv;
            lu[r * n + k] = f;
            for j in k + 1..n {
                lu[r * n + j] -= f * lu[k * n + j];
            }
        }
    }
    Ok((perm, lu))
}

fn gram_schmidt(a: &mut [f64], n: usize) {
    // Orthonormalize columns in place (modified Gram-Schmidt).
    for j in 0..n {
        for k in 0..j {
            let dot: f64 = (0..n).map(|i| a[i * n + j] * a[i * n + k]).sum();
            for i in 0..n {
                a[i * n + j] -= dot * a[i * n + k];
            }
        }
        let norm: f64 = (0..n).map(|i| a[i * n + j] * a[i * n + j]).sum::<f64>().sqrt();
        for i in 0..n {
            a[i * n + j] /= norm;
        }
    }
}

/// Square channel-mixing map stored in LU form: `W = Pᵀ L U` with a fixed
/// pivot permutation, unit-diagonal `L`, and `diag(U)` kept as fixed signs
/// times `exp(log_diag)` — invertibility is structural and the
/// log-determinant costs O(C).
#[derive(Debug, Clone)]
pub struct InvLinear {
    lower: ParamId,
    upper: ParamId,
    log_diag: ParamId,
    diag_sign: Vec<f64>,
    /// `sigma`: row i of the pivoted matrix came from row `sigma[i]` of W.
    perm: Vec<usize>,
    pub layout: Layout,
    pub index: usize,
    pos_map: Option<(Arc<Vec<usize>>, Arc<Vec<usize>>)>,
}

impl InvLinear {
    /// Random rotation init.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        layout: Layout,
        rng: &mut R,
        index: usize,
    ) -> Result<Self> {
        let n = layout.c;
        let mut w = randn_tensor(vec![n, n], 1.0, rng).into_vec();
        gram_schmidt(&mut w, n);
        Self::from_matrix(store, prefix, layout, &w, index)
    }

    pub fn from_matrix(
        store: &mut ParamStore,
        prefix: &str,
        layout: Layout,
        w: &[f64],
        index: usize,
    ) -> Result<Self> {
        let n = layout.c;
        let (perm, lu) = lu_decompose(w, n)?;
        let mut lower = vec![0.0; n * n];
        let mut upper = vec![0.0; n * n];
        let mut log_diag = vec![0.0; n];
        let mut diag_sign = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                if j < i {
                    lower[i * n + j] = lu[i * n + j];
                } else if j > i {
                    upper[i * n + j] = lu[i * n + j];
                }
            }
            let d = lu[i * n + i];
            diag_sign[i] = d.signum();
            log_diag[i] = d.abs().ln();
        }
        let lower = store.register(
            format!("{prefix}.lower"),
            Tensor::new(vec![n, n], lower)?,
        )?;
        let upper = store.register(
            format!("{prefix}.upper"),
            Tensor::new(vec![n, n], upper)?,
        )?;
        let log_diag = store.register(format!("{prefix}.log_diag"), Tensor::from_vec(log_diag))?;
        let pos_map = if layout.spatial() > 1 {
            let sp = layout.spatial();
            // channel-major -> position-major and back
            let mut to_pos = vec![0usize; n * sp];
            let mut to_chan = vec![0usize; n * sp];
            for c in 0..n {
                for p in 0..sp {
                    to_pos[p * n + c] = c * sp + p;
                    to_chan[c * sp + p] = p * n + c;
                }
            }
            Some((Arc::new(to_pos), Arc::new(to_chan)))
        } else {
            None
        };
        Ok(InvLinear {
            lower,
            upper,
            log_diag,
            diag_sign,
            perm,
            layout,
            index,
            pos_map,
        })
    }

    /// Compose W = Pᵀ L U on the tape.
    fn weight_node(&self, ctx: &mut Ctx) -> Result<Node> {
        let n = self.layout.c;
        let mut lmask = vec![0.0; n * n];
        let mut umask = vec![0.0; n * n];
        let mut eye = vec![0.0; n * n];
        let mut pt = vec![0.0; n * n];
        for i in 0..n {
            eye[i * n + i] = 1.0;
            pt[self.perm[i] * n + i] = 1.0;
            for j in 0..n {
                if j < i {
                    lmask[i * n + j] = 1.0;
                } else if j > i {
                    umask[i * n + j] = 1.0;
                }
            }
        }
        let lmask = ctx.constant(Tensor::new(vec![n, n], lmask)?);
        let umask = ctx.constant(Tensor::new(vec![n, n], umask)?);
        let eye = ctx.constant(Tensor::new(vec![n, n], eye)?);
        let pt = ctx.constant(Tensor::new(vec![n, n], pt)?);
        let sign = ctx.constant(Tensor::from_vec(self.diag_sign.clone()));

        let lower = ctx.param(self.lower);
        let l_off = ctx.mul(lower, lmask)?;
        let l = ctx.add(l_off, eye)?;

        let upper = ctx.param(self.upper);
        let u_off = ctx.mul(upper, umask)?;
        let ld = ctx.param(self.log_diag);
        let d = ctx.exp(ld);
        let d = ctx.mul(d, sign)?;
        let d_row = ctx.reshape(d, &[1, n])?;
        let d_bc = ctx.broadcast(d_row, &[n, n])?;
        let d_diag = ctx.mul(d_bc, eye)?;
        let u = ctx.add(u_off, d_diag)?;

        let lu = ctx.matmul(l, u)?;
        ctx.matmul(pt, lu)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Node) -> Result<(Node, Node)> {
        let rows = ctx.value(x).rows();
        let n = self.layout.c;
        let sp = self.layout.spatial();
        let w = self.weight_node(ctx)?;
        let wt = ctx.transpose2(w)?;
        let z = match &self.pos_map {
            None => ctx.matmul(x, wt)?,
            Some((to_pos, to_chan)) => {
                let xp = ctx.gather_cols(x, to_pos.clone())?;
                let xp = ctx.reshape(xp, &[rows * sp, n])?;
                let zp = ctx.matmul(xp, wt)?;
                let zp = ctx.reshape(zp, &[rows, sp * n])?;
                ctx.gather_cols(zp, to_chan.clone())?
            }
        };
        let ld = ctx.param(self.log_diag);
        let ld = ctx.sum_all(ld);
        let ld = ctx.scale(ld, sp as f64)?;
        let ld = ctx.broadcast(ld, &[rows])?;
        Ok((z, ld))
    }

    /// Current weight matrix values (row-major C x C).
    pub fn weight_values(&self, store: &ParamStore) -> Tensor {
        let ctx_store = store;
        let mut ctx = Ctx::new(ctx_store);
        let w = self.weight_node(&mut ctx).expect("weight compose");
        ctx.value(w).clone()
    }

    pub fn inverse(&self, store: &ParamStore, z: &Tensor) -> Result<Tensor> {
        let n = self.layout.c;
        let sp = self.layout.spatial();
        let lower = store.value(self.lower).as_slice();
        let upper = store.value(self.upper).as_slice();
        let log_diag = store.value(self.log_diag).as_slice();
        let mut out = Tensor::zeros(z.shape().to_vec());
        let mut v = vec![0.0; n];
        for i in 0..z.rows() {
            let zrow = z.row(i);
            let orow = &mut out.as_mut_slice()[i * n * sp..(i + 1) * n * sp];
            for p in 0..sp {
                // y = P z (undo the row permutation)
                for r in 0..n {
                    v[r] = zrow[self.perm[r] * sp + p];
                }
                // forward substitution: L w = y (unit diagonal)
                for r in 0..n {
                    let mut acc = v[r];
                    for j in 0..r {
                        acc -= lower[r * n + j] * v[j];
                    }
                    v[r] = acc;
                }
                // back substitution: U x = w
                for r in (0..n).rev() {
                    let mut acc = v[r];
                    for j in r + 1..n {
                        acc -= upper[r * n + j] * v[j];
                    }
                    v[r] = acc / (self.diag_sign[r] * log_diag[r].exp());
                }
                for c in 0..n {
                    orow[c * sp + p] = v[c];
                }
            }
        }
        Ok(out)
    }
}

/// Pure spatial-to-channel permutation: (C, H, W) -> (C·f², H/f, W/f).
#[derive(Debug, Clone)]
pub struct SpaceToDepth {
    pub layout: Layout,
    pub factor: usize,
    perm: Arc<Vec<usize>>,
    inv_perm: Arc<Vec<usize>>,
}

impl SpaceToDepth {
    pub fn new(layout: Layout, factor: usize) -> Result<Self> {
        if layout.h % factor != 0 || layout.w % factor != 0 {
            return Err(Error::Argument(format!(
                "space_to_depth: spatial dims {}x{} not divisible by {factor}",
                layout.h, layout.w
            )));
        }
        let (c, h, w) = (layout.c, layout.h, layout.w);
        let (ho, wo) = (h / factor, w / factor);
        let d = layout.features();
        let mut perm = vec![0usize; d];
        for ci in 0..c {
            for dy in 0..factor {
                for dx in 0..factor {
                    let co = ci * factor * factor + dy * factor + dx;
                    for hh in 0..ho {
                        for ww in 0..wo {
                            let out_j = co * ho * wo + hh * wo + ww;
                            let in_j = ci * h * w + (hh * factor + dy) * w + (ww * factor + dx);
                            perm[out_j] = in_j;
                        }
                    }
                }
            }
        }
        let mut inv = vec![0usize; d];
        for (o, &i) in perm.iter().enumerate() {
            inv[i] = o;
        }
        Ok(SpaceToDepth {
            layout,
            factor,
            perm: Arc::new(perm),
            inv_perm: Arc::new(inv),
        })
    }

    pub fn out_layout(&self) -> Layout {
        Layout {
            c: self.layout.c * self.factor * self.factor,
            h: self.layout.h / self.factor,
            w: self.layout.w / self.factor,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Node) -> Result<Node> {
        ctx.gather_cols(x, self.perm.clone())
    }

    pub fn inverse(&self, z: &Tensor) -> Tensor {
        take_cols(z, &self.inv_perm)
    }
}

/// Map `[0,1)` pixels to unbounded logits with the compression
/// `u = alpha + (1 - 2*alpha) * x`.
#[derive(Debug, Clone)]
pub struct ToLogits {
    pub alpha: f64,
}

impl ToLogits {
    pub fn new(alpha: f64) -> Self {
        ToLogits { alpha }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Node) -> Result<(Node, Node)> {
        {
            let v = ctx.value(x);
            if v.as_slice().iter().any(|&t| !(0.0..1.0).contains(&t)) {
                return Err(Error::Domain("to_logits: input outside [0, 1)".into()));
            }
        }
        let a = self.alpha;
        let u = ctx.scale(x, 1.0 - 2.0 * a)?;
        let u = ctx.add_scalar(u, a)?;
        let shape = ctx.value(u).shape().to_vec();
        let ones = ctx.constant(Tensor::full(shape, 1.0));
        let om = ctx.sub(ones, u)?;
        let lu = ctx.log(u)?;
        let lom = ctx.log(om)?;
        let z = ctx.sub(lu, lom)?;
        let ld_sum = ctx.add(lu, lom)?;
        let ld_neg = ctx.scale(ld_sum, -1.0)?;
        let ld = ctx.add_scalar(ld_neg, (1.0 - 2.0 * a).ln())?;
        let logdet = ctx.sum_rows(ld)?;
        Ok((z, logdet))
    }

    pub fn inverse(&self, z: &Tensor) -> Tensor {
        let a = self.alpha;
        z.map(|v| {
            let u = 1.0 / (1.0 + (-v).exp());
            (u - a) / (1.0 - 2.0 * a)
        })
    }
}

/// Any invertible layer in a stack.
#[derive(Debug, Clone)]
pub enum FlowLayer {
    Coupling(Coupling),
    ActNorm(ActNorm),
    InvLinear(InvLinear),
    SpaceToDepth(SpaceToDepth),
    ToLogits(ToLogits),
}

impl FlowLayer {
    /// Tape forward. Returns the output node and the per-row log-det
    /// contribution (permutations contribute exactly nothing).
    pub fn forward(&self, ctx: &mut Ctx, x: Node, cond: Option<Node>) -> Result<(Node, Option<Node>)> {
        match self {
            FlowLayer::Coupling(l) => {
                let (z, ld) = l.forward(ctx, x, cond)?;
                Ok((z, Some(ld)))
            }
            FlowLayer::ActNorm(l) => {
                let (z, ld) = l.forward(ctx, x)?;
                Ok((z, Some(ld)))
            }
            FlowLayer::InvLinear(l) => {
                let (z, ld) = l.forward(ctx, x)?;
                Ok((z, Some(ld)))
            }
            FlowLayer::SpaceToDepth(l) => Ok((l.forward(ctx, x)?, None)),
            FlowLayer::ToLogits(l) => {
                let (z, ld) = l.forward(ctx, x)?;
                Ok((z, Some(ld)))
            }
        }
    }

    pub fn inverse(&self, store: &ParamStore, z: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        match self {
            FlowLayer::Coupling(l) => l.inverse(store, z, cond),
            FlowLayer::ActNorm(l) => l.inverse(store, z),
            FlowLayer::InvLinear(l) => l.inverse(store, z),
            FlowLayer::SpaceToDepth(l) => Ok(l.inverse(z)),
            FlowLayer::ToLogits(l) => Ok(l.inverse(z)),
        }
    }
}

/// One element of a flow stack: a layer, or a split that routes the
/// trailing channels out to the prior.
#[derive(Debug, Clone)]
pub enum StackItem {
    Layer(FlowLayer),
    /// Keep the first `keep_features` features; the rest exits the stack.
    FactorOut { keep_features: usize },
}

/// An ordered invertible stack with multi-scale factor-outs.
#[derive(Debug, Clone)]
pub struct FlowStack {
    pub items: Vec<StackItem>,
    pub in_features: usize,
    pub out_features: usize,
    pub aux_dims: Vec<usize>,
    pub n_classes: Option<usize>,
}

/// Split a feature vector at a fixed channel boundary. `keep` counts
/// channels; `keep == channels` is the degenerate split with an empty
/// auxiliary part.
pub fn factor_out(z: &Tensor, keep: usize, layout: Layout) -> Result<(Tensor, Tensor)> {
    if keep == 0 || keep > layout.c {
        return Err(Error::Argument(format!(
            "factor_out: keep {keep} outside [1, {}]",
            layout.c
        )));
    }
    let cut = keep * layout.spatial();
    let d = layout.features();
    let (r, c) = (z.rows(), z.cols());
    debug_assert_eq!(c, d);
    let mut kept = Vec::with_capacity(r * cut);
    let mut aux = Vec::with_capacity(r * (d - cut));
    for i in 0..r {
        let row = z.row(i);
        kept.extend_from_slice(&row[..cut]);
        aux.extend_from_slice(&row[cut..]);
    }
    Ok((
        Tensor::new(vec![r, cut], kept)?,
        Tensor::new(vec![r, d - cut], aux)?,
    ))
}

/// Undo [`factor_out`]: concatenate by the recorded partition.
pub fn factor_merge(kept: &Tensor, aux: &Tensor) -> Tensor {
    if aux.cols() == 0 {
        return kept.clone();
    }
    concat_tensors(&[kept, aux])
}

pub struct StackForward {
    pub z: Node,
    pub aux: Vec<Node>,
    pub logdet: Node,
}

impl FlowStack {
    pub fn forward(&self, ctx: &mut Ctx, x: Node, cond: Option<Node>) -> Result<StackForward> {
        let rows = ctx.value(x).rows();
        let mut logdet = ctx.constant(Tensor::zeros(vec![rows]));
        let mut cur = x;
        let mut aux = Vec::new();
        for (i, item) in self.items.iter().enumerate() {
            match item {
                StackItem::Layer(layer) => {
                    let (z, ld) = layer.forward(ctx, cur, cond)?;
                    if !ctx.value(z).all_finite() {
                        return Err(Error::Numeric(format!("layer {i}: non-finite output")));
                    }
                    if let Some(ld) = ld {
                        logdet = ctx.add(logdet, ld)?;
                    }
                    cur = z;
                }
                StackItem::FactorOut { keep_features } => {
                    let d = ctx.value(cur).cols();
                    if *keep_features == 0 || *keep_features >= d {
                        return Err(Error::Argument(format!(
                            "stack factor_out: keep {keep_features} outside [1, {})",
                            d
                        )));
                    }
                    let kept = ctx.slice_cols(cur, 0, *keep_features)?;
                    let out = ctx.slice_cols(cur, *keep_features, d)?;
                    aux.push(out);
                    cur = kept;
                }
            }
        }
        Ok(StackForward {
            z: cur,
            aux,
            logdet,
        })
    }

    /// Forward without keeping a useful tape: returns values only.
    pub fn forward_values(
        &self,
        store: &ParamStore,
        x: &Tensor,
        cond: Option<&Tensor>,
    ) -> Result<(Tensor, Vec<Tensor>, Vec<f64>)> {
        let mut ctx = Ctx::new(store);
        let xn = ctx.input(x.clone());
        let cn = cond.map(|t| ctx.constant(t.clone()));
        let out = self.forward(&mut ctx, xn, cn)?;
        Ok((
            ctx.value(out.z).clone(),
            out.aux.iter().map(|&a| ctx.value(a).clone()).collect(),
            ctx.value(out.logdet).as_slice().to_vec(),
        ))
    }

    /// Invert the stack: `aux` parts must be given in forward encounter
    /// order.
    pub fn inverse(
        &self,
        store: &ParamStore,
        z: &Tensor,
        aux: &[Tensor],
        cond: Option<&Tensor>,
    ) -> Result<Tensor> {
        let mut cur = z.clone();
        let mut aux_left = aux.len();
        for item in self.items.iter().rev() {
            match item {
                StackItem::Layer(layer) => {
                    cur = layer.inverse(store, &cur, cond)?;
                }
                StackItem::FactorOut { .. } => {
                    aux_left = aux_left.checked_sub(1).ok_or_else(|| {
                        Error::Argument("stack inverse: missing factored part".into())
                    })?;
                    cur = factor_merge(&cur, &aux[aux_left]);
                }
            }
        }
        if aux_left != 0 {
            return Err(Error::Argument(
                "stack inverse: too many factored parts supplied".into(),
            ));
        }
        Ok(cur)
    }

    /// Walk the stack once, initializing every uninitialized actnorm from
    /// the activations the batch produces at its position.
    pub fn data_init(
        &mut self,
        store: &mut ParamStore,
        x: &Tensor,
        cond: Option<&Tensor>,
    ) -> Result<()> {
        let mut cur = x.clone();
        for item in &mut self.items {
            match item {
                StackItem::Layer(layer) => {
                    if let FlowLayer::ActNorm(an) = layer {
                        if !an.initialized {
                            an.init_from_batch(store, &cur)?;
                        }
                    }
                    let mut ctx = Ctx::new(store);
                    let xn = ctx.input(cur.clone());
                    let cn = cond.map(|t| ctx.constant(t.clone()));
                    let (z, _) = layer.forward(&mut ctx, xn, cn)?;
                    cur = ctx.value(z).clone();
                }
                StackItem::FactorOut { keep_features } => {
                    let kept = take_cols(&cur, &(0..*keep_features).collect::<Vec<_>>());
                    cur = kept;
                }
            }
        }
        Ok(())
    }

    pub fn aux_features(&self) -> usize {
        self.aux_dims.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scratch_forward(
        store: &ParamStore,
        layer: &FlowLayer,
        x: &Tensor,
        cond: Option<&Tensor>,
    ) -> (Tensor, Vec<f64>) {
        let mut ctx = Ctx::new(store);
        let xn = ctx.input(x.clone());
        let cn = cond.map(|t| ctx.constant(t.clone()));
        let (z, ld) = layer.forward(&mut ctx, xn, cn).unwrap();
        let rows = x.rows();
        let ld = match ld {
            Some(n) => ctx.value(n).as_slice().to_vec(),
            None => vec![0.0; rows],
        };
        (ctx.value(z).clone(), ld)
    }

    #[test]
    fn mask_partition_covers_everything() {
        for kind in [MaskKind::Checkerboard, MaskKind::Channel] {
            for parity in [false, true] {
                let layout = Layout { c: 2, h: 4, w: 4 };
                let (a, b) = MaskSpec { kind, parity }.partition(layout).unwrap();
                let mut seen = vec![false; layout.features()];
                for &j in a.iter().chain(&b) {
                    assert!(!seen[j], "index {j} appears twice");
                    seen[j] = true;
                }
                assert!(seen.iter().all(|&s| s));
            }
        }
    }

    #[test]
    fn fresh_coupling_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let c = Coupling::new(
            &mut store,
            "c0",
            Layout::flat(4),
            MaskSpec::checkerboard(false),
            16,
            1,
            None,
            &mut rng,
            0,
        )
        .unwrap();
        let x = Tensor::new(vec![2, 4], vec![1.0, -2.0, 3.0, 0.5, 0.0, 1.0, 2.0, 3.0]).unwrap();
        let (z, ld) = scratch_forward(&store, &FlowLayer::Coupling(c), &x, None);
        assert_eq!(z.as_slice(), x.as_slice());
        assert!(ld.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn coupling_hand_case_scale_log2() {
        // mask keeps coord 0; force s = log 2 and t = 0 on coord 1
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let c = Coupling::new(
            &mut store,
            "c0",
            Layout::flat(2),
            MaskSpec::checkerboard(false),
            8,
            1,
            None,
            &mut rng,
            0,
        )
        .unwrap();
        let b_out = store.find("c0.s.b_out").unwrap();
        let target = (2.0f64).ln();
        store
            .set_value(b_out, Tensor::from_vec(vec![target.atanh()]))
            .unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap();
        let (z, ld) = scratch_forward(&store, &FlowLayer::Coupling(c), &x, None);
        assert!((z.as_slice()[0] - 1.0).abs() < 1e-12);
        assert!((z.as_slice()[1] - 6.0).abs() < 1e-12);
        assert!((ld[0] - target).abs() < 1e-12);
    }

    #[test]
    fn coupling_roundtrip_random_nets() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let c = Coupling::new(
            &mut store,
            "c0",
            Layout::flat(6),
            MaskSpec::checkerboard(true),
            16,
            2,
            None,
            &mut rng,
            0,
        )
        .unwrap();
        // make it a non-trivial map
        let wo = store.find("c0.s.w_out").unwrap();
        *store.value_mut(wo) = randn_tensor(vec![16, 3], 0.4, &mut rng);
        let wo = store.find("c0.t.w_out").unwrap();
        *store.value_mut(wo) = randn_tensor(vec![16, 3], 0.4, &mut rng);
        let x = randn_tensor(vec![5, 6], 1.0, &mut rng);
        let layer = FlowLayer::Coupling(c);
        let (z, _) = scratch_forward(&store, &layer, &x, None);
        let back = layer.inverse(&store, &z, None).unwrap();
        for (a, b) in x.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn conditional_coupling_distinguishes_classes_and_roundtrips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let c = Coupling::new(
            &mut store,
            "cc",
            Layout::flat(4),
            MaskSpec::checkerboard(false),
            16,
            1,
            Some(2),
            &mut rng,
            0,
        )
        .unwrap();
        for net in ["cc.s", "cc.t"] {
            let wo = store.find(&format!("{net}.w_out")).unwrap();
            *store.value_mut(wo) = randn_tensor(vec![16, 2], 0.5, &mut rng);
        }
        let layer = FlowLayer::Coupling(c);
        let x = randn_tensor(vec![3, 4], 1.0, &mut rng);
        let oh0 = Tensor::new(vec![3, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let oh1 = Tensor::new(vec![3, 2], vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let (z0, _) = scratch_forward(&store, &layer, &x, Some(&oh0));
        let (z1, _) = scratch_forward(&store, &layer, &x, Some(&oh1));
        assert!(z0
            .as_slice()
            .iter()
            .zip(z1.as_slice())
            .any(|(a, b)| (a - b).abs() > 1e-6));
        for (z, oh) in [(z0, oh0), (z1, oh1)] {
            let back = layer.inverse(&store, &z, Some(&oh)).unwrap();
            for (a, b) in x.as_slice().iter().zip(back.as_slice()) {
                assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn conditional_coupling_with_zero_nets_ignores_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let c = Coupling::new(
            &mut store,
            "cc",
            Layout::flat(4),
            MaskSpec::channel(false),
            8,
            1,
            Some(3),
            &mut rng,
            0,
        )
        .unwrap();
        let layer = FlowLayer::Coupling(c);
        let x = randn_tensor(vec![2, 4], 1.0, &mut rng);
        let mut outs = Vec::new();
        for k in 0..3usize {
            let mut oh = Tensor::zeros(vec![2, 3]);
            for r in 0..2 {
                oh.as_mut_slice()[r * 3 + k] = 1.0;
            }
            let (z, ld) = scratch_forward(&store, &layer, &x, Some(&oh));
            assert!(ld.iter().all(|&v| v == 0.0));
            outs.push(z);
        }
        assert_eq!(outs[0].as_slice(), outs[1].as_slice());
        assert_eq!(outs[1].as_slice(), outs[2].as_slice());
        assert_eq!(outs[0].as_slice(), x.as_slice());
    }

    #[test]
    fn actnorm_identity_and_hand_logdet() {
        let mut store = ParamStore::new();
        let mut an = ActNorm::new(&mut store, "a", Layout::flat(2), 0).unwrap();
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (z, ld) = scratch_forward(&store, &FlowLayer::ActNorm(an.clone()), &x, None);
        assert_eq!(z.as_slice(), x.as_slice());
        assert!(ld.iter().all(|&v| v == 0.0));

        an.set_scale_bias(&mut store, &[2.0, 2.0], &[0.0, 0.0]).unwrap();
        let (_, ld) = scratch_forward(&store, &FlowLayer::ActNorm(an), &x, None);
        let expect = 2.0 * (2.0f64).ln();
        assert!((ld[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn actnorm_data_init_normalizes_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let layout = Layout { c: 3, h: 2, w: 2 };
        let mut an = ActNorm::new(&mut store, "a", layout, 0).unwrap();
        let mut x = randn_tensor(vec![64, 12], 1.0, &mut rng);
        for v in x.as_mut_slice().iter_mut() {
            *v = *v * 3.0 + 5.0;
        }
        an.init_from_batch(&mut store, &x).unwrap();
        let (z, _) = scratch_forward(&store, &FlowLayer::ActNorm(an), &x, None);
        for c in 0..3 {
            let vals: Vec<f64> = (0..64)
                .flat_map(|i| (0..4).map(move |p| (i, p)))
                .map(|(i, p)| z.as_slice()[i * 12 + c * 4 + p])
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "channel {c} var {var}");
        }
    }

    #[test]
    fn actnorm_zero_scale_is_numeric_error() {
        let mut store = ParamStore::new();
        let mut an = ActNorm::new(&mut store, "a", Layout::flat(2), 3).unwrap();
        let err = an.set_scale_bias(&mut store, &[1.0, 0.0], &[0.0, 0.0]);
        assert!(matches!(err, Err(Error::Numeric(_))));
        // constant channel in the init batch
        let x = Tensor::new(vec![3, 2], vec![1.0, 5.0, 1.0, 6.0, 1.0, 7.0]).unwrap();
        let err = an.init_from_batch(&mut store, &x);
        assert!(matches!(err, Err(Error::Numeric(_))));
    }

    #[test]
    fn invlinear_identity_and_hand_determinant() {
        let mut store = ParamStore::new();
        let eye = [1.0, 0.0, 0.0, 1.0];
        let il = InvLinear::from_matrix(&mut store, "w", Layout::flat(2), &eye, 0).unwrap();
        let x = Tensor::new(vec![1, 2], vec![3.0, -4.0]).unwrap();
        let (z, ld) = scratch_forward(&store, &FlowLayer::InvLinear(il), &x, None);
        assert_eq!(z.as_slice(), x.as_slice());
        assert_eq!(ld[0], 0.0);

        let mut store = ParamStore::new();
        let w = [2.0, 0.0, 0.0, 3.0];
        let il = InvLinear::from_matrix(&mut store, "w", Layout::flat(2), &w, 0).unwrap();
        let (z, ld) = scratch_forward(&store, &FlowLayer::InvLinear(il), &x, None);
        assert!((z.as_slice()[0] - 6.0).abs() < 1e-12);
        assert!((z.as_slice()[1] + 12.0).abs() < 1e-12);
        assert!((ld[0] - 6.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn invlinear_roundtrip_and_weight_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let w: Vec<f64> = vec![0.8, -0.3, 0.2, 1.4, 0.5, -0.1, 0.0, 0.7, 1.1];
        let il = InvLinear::from_matrix(&mut store, "w", Layout::flat(3), &w, 0).unwrap();
        let got = il.weight_values(&store);
        for (a, b) in got.as_slice().iter().zip(&w) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let x = randn_tensor(vec![4, 3], 1.0, &mut rng);
        let layer = FlowLayer::InvLinear(il);
        let (z, _) = scratch_forward(&store, &layer, &x, None);
        let back = layer.inverse(&store, &z, None).unwrap();
        for (a, b) in x.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn invlinear_singular_matrix_rejected() {
        let mut store = ParamStore::new();
        let w = [1.0, 2.0, 2.0, 4.0];
        let err = InvLinear::from_matrix(&mut store, "w", Layout::flat(2), &w, 0);
        assert!(matches!(err, Err(Error::Numeric(_))));
    }

    #[test]
    fn invlinear_multispatial_matches_per_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut store = ParamStore::new();
        let layout = Layout { c: 2, h: 2, w: 1 };
        let w = [1.2, -0.4, 0.3, 0.9];
        let il = InvLinear::from_matrix(&mut store, "w", layout, &w, 0).unwrap();
        let x = randn_tensor(vec![3, 4], 1.0, &mut rng);
        let layer = FlowLayer::InvLinear(il);
        let (z, ld) = scratch_forward(&store, &layer, &x, None);
        // apply the 2x2 by hand at each of the 2 positions
        for i in 0..3 {
            for p in 0..2 {
                let x0 = x.as_slice()[i * 4 + p];
                let x1 = x.as_slice()[i * 4 + 2 + p];
                let e0 = w[0] * x0 + w[1] * x1;
                let e1 = w[2] * x0 + w[3] * x1;
                assert!((z.as_slice()[i * 4 + p] - e0).abs() < 1e-12);
                assert!((z.as_slice()[i * 4 + 2 + p] - e1).abs() < 1e-12);
            }
        }
        let det: f64 = w[0] * w[3] - w[1] * w[2];
        assert!((ld[0] - 2.0 * det.abs().ln()).abs() < 1e-12);
        let back = layer.inverse(&store, &z, None).unwrap();
        for (a, b) in x.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn space_to_depth_hand_and_roundtrip() {
        let layout = Layout { c: 1, h: 2, w: 2 };
        let s2d = SpaceToDepth::new(layout, 2).unwrap();
        assert_eq!(
            s2d.out_layout(),
            Layout { c: 4, h: 1, w: 1 }
        );
        let store = ParamStore::new();
        let x = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let layer = FlowLayer::SpaceToDepth(s2d);
        let (z, ld) = scratch_forward(&store, &layer, &x, None);
        assert_eq!(z.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(ld.iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layout = Layout { c: 2, h: 4, w: 4 };
        let s2d = SpaceToDepth::new(layout, 2).unwrap();
        let x = randn_tensor(vec![2, 32], 1.0, &mut rng);
        let layer = FlowLayer::SpaceToDepth(s2d);
        let (z, _) = scratch_forward(&store, &layer, &x, None);
        assert_eq!(z.len(), x.len());
        let back = layer.inverse(&store, &z, None).unwrap();
        assert_eq!(back.as_slice(), x.as_slice());
    }

    #[test]
    fn space_to_depth_rejects_indivisible() {
        let err = SpaceToDepth::new(Layout { c: 1, h: 3, w: 4 }, 2);
        assert!(matches!(err, Err(Error::Argument(_))));
    }

    #[test]
    fn factor_out_shapes_and_merge() {
        let layout = Layout { c: 4, h: 3, w: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = randn_tensor(vec![2, 36], 1.0, &mut rng);
        let (kept, aux) = factor_out(&z, 2, layout).unwrap();
        assert_eq!(kept.shape(), &[2, 18]);
        assert_eq!(aux.shape(), &[2, 18]);
        let merged = factor_merge(&kept, &aux);
        assert_eq!(merged.as_slice(), z.as_slice());

        // degenerate split keeps everything
        let (kept, aux) = factor_out(&z, 4, layout).unwrap();
        assert_eq!(kept.as_slice(), z.as_slice());
        assert_eq!(aux.cols(), 0);

        assert!(factor_out(&z, 5, layout).is_err());
        assert!(factor_out(&z, 0, layout).is_err());
    }

    #[test]
    fn to_logits_hand_case_and_roundtrip() {
        let store = ParamStore::new();
        let tl = ToLogits::new(0.05);
        let x = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        let layer = FlowLayer::ToLogits(tl.clone());
        let (z, ld) = scratch_forward(&store, &layer, &x, None);
        assert!(z.as_slice()[0].abs() < 1e-12);
        let expect = 0.9f64.ln() - 2.0 * 0.5f64.ln();
        assert!((ld[0] - expect).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::new(
            vec![2, 3],
            (0..6).map(|_| rng.random::<f64>() * 0.999).collect(),
        )
        .unwrap();
        let (z, _) = scratch_forward(&store, &layer, &x, None);
        let back = tl.inverse(&z);
        for (a, b) in x.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn to_logits_domain_error() {
        let store = ParamStore::new();
        let tl = ToLogits::new(0.05);
        let mut ctx = Ctx::new(&store);
        let x = ctx.input(Tensor::from_vec(vec![1.0]).reshaped(vec![1, 1]).unwrap());
        assert!(matches!(tl.forward(&mut ctx, x), Err(Error::Domain(_))));
    }

    #[test]
    fn stack_factor_out_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut store = ParamStore::new();
        let layout = Layout::flat(4);
        let c0 = Coupling::new(
            &mut store,
            "s.c0",
            layout,
            MaskSpec::checkerboard(false),
            8,
            1,
            None,
            &mut rng,
            0,
        )
        .unwrap();
        let wo = store.find("s.c0.s.w_out").unwrap();
        *store.value_mut(wo) = randn_tensor(vec![8, 2], 0.4, &mut rng);
        let layout2 = Layout::flat(2);
        let c1 = Coupling::new(
            &mut store,
            "s.c1",
            layout2,
            MaskSpec::checkerboard(true),
            8,
            1,
            None,
            &mut rng,
            1,
        )
        .unwrap();
        let stack = FlowStack {
            items: vec![
                StackItem::Layer(FlowLayer::Coupling(c0)),
                StackItem::FactorOut { keep_features: 2 },
                StackItem::Layer(FlowLayer::Coupling(c1)),
            ],
            in_features: 4,
            out_features: 2,
            aux_dims: vec![2],
            n_classes: None,
        };
        let x = randn_tensor(vec![3, 4], 1.0, &mut rng);
        let (z, aux, _) = stack.forward_values(&store, &x, None).unwrap();
        assert_eq!(z.shape(), &[3, 2]);
        assert_eq!(aux.len(), 1);
        assert_eq!(aux[0].shape(), &[3, 2]);
        let back = stack.inverse(&store, &z, &aux, None).unwrap();
        for (a, b) in x.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}
