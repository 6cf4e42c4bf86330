//! Small residual MLPs used as the scale/shift networks inside coupling
//! layers. The output projection is zero-initialized so a fresh coupling
//! layer starts as the identity map.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::graph::{Ctx, Node, ParamId, ParamStore};
use crate::tensor::Tensor;

/// `in -> hidden` projection, `blocks` residual tanh blocks, `hidden -> out`
/// zero-initialized projection.
#[derive(Debug, Clone)]
pub struct ResMlp {
    w_in: ParamId,
    b_in: ParamId,
    blocks: Vec<(ParamId, ParamId)>,
    pub(crate) w_out: ParamId,
    b_out: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

pub fn randn_tensor<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(shape, data).expect("randn shape")
}

impl ResMlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        n_blocks: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w_in = store.register(
            format!("{prefix}.w_in"),
            randn_tensor(vec![in_dim, hidden], 1.0 / (in_dim as f64).sqrt(), rng),
        )?;
        let b_in = store.register(format!("{prefix}.b_in"), Tensor::zeros(vec![hidden]))?;
        let mut blocks = Vec::with_capacity(n_blocks);
        for i in 0..n_blocks {
            let w = store.register(
                format!("{prefix}.res{i}.w"),
                randn_tensor(vec![hidden, hidden], 1.0 / (hidden as f64).sqrt(), rng),
            )?;
            let b = store.register(format!("{prefix}.res{i}.b"), Tensor::zeros(vec![hidden]))?;
            blocks.push((w, b));
        }
        let w_out =
            store.register(format!("{prefix}.w_out"), Tensor::zeros(vec![hidden, out_dim]))?;
        let b_out = store.register(format!("{prefix}.b_out"), Tensor::zeros(vec![out_dim]))?;
        Ok(ResMlp {
            w_in,
            b_in,
            blocks,
            w_out,
            b_out,
            in_dim,
            out_dim,
        })
    }

    /// (rows, in_dim) -> (rows, out_dim)
    pub fn forward(&self, ctx: &mut Ctx, x: Node) -> Result<Node> {
        let w = ctx.param(self.w_in);
        let b = ctx.param(self.b_in);
        let mut h = ctx.matmul(x, w)?;
        h = ctx.add_row(h, b)?;
        h = ctx.tanh(h);
        for &(w, b) in &self.blocks {
            let w = ctx.param(w);
            let b = ctx.param(b);
            let t = ctx.matmul(h, w)?;
            let t = ctx.add_row(t, b)?;
            let t = ctx.tanh(t);
            h = ctx.add(h, t)?;
        }
        let w = ctx.param(self.w_out);
        let b = ctx.param(self.b_out);
        let out = ctx.matmul(h, w)?;
        ctx.add_row(out, b)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w_in, self.b_in];
        for &(w, b) in &self.blocks {
            ids.push(w);
            ids.push(b);
        }
        ids.push(self.w_out);
        ids.push(self.b_out);
        ids
    }
}
