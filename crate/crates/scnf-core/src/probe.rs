//! Probing classifiers on frozen embeddings. Two identically-sized MLPs
//! are trained on the true labels of the training objects, one over `z_f`
//! and one over `z_h` (encoded with the true labels), and their train/test
//! accuracies are compared.

#[cfg(test)]
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::sub_rng;
use crate::data::{dequantize, shuffle, SemiDataset};
use crate::error::Result;
use crate::graph::{Ctx, ParamStore};
use crate::model::{lse_rows, one_hot_rows, ScnfModel};
use crate::net::ResMlp;
use crate::tensor::Tensor;
use crate::train::{eval_noise_seed, Adam};

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Cap on the number of training embeddings (keeps memorization cheap).
    pub train_cap: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 512,
            epochs: 400,
            batch: 200,
            lr: 1e-3,
            train_cap: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeAccuracy {
    pub train: f64,
    pub test: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ObfuscationReport {
    pub zf: ProbeAccuracy,
    pub zh: ProbeAccuracy,
}

/// Train a single MLP probe on frozen embeddings; returns train/test
/// accuracy.
pub fn train_probe(
    x: &Tensor,
    y: &[usize],
    x_test: &Tensor,
    y_test: &[usize],
    k: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeAccuracy> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = ResMlp::new(&mut store, "probe", x.cols(), cfg.hidden, 0, k, &mut rng)?;
    let mut opt = Adam::new(&store, cfg.lr, 0.9, 0.999);
    let n = x.rows();
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let xb = x.take_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let (loss, mut graph) = {
                let mut ctx = Ctx::new(&store);
                let xn = ctx.input(xb);
                let logits = net.forward(&mut ctx, xn)?;
                let lse = lse_rows(&mut ctx, logits)?;
                let oh = ctx.constant(one_hot_rows(&yb, k)?);
                let sel = ctx.mul(logits, oh)?;
                let sel = ctx.sum_rows(sel)?;
                let gap = ctx.sub(lse, sel)?;
                let loss = ctx.mean_all(gap);
                (loss, ctx.finish(vec![loss]))
            };
            store.zero_grads();
            graph.backward(loss, &Tensor::scalar(1.0), &mut store)?;
            opt.step(&mut store)?;
        }
    }
    let acc = |xs: &Tensor, ys: &[usize]| -> Result<f64> {
        let mut right = 0usize;
        for start in (0..xs.rows()).step_by(512) {
            let end = (start + 512).min(xs.rows());
            let idx: Vec<usize> = (start..end).collect();
            let xb = xs.take_rows(&idx);
            let mut ctx = Ctx::new(&store);
            let xn = ctx.input(xb);
            let logits = net.forward(&mut ctx, xn)?;
            let vals = ctx.value(logits);
            for (row, &truth) in (0..vals.rows()).zip(&ys[start..end]) {
                let r = vals.row(row);
                let pred = r
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                    .0;
                if pred == truth {
                    right += 1;
                }
            }
        }
        Ok(right as f64 / xs.rows() as f64)
    };
    Ok(ProbeAccuracy {
        train: acc(x, y)?,
        test: acc(x_test, y_test)?,
    })
}

/// Embeddings of the full training pool (labeled + unlabeled, true labels)
/// and the test set: `(z_f, z_h, y)` per split. `z_h` is encoded with the
/// true labels.
pub fn embed_dataset(
    model: &ScnfModel,
    data: &SemiDataset,
) -> Result<((Tensor, Tensor, Vec<usize>), (Tensor, Tensor, Vec<usize>))> {
    let embed = |x: &Tensor, y: &[usize], noise_seed: u64| -> Result<(Tensor, Tensor)> {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let mut zf_rows: Vec<f64> = Vec::with_capacity(x.rows() * model.split_dim);
        let mut zh_rows: Vec<f64> = Vec::with_capacity(x.rows() * model.split_dim);
        for start in (0..x.rows()).step_by(256) {
            let end = (start + 256).min(x.rows());
            let idx: Vec<usize> = (start..end).collect();
            let mut xb = x.take_rows(&idx);
            if data.quantized {
                xb = dequantize(&xb, &mut rng);
            }
            let (zf, _, _) = model.encode(&xb)?;
            let (zh, _) = model.head_forward(&zf, &y[start..end])?;
            zf_rows.extend_from_slice(zf.as_slice());
            zh_rows.extend_from_slice(zh.as_slice());
        }
        Ok((
            Tensor::new(vec![x.rows(), model.split_dim], zf_rows)?,
            Tensor::new(vec![x.rows(), model.split_dim], zh_rows)?,
        ))
    };

    let mut train_y = data.labeled_y.clone();
    train_y.extend_from_slice(&data.unlabeled_y);
    let mut train_rows = data.labeled_x.clone();
    if data.n_unlabeled() > 0 {
        let mut all = Vec::with_capacity((data.n_labeled() + data.n_unlabeled()) * data.dim());
        all.extend_from_slice(data.labeled_x.as_slice());
        all.extend_from_slice(data.unlabeled_x.as_slice());
        train_rows = Tensor::new(vec![train_y.len(), data.dim()], all)?;
    }
    let (zf_tr, zh_tr) = embed(&train_rows, &train_y, eval_noise_seed(data.split_seed))?;
    let (zf_te, zh_te) = embed(&data.test_x, &data.test_y, eval_noise_seed(data.split_seed) ^ 1)?;
    Ok((
        (zf_tr, zh_tr, train_y),
        (zf_te, zh_te, data.test_y.clone()),
    ))
}

/// Train the two probes of the obfuscation experiment and report all four
/// accuracies.
pub fn obfuscation_probe(
    model: &ScnfModel,
    data: &SemiDataset,
    cfg: &ProbeConfig,
) -> Result<ObfuscationReport> {
    let ((zf_tr, zh_tr, y_tr), (zf_te, zh_te, y_te)) = embed_dataset(model, data)?;
    // subsample the training pool to the cap, same subset for both probes
    let n = y_tr.len();
    let cap = cfg.train_cap.min(n).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = sub_rng(cfg.seed, 31);
    shuffle(&mut order, &mut rng);
    order.truncate(cap);
    let zf_tr = zf_tr.take_rows(&order);
    let zh_tr = zh_tr.take_rows(&order);
    let y_cap: Vec<usize> = order.iter().map(|&i| y_tr[i]).collect();

    let zf = train_probe(&zf_tr, &y_cap, &zf_te, &y_te, model.k, cfg)?;
    let zh = train_probe(&zh_tr, &y_cap, &zh_te, &y_te, model.k, cfg)?;
    Ok(ObfuscationReport { zf, zh })
}
