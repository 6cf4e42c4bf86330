//! Optimization of the semi-supervised objective: direct SGD on the exact
//! likelihood, or EM where each M-step is a single gradient step. Both
//! share one adaptive-moment optimizer and one evaluation path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{build_model, sub_rng};
use crate::config::TrainConfig;
use crate::data::{bits_per_dim, dequantize, shuffle, SemiDataset};
use crate::error::{Error, Result};
use crate::graph::{Ctx, Node, ParamStore};
use crate::model::{lse_rows, one_hot_rows, softmax_slice, ScnfModel};
use crate::tensor::Tensor;

/// Gradient-norm threshold above which a step is skipped; deep stacks
/// occasionally spike early in training.
pub const GRAD_SKIP_NORM: f64 = 1e4;

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64) -> Self {
        let m = store.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        let v = store.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    /// One update from the gradients currently accumulated in the store.
    /// Aborts (no state touched) if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if !store.grads_finite() {
            return Err(Error::Numeric("optimizer step aborted: non-finite gradient".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, id) in store.ids().enumerate().collect::<Vec<_>>() {
            let g = store.grad(id).clone();
            let m = &mut self.m[idx];
            for (mv, gv) in m.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
            }
            let v = &mut self.v[idx];
            for (vv, gv) in v.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
            }
            let (m, v) = (&self.m[idx], &self.v[idx]);
            let p = store.value_mut(id);
            for ((pv, mv), vv) in p.as_mut_slice().iter_mut().zip(m.as_slice()).zip(v.as_slice()) {
                let mh = mv / bc1;
                let vh = vv / bc2;
                *pv -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Per-batch loss breakdown (values, not nodes).
#[derive(Debug, Clone, Copy, Default)]
pub struct BatchLosses {
    pub total: f64,
    /// -mean log p(x, y) over the labeled batch.
    pub labeled_nll: f64,
    /// -mean log p(x) over the unlabeled batch.
    pub unlabeled_nll: f64,
}

/// Labeled batch as (features, labels).
pub type Labeled<'a> = (&'a Tensor, &'a [usize]);

struct BatchNodes {
    joint_lab: Option<Node>,
    joint_unl: Option<Node>,
}

fn batch_joint(
    model: &ScnfModel,
    ctx: &mut Ctx,
    labeled: Option<Labeled>,
    unlabeled: Option<&Tensor>,
) -> Result<BatchNodes> {
    let bl = labeled.map_or(0, |(x, _)| x.rows());
    let bu = unlabeled.map_or(0, |x| x.rows());
    if bl == 0 && bu == 0 {
        return Err(Error::Argument("objective: both batches empty".into()));
    }
    let x = match (labeled, unlabeled) {
        (Some((xl, _)), Some(xu)) => stack_rows(xl, xu)?,
        (Some((xl, _)), None) => xl.clone(),
        (None, Some(xu)) => xu.clone(),
        (None, None) => unreachable!(),
    };
    let xn = ctx.input(x);
    let jn = model.joint_matrix(ctx, xn)?;
    let joint_lab = if bl > 0 {
        Some(ctx.slice_rows(jn.joint, 0, bl)?)
    } else {
        None
    };
    let joint_unl = if bu > 0 {
        Some(ctx.slice_rows(jn.joint, bl, bl + bu)?)
    } else {
        None
    };
    Ok(BatchNodes {
        joint_lab,
        joint_unl,
    })
}

fn stack_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            op: "stack_rows",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut data = Vec::with_capacity((a.rows() + b.rows()) * a.cols());
    data.extend_from_slice(a.as_slice());
    data.extend_from_slice(b.as_slice());
    Tensor::new(vec![a.rows() + b.rows(), a.cols()], data)
}

/// Mean labeled joint selected at the true labels: (node, per-example mean).
fn labeled_mean(model: &ScnfModel, ctx: &mut Ctx, joint_lab: Node, ys: &[usize]) -> Result<Node> {
    let oh = ctx.constant(one_hot_rows(ys, model.k)?);
    let sel = ctx.mul(joint_lab, oh)?;
    let sel = ctx.sum_rows(sel)?;
    Ok(ctx.mean_all(sel))
}

/// Build the negative semi-supervised objective on the tape:
/// `-( |L| * mean_L log p(x,y) + |U| * mean_U log p(x) )`, plus
/// `clf_weight * mean_L(-log p(y|x))` when enabled. Population sizes make
/// the minibatch estimator unbiased for the full-dataset objective.
#[allow(clippy::too_many_arguments)]
pub fn ssl_objective_node(
    model: &ScnfModel,
    ctx: &mut Ctx,
    labeled: Option<Labeled>,
    unlabeled: Option<&Tensor>,
    pop_labeled: usize,
    pop_unlabeled: usize,
    clf_weight: f64,
) -> Result<(Node, BatchLosses)> {
    let nodes = batch_joint(model, ctx, labeled, unlabeled)?;
    let mut breakdown = BatchLosses::default();
    let mut obj: Option<Node> = None;

    let mut clf_term: Option<Node> = None;
    if let (Some(jl), Some((_, ys))) = (nodes.joint_lab, labeled) {
        let mean_l = labeled_mean(model, ctx, jl, ys)?;
        breakdown.labeled_nll = -ctx.value(mean_l).item();
        let term = ctx.scale(mean_l, pop_labeled as f64)?;
        obj = Some(term);
        if clf_weight > 0.0 {
            let lse = lse_rows(ctx, jl)?;
            let oh = ctx.constant(one_hot_rows(ys, model.k)?);
            let sel = ctx.mul(jl, oh)?;
            let sel = ctx.sum_rows(sel)?;
            let gap = ctx.sub(lse, sel)?;
            let clf = ctx.mean_all(gap);
            clf_term = Some(ctx.scale(clf, clf_weight)?);
        }
    }
    if let Some(ju) = nodes.joint_unl {
        let lse = lse_rows(ctx, ju)?;
        let mean_u = ctx.mean_all(lse);
        breakdown.unlabeled_nll = -ctx.value(mean_u).item();
        let term = ctx.scale(mean_u, pop_unlabeled as f64)?;
        obj = Some(match obj {
            Some(o) => ctx.add(o, term)?,
            None => term,
        });
    }
    let mut loss = ctx.scale(obj.expect("nonempty objective"), -1.0)?;
    // the classification penalty is a per-example mean; it joins the
    // population sum unscaled so callers can normalize the whole thing
    if let Some(clf) = clf_term {
        let n = (pop_labeled + pop_unlabeled).max(1) as f64;
        let clf = ctx.scale(clf, n)?;
        loss = ctx.add(loss, clf)?;
    }
    breakdown.total = ctx.value(loss).item();
    Ok((loss, breakdown))
}

/// Value-only evaluation of the semi-supervised objective.
pub fn ssl_objective(
    model: &ScnfModel,
    labeled: Option<Labeled>,
    unlabeled: Option<&Tensor>,
    pop_labeled: usize,
    pop_unlabeled: usize,
) -> Result<BatchLosses> {
    let mut ctx = Ctx::new(&model.store);
    let (_, b) = ssl_objective_node(model, &mut ctx, labeled, unlabeled, pop_labeled, pop_unlabeled, 0.0)?;
    Ok(b)
}

/// Mean negative log posterior of the true labels.
pub fn clf_loss(model: &ScnfModel, labeled: Labeled) -> Result<f64> {
    let mut ctx = Ctx::new(&model.store);
    let nodes = batch_joint(model, &mut ctx, Some(labeled), None)?;
    let jl = nodes.joint_lab.expect("labeled batch");
    let lse = lse_rows(&mut ctx, jl)?;
    let oh = ctx.constant(one_hot_rows(labeled.1, model.k)?);
    let sel = ctx.mul(jl, oh)?;
    let sel = ctx.sum_rows(sel)?;
    let gap = ctx.sub(lse, sel)?;
    let m = ctx.mean_all(gap);
    Ok(ctx.value(m).item())
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub losses: BatchLosses,
    pub grad_norm: f64,
    pub applied: bool,
    /// EM evidence bound at the pre-step parameters (EM steps only).
    pub bound: Option<f64>,
}

/// One SGD step on the semi-supervised objective.
#[allow(clippy::too_many_arguments)]
pub fn sgd_step(
    model: &mut ScnfModel,
    opt: &mut Adam,
    labeled: Option<Labeled>,
    unlabeled: Option<&Tensor>,
    pop_labeled: usize,
    pop_unlabeled: usize,
    clf_weight: f64,
    step: usize,
) -> Result<StepOutcome> {
    let (loss_node, losses, mut graph) = {
        let mut ctx = Ctx::new(&model.store);
        let (loss, mut losses) = ssl_objective_node(
            model,
            &mut ctx,
            labeled,
            unlabeled,
            pop_labeled,
            pop_unlabeled,
            clf_weight,
        )?;
        // optimize the per-example average: same optimum, and gradient
        // norms stay on the scale the skip guard expects
        let n = (pop_labeled + pop_unlabeled).max(1) as f64;
        let loss = ctx.scale(loss, 1.0 / n)?;
        losses.total = ctx.value(loss).item();
        (loss, losses, ctx.finish(vec![loss]))
    };
    if !losses.total.is_finite() {
        return Err(Error::Diverged {
            step,
            msg: format!("loss {}", losses.total),
        });
    }
    model.store.zero_grads();
    graph.backward(loss_node, &Tensor::scalar(1.0), &mut model.store)?;
    finish_step(model, opt, losses, None)
}

/// One EM step: the E-step freezes the posterior of the unlabeled batch
/// (labeled examples use a point mass at the true label), the M-step takes
/// exactly one optimizer step on the expected complete-data likelihood.
#[allow(clippy::too_many_arguments)]
pub fn em_step(
    model: &mut ScnfModel,
    opt: &mut Adam,
    labeled: Option<Labeled>,
    unlabeled: Option<&Tensor>,
    pop_labeled: usize,
    pop_unlabeled: usize,
    step: usize,
) -> Result<StepOutcome> {
    // E-step: q(y) = posterior under the current parameters, no gradients.
    let q: Option<Tensor> = match unlabeled {
        Some(xu) => {
            let joints = model.joint_values(xu)?;
            let mut q = Tensor::zeros(vec![xu.rows(), model.k]);
            for i in 0..xu.rows() {
                let p = softmax_slice(joints.row(i));
                q.as_mut_slice()[i * model.k..(i + 1) * model.k].copy_from_slice(&p);
            }
            Some(q)
        }
        None => None,
    };

    let (loss_node, losses, bound, mut graph) = {
        let mut ctx = Ctx::new(&model.store);
        let nodes = batch_joint(model, &mut ctx, labeled, unlabeled)?;
        let mut bound = 0.0;
        let mut obj: Option<Node> = None;
        let mut losses = BatchLosses::default();
        if let (Some(jl), Some((_, ys))) = (nodes.joint_lab, labeled) {
            let mean_l = labeled_mean(model, &mut ctx, jl, ys)?;
            losses.labeled_nll = -ctx.value(mean_l).item();
            bound += -losses.labeled_nll * ys.len() as f64;
            obj = Some(ctx.scale(mean_l, pop_labeled as f64)?);
        }
        if let (Some(ju), Some(q)) = (nodes.joint_unl, q.as_ref()) {
            let qn = ctx.constant(q.clone());
            let eq = ctx.mul(ju, qn)?;
            let eq = ctx.sum_rows(eq)?;
            let mean_u = ctx.mean_all(eq);
            // the bound adds the q entropy; it is constant in the parameters
            let entropy: f64 = (0..q.rows())
                .map(|i| -q.row(i).iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
                .sum();
            bound += ctx.value(eq).as_slice().iter().sum::<f64>() + entropy;
            losses.unlabeled_nll = -(ctx.value(mean_u).item() + entropy / q.rows() as f64);
            obj = Some(match obj {
                Some(o) => {
                    let t = ctx.scale(mean_u, pop_unlabeled as f64)?;
                    ctx.add(o, t)?
                }
                None => ctx.scale(mean_u, pop_unlabeled as f64)?,
            });
        }
        let obj = obj.ok_or_else(|| Error::Argument("objective: both batches empty".into()))?;
        let n = (pop_labeled + pop_unlabeled).max(1) as f64;
        let scaled = ctx.scale(obj, -1.0 / n)?;
        losses.total = ctx.value(scaled).item();
        (scaled, losses, bound, ctx.finish(vec![scaled]))
    };
    if !losses.total.is_finite() {
        return Err(Error::Diverged {
            step,
            msg: format!("loss {}", losses.total),
        });
    }
    model.store.zero_grads();
    graph.backward(loss_node, &Tensor::scalar(1.0), &mut model.store)?;
    finish_step(model, opt, losses, Some(bound))
}

fn finish_step(
    model: &mut ScnfModel,
    opt: &mut Adam,
    losses: BatchLosses,
    bound: Option<f64>,
) -> Result<StepOutcome> {
    let grad_norm = model.store.grad_norm();
    let applied = grad_norm.is_finite() && grad_norm <= GRAD_SKIP_NORM;
    if applied {
        opt.step(&mut model.store)?;
    } else {
        model.store.zero_grads();
    }
    Ok(StepOutcome {
        losses,
        grad_norm,
        applied,
        bound,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct EvalMetrics {
    pub error: f64,
    pub nll: f64,
    pub bits_per_dim: f64,
}

/// Classification error, marginal NLL (nats) and bits/dim over a dataset.
/// Quantized inputs are dequantized with a fixed noise stream so repeated
/// evaluations agree exactly.
pub fn evaluate(
    model: &ScnfModel,
    x: &Tensor,
    y: &[usize],
    quantized: bool,
    noise_seed: u64,
    batch: usize,
) -> Result<EvalMetrics> {
    let n = x.rows();
    let d = x.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut wrong = 0usize;
    let mut nll_sum = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let mut xb = x.take_rows(&idx);
        if quantized {
            xb = dequantize(&xb, &mut rng);
        }
        let joints = model.joint_values(&xb)?;
        for (row, &truth) in (0..xb.rows()).zip(&y[start..end]) {
            let scores = joints.row(row);
            let pred = scores
                .iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |best, (i, &s)| {
                    if s > best.1 {
                        (i, s)
                    } else {
                        best
                    }
                })
                .0;
            if pred != truth {
                wrong += 1;
            }
            nll_sum -= crate::model::lse_slice(scores);
        }
        start = end;
    }
    let nll = nll_sum / n as f64;
    Ok(EvalMetrics {
        error: wrong as f64 / n as f64,
        nll,
        bits_per_dim: bits_per_dim(nll, d, quantized),
    })
}

pub fn eval_noise_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_0e4a_1000_0001
}

/// One row of the metric log (the CSV schema of the train command).
#[derive(Debug, Clone, Copy)]
pub struct MetricRow {
    pub step: usize,
    pub train_loss: f64,
    pub labeled_nll: f64,
    pub unlabeled_nll: f64,
    pub test_error: f64,
    pub bits_per_dim: f64,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("step,train_loss,labeled_nll,unlabeled_nll,test_error,bits_per_dim\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.train_loss, r.labeled_nll, r.unlabeled_nll, r.test_error, r.bits_per_dim
        ));
    }
    s
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Best model by validation (test) error.
    pub model: ScnfModel,
    pub metrics: Vec<MetricRow>,
    /// Loss of every step, for trend diagnostics.
    pub step_losses: Vec<f64>,
    pub diverged_at: Option<usize>,
    pub skipped_steps: usize,
}

/// Run the configured algorithm for the configured number of epochs.
/// Returns the best-by-validation model; on divergence the most recent
/// evaluation snapshot is retained and `diverged_at` is set.
pub fn train(cfg: &TrainConfig, data: &SemiDataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    crate::threads::init();
    let mut model = build_model(cfg)?;
    let mut opt = Adam::new(&model.store, cfg.lr, cfg.beta1, cfg.beta2);
    let mut batch_rng = sub_rng(cfg.seed, 10);
    let mut dequant_rng = sub_rng(cfg.seed, 11);

    let nl = data.n_labeled();
    let nu = data.n_unlabeled();
    let prep = |t: &Tensor, rng: &mut ChaCha8Rng| -> Tensor {
        if data.quantized {
            dequantize(t, rng)
        } else {
            t.clone()
        }
    };

    // data-dependent init from the first batches
    {
        let lab = prep(&data.labeled_x, &mut dequant_rng);
        let init_all = if nu > 0 {
            let take: Vec<usize> = (0..nu.min(cfg.batch_unlabeled.max(1))).collect();
            let unl = prep(&data.unlabeled_x.take_rows(&take), &mut dequant_rng);
            if nl > 0 {
                stack_rows(&lab, &unl)?
            } else {
                unl
            }
        } else {
            lab.clone()
        };
        model.data_init(&init_all, &lab, &data.labeled_y)?;
    }

    let steps_per_epoch = if nu > 0 {
        nu.div_ceil(cfg.batch_unlabeled.max(1))
    } else {
        nl.div_ceil(cfg.batch_labeled.max(1))
    };
    let total_steps = steps_per_epoch * cfg.epochs;

    let mut metrics = Vec::new();
    let mut step_losses = Vec::with_capacity(total_steps);
    let mut skipped = 0usize;
    let mut diverged_at = None;
    let mut snapshot = model.clone();

    let eval_and_log = |model: &ScnfModel, step: usize, losses: &BatchLosses| -> Result<MetricRow> {
        let m = evaluate(
            model,
            &data.test_x,
            &data.test_y,
            data.quantized,
            eval_noise_seed(cfg.seed),
            cfg.eval_batch.max(1),
        )?;
        Ok(MetricRow {
            step,
            train_loss: losses.total,
            labeled_nll: losses.labeled_nll,
            unlabeled_nll: losses.unlabeled_nll,
            test_error: m.error,
            bits_per_dim: m.bits_per_dim,
        })
    };

    // epoch 0 snapshot so that epochs == 0 still yields a metric row
    let init_losses = BatchLosses::default();
    let row = eval_and_log(&model, 0, &init_losses)?;
    metrics.push(row);
    let mut best: Option<(f64, ScnfModel)> = Some((row.test_error, model.clone()));

    let mut step = 0usize;
    'train: for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..nu).collect();
        shuffle(&mut order, &mut batch_rng);
        for chunk_start in (0..steps_per_epoch).map(|s| s * cfg.batch_unlabeled.max(1)) {
            step += 1;
            // unlabeled minibatch: epoch-shuffled, without replacement
            let unl_batch: Option<Tensor> = if nu > 0 {
                let end = (chunk_start + cfg.batch_unlabeled).min(nu);
                let idx = &order[chunk_start.min(nu)..end];
                if idx.is_empty() {
                    None
                } else {
                    Some(prep(&data.unlabeled_x.take_rows(idx), &mut dequant_rng))
                }
            } else {
                None
            };
            // labeled minibatch: the whole of L when it fits, otherwise
            // resampled with replacement
            let (lab_x, lab_y): (Option<Tensor>, Vec<usize>) = if nl == 0 {
                (None, Vec::new())
            } else if cfg.batch_labeled >= nl {
                (
                    Some(prep(&data.labeled_x, &mut dequant_rng)),
                    data.labeled_y.clone(),
                )
            } else {
                let idx: Vec<usize> = (0..cfg.batch_labeled)
                    .map(|_| batch_rng.random_range(0..nl))
                    .collect();
                let ys = idx.iter().map(|&i| data.labeled_y[i]).collect();
                (
                    Some(prep(&data.labeled_x.take_rows(&idx), &mut dequant_rng)),
                    ys,
                )
            };
            let labeled = lab_x.as_ref().map(|x| (x, lab_y.as_slice()));

            let outcome = match cfg.algorithm.as_str() {
                "em-sgd" => em_step(
                    &mut model,
                    &mut opt,
                    labeled,
                    unl_batch.as_ref(),
                    nl,
                    nu,
                    step,
                ),
                _ => sgd_step(
                    &mut model,
                    &mut opt,
                    labeled,
                    unl_batch.as_ref(),
                    nl,
                    nu,
                    cfg.clf_loss_weight,
                    step,
                ),
            };
            let outcome = match outcome {
                Ok(o) => o,
                Err(Error::Diverged { step, .. }) => {
                    diverged_at = Some(step);
                    model = snapshot;
                    break 'train;
                }
                Err(e) => return Err(e),
            };
            if !outcome.applied {
                skipped += 1;
            }
            step_losses.push(outcome.losses.total);

            if step % cfg.eval_every.max(1) == 0 || step == total_steps {
                let row = eval_and_log(&model, step, &outcome.losses)?;
                metrics.push(row);
                snapshot = model.clone();
                let better = best.as_ref().map_or(true, |(e, _)| row.test_error < *e);
                if better {
                    best = Some((row.test_error, model.clone()));
                }
            }
        }
    }

    let model = if diverged_at.is_some() {
        model // last good snapshot, restored above
    } else {
        best.map(|(_, m)| m).unwrap_or(model)
    };
    Ok(TrainOutcome {
        model,
        metrics,
        step_losses,
        diverged_at,
        skipped_steps: skipped,
    })
}
