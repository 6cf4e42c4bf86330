//! Builds models from a [`TrainConfig`]: a small vector architecture for
//! the 2-D toy problems and a multi-scale image architecture for MNIST.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::graph::ParamStore;
use crate::layers::{
    ActNorm, Coupling, FlowLayer, FlowStack, InvLinear, Layout, MaskSpec, SpaceToDepth, StackItem,
    ToLogits,
};
use crate::model::{CondHead, GmmHead, PassCounters, ScnfModel};
use crate::tensor::Tensor;

pub const LOGIT_ALPHA: f64 = 0.05;

/// Deterministic per-purpose RNG stream.
pub fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

struct StackBuilder<'s> {
    store: &'s mut ParamStore,
    rng: ChaCha8Rng,
    prefix: String,
    items: Vec<StackItem>,
    layout: Layout,
    aux_dims: Vec<usize>,
    checker_parity: bool,
    channel_parity: bool,
    index: usize,
    n_classes: Option<usize>,
    hidden: usize,
    res_blocks: usize,
}

impl<'s> StackBuilder<'s> {
    fn new(
        store: &'s mut ParamStore,
        prefix: &str,
        layout: Layout,
        n_classes: Option<usize>,
        hidden: usize,
        res_blocks: usize,
        rng: ChaCha8Rng,
    ) -> Self {
        StackBuilder {
            store,
            rng,
            prefix: prefix.to_string(),
            items: Vec::new(),
            layout,
            aux_dims: Vec::new(),
            checker_parity: false,
            channel_parity: false,
            index: 0,
            n_classes,
            hidden,
            res_blocks,
        }
    }

    fn name(&mut self, kind: &str) -> String {
        let n = format!("{}.{}{}", self.prefix, kind, self.index);
        self.index += 1;
        n
    }

    fn to_logits(&mut self) -> Result<()> {
        self.items
            .push(StackItem::Layer(FlowLayer::ToLogits(ToLogits::new(LOGIT_ALPHA))));
        Ok(())
    }

    fn actnorm(&mut self) -> Result<()> {
        let name = self.name("actnorm");
        let l = ActNorm::new(self.store, &name, self.layout, self.index)?;
        self.items.push(StackItem::Layer(FlowLayer::ActNorm(l)));
        Ok(())
    }

    fn inv_linear(&mut self) -> Result<()> {
        let name = self.name("invlin");
        let l = InvLinear::new(self.store, &name, self.layout, &mut self.rng, self.index)?;
        self.items.push(StackItem::Layer(FlowLayer::InvLinear(l)));
        Ok(())
    }

    fn coupling(&mut self, mask: MaskSpec) -> Result<()> {
        let name = self.name("coupling");
        let l = Coupling::new(
            self.store,
            &name,
            self.layout,
            mask,
            self.hidden,
            self.res_blocks,
            self.n_classes,
            &mut self.rng,
            self.index,
        )?;
        self.items.push(StackItem::Layer(FlowLayer::Coupling(l)));
        Ok(())
    }

    fn checker_coupling(&mut self) -> Result<()> {
        let parity = self.checker_parity;
        self.checker_parity = !self.checker_parity;
        self.coupling(MaskSpec::checkerboard(parity))
    }

    fn channel_coupling(&mut self) -> Result<()> {
        let parity = self.channel_parity;
        self.channel_parity = !self.channel_parity;
        self.coupling(MaskSpec::channel(parity))
    }

    fn squeeze(&mut self) -> Result<()> {
        let l = SpaceToDepth::new(self.layout, 2)?;
        self.layout = l.out_layout();
        self.items.push(StackItem::Layer(FlowLayer::SpaceToDepth(l)));
        Ok(())
    }

    fn factor_out(&mut self, keep_channels: usize) -> Result<()> {
        if keep_channels == 0 || keep_channels > self.layout.c {
            return Err(Error::Argument(format!(
                "factor_out keep {keep_channels} outside [1, {}]",
                self.layout.c
            )));
        }
        if keep_channels == self.layout.c {
            return Ok(()); // degenerate split: nothing leaves the stack
        }
        let keep_features = keep_channels * self.layout.spatial();
        self.aux_dims
            .push(self.layout.features() - keep_features);
        self.items.push(StackItem::FactorOut { keep_features });
        self.layout = Layout {
            c: keep_channels,
            ..self.layout
        };
        Ok(())
    }

    fn finish(self, in_features: usize) -> FlowStack {
        FlowStack {
            out_features: self.layout.features(),
            items: self.items,
            in_features,
            aux_dims: self.aux_dims,
            n_classes: self.n_classes,
        }
    }
}

/// Factor-out keeps per stage for each supported split dimension:
/// (after the first squeeze at 4 channels, after the second at
/// 4*k1 channels).
fn mnist_keeps(split_dim: usize) -> Result<(usize, usize)> {
    Ok(match split_dim {
        49 => (1, 1),
        98 => (1, 2),
        196 => (2, 4),
        392 => (2, 8),
        784 => (4, 16),
        other => {
            return Err(Error::Argument(format!(
                "split_dim {other} not one of 49|98|196|392|784"
            )))
        }
    })
}

pub fn build_model(cfg: &TrainConfig) -> Result<ScnfModel> {
    cfg.validate()?;
    match cfg.arch.as_str() {
        "toy" => build_toy(cfg),
        "mnist" => build_mnist(cfg),
        other => Err(Error::Argument(format!("unknown arch {other:?}"))),
    }
}

fn build_toy(cfg: &TrainConfig) -> Result<ScnfModel> {
    let mut store = ParamStore::new();
    let d = 2;
    let layout = Layout::flat(d);
    let mut b = StackBuilder::new(
        &mut store,
        "fw",
        layout,
        None,
        cfg.hidden,
        cfg.res_blocks,
        sub_rng(cfg.seed, 1),
    );
    for _ in 0..cfg.fw_blocks {
        b.actnorm()?;
        b.inv_linear()?;
        b.checker_coupling()?;
    }
    let fw = b.finish(d);

    let head = match cfg.head.as_str() {
        "glow" => {
            let mut hb = StackBuilder::new(
                &mut store,
                "h",
                layout,
                Some(cfg.classes),
                cfg.hidden,
                cfg.res_blocks,
                sub_rng(cfg.seed, 2),
            );
            for _ in 0..cfg.h_blocks {
                hb.actnorm()?;
                hb.inv_linear()?;
                hb.checker_coupling()?;
            }
            let stack = hb.finish(d);
            let prior_logvar = store.register("prior_h.logvar", Tensor::zeros(vec![d]))?;
            CondHead::Flow {
                stack,
                prior_logvar,
            }
        }
        "gmm" => CondHead::Gmm(GmmHead::new(
            &mut store,
            "gmm",
            cfg.classes,
            d,
            0.5,
            &mut sub_rng(cfg.seed, 2),
        )?),
        other => return Err(Error::Argument(format!("unknown head {other:?}"))),
    };

    Ok(ScnfModel {
        store,
        fw,
        head,
        k: cfg.classes,
        input_dim: d,
        split_dim: d,
        counters: PassCounters::default(),
    })
}

fn build_mnist(cfg: &TrainConfig) -> Result<ScnfModel> {
    let mut store = ParamStore::new();
    let (k1, k2) = mnist_keeps(cfg.split_dim)?;
    let mut b = StackBuilder::new(
        &mut store,
        "fw",
        Layout { c: 1, h: 28, w: 28 },
        None,
        cfg.hidden,
        cfg.res_blocks,
        sub_rng(cfg.seed, 1),
    );
    b.to_logits()?;

    // stage 1 at 28x28
    for _ in 0..cfg.couplings_checker {
        b.inv_linear()?;
        b.checker_coupling()?;
        b.actnorm()?;
    }
    b.squeeze()?; // (4, 14, 14)
    for _ in 0..cfg.couplings_channel {
        b.inv_linear()?;
        b.channel_coupling()?;
        b.actnorm()?;
    }
    b.factor_out(k1)?;

    // stage 2 at 14x14
    for _ in 0..cfg.couplings_checker {
        b.inv_linear()?;
        b.checker_coupling()?;
        b.actnorm()?;
    }
    b.squeeze()?; // (4*k1, 7, 7)
    for _ in 0..cfg.couplings_channel {
        b.inv_linear()?;
        b.channel_coupling()?;
        b.actnorm()?;
    }
    b.factor_out(k2)?;

    // stage 3 at 7x7
    for _ in 0..cfg.couplings_checker {
        b.inv_linear()?;
        b.checker_coupling()?;
        b.actnorm()?;
    }
    for _ in 0..cfg.couplings_channel {
        b.inv_linear()?;
        b.channel_coupling()?;
        b.actnorm()?;
    }
    let fw = b.finish(784);
    let split_dim = fw.out_features;
    debug_assert_eq!(split_dim, cfg.split_dim);

    let head = match cfg.head.as_str() {
        "glow" => {
            let layout = Layout::flat(split_dim);
            let mut hb = StackBuilder::new(
                &mut store,
                "h",
                layout,
                Some(cfg.classes),
                cfg.hidden,
                cfg.res_blocks,
                sub_rng(cfg.seed, 2),
            );
            for _ in 0..cfg.h_couplings {
                hb.actnorm()?;
                hb.inv_linear()?;
                hb.channel_coupling()?;
            }
            hb.factor_out(split_dim / 2)?;
            for _ in 0..cfg.h_couplings {
                hb.actnorm()?;
                hb.inv_linear()?;
                hb.channel_coupling()?;
            }
            let stack = hb.finish(split_dim);
            let prior_logvar = store.register("prior_h.logvar", Tensor::zeros(vec![split_dim]))?;
            CondHead::Flow {
                stack,
                prior_logvar,
            }
        }
        "gmm" => CondHead::Gmm(GmmHead::new(
            &mut store,
            "gmm",
            cfg.classes,
            split_dim,
            0.5,
            &mut sub_rng(cfg.seed, 2),
        )?),
        other => return Err(Error::Argument(format!("unknown head {other:?}"))),
    };

    Ok(ScnfModel {
        store,
        fw,
        head,
        k: cfg.classes,
        input_dim: 784,
        split_dim,
        counters: PassCounters::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::randn_tensor;

    #[test]
    fn toy_model_dims_and_identity_init() {
        let cfg = TrainConfig::toy_moons();
        let m = build_model(&cfg).unwrap();
        assert_eq!(m.input_dim, 2);
        assert_eq!(m.split_dim, 2);
        assert_eq!(m.fw.aux_dims.len(), 0);
        // couplings start as identity; actnorm/invlinear are volume
        // preserving at init, so the marginal is finite and sane
        let x = Tensor::new(vec![1, 2], vec![0.3, -0.5]).unwrap();
        let lm = m.log_marginal(&x).unwrap();
        assert!(lm.is_finite());
    }

    #[test]
    fn toy_builds_are_seed_deterministic() {
        let cfg = TrainConfig::toy_moons();
        let m1 = build_model(&cfg).unwrap();
        let m2 = build_model(&cfg).unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.3, -0.5]).unwrap();
        assert_eq!(m1.log_marginal(&x).unwrap(), m2.log_marginal(&x).unwrap());
    }

    #[test]
    fn mnist_arch_split_dims() {
        for (split, aux_total) in [(196, 588), (784, 0), (98, 686)] {
            let cfg = TrainConfig {
                split_dim: split,
                ..TrainConfig::mnist_reduced()
            };
            let m = build_model(&cfg).unwrap();
            assert_eq!(m.split_dim, split, "split {split}");
            assert_eq!(m.fw.aux_features(), aux_total);
            assert_eq!(m.split_dim + m.fw.aux_features(), 784);
        }
    }

    #[test]
    fn mnist_encode_decode_roundtrip() {
        let cfg = TrainConfig {
            couplings_checker: 1,
            couplings_channel: 1,
            h_couplings: 1,
            ..TrainConfig::mnist_reduced()
        };
        let mut m = build_model(&cfg).unwrap();
        let mut rng = sub_rng(9, 9);
        // bytes in [0, 256) then scaled to [0,1)
        let x = randn_tensor(vec![4, 784], 1.0, &mut rng)
            .map(|v| ((v.abs() * 80.0) % 255.0).floor() / 256.0);
        let y: Vec<usize> = vec![0, 1, 2, 3];
        m.data_init(&x, &x, &y).unwrap();
        let (z_f, parts, _) = m.encode_parts(&x).unwrap();
        assert_eq!(z_f.cols(), 196);
        let back = m.fw.inverse(&m.store, &z_f, &parts, None).unwrap();
        for (a, b) in x.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }
}
