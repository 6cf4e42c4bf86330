//! Property suite: layer/stack round-trips, analytic log-determinants
//! against a finite-difference Jacobian oracle, density normalization by
//! grid quadrature, and distribution-level invariants. Everything here
//! runs on untrained models.


use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scnf_core::arch::{build_model, sub_rng};
use scnf_core::config::TrainConfig;
use scnf_core::graph::{Ctx, ParamStore};
use scnf_core::layers::{
    ActNorm, Coupling, FlowLayer, FlowStack, InvLinear, Layout, MaskSpec, StackItem, ToLogits,
};
use scnf_core::model::{one_hot_rows, CondHead, ScnfModel};
use scnf_core::net::randn_tensor;
use scnf_core::tensor::Tensor;

// ---------- independent oracles (no shared code with the library) ----------

/// Central-difference Jacobian of `f` at `x`.
fn fd_jacobian(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let d = x.len();
    let mut j = vec![vec![0.0; d]; d];
    for c in 0..d {
        let mut xp = x.to_vec();
        xp[c] += h;
        let fp = f(&xp);
        let mut xm = x.to_vec();
        xm[c] -= h;
        let fm = f(&xm);
        for r in 0..d {
            j[r][c] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
    j
}

/// log |det M| by Gaussian elimination with partial pivoting.
fn log_abs_det(mut m: Vec<Vec<f64>>) -> f64 {
    let n = m.len();
    let mut acc = 0.0;
    for k in 0..n {
        let (p, _) = m
            .iter()
            .enumerate()
            .skip(k)
            .map(|(i, row)| (i, row[k].abs()))
            .fold((k, -1.0), |b, c| if c.1 > b.1 { c } else { b });
        m.swap(k, p);
        let piv = m[k][k];
        assert!(piv.abs() > 1e-14, "singular Jacobian in oracle");
        acc += piv.abs().ln();
        for r in k + 1..n {
            let f = m[r][k] / piv;
            for c in k..n {
                m[r][c] -= f * m[k][c];
            }
        }
    }
    acc
}

fn layer_apply(store: &ParamStore, layer: &FlowLayer, x: &[f64], cond: Option<&Tensor>) -> (Vec<f64>, f64) {
    let t = Tensor::new(vec![1, x.len()], x.to_vec()).unwrap();
    let mut ctx = Ctx::new(store);
    let xn = ctx.input(t);
    let cn = cond.map(|c| ctx.constant(c.clone()));
    let (z, ld) = layer.forward(&mut ctx, xn, cn).unwrap();
    let ldv = ld.map_or(0.0, |n| ctx.value(n).as_slice()[0]);
    (ctx.value(z).as_slice().to_vec(), ldv)
}

fn assert_logdet_matches_fd(
    store: &ParamStore,
    layer: &FlowLayer,
    x: &[f64],
    cond: Option<&Tensor>,
    label: &str,
) {
    let (_, analytic) = layer_apply(store, layer, x, cond);
    let f = |v: &[f64]| layer_apply(store, layer, v, cond).0;
    let j = fd_jacobian(&f, x, 1e-5);
    let numeric = log_abs_det(j);
    assert!(
        (analytic - numeric).abs() < 1e-4,
        "{label}: analytic {analytic} vs finite-difference {numeric}"
    );
}

fn assert_roundtrip(
    store: &ParamStore,
    layer: &FlowLayer,
    x: &Tensor,
    cond: Option<&Tensor>,
    tol: f64,
    label: &str,
) {
    let mut ctx = Ctx::new(store);
    let xn = ctx.input(x.clone());
    let cn = cond.map(|c| ctx.constant(c.clone()));
    let (z, _) = layer.forward(&mut ctx, xn, cn).unwrap();
    let z = ctx.value(z).clone();
    let back = layer.inverse(store, &z, cond).unwrap();
    for (a, b) in x.as_slice().iter().zip(back.as_slice()) {
        assert!(
            (a - b).abs() <= tol * a.abs().max(1.0),
            "{label}: {a} vs {b}"
        );
    }
}

// ---------- layer zoo under test ----------

struct Zoo {
    store: ParamStore,
    layers: Vec<(String, FlowLayer, Option<usize>)>, // (label, layer, classes)
}

fn build_zoo(seed: u64) -> Zoo {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();

    let flat6 = Layout::flat(6);
    let mut c = Coupling::new(&mut store, "p.c0", flat6, MaskSpec::checkerboard(false), 12, 2, None, &mut rng, 0).unwrap();
    shake(&mut store, "p.c0", &mut rng);
    layers.push(("coupling/checker".to_string(), FlowLayer::Coupling(c.clone()), None));
    c = Coupling::new(&mut store, "p.c1", flat6, MaskSpec::channel(true), 12, 1, None, &mut rng, 1).unwrap();
    shake(&mut store, "p.c1", &mut rng);
    layers.push(("coupling/channel".to_string(), FlowLayer::Coupling(c), None));

    let cc = Coupling::new(&mut store, "p.cc", flat6, MaskSpec::checkerboard(true), 12, 1, Some(3), &mut rng, 2).unwrap();
    shake(&mut store, "p.cc", &mut rng);
    layers.push(("coupling/conditional".to_string(), FlowLayer::Coupling(cc), Some(3)));

    let mut an = ActNorm::new(&mut store, "p.an", flat6, 3).unwrap();
    an.set_scale_bias(
        &mut store,
        &[1.3, 0.7, 2.1, 0.9, 1.1, 0.4],
        &[0.2, -0.1, 0.0, 0.5, -0.4, 0.3],
    )
    .unwrap();
    layers.push(("actnorm".to_string(), FlowLayer::ActNorm(an), None));

    let spatial = Layout { c: 3, h: 2, w: 1 };
    let il = InvLinear::new(&mut store, "p.il", spatial, &mut rng, 4).unwrap();
    layers.push(("invlinear/spatial".to_string(), FlowLayer::InvLinear(il), None));

    let il = InvLinear::new(&mut store, "p.il6", Layout::flat(6), &mut rng, 5).unwrap();
    layers.push(("invlinear/flat".to_string(), FlowLayer::InvLinear(il), None));

    layers.push(("to_logits".to_string(), FlowLayer::ToLogits(ToLogits::new(0.05)), None));

    Zoo { store, layers }
}

fn shake(store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) {
    for net in ["s", "t"] {
        let id = store.find(&format!("{prefix}.{net}.w_out")).unwrap();
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = randn_tensor(shape, 0.35, rng);
    }
}

fn zoo_input(label: &str, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if label == "to_logits" {
        (0..6).map(|_| 0.05 + 0.9 * rand::Rng::random::<f64>(rng)).collect()
    } else {
        randn_tensor(vec![6], 1.0, rng).into_vec()
    }
}

#[test]
fn every_layer_logdet_matches_finite_difference_jacobian() {
    let zoo = build_zoo(101);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (label, layer, classes) in &zoo.layers {
        for trial in 0..3 {
            let x = zoo_input(label, &mut rng);
            match classes {
                None => assert_logdet_matches_fd(&zoo.store, layer, &x, None, label),
                Some(k) => {
                    // the property holds per class independently
                    for y in 0..*k {
                        let oh = one_hot_rows(&[y], *k).unwrap();
                        assert_logdet_matches_fd(
                            &zoo.store,
                            layer,
                            &x,
                            Some(&oh),
                            &format!("{label}[y={y},t={trial}]"),
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn every_layer_roundtrips_within_1e8() {
    let zoo = build_zoo(102);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (label, layer, classes) in &zoo.layers {
        let x = Tensor::new(vec![4, 6], (0..4).flat_map(|_| zoo_input(label, &mut rng)).collect())
            .unwrap();
        match classes {
            None => assert_roundtrip(&zoo.store, layer, &x, None, 1e-8, label),
            Some(k) => {
                for y in 0..*k {
                    let oh = one_hot_rows(&vec![y; 4], *k).unwrap();
                    assert_roundtrip(&zoo.store, layer, &x, Some(&oh), 1e-8, label);
                }
            }
        }
    }
}

#[test]
fn deep_stack_roundtrips_within_1e6() {
    // depth > 20 gets the relaxed bound
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let layout = Layout::flat(4);
    let mut items = Vec::new();
    for i in 0..24 {
        let an = ActNorm::new(&mut store, &format!("d.an{i}"), layout, i).unwrap();
        items.push(StackItem::Layer(FlowLayer::ActNorm(an)));
        let il = InvLinear::new(&mut store, &format!("d.il{i}"), layout, &mut rng, i).unwrap();
        items.push(StackItem::Layer(FlowLayer::InvLinear(il)));
        let c = Coupling::new(
            &mut store,
            &format!("d.c{i}"),
            layout,
            MaskSpec::checkerboard(i % 2 == 0),
            8,
            1,
            None,
            &mut rng,
            i,
        )
        .unwrap();
        shake(&mut store, &format!("d.c{i}"), &mut rng);
        items.push(StackItem::Layer(FlowLayer::Coupling(c)));
    }
    let stack = FlowStack {
        items,
        in_features: 4,
        out_features: 4,
        aux_dims: vec![],
        n_classes: None,
    };
    let x = randn_tensor(vec![8, 4], 1.0, &mut rng);
    let (z, aux, _) = stack.forward_values(&store, &x, None).unwrap();
    let back = stack.inverse(&store, &z, &aux, None).unwrap();
    for (a, b) in x.as_slice().iter().zip(back.as_slice()) {
        assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn stack_logdet_matches_finite_difference_jacobian() {
    // a mixed 6-dim stack, all layer kinds, against the same oracle
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let layout = Layout::flat(6);
    let mut items = Vec::new();
    let an = ActNorm::new(&mut store, "m.an", layout, 0).unwrap();
    items.push(StackItem::Layer(FlowLayer::ActNorm({
        let mut an = an;
        an.set_scale_bias(&mut store, &[1.1, 0.9, 1.4, 0.8, 1.0, 1.2], &[0.0; 6]).unwrap();
        an
    })));
    let il = InvLinear::new(&mut store, "m.il", layout, &mut rng, 1).unwrap();
    items.push(StackItem::Layer(FlowLayer::InvLinear(il)));
    let c = Coupling::new(&mut store, "m.c", layout, MaskSpec::checkerboard(false), 10, 1, None, &mut rng, 2).unwrap();
    shake(&mut store, "m.c", &mut rng);
    items.push(StackItem::Layer(FlowLayer::Coupling(c)));
    let stack = FlowStack {
        items,
        in_features: 6,
        out_features: 6,
        aux_dims: vec![],
        n_classes: None,
    };
    let x = randn_tensor(vec![6], 0.8, &mut rng).into_vec();
    let apply = |v: &[f64]| {
        let t = Tensor::new(vec![1, 6], v.to_vec()).unwrap();
        let (z, _, ld) = stack.forward_values(&store, &t, None).unwrap();
        (z.into_vec(), ld[0])
    };
    let (_, analytic) = apply(&x);
    let f = |v: &[f64]| apply(v).0;
    let j = fd_jacobian(&f, &x, 1e-5);
    let numeric = log_abs_det(j);
    assert!(
        (analytic - numeric).abs() < 1e-4,
        "stack: {analytic} vs {numeric}"
    );
}

#[test]
fn density_grid_integral_is_one_within_2_percent() {
    // untrained toy model with mildly shaken couplings: quadrature of
    // exp(log p(x)) over a generous box
    let cfg = TrainConfig {
        fw_blocks: 4,
        h_blocks: 2,
        hidden: 16,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut model = build_model(&cfg).unwrap();
    let mut rng = sub_rng(3, 99);
    let names: Vec<String> = model
        .store
        .iter()
        .map(|p| p.name.clone())
        .filter(|n| n.ends_with("w_out"))
        .collect();
    for n in names {
        let id = model.store.find(&n).unwrap();
        let shape = model.store.value(id).shape().to_vec();
        *model.store.value_mut(id) = randn_tensor(shape, 0.25, &mut rng);
    }
    let integral = grid_integral(&model, 320);
    assert!(
        (integral - 1.0).abs() < 0.02,
        "density integral {integral}"
    );
}

/// Quadrature over a box that covers the model's own mass: the bounding
/// box of model samples, padded by a third.
fn grid_integral(model: &ScnfModel, n: usize) -> f64 {
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for y in 0..model.k {
        let s = model.sample(y, 400, 1234 + y as u64).unwrap();
        for i in 0..s.rows() {
            let r = s.row(i);
            x0 = x0.min(r[0]);
            x1 = x1.max(r[0]);
            y0 = y0.min(r[1]);
            y1 = y1.max(r[1]);
        }
    }
    let mx = 0.34 * (x1 - x0);
    let my = 0.34 * (y1 - y0);
    let (x0, x1, y0, y1) = (x0 - mx, x1 + mx, y0 - my, y1 + my);
    let cell = (x1 - x0) / n as f64 * ((y1 - y0) / n as f64);
    let mut total = 0.0;
    for gy in 0..n {
        let y = y0 + (y1 - y0) * (gy as f64 + 0.5) / n as f64;
        let mut rows = Vec::with_capacity(n * 2);
        for gx in 0..n {
            let x = x0 + (x1 - x0) * (gx as f64 + 0.5) / n as f64;
            rows.push(x);
            rows.push(y);
        }
        let batch = Tensor::new(vec![n, 2], rows).unwrap();
        for lm in model.log_marginal_batch(&batch).unwrap() {
            total += lm.exp() * cell;
        }
    }
    total
}

#[test]
fn permutation_layers_report_exactly_zero_logdet() {
    use scnf_core::layers::SpaceToDepth;
    let store = ParamStore::new();
    let s2d = SpaceToDepth::new(Layout { c: 2, h: 4, w: 4 }, 2).unwrap();
    let layer = FlowLayer::SpaceToDepth(s2d);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = randn_tensor(vec![3, 32], 1.0, &mut rng);
    let mut ctx = Ctx::new(&store);
    let xn = ctx.input(x);
    let (_, ld) = layer.forward(&mut ctx, xn, None).unwrap();
    assert!(ld.is_none(), "permutations carry no logdet term at all");
}

#[test]
fn gmm_head_equals_closed_form_mixture_component() {
    // dual route: the affine-map head against a hand-written Gaussian score
    let cfg = TrainConfig {
        head: "gmm".into(),
        fw_blocks: 3,
        h_blocks: 1,
        hidden: 12,
        classes: 2,
        seed: 12,
        ..TrainConfig::default()
    };
    let model = build_model(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn_tensor(vec![1, 2], 1.0, &mut rng);
    let (z_f, _, ld) = model.encode(&x).unwrap();
    let CondHead::Gmm(g) = &model.head else { panic!("gmm head") };
    let means = model.store.value(g.means);
    let lvs = model.store.value(g.log_vars);
    for y in 0..2usize {
        let mut hand = ld[0] - (2.0f64).ln();
        for j in 0..2 {
            let mu = means.as_slice()[y * 2 + j];
            let lv = lvs.as_slice()[y * 2 + j];
            let d = z_f.as_slice()[j] - mu;
            hand += -0.5 * (d * d * (-lv).exp() + lv + scnf_core::model::LN_2PI);
        }
        let lj = model.log_joint(&x, y).unwrap();
        assert!((lj - hand).abs() < 1e-10, "class {y}: {lj} vs {hand}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn coupling_roundtrips_on_random_inputs(vals in proptest::collection::vec(-3.0f64..3.0, 6)) {
        let zoo = build_zoo(103);
        let x = Tensor::new(vec![1, 6], vals).unwrap();
        for (label, layer, classes) in &zoo.layers {
            if label == "to_logits" {
                continue;
            }
            match classes {
                None => assert_roundtrip(&zoo.store, layer, &x, None, 1e-8, label),
                Some(k) => {
                    let oh = one_hot_rows(&[1], *k).unwrap();
                    assert_roundtrip(&zoo.store, layer, &x, Some(&oh), 1e-8, label);
                }
            }
        }
    }

    #[test]
    fn splits_are_reproducible_disjoint_exhaustive(
        n in 20usize..200,
        budget in 2usize..10,
        seed in 0u64..500,
    ) {
        let (x, y) = scnf_core::data::gen_moons(n, 0.1, seed);
        let n_labeled = (budget * 2).min(n);
        let ds = scnf_core::data::semi_split(&x, &y, 2, n_labeled, seed).unwrap();
        prop_assert_eq!(ds.n_labeled(), n_labeled);
        prop_assert_eq!(ds.n_labeled() + ds.n_unlabeled(), n);
        let ds2 = scnf_core::data::semi_split(&x, &y, 2, n_labeled, seed).unwrap();
        prop_assert_eq!(ds.labeled_x.as_slice(), ds2.labeled_x.as_slice());
    }

    #[test]
    fn to_logits_roundtrips_on_unit_interval(vals in proptest::collection::vec(0.0f64..0.999, 6)) {
        let tl = ToLogits::new(0.05);
        let layer = FlowLayer::ToLogits(tl);
        let store = ParamStore::new();
        let x = Tensor::new(vec![1, 6], vals).unwrap();
        assert_roundtrip(&store, &layer, &x, None, 1e-9, "to_logits");
    }
}

