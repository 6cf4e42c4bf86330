//! Browser demo: train a small semi-conditional flow on 2-D toy data and
//! explore the learned density, posterior, and class-conditional samples
//! interactively. Compiled to WebAssembly; the page drives three
//! operations: `train_steps`, `render` (density + decision regions), and
//! `sample`.

use wasm_bindgen::prelude::*;

use scnf_core::arch::build_model;
use scnf_core::config::TrainConfig;
use scnf_core::data::{dataset_from_config, SemiDataset};
use scnf_core::model::ScnfModel;
use scnf_core::train::{evaluate, sgd_step, Adam};
use scnf_core::Tensor;

const CLASS_COLORS: [[u8; 3]; 2] = [[214, 39, 40], [31, 119, 180]];

fn demo_config(dataset: &str, head: &str, seed: u64) -> TrainConfig {
    TrainConfig {
        dataset: dataset.into(),
        head: head.into(),
        noise: if dataset == "circles" { 0.05 } else { 0.1 },
        n_train: 600,
        n_test: 300,
        n_labeled: 10,
        fw_blocks: 6,
        h_blocks: 3,
        hidden: 32,
        seed,
        ..TrainConfig::default()
    }
}

#[wasm_bindgen]
pub struct Demo {
    model: ScnfModel,
    opt: Adam,
    data: SemiDataset,
    step: usize,
    rng_state: u64,
}

#[wasm_bindgen]
impl Demo {
    /// `dataset`: "moons" | "circles"; `head`: "glow" | "gmm".
    #[wasm_bindgen(constructor)]
    pub fn new(dataset: &str, head: &str, seed: u32) -> Result<Demo, JsValue> {
        let cfg = demo_config(dataset, head, seed as u64);
        let data = dataset_from_config(&cfg).map_err(err_js)?;
        let mut model = build_model(&cfg).map_err(err_js)?;
        model
            .data_init(&data.unlabeled_x, &data.labeled_x, &data.labeled_y)
            .map_err(err_js)?;
        let opt = Adam::new(&model.store, cfg.lr, cfg.beta1, cfg.beta2);
        Ok(Demo {
            model,
            opt,
            data,
            step: 0,
            rng_state: seed as u64 | 1,
        })
    }

    /// Run `n` optimizer steps; returns the last per-example loss.
    pub fn train_steps(&mut self, n: u32) -> Result<f64, JsValue> {
        let nl = self.data.n_labeled();
        let nu = self.data.n_unlabeled();
        let bu = 128.min(nu);
        let mut last = 0.0;
        for _ in 0..n {
            self.step += 1;
            // cheap xorshift over the unlabeled pool
            let mut idx = Vec::with_capacity(bu);
            for _ in 0..bu {
                self.rng_state ^= self.rng_state << 13;
                self.rng_state ^= self.rng_state >> 7;
                self.rng_state ^= self.rng_state << 17;
                idx.push((self.rng_state % nu as u64) as usize);
            }
            let xu = self.data.unlabeled_x.take_rows(&idx);
            let out = sgd_step(
                &mut self.model,
                &mut self.opt,
                Some((&self.data.labeled_x, &self.data.labeled_y)),
                Some(&xu),
                nl,
                nu,
                0.0,
                self.step,
            )
            .map_err(err_js)?;
            last = out.losses.total;
        }
        Ok(last)
    }

    pub fn steps_done(&self) -> u32 {
        self.step as u32
    }

    /// Test error and marginal NLL as `[error, nll]`.
    pub fn metrics(&self) -> Result<Vec<f64>, JsValue> {
        let m = evaluate(
            &self.model,
            &self.data.test_x,
            &self.data.test_y,
            false,
            0,
            300,
        )
        .map_err(err_js)?;
        Ok(vec![m.error, m.nll])
    }

    /// RGBA pixels (width*height*4): density brightness tinted by the
    /// predicted class.
    pub fn render(&self, width: u32, height: u32) -> Result<Vec<u8>, JsValue> {
        let (x0, x1, y0, y1) = self.bounds();
        let w = width as usize;
        let h = height as usize;
        let mut logps = vec![0.0f64; w * h];
        let mut classes = vec![0usize; w * h];
        for gy in 0..h {
            let py = y1 - (y1 - y0) * (gy as f64 + 0.5) / h as f64;
            let mut rows = Vec::with_capacity(w * 2);
            for gx in 0..w {
                let px = x0 + (x1 - x0) * (gx as f64 + 0.5) / w as f64;
                rows.push(px);
                rows.push(py);
            }
            let batch = Tensor::new(vec![w, 2], rows).map_err(err_js)?;
            let joints = self.model.joint_values(&batch).map_err(err_js)?;
            for gx in 0..w {
                let row = joints.row(gx);
                let mut best = 0usize;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                logps[gy * w + gx] = scnf_core::model::lse_slice(row);
                classes[gy * w + gx] = best;
            }
        }
        let max = logps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut pixels = vec![0u8; w * h * 4];
        for i in 0..w * h {
            // ~6 nats of visible dynamic range
            let t = ((logps[i] - max) / 6.0 + 1.0).clamp(0.0, 1.0);
            let c = CLASS_COLORS[classes[i] % 2];
            let bg = 250.0;
            for ch in 0..3 {
                let v = bg + (c[ch] as f64 - bg) * t;
                pixels[i * 4 + ch] = v as u8;
            }
            pixels[i * 4 + 3] = 255;
        }
        Ok(pixels)
    }

    /// Scatter data as flat rows `[x, y, code]`; code = class for labeled
    /// points, -1 for unlabeled.
    pub fn points(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..self.data.unlabeled_x.rows() {
            let r = self.data.unlabeled_x.row(i);
            out.extend_from_slice(&[r[0], r[1], -1.0]);
        }
        for i in 0..self.data.labeled_x.rows() {
            let r = self.data.labeled_x.row(i);
            out.extend_from_slice(&[r[0], r[1], self.data.labeled_y[i] as f64]);
        }
        out
    }

    /// Draw `n` samples of class `y` as flat `[x, y]` pairs.
    pub fn sample(&self, y: u32, n: u32, seed: u32) -> Result<Vec<f64>, JsValue> {
        let s = self
            .model
            .sample(y as usize, n as usize, seed as u64)
            .map_err(err_js)?;
        Ok(s.as_slice().to_vec())
    }

    /// Data bounding box `[x0, x1, y0, y1]` with a margin.
    pub fn view_box(&self) -> Vec<f64> {
        let (x0, x1, y0, y1) = self.bounds();
        vec![x0, x1, y0, y1]
    }
}

impl Demo {
    fn bounds(&self) -> (f64, f64, f64, f64) {
        let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
        for t in [&self.data.unlabeled_x, &self.data.labeled_x] {
            for i in 0..t.rows() {
                let r = t.row(i);
                x0 = x0.min(r[0]);
                x1 = x1.max(r[0]);
                y0 = y0.min(r[1]);
                y1 = y1.max(r[1]);
            }
        }
        let mx = 0.25 * (x1 - x0);
        let my = 0.25 * (y1 - y0);
        (x0 - mx, x1 + mx, y0 - my, y1 + my)
    }
}

fn err_js(e: scnf_core::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}
