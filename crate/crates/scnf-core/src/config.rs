//! Training configuration and its on-disk format: line-oriented
//! `key = value` pairs under `[section]` headers. Parsing an unknown key
//! or a malformed value reports the key and the line number;
//! parse -> serialize -> parse is a fixed point.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    // [data]
    pub dataset: String,
    pub n_train: usize,
    pub n_test: usize,
    pub noise: f64,
    pub radius_ratio: f64,
    pub n_labeled: usize,
    pub mnist_dir: String,
    // [model]
    pub arch: String,
    pub head: String,
    pub classes: usize,
    pub split_dim: usize,
    pub fw_blocks: usize,
    pub h_blocks: usize,
    pub hidden: usize,
    pub res_blocks: usize,
    pub couplings_checker: usize,
    pub couplings_channel: usize,
    pub h_couplings: usize,
    // [train]
    pub algorithm: String,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_unlabeled: usize,
    pub batch_labeled: usize,
    pub clf_loss_weight: f64,
    pub eval_every: usize,
    pub eval_batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: "moons".into(),
            n_train: 1000,
            n_test: 1000,
            noise: 0.1,
            radius_ratio: 0.5,
            n_labeled: 10,
            mnist_dir: "data/mnist".into(),
            arch: "toy".into(),
            head: "glow".into(),
            classes: 2,
            split_dim: 0,
            fw_blocks: 8,
            h_blocks: 4,
            hidden: 64,
            res_blocks: 1,
            couplings_checker: 2,
            couplings_channel: 1,
            h_couplings: 2,
            algorithm: "sgd".into(),
            epochs: 300,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            batch_unlabeled: 128,
            batch_labeled: 10,
            clf_loss_weight: 0.0,
            eval_every: 250,
            eval_batch: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn toy_moons() -> Self {
        TrainConfig::default()
    }

    pub fn toy_circles() -> Self {
        TrainConfig {
            dataset: "circles".into(),
            noise: 0.05,
            ..TrainConfig::default()
        }
    }

    pub fn mnist_reduced() -> Self {
        TrainConfig {
            dataset: "mnist".into(),
            n_train: 10_000,
            n_test: 10_000,
            n_labeled: 100,
            arch: "mnist".into(),
            classes: 10,
            split_dim: 196,
            res_blocks: 2,
            epochs: 30,
            batch_unlabeled: 128,
            batch_labeled: 64,
            eval_every: 400,
            eval_batch: 100,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = |msg: String| Error::Config { line: 0, msg };
        match self.dataset.as_str() {
            "moons" | "circles" | "mnist" => {}
            other => return Err(named(format!("dataset {other:?} not one of moons|circles|mnist"))),
        }
        match self.arch.as_str() {
            "toy" | "mnist" => {}
            other => return Err(named(format!("arch {other:?} not one of toy|mnist"))),
        }
        match self.head.as_str() {
            "glow" | "gmm" => {}
            other => return Err(named(format!("head {other:?} not one of glow|gmm"))),
        }
        match self.algorithm.as_str() {
            "sgd" | "em-sgd" => {}
            other => return Err(named(format!("algorithm {other:?} not one of sgd|em-sgd"))),
        }
        if self.classes == 0 {
            return Err(named("classes must be >= 1".into()));
        }
        if self.arch == "mnist" && ![49, 98, 196, 392, 784].contains(&self.split_dim) {
            return Err(named(format!(
                "split_dim {} not one of 49|98|196|392|784",
                self.split_dim
            )));
        }
        if self.n_labeled > self.n_train {
            return Err(named("n_labeled exceeds n_train".into()));
        }
        if self.batch_labeled == 0 && self.batch_unlabeled == 0 {
            return Err(named("both batch sizes are zero".into()));
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        s.push_str("[data]\n");
        s.push_str(&format!("dataset = {}\n", self.dataset));
        s.push_str(&format!("n_train = {}\n", self.n_train));
        s.push_str(&format!("n_test = {}\n", self.n_test));
        s.push_str(&format!("noise = {}\n", self.noise));
        s.push_str(&format!("radius_ratio = {}\n", self.radius_ratio));
        s.push_str(&format!("n_labeled = {}\n", self.n_labeled));
        s.push_str(&format!("mnist_dir = {}\n", self.mnist_dir));
        s.push_str("\n[model]\n");
        s.push_str(&format!("arch = {}\n", self.arch));
        s.push_str(&format!("head = {}\n", self.head));
        s.push_str(&format!("classes = {}\n", self.classes));
        s.push_str(&format!("split_dim = {}\n", self.split_dim));
        s.push_str(&format!("fw_blocks = {}\n", self.fw_blocks));
        s.push_str(&format!("h_blocks = {}\n", self.h_blocks));
        s.push_str(&format!("hidden = {}\n", self.hidden));
        s.push_str(&format!("res_blocks = {}\n", self.res_blocks));
        s.push_str(&format!("couplings_checker = {}\n", self.couplings_checker));
        s.push_str(&format!("couplings_channel = {}\n", self.couplings_channel));
        s.push_str(&format!("h_couplings = {}\n", self.h_couplings));
        s.push_str("\n[train]\n");
        s.push_str(&format!("algorithm = {}\n", self.algorithm));
        s.push_str(&format!("epochs = {}\n", self.epochs));
        s.push_str(&format!("lr = {}\n", self.lr));
        s.push_str(&format!("beta1 = {}\n", self.beta1));
        s.push_str(&format!("beta2 = {}\n", self.beta2));
        s.push_str(&format!("batch_unlabeled = {}\n", self.batch_unlabeled));
        s.push_str(&format!("batch_labeled = {}\n", self.batch_labeled));
        s.push_str(&format!("clf_loss_weight = {}\n", self.clf_loss_weight));
        s.push_str(&format!("eval_every = {}\n", self.eval_every));
        s.push_str(&format!("eval_batch = {}\n", self.eval_batch));
        s.push_str(&format!("seed = {}\n", self.seed));
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') {
                    return Err(Error::Config {
                        line: lineno,
                        msg: format!("malformed section header {line:?}"),
                    });
                }
                section = line[1..line.len() - 1].trim().to_string();
                match section.as_str() {
                    "data" | "model" | "train" => continue,
                    other => {
                        return Err(Error::Config {
                            line: lineno,
                            msg: format!("unknown section [{other}]"),
                        })
                    }
                }
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config {
                    line: lineno,
                    msg: format!("expected `key = value`, got {line:?}"),
                });
            };
            let key = key.trim();
            let value = value.trim();
            set_key(&mut cfg, &section, key, value, lineno)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set_key(cfg: &mut TrainConfig, section: &str, key: &str, value: &str, line: usize) -> Result<()> {
    macro_rules! num {
        ($t:ty) => {
            value.parse::<$t>().map_err(|_| Error::Config {
                line,
                msg: format!("key {key:?}: cannot parse {value:?}"),
            })?
        };
    }
    match (section, key) {
        ("data", "dataset") => cfg.dataset = value.into(),
        ("data", "n_train") => cfg.n_train = num!(usize),
        ("data", "n_test") => cfg.n_test = num!(usize),
        ("data", "noise") => cfg.noise = num!(f64),
        ("data", "radius_ratio") => cfg.radius_ratio = num!(f64),
        ("data", "n_labeled") => cfg.n_labeled = num!(usize),
        ("data", "mnist_dir") => cfg.mnist_dir = value.into(),
        ("model", "arch") => cfg.arch = value.into(),
        ("model", "head") => cfg.head = value.into(),
        ("model", "classes") => cfg.classes = num!(usize),
        ("model", "split_dim") => cfg.split_dim = num!(usize),
        ("model", "fw_blocks") => cfg.fw_blocks = num!(usize),
        ("model", "h_blocks") => cfg.h_blocks = num!(usize),
        ("model", "hidden") => cfg.hidden = num!(usize),
        ("model", "res_blocks") => cfg.res_blocks = num!(usize),
        ("model", "couplings_checker") => cfg.couplings_checker = num!(usize),
        ("model", "couplings_channel") => cfg.couplings_channel = num!(usize),
        ("model", "h_couplings") => cfg.h_couplings = num!(usize),
        ("train", "algorithm") => cfg.algorithm = value.into(),
        ("train", "epochs") => cfg.epochs = num!(usize),
        ("train", "lr") => cfg.lr = num!(f64),
        ("train", "beta1") => cfg.beta1 = num!(f64),
        ("train", "beta2") => cfg.beta2 = num!(f64),
        ("train", "batch_unlabeled") => cfg.batch_unlabeled = num!(usize),
        ("train", "batch_labeled") => cfg.batch_labeled = num!(usize),
        ("train", "clf_loss_weight") => cfg.clf_loss_weight = num!(f64),
        ("train", "eval_every") => cfg.eval_every = num!(usize),
        ("train", "eval_batch") => cfg.eval_batch = num!(usize),
        ("train", "seed") => cfg.seed = num!(u64),
        _ => {
            return Err(Error::Config {
                line,
                msg: format!("unknown key {key:?} in section [{section}]"),
            })
        }
    }
    Ok(())
}
