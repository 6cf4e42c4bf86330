//! Dataset specs for eval-side commands:
//! `moons[:n=1000,noise=0.1,seed=0]`, `circles[:n=...,ratio=0.5,...]`,
//! `mnist[:dir=data/mnist,split=test,take=2000,seed=0]`.

use rand_chacha::ChaCha8Rng;

use scnf_core::config::TrainConfig;
use scnf_core::data::{gen_circles, gen_moons, load_mnist};
use scnf_core::error::{Error, Result};
use scnf_core::tensor::Tensor;
use scnf_core::train::eval_noise_seed;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug)]
pub struct DataSpec {
    pub name: String,
    pub args: Vec<(String, String)>,
}

impl DataSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let (name, rest) = match text.split_once(':') {
            Some((n, r)) => (n, r),
            None => (text, ""),
        };
        let mut args = Vec::new();
        for piece in rest.split(',').filter(|p| !p.is_empty()) {
            let Some((k, v)) = piece.split_once('=') else {
                return Err(Error::Usage(format!(
                    "data spec: expected key=value, got {piece:?}"
                )));
            };
            args.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(DataSpec {
            name: name.trim().to_string(),
            args,
        })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.args
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn num<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse::<T>().map_err(|_| {
                Error::Usage(format!("data spec: cannot parse {key}={v:?}"))
            }),
        }
    }

    /// (features, labels, quantized, dequantization noise seed). Toy specs
    /// default to the checkpoint's noise parameters.
    pub fn materialize(&self, cfg: &TrainConfig) -> Result<(Tensor, Vec<usize>, bool, u64)> {
        let seed: u64 = self.num("seed", cfg.seed)?;
        match self.name.as_str() {
            "moons" => {
                let n = self.num("n", cfg.n_test)?;
                let noise = self.num("noise", cfg.noise)?;
                let (x, y) = gen_moons(n, noise, seed);
                Ok((x, y, false, eval_noise_seed(seed)))
            }
            "circles" => {
                let n = self.num("n", cfg.n_test)?;
                let noise = self.num("noise", cfg.noise)?;
                let ratio = self.num("ratio", cfg.radius_ratio)?;
                let (x, y) = gen_circles(n, noise, ratio, seed);
                Ok((x, y, false, eval_noise_seed(seed)))
            }
            "mnist" => {
                let dir = self.get("dir").unwrap_or(&cfg.mnist_dir).to_string();
                let split = self.get("split").unwrap_or("test");
                let mnist = load_mnist(std::path::Path::new(&dir))?;
                let (x, y) = match split {
                    "test" => (mnist.test_x, mnist.test_y),
                    "train" => (mnist.train_x, mnist.train_y),
                    other => {
                        return Err(Error::Usage(format!(
                            "data spec: split {other:?} not one of train|test"
                        )))
                    }
                };
                let take: usize = self.num("take", 0)?;
                let n = if take == 0 { x.rows() } else { take.min(x.rows()) };
                let idx: Vec<usize> = (0..n).collect();
                Ok((x.take_rows(&idx), y[..n].to_vec(), true, eval_noise_seed(seed)))
            }
            other => Err(Error::Usage(format!(
                "data spec: unknown dataset {other:?} (moons|circles|mnist)"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_name_and_args() {
        let s = DataSpec::parse("moons:n=500,noise=0.2,seed=7").unwrap();
        assert_eq!(s.name, "moons");
        let cfg = TrainConfig::default();
        let (x, y, quantized, _) = s.materialize(&cfg).unwrap();
        assert_eq!(x.rows(), 500);
        assert_eq!(y.len(), 500);
        assert!(!quantized);
    }

    #[test]
    fn bad_pairs_are_usage_errors() {
        assert!(DataSpec::parse("moons:n500").is_err());
        let s = DataSpec::parse("nope").unwrap();
        assert!(matches!(
            s.materialize(&TrainConfig::default()),
            Err(Error::Usage(_))
        ));
    }
}
