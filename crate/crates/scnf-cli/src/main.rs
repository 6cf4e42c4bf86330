//! `scnf`: train, evaluate, and inspect semi-conditional normalizing
//! flow models.
//!
//! Exit codes: 0 success, 2 usage/config, 3 data/format, 4 numeric.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use scnf_core::checkpoint;
use scnf_core::config::TrainConfig;
use scnf_core::data::{dataset_from_config, dequantize};
use scnf_core::error::{Error, Result};
use scnf_core::plot::boundary_svg;
use scnf_core::tensor::Tensor;
use scnf_core::train::{eval_noise_seed, evaluate, metrics_csv, train};

mod dataspec;

use dataspec::DataSpec;

#[derive(Parser)]
#[command(name = "scnf", about = "Semi-conditional normalizing flows", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a config file and write checkpoint + metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint: test error %, NLL and bits/dim.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset spec, e.g. `moons:n=1000,seed=1000` or
        /// `mnist:dir=data/mnist,split=test`. Defaults to the test split
        /// of the dataset recorded in the checkpoint.
        #[arg(long)]
        data: Option<String>,
        /// Optional CSV output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw the decision boundary of a 2-D model over its dataset.
    PlotBoundary {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export latent embeddings as CSV (id, label, components...).
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<String>,
        #[arg(long, value_enum)]
        which: Which,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct images under different decode labels into a P5 graymap
    /// grid (one row per source image, one column per label).
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<String>,
        /// Comma-separated decode labels, e.g. `0,1,2,3,4,5,6,7,8,9`.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<usize>,
        #[arg(long, default_value_t = false)]
        zero_aux: bool,
        /// Number of source images.
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Zf,
    Zh,
}

fn main() -> ExitCode {
    scnf_core::threads::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config, seed, out } => cmd_train(&config, seed, &out),
        Cmd::Eval {
            checkpoint,
            data,
            out,
        } => cmd_eval(&checkpoint, data.as_deref(), out.as_deref()),
        Cmd::PlotBoundary { checkpoint, out } => cmd_plot_boundary(&checkpoint, &out),
        Cmd::Embed {
            checkpoint,
            data,
            which,
            out,
        } => cmd_embed(&checkpoint, data.as_deref(), which, &out),
        Cmd::Reconstruct {
            checkpoint,
            data,
            labels,
            zero_aux,
            count,
            out,
        } => cmd_reconstruct(&checkpoint, data.as_deref(), &labels, zero_aux, count, &out),
    }
}

fn cmd_train(config_path: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    if !config_path.exists() {
        return Err(Error::Usage(format!(
            "config file not found: {}",
            config_path.display()
        )));
    }
    let text = std::fs::read_to_string(config_path)?;
    let mut cfg = TrainConfig::parse(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    std::fs::create_dir_all(out)?;
    let data = dataset_from_config(&cfg)?;
    let outcome = train(&cfg, &data)?;

    let ckpt = checkpoint::save_bytes(&cfg, &outcome.model.store);
    std::fs::write(out.join("checkpoint.bin"), &ckpt)?;
    let csv = metrics_csv(&outcome.metrics);
    std::fs::write(out.join("metrics.csv"), &csv)?;

    let mut hasher = Sha256::new();
    hasher.update(&ckpt);
    hasher.update(csv.as_bytes());
    let manifest = format!(
        "seed = {}\ncontent_sha256 = {:x}\nskipped_steps = {}\n\n[config]\n{}",
        cfg.seed,
        hasher.finalize(),
        outcome.skipped_steps,
        cfg.serialize()
    );
    std::fs::write(out.join("manifest.txt"), manifest)?;

    if let Some(last) = outcome.metrics.last() {
        println!(
            "final: step={} test_error={:.4} nll={:.4} bits_per_dim={:.4}",
            last.step,
            last.test_error,
            last.unlabeled_nll,
            last.bits_per_dim
        );
    }
    if let Some(step) = outcome.diverged_at {
        return Err(Error::Diverged {
            step,
            msg: "artifacts hold the last good checkpoint".into(),
        });
    }
    Ok(())
}

/// Checkpoint config + requested spec -> evaluation inputs.
fn eval_data(
    cfg: &TrainConfig,
    spec: Option<&str>,
) -> Result<(Tensor, Vec<usize>, bool, u64)> {
    match spec {
        Some(s) => {
            let spec = DataSpec::parse(s)?;
            spec.materialize(cfg)
        }
        None => {
            let ds = dataset_from_config(cfg)?;
            Ok((ds.test_x, ds.test_y, ds.quantized, eval_noise_seed(cfg.seed)))
        }
    }
}

fn cmd_eval(ckpt_path: &Path, spec: Option<&str>, out: Option<&Path>) -> Result<()> {
    let (cfg, model) = checkpoint::load(ckpt_path)?;
    let (x, y, quantized, noise_seed) = eval_data(&cfg, spec)?;
    let m = evaluate(&model, &x, &y, quantized, noise_seed, cfg.eval_batch.max(1))?;
    println!(
        "test_error = {:.4}%  nll = {:.6}  bits_per_dim = {:.6}",
        m.error * 100.0,
        m.nll,
        m.bits_per_dim
    );
    if let Some(path) = out {
        std::fs::write(
            path,
            format!(
                "test_error,nll,bits_per_dim\n{},{},{}\n",
                m.error, m.nll, m.bits_per_dim
            ),
        )?;
    }
    Ok(())
}

fn cmd_plot_boundary(ckpt_path: &Path, out: &Path) -> Result<()> {
    let (cfg, model) = checkpoint::load(ckpt_path)?;
    let data = dataset_from_config(&cfg)?;
    let plot = boundary_svg(&model, &data, 200)?;
    std::fs::write(out, plot.svg)?;
    println!("boundary segments: {}", plot.segments);
    Ok(())
}

fn cmd_embed(ckpt_path: &Path, spec: Option<&str>, which: Which, out: &Path) -> Result<()> {
    let (cfg, model) = checkpoint::load(ckpt_path)?;
    let (x, y, quantized, noise_seed) = eval_data(&cfg, spec)?;
    let mut rng = dataspec::seeded(noise_seed);
    let mut csv = String::from("id,label");
    for j in 0..model.split_dim {
        csv.push_str(&format!(",c{j}"));
    }
    csv.push('\n');
    for start in (0..x.rows()).step_by(256) {
        let end = (start + 256).min(x.rows());
        let idx: Vec<usize> = (start..end).collect();
        let mut xb = x.take_rows(&idx);
        if quantized {
            xb = dequantize(&xb, &mut rng);
        }
        let (zf, _, _) = model.encode(&xb)?;
        let emb = match which {
            Which::Zf => zf,
            // the conditional stack encodes with the true labels
            Which::Zh => model.head_forward(&zf, &y[start..end])?.0,
        };
        for (row, id) in (0..emb.rows()).zip(start..end) {
            csv.push_str(&format!("{id},{}", y[id]));
            for v in emb.row(row) {
                csv.push_str(&format!(",{v}"));
            }
            csv.push('\n');
        }
    }
    std::fs::write(out, csv)?;
    Ok(())
}

fn cmd_reconstruct(
    ckpt_path: &Path,
    spec: Option<&str>,
    labels: &[usize],
    zero_aux: bool,
    count: usize,
    out: &Path,
) -> Result<()> {
    let (cfg, model) = checkpoint::load(ckpt_path)?;
    if model.input_dim != 784 {
        return Err(Error::Argument(
            "reconstruct wants an image model (input dimension 784)".into(),
        ));
    }
    if labels.is_empty() {
        return Err(Error::Argument("no decode labels given".into()));
    }
    let (x, y, quantized, noise_seed) = eval_data(&cfg, spec)?;
    let count = count.min(x.rows());
    let idx: Vec<usize> = (0..count).collect();
    let mut xb = x.take_rows(&idx);
    if quantized {
        let mut rng = dataspec::seeded(noise_seed);
        xb = dequantize(&xb, &mut rng);
    }
    std::fs::create_dir_all(out)?;

    let side = 28usize;
    let grid_w = labels.len() * side;
    let grid_h = count * side;
    let mut pixels = vec![0u8; grid_w * grid_h];
    for (col, &dec) in labels.iter().enumerate() {
        // encode with the true label of each source image
        let mut recon_rows = Vec::with_capacity(count);
        for i in 0..count {
            let xi = xb.row_tensor(i);
            let r = model.reconstruct(&xi, y[i], dec, zero_aux)?;
            recon_rows.push(r);
        }
        for (i, r) in recon_rows.iter().enumerate() {
            for py in 0..side {
                for px in 0..side {
                    let v = r.as_slice()[py * side + px];
                    let byte = (v * 256.0).floor().clamp(0.0, 255.0) as u8;
                    pixels[(i * side + py) * grid_w + col * side + px] = byte;
                }
            }
        }
    }
    let mut pgm = format!("P5\n{grid_w} {grid_h}\n255\n").into_bytes();
    pgm.extend_from_slice(&pixels);
    std::fs::write(out.join("reconstructions.pgm"), pgm)?;
    println!(
        "wrote {} ({} rows x {} labels{})",
        out.join("reconstructions.pgm").display(),
        count,
        labels.len(),
        if zero_aux { ", factored latents zeroed" } else { "" }
    );
    Ok(())
}
