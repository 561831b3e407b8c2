//! `wasi decompose`: truncated SVD of a matrix blob or HOSVD of a tensor blob.

use std::path::{Path, PathBuf};

use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasi_core::harness::{read_blob, write_blob};
use wasi_core::{hosvd, truncated_svd, Matrix, Tensor, TuckerSpec};

use super::{out_dir, parse_dims, Failure};
use crate::config::Config;
use crate::GlobalArgs;

#[derive(Args, Debug)]
pub struct DecomposeArgs {
    /// Explained-variance threshold in (0, 1].
    #[arg(long)]
    pub eps: Option<f64>,
    /// Little-endian f64 matrix, row major.
    #[arg(long, conflicts_with_all = ["tensor", "synthetic"])]
    pub matrix: Option<PathBuf>,
    /// Little-endian f64 tensor, row major; needs `--shape`.
    #[arg(long, conflicts_with = "synthetic")]
    pub tensor: Option<PathBuf>,
    /// Seeded Gaussian input of this shape, e.g. `64x64` or `8x8x8`.
    #[arg(long)]
    pub synthetic: Option<String>,
    /// Extents of the input blob; a matrix without it must be square.
    #[arg(long)]
    pub shape: Option<String>,
}

#[derive(Debug, Serialize)]
struct Factor {
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize)]
struct DecomposeManifest {
    input: String,
    shape: Vec<usize>,
    epsilon: f64,
    seed: u64,
    /// `K` for a matrix, per-mode ranks for a tensor.
    ranks: Vec<usize>,
    /// `‖A − Â‖²_F / ‖A‖²_F`, the unexplained variance; at most `1 − eps`
    /// for a matrix.
    relative_error: f64,
    /// `‖A − Â‖_F / ‖A‖_F`.
    frobenius_relative_error: f64,
    stored_elements: usize,
    singular_values: Option<Vec<f64>>,
    factors: Vec<Factor>,
}

fn load(path: &Path, shape: Option<&[usize]>, matrix: bool) -> Result<Tensor, Failure> {
    if !path.exists() {
        return Err(Failure::usage(format!("input file not found: {}", path.display())));
    }
    let data = read_blob(path)?;
    let shape = match shape {
        Some(s) => s.to_vec(),
        None if matrix => {
            let n = (data.len() as f64).sqrt().round() as usize;
            if n * n != data.len() || n == 0 {
                return Err(Failure::usage(format!(
                    "{}: {} values is not a square matrix; pass --shape OxI",
                    path.display(),
                    data.len()
                )));
            }
            vec![n, n]
        }
        None => return Err(Failure::usage("--tensor needs --shape")),
    };
    if matrix && shape.len() != 2 {
        return Err(Failure::usage("--matrix takes a two-extent --shape"));
    }
    Tensor::new(shape, data).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn save(dir: &Path, name: &str, shape: Vec<usize>, data: &[f64]) -> Result<Factor, Failure> {
    let file = format!("{name}.bin");
    write_blob(&dir.join(&file), data)?;
    Ok(Factor { file, shape })
}

pub fn run(global: &GlobalArgs, cfg: &Config, args: DecomposeArgs) -> Result<(), Failure> {
    let sec = &cfg.decompose;
    let eps = args.eps.or(sec.eps).unwrap_or(0.9);
    let seed = cfg.seed(global.seed)?;
    let shape = match args.shape.as_deref().or(sec.shape.as_deref()) {
        Some(s) => Some(parse_dims(s)?),
        None => None,
    };
    let matrix_path = args.matrix.or_else(|| sec.matrix.clone());
    let tensor_path = args.tensor.or_else(|| sec.tensor.clone());
    let (input, a) = match (&matrix_path, &tensor_path, &args.synthetic) {
        (Some(p), None, None) => (p.display().to_string(), load(p, shape.as_deref(), true)?),
        (None, Some(p), None) => (p.display().to_string(), load(p, shape.as_deref(), false)?),
        (None, None, Some(s)) => {
            let dims = parse_dims(s)?;
            (format!("synthetic:{s}"), Tensor::random_normal(&dims, &mut ChaCha8Rng::seed_from_u64(seed))?)
        }
        _ => return Err(Failure::usage("give exactly one of --matrix, --tensor or --synthetic")),
    };
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Failure::usage(format!("--eps must lie in (0, 1], got {eps}")));
    }
    let dir = out_dir(&global.out)?;
    let norm = a.frobenius_norm();

    let manifest = if a.order() == 2 && tensor_path.is_none() {
        let (o, i) = (a.shape()[0], a.shape()[1]);
        let w = Matrix::new(o, i, a.data().to_vec())?;
        let t = truncated_svd(&w, eps)?;
        let approx = t.left.matmul(&t.right)?;
        let factors = vec![
            save(&dir, "L", vec![o, t.rank], t.left.data())?,
            save(&dir, "R", vec![t.rank, i], t.right.data())?,
        ];
        DecomposeManifest {
            input,
            shape: vec![o, i],
            epsilon: eps,
            seed,
            ranks: vec![t.rank],
            relative_error: (w.distance(&approx) / norm).powi(2),
            frobenius_relative_error: w.distance(&approx) / norm,
            stored_elements: t.rank * (o + i),
            singular_values: Some(t.singular_values),
            factors,
        }
    } else {
        let t = hosvd(&a, &TuckerSpec::Threshold(eps))?;
        let mut factors = vec![save(&dir, "core", t.ranks().to_vec(), t.core().data())?];
        for (m, u) in t.factors().iter().enumerate() {
            factors.push(save(&dir, &format!("U{}", m + 1), vec![u.rows(), u.cols()], u.data())?);
        }
        DecomposeManifest {
            input,
            shape: a.shape().to_vec(),
            epsilon: eps,
            seed,
            ranks: t.ranks().to_vec(),
            relative_error: (a.distance(&t.reconstruct()) / norm).powi(2),
            frobenius_relative_error: a.distance(&t.reconstruct()) / norm,
            stored_elements: t.stored_elements(),
            singular_values: None,
            factors,
        }
    };
    log::info!("ranks {:?}, relative error {:.3e}", manifest.ranks, manifest.relative_error);
    wasi_core::json::to_file(&dir.join("manifest.json"), &manifest)?;
    println!("ranks {:?} relative_error {}", manifest.ranks, manifest.relative_error);
    Ok(())
}
