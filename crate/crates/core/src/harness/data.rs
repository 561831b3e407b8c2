//! Labelled sample sets: seeded synthetic clusters, CSV files, IDX pairs.
//!
//! Every sample is a token tensor (`N × C`, or `H × W × C`) stored flat.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub sample_shape: Vec<usize>,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.sample_len();
        &self.features[i * d..(i + 1) * d]
    }

    /// Stacks the given samples into a `B × sample_shape` tensor.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(idx.len() * self.sample_len());
        for &i in idx {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![idx.len()];
        shape.extend(&self.sample_shape);
        let x = Tensor::new(shape, data).expect("batch shape matches data");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    fn select(&self, idx: &[usize]) -> Dataset {
        let (x, labels) = self.batch(idx);
        Dataset {
            sample_shape: self.sample_shape.clone(),
            features: x.into_data(),
            labels,
            classes: self.classes,
        }
    }
}

/// Training and validation sets, normalized with training statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Dataset,
    pub valid: Dataset,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DataOptions {
    /// Reshape flat file samples to this token shape.
    pub sample_shape: Option<Vec<usize>>,
    /// Declared class count; labels at or above it are rejected.
    pub classes: Option<usize>,
}

/// Parameters of the synthetic cluster generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples: usize,
    pub shape: Vec<usize>,
    /// Scale of the class prototypes.
    pub separation: f64,
    pub noise: f64,
    /// Scale of a per-sample low-rank component in a second channel basis,
    /// independent of the label.
    #[serde(default)]
    pub nuisance: f64,
    /// Rank of every class prototype viewed as a tokens × channels matrix.
    pub rank: usize,
}

impl SyntheticSpec {
    pub fn easy() -> Self {
        SyntheticSpec { classes: 2, samples: 512, shape: vec![8, 16], separation: 3.0, noise: 1.0, nuisance: 0.0, rank: 2 }
    }

    pub fn toy() -> Self {
        SyntheticSpec { classes: 4, samples: 2560, shape: vec![8, 16], separation: 1.0, noise: 1.0, nuisance: 0.0, rank: 3 }
    }

    /// `easy`, `toy`, or comma-separated `key=value` overrides on top of a
    /// preset (`toy` when none is named).
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::InvalidArgument(format!("synthetic spec `{text}`: {m}"));
        let mut spec = SyntheticSpec::toy();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.split_once('=') {
                None if part == "easy" => spec = SyntheticSpec::easy(),
                None if part == "toy" => spec = SyntheticSpec::toy(),
                None => return Err(bad(format!("unknown preset `{part}`"))),
                Some((k, v)) => {
                    let num = |v: &str| v.parse::<usize>().map_err(|e| bad(format!("{k}: {e}")));
                    let real = |v: &str| v.parse::<f64>().map_err(|e| bad(format!("{k}: {e}")));
                    match k.trim() {
                        "classes" => spec.classes = num(v)?,
                        "samples" => spec.samples = num(v)?,
                        "rank" => spec.rank = num(v)?,
                        "sep" | "separation" => spec.separation = real(v)?,
                        "noise" => spec.noise = real(v)?,
                        "nuisance" => spec.nuisance = real(v)?,
                        "shape" => {
                            spec.shape = v.split('x').map(num).collect::<Result<_>>()?;
                        }
                        other => return Err(bad(format!("unknown key `{other}`"))),
                    }
                }
            }
        }
        spec.validate().map_err(|e| bad(e.to_string()))?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        if self.samples < self.classes {
            return Err(Error::InvalidArgument("fewer samples than classes".into()));
        }
        if !(2..=3).contains(&self.shape.len()) || self.shape.contains(&0) {
            return Err(Error::InvalidArgument(format!("sample shape {:?} must be N×C or H×W×C", self.shape)));
        }
        if self.rank == 0 {
            return Err(Error::InvalidArgument("rank must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.separation >= 0.0 && self.nuisance >= 0.0) {
            return Err(Error::InvalidArgument("noise, nuisance and separation must be non-negative".into()));
        }
        Ok(())
    }

    /// Class `c` has prototype `sep · A_c · B / √rank`, with `B` shared across
    /// classes; samples add `nuisance · Z · B' / √rank` with fresh Gaussian
    /// `Z` and a second shared basis `B'`, then i.i.d. Gaussian noise. Labels cycle through the classes, so
    /// counts are balanced.
    pub fn generate(&self, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
        let c = *self.shape.last().unwrap();
        let n: usize = self.shape[..self.shape.len() - 1].iter().product();
        let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };
        let basis: Vec<f64> = (0..self.rank * c).map(|_| gauss()).collect();
        let rank = self.rank;
        let root = (rank as f64).sqrt();
        let nuisance_basis: Vec<f64> = (0..self.rank * c).map(|_| gauss()).collect();
        let low_rank = |coef: &[f64], scale: f64, basis: &[f64]| {
            let mut p = vec![0.0; n * c];
            for t in 0..n {
                for q in 0..rank {
                    let a = coef[t * rank + q] * scale;
                    for ch in 0..c {
                        p[t * c + ch] += a * basis[q * c + ch];
                    }
                }
            }
            p
        };
        let protos: Vec<Vec<f64>> = (0..self.classes)
            .map(|_| {
                let coef: Vec<f64> = (0..n * rank).map(|_| gauss()).collect();
                low_rank(&coef, self.separation / root, &basis)
            })
            .collect();
        let mut features = Vec::with_capacity(self.samples * n * c);
        let mut labels = Vec::with_capacity(self.samples);
        for s in 0..self.samples {
            let label = s % self.classes;
            let mut x = protos[label].clone();
            if self.nuisance > 0.0 {
                let coef: Vec<f64> = (0..n * rank).map(|_| gauss()).collect();
                for (v, z) in x.iter_mut().zip(low_rank(&coef, self.nuisance / root, &nuisance_basis)) {
                    *v += z;
                }
            }
            x.iter_mut().for_each(|v| *v += self.noise * gauss());
            features.extend(x);
            labels.push(label);
        }
        Dataset { sample_shape: self.shape.clone(), features, labels, classes: self.classes }
    }
}

/// `synthetic:<spec>`, a `.csv` file (label first, then features), or an
/// IDX pair `images,labels`. Samples are shuffled by `seed`, split 80/20 and
/// z-score normalized per feature with training statistics.
pub fn load_dataset(source: &str, options: &DataOptions, seed: u64) -> Result<Split> {
    let mut data = if let Some(spec) = source.strip_prefix("synthetic:") {
        SyntheticSpec::parse(spec)?.generate(seed)
    } else if let Some((images, labels)) = source.split_once(',') {
        read_idx_pair(Path::new(images.trim()), Path::new(labels.trim()))?
    } else {
        read_csv(Path::new(source))?
    };
    if let Some(shape) = &options.sample_shape {
        if shape.iter().product::<usize>() != data.sample_len() {
            return Err(Error::Shape(format!(
                "cannot view {}-element samples as {shape:?}",
                data.sample_len()
            )));
        }
        data.sample_shape = shape.clone();
    }
    if let Some(k) = options.classes {
        if let Some(bad) = data.labels.iter().position(|&l| l >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {} of sample {bad} out of range for {k} classes",
                data.labels[bad]
            )));
        }
        data.classes = k;
    }
    if data.sample_shape.len() < 2 {
        return Err(Error::Shape("samples need at least a token and a channel mode".into()));
    }
    split_dataset(data, seed)
}

/// Seeded 80/20 split of `data` with training-set normalization.
pub fn split_dataset(data: Dataset, seed: u64) -> Result<Split> {
    let n = data.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5b11_7000));
    let cut = ((n as f64) * 0.8).round() as usize;
    let cut = cut.clamp(1, n - 1);
    let mut train = data.select(&order[..cut]);
    let mut valid = data.select(&order[cut..]);
    normalize(&mut train, &mut valid);
    Ok(Split { train, valid })
}

fn normalize(train: &mut Dataset, valid: &mut Dataset) {
    let d = train.sample_len();
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for s in train.features.chunks(d) {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for s in train.features.chunks(d) {
        for ((q, v), m) in var.iter_mut().zip(s).zip(&mean) {
            *q += (v - m) * (v - m);
        }
    }
    let std: Vec<f64> = var.iter().map(|q| (q / n).sqrt()).map(|s| if s > 0.0 { s } else { 1.0 }).collect();
    for set in [train, valid] {
        for s in set.features.chunks_mut(d) {
            for ((v, m), sd) in s.iter_mut().zip(&mean).zip(&std) {
                *v = (*v - m) / sd;
            }
        }
    }
}

fn default_shape(d: usize) -> Vec<usize> {
    let r = (d as f64).sqrt().round() as usize;
    if r * r == d {
        vec![r, r]
    } else {
        vec![1, d]
    }
}

fn read_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with('#') || (line == 1 && raw.starts_with("label")) {
            continue;
        }
        let mut fields = raw.split(',').map(str::trim);
        let label = fields.next().unwrap_or_default();
        let label: usize = label.parse().map_err(|_| parse_err(line, format!("bad label `{label}`")))?;
        let row: Vec<f64> = fields
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or(f))
            .collect::<std::result::Result<_, _>>()
            .map_err(|f| parse_err(line, format!("bad feature `{f}`")))?;
        if row.is_empty() {
            return Err(parse_err(line, "no features".into()));
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(parse_err(line, format!("expected {w} features, found {}", row.len())));
            }
            _ => {}
        }
        labels.push(label);
        features.extend(row);
    }
    let Some(width) = width else {
        return Err(parse_err(0, "no data rows".into()));
    };
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Ok(Dataset { sample_shape: default_shape(width), features, labels, classes })
}

fn read_idx(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Parse { path: path.to_path_buf(), line: 0, message: m.to_string() };
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(bad("not an IDX file"));
    }
    let (kind, ndim) = (bytes[2], bytes[3] as usize);
    let mut dims = Vec::with_capacity(ndim);
    for k in 0..ndim {
        let at = 4 + 4 * k;
        let b = bytes.get(at..at + 4).ok_or_else(|| bad("truncated header"))?;
        dims.push(u32::from_be_bytes(b.try_into().unwrap()) as usize);
    }
    let body = &bytes[4 + 4 * ndim..];
    let count: usize = dims.iter().product();
    let values: Vec<f64> = match kind {
        0x08 => body.iter().map(|&b| b as f64).collect(),
        0x0D => body.chunks_exact(4).map(|c| f32::from_be_bytes(c.try_into().unwrap()) as f64).collect(),
        0x0E => body.chunks_exact(8).map(|c| f64::from_be_bytes(c.try_into().unwrap())).collect(),
        _ => return Err(bad("unsupported IDX element type")),
    };
    if values.len() != count {
        return Err(bad(&format!("expected {count} values, found {}", values.len())));
    }
    Ok((dims, values))
}

fn read_idx_pair(images: &Path, labels: &Path) -> Result<Dataset> {
    let (idims, features) = read_idx(images)?;
    let (ldims, lvals) = read_idx(labels)?;
    if idims.len() < 2 || ldims.len() != 1 || idims[0] != ldims[0] {
        return Err(Error::Shape(format!("IDX images {idims:?} and labels {ldims:?} do not pair up")));
    }
    let labels: Vec<usize> = lvals.iter().map(|&v| v as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let sample_shape = if idims.len() == 2 { default_shape(idims[1]) } else { idims[1..].to_vec() };
    Ok(Dataset { sample_shape, features, labels, classes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn synthetic_split_and_determinism() {
        let a = load_dataset("synthetic:easy", &DataOptions::default(), 3).unwrap();
        let b = load_dataset("synthetic:easy", &DataOptions::default(), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len() + a.valid.len(), 512);
        assert_eq!(a.train.len(), 410);
        assert_eq!(a.train.sample_shape, vec![8, 16]);
        let c = load_dataset("synthetic:easy", &DataOptions::default(), 4).unwrap();
        assert_ne!(a.train.labels, c.train.labels);
    }

    #[test]
    fn normalized_with_train_statistics() {
        let s = load_dataset("synthetic:toy,samples=200", &DataOptions::default(), 1).unwrap();
        let d = s.train.sample_len();
        let n = s.train.len() as f64;
        for f in [0, d / 2, d - 1] {
            let col: Vec<f64> = s.train.features.chunks(d).map(|x| x[f]).collect();
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn synthetic_spec_parsing() {
        let s = SyntheticSpec::parse("easy,samples=64,shape=2x4x8").unwrap();
        assert_eq!((s.classes, s.samples, s.shape.clone()), (2, 64, vec![2, 4, 8]));
        assert!(SyntheticSpec::parse("classes=1").is_err());
        assert!(SyntheticSpec::parse("bogus").is_err());
        assert!(SyntheticSpec::parse("shape=16").is_err());
        let d = s.generate(0);
        assert_eq!(d.features.len(), 64 * 64);
        assert_eq!(d.labels.iter().filter(|&&l| l == 1).count(), 32);
    }

    #[test]
    fn nuisance_is_low_rank() {
        let s = SyntheticSpec::parse("samples=8,sep=0,noise=0,nuisance=2,rank=2").unwrap();
        let d = s.generate(5);
        let m = crate::matrix::Matrix::new(8, 16, d.sample(3).to_vec()).unwrap();
        let sv = crate::linalg::svd(&m).unwrap().singular_values;
        assert!(sv[1] > 1e-3 && sv[2] < 1e-10 * sv[0]);
        assert_ne!(d.sample(0), d.sample(4));
    }

    #[test]
    fn csv_loading_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let mut f = fs::File::create(&p).unwrap();
        writeln!(f, "label,a,b,c,d").unwrap();
        for i in 0..10 {
            writeln!(f, "{},{},{},{},{}", i % 3, i, i * 2, 1.5, -(i as f64)).unwrap();
        }
        drop(f);
        let s = load_dataset(p.to_str().unwrap(), &DataOptions::default(), 0).unwrap();
        assert_eq!(s.train.sample_shape, vec![2, 2]);
        assert_eq!((s.train.len(), s.valid.len(), s.train.classes), (8, 2, 3));

        let opts = DataOptions { sample_shape: Some(vec![1, 4]), classes: Some(2) };
        let err = load_dataset(p.to_str().unwrap(), &opts, 0).unwrap_err();
        assert!(err.to_string().contains("out of range"));

        let bad = dir.path().join("bad.csv");
        fs::write(&bad, "0,1,2\n1,3,4\n0,x,5\n").unwrap();
        let err = load_dataset(bad.to_str().unwrap(), &DataOptions::default(), 0).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(err.to_string().contains(":3:"));

        let ragged = dir.path().join("ragged.csv");
        fs::write(&ragged, "0,1,2\n1,3\n").unwrap();
        assert!(matches!(
            load_dataset(ragged.to_str().unwrap(), &DataOptions::default(), 0),
            Err(Error::Parse { line: 2, .. })
        ));

        let missing = dir.path().join("missing.csv");
        let err = load_dataset(missing.to_str().unwrap(), &DataOptions::default(), 0).unwrap_err();
        assert!(err.to_string().contains("missing.csv"));
    }

    fn idx_bytes(kind: u8, dims: &[u32], body: &[u8]) -> Vec<u8> {
        let mut b = vec![0, 0, kind, dims.len() as u8];
        for d in dims {
            b.extend(d.to_be_bytes());
        }
        b.extend(body);
        b
    }

    #[test]
    fn idx_pair() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        let pixels: Vec<u8> = (0..5 * 3 * 4).map(|v| v as u8).collect();
        fs::write(&img, idx_bytes(0x08, &[5, 3, 4], &pixels)).unwrap();
        fs::write(&lab, idx_bytes(0x08, &[5], &[0, 1, 0, 1, 1])).unwrap();
        let src = format!("{},{}", img.display(), lab.display());
        let s = load_dataset(&src, &DataOptions::default(), 0).unwrap();
        assert_eq!(s.train.sample_shape, vec![3, 4]);
        assert_eq!(s.train.len() + s.valid.len(), 5);

        fs::write(&lab, idx_bytes(0x08, &[4], &[0, 1, 0, 1])).unwrap();
        assert!(load_dataset(&src, &DataOptions::default(), 0).is_err());
        fs::write(&img, [1u8, 2, 3]).unwrap();
        assert!(load_dataset(&src, &DataOptions::default(), 0).is_err());
    }

    #[test]
    fn batches() {
        let s = load_dataset("synthetic:easy,samples=20", &DataOptions::default(), 0).unwrap();
        let (x, y) = s.train.batch(&[3, 1]);
        assert_eq!(x.shape(), &[2, 8, 16]);
        assert_eq!(&x.data()[..128], s.train.sample(3));
        assert_eq!(y, vec![s.train.labels[3], s.train.labels[1]]);
    }
}
