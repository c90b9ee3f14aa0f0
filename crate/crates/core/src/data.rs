//! Datasets: IDX and CIFAR-10 binary files, Gaussian blobs, splits and batches.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// In-memory labelled examples. Image examples are stored `[H, W, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Vec<f32>,
    pub example_shape: Vec<usize>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f32>, example_shape: Vec<usize>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let per: usize = example_shape.iter().product();
        if features.len() != per * labels.len() {
            return Err(Error::Data(format!(
                "{} feature values for {} examples of shape {example_shape:?}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self {
            features,
            example_shape,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example_len(&self) -> usize {
        self.example_shape.iter().product()
    }

    pub fn example(&self, i: usize) -> &[f32] {
        let n = self.example_len();
        &self.features[i * n..(i + 1) * n]
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(idx.len() * self.example_len());
        for &i in idx {
            features.extend_from_slice(self.example(i));
        }
        Dataset {
            features,
            example_shape: self.example_shape.clone(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Seeded split into (train, validation); the validation part holds
    /// round(len · fraction) examples. Both keep the original order.
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::Config(format!("validation fraction must lie in [0, 1), got {val_fraction}")));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = (self.len() as f64 * val_fraction).round() as usize;
        let mut val = order[..n_val].to_vec();
        let mut train = order[n_val..].to_vec();
        val.sort_unstable();
        train.sort_unstable();
        Ok((self.subset(&train), self.subset(&val)))
    }

    /// A seeded fraction of the examples, in original order.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!("subsample fraction must lie in (0, 1], got {fraction}")));
        }
        let keep = ((self.len() as f64 * fraction).round() as usize).max(1).min(self.len());
        let mut idx = rand::seq::index::sample(&mut ChaCha8Rng::seed_from_u64(seed), self.len(), keep).into_vec();
        idx.sort_unstable();
        Ok(self.subset(&idx))
    }

    /// Reinterprets every example with a new shape of the same size.
    pub fn reshape(&mut self, shape: &[usize]) -> Result<()> {
        if shape.iter().product::<usize>() != self.example_len() {
            return Err(Error::Shape(format!(
                "examples of shape {:?} cannot be viewed as {shape:?}",
                self.example_shape
            )));
        }
        self.example_shape = shape.to_vec();
        Ok(())
    }

    /// Gathers a batch as `[B, example_shape..]`, optionally mirroring `[H, W, C]`
    /// examples left-right with probability ½ each.
    pub fn batch<T: Scalar>(&self, idx: &[usize], flip: Option<&mut ChaCha8Rng>) -> Result<(Tensor<T>, Vec<usize>)> {
        let n = self.example_len();
        let mut data = Vec::with_capacity(idx.len() * n);
        let mut flip = flip;
        for &i in idx {
            let ex = self.example(i);
            let mirrored = match (flip.as_deref_mut(), self.example_shape.as_slice()) {
                (Some(rng), [_, _, _]) => rng.random_bool(0.5),
                _ => false,
            };
            if mirrored {
                let (h, w, c) = (self.example_shape[0], self.example_shape[1], self.example_shape[2]);
                for r in 0..h {
                    for col in (0..w).rev() {
                        let base = (r * w + col) * c;
                        data.extend(ex[base..base + c].iter().map(|&v| T::of(v as f64)));
                    }
                }
            } else {
                data.extend(ex.iter().map(|&v| T::of(v as f64)));
            }
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&self.example_shape);
        Ok((Tensor::new(shape, data)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// Per-epoch shuffled batches; the order depends only on `(seed, epoch)`.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Per-channel (last axis) mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalizer {
    pub fn fit(ds: &Dataset) -> Self {
        let c = *ds.example_shape.last().unwrap_or(&1);
        let mut sum = vec![0f64; c];
        let mut sq = vec![0f64; c];
        for chunk in ds.features.chunks(c) {
            for (k, &v) in chunk.iter().enumerate() {
                sum[k] += v as f64;
                sq[k] += (v as f64) * (v as f64);
            }
        }
        let n = (ds.features.len() / c.max(1)).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / n - m * m).max(0.0).sqrt().max(1e-6)) as f32)
            .collect();
        Normalizer {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        }
    }

    pub fn apply(&self, ds: &mut Dataset) {
        let c = self.mean.len();
        for chunk in ds.features.chunks_mut(c) {
            for (k, v) in chunk.iter_mut().enumerate() {
                *v = (*v - self.mean[k]) / self.std[k];
            }
        }
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// A parsed IDX file of unsigned bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.is_empty() {
        return Err(Error::format(0, "empty file"));
    }
    if bytes.len() < 4 {
        return Err(Error::format(bytes.len() as u64, "truncated magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::format(0, "bad magic number"));
    }
    if bytes[2] != 0x08 {
        return Err(Error::format(2, format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let nd = bytes[3] as usize;
    let header = 4 + 4 * nd;
    if bytes.len() < header {
        return Err(Error::format(bytes.len() as u64, "truncated dimension header"));
    }
    let dims: Vec<usize> = (0..nd)
        .map(|k| u32::from_be_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() - header < n {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload: expected {n} bytes after the header"),
        ));
    }
    if bytes.len() - header > n {
        return Err(Error::format((header + n) as u64, "trailing bytes after payload"));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    parse_idx(&read_maybe_gz(path)?)
}

/// Images scaled to [0, 1] as `[rows, cols, 1]`, with labels from a companion file.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = read_idx(images)?;
    let lab = read_idx(labels)?;
    let (n, shape) = match img.dims.as_slice() {
        [n, r, c] => (*n, vec![*r, *c, 1]),
        [n, r, c, ch] => (*n, vec![*r, *c, *ch]),
        other => return Err(Error::Data(format!("{}: image dims {other:?}", images.display()))),
    };
    if lab.dims.len() != 1 || lab.dims[0] != n {
        return Err(Error::Data(format!(
            "{} holds {} images but {} holds {:?} labels",
            images.display(),
            n,
            labels.display(),
            lab.dims
        )));
    }
    let labels: Vec<usize> = lab.data.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let features = img.data.iter().map(|&p| p as f32 / 255.0).collect();
    Dataset::new(features, shape, labels, classes)
}

pub const CIFAR_RECORD: usize = 1 + 3072;

/// Parses CIFAR-10 binary records (label byte, then 1024 red, green and blue bytes).
pub fn parse_cifar(bytes: &[u8]) -> Result<Dataset> {
    let rem = bytes.len() % CIFAR_RECORD;
    if bytes.is_empty() || rem != 0 {
        return Err(Error::format(
            (bytes.len() - rem) as u64,
            format!("record length mismatch: {} bytes is not a multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut features = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::format((r * CIFAR_RECORD) as u64, format!("label {} outside 0..10", rec[0])));
        }
        labels.push(rec[0] as usize);
        let px = &rec[1..];
        for p in 0..1024 {
            for c in 0..3 {
                features.push(px[c * 1024 + p] as f32 / 255.0);
            }
        }
    }
    Dataset::new(features, vec![32, 32, 3], labels, 10)
}

fn load_cifar_files(paths: &[PathBuf]) -> Result<Dataset> {
    let mut all: Option<Dataset> = None;
    for p in paths {
        let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
        let ds = parse_cifar(&bytes).map_err(|e| match e {
            Error::Format { offset, msg } => Error::Format {
                offset,
                msg: format!("{}: {msg}", p.display()),
            },
            e => e,
        })?;
        all = Some(match all {
            None => ds,
            Some(mut acc) => {
                acc.features.extend(ds.features);
                acc.labels.extend(ds.labels);
                acc
            }
        });
    }
    all.ok_or_else(|| Error::Data("no CIFAR batch files".into()))
}

/// Training batches `data_batch_*.bin` and, when present, `test_batch.bin`.
pub fn load_cifar_binary(dir: &Path) -> Result<(Dataset, Option<Dataset>)> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut train = Vec::new();
    for e in entries {
        let path = e.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("data_batch_") && name.ends_with(".bin") {
            train.push(path);
        }
    }
    train.sort();
    if train.is_empty() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no data_batch_*.bin files"),
        ));
    }
    let test_path = dir.join("test_batch.bin");
    let test = if test_path.exists() {
        Some(load_cifar_files(&[test_path])?)
    } else {
        None
    };
    Ok((load_cifar_files(&train)?, test))
}

/// Gaussian blobs: class centers drawn from N(0, separation²·I), examples from
/// N(center, I).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    pub dims: usize,
    pub classes: usize,
    pub separation: f64,
}

pub fn synth_classification(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    if spec.classes < 2 || spec.dims == 0 || spec.n == 0 {
        return Err(Error::Config("synthetic data needs n > 0, dims > 0 and at least 2 classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            (0..spec.dims)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    spec.separation * z
                })
                .collect()
        })
        .collect();
    let mut features = Vec::with_capacity(spec.n * spec.dims);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let y = i % spec.classes;
        labels.push(y);
        for c in &centers[y] {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push((c + z) as f32);
        }
    }
    Dataset::new(features, vec![spec.dims], labels, spec.classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn idx_bytes(dims: &[u32], data: &[u8]) -> Vec<u8> {
        let mut out = vec![0, 0, 8, dims.len() as u8];
        for d in dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn idx_fixture_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let px: Vec<u8> = (0..4 * 2 * 3).map(|i| (i * 10) as u8).collect();
        std::fs::write(dir.path().join("img"), idx_bytes(&[4, 2, 3], &px)).unwrap();
        std::fs::write(dir.path().join("lab"), idx_bytes(&[4], &[3, 1, 4, 1])).unwrap();
        let ds = load_idx(&dir.path().join("img"), &dir.path().join("lab")).unwrap();
        assert_eq!(ds.example_shape, vec![2, 3, 1]);
        assert_eq!(ds.labels, vec![3, 1, 4, 1]);
        assert_eq!(ds.example(1)[0], 60.0 / 255.0);

        std::fs::write(dir.path().join("lab2"), idx_bytes(&[3], &[0, 1, 2])).unwrap();
        assert!(matches!(
            load_idx(&dir.path().join("img"), &dir.path().join("lab2")),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn idx_format_errors_carry_offsets() {
        assert!(matches!(parse_idx(&[]), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_idx(&[1, 2, 3, 4]), Err(Error::Format { offset: 0, .. })));
        let mut b = idx_bytes(&[2, 2], &[1, 2, 3]);
        assert!(matches!(parse_idx(&b), Err(Error::Format { offset: 15, .. })));
        b.extend_from_slice(&[4, 5]);
        assert!(matches!(parse_idx(&b), Err(Error::Format { offset: 16, .. })));
    }

    #[test]
    fn gzip_is_detected_by_magic() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&idx_bytes(&[2], &[7, 9])).unwrap();
        let p = dir.path().join("x.idx");
        std::fs::write(&p, enc.finish().unwrap()).unwrap();
        assert_eq!(read_idx(&p).unwrap().data, vec![7, 9]);
    }

    #[test]
    fn cifar_two_record_fixture() {
        let mut bytes = Vec::new();
        for (label, fill) in [(3u8, 10u8), (7, 200)] {
            bytes.push(label);
            bytes.extend(std::iter::repeat_n(fill, 1024));
            bytes.extend(std::iter::repeat_n(0, 1024));
            bytes.extend(std::iter::repeat_n(255, 1024));
        }
        let ds = parse_cifar(&bytes).unwrap();
        assert_eq!(ds.labels, vec![3, 7]);
        assert_eq!(&ds.example(1)[..3], &[200.0 / 255.0, 0.0, 1.0]);
        assert!(matches!(parse_cifar(&bytes[..5000]), Err(Error::Format { offset: 3073, .. })));

        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("data_batch_1.bin"), &bytes).unwrap();
        let (train, test) = load_cifar_binary(dir.path()).unwrap();
        assert_eq!(train.len(), 2);
        assert!(test.is_none());
        assert!(matches!(
            load_cifar_binary(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_seeded() {
        let spec = SynthSpec { n: 101, dims: 2, classes: 3, separation: 1.0 };
        let ds = synth_classification(&spec, 1).unwrap();
        let (tr, va) = ds.split(0.1, 5).unwrap();
        assert_eq!(va.len(), 10);
        assert_eq!(tr.len() + va.len(), ds.len());
        let (tr2, va2) = ds.split(0.1, 5).unwrap();
        assert_eq!((tr, va), (tr2, va2));
        let sub = ds.subsample(0.1, 2).unwrap();
        assert_eq!(sub, ds.subsample(0.1, 2).unwrap());
        assert_eq!(sub.len(), 10);
    }

    #[test]
    fn batches_are_seeded_and_reshuffled() {
        let a = epoch_batches(10, 4, 1, 0);
        assert_eq!(a, epoch_batches(10, 4, 1, 0));
        assert_ne!(a, epoch_batches(10, 4, 1, 1));
        assert_eq!(a.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
    }

    #[test]
    fn normalizer_centres_channels() {
        let ds = Dataset::new(vec![1.0, 10.0, 3.0, 30.0], vec![2], vec![0, 1], 2).unwrap();
        let n = Normalizer::fit(&ds);
        let mut d = ds.clone();
        n.apply(&mut d);
        assert_eq!(d.features, vec![-1.0, -1.0, 1.0, 1.0]);
    }
}
