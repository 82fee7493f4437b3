//! Datasets, client partitioning, and file loaders.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::rng::{stream, Purpose};
use crate::error::{domain, Error, Result};
use crate::sampling::largest_remainder;

/// Row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetShard {
    features: Vec<f64>,
    n_features: usize,
    labels: Vec<usize>,
    num_classes: usize,
}

impl DatasetShard {
    pub fn new(features: Vec<f64>, n_features: usize, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if n_features == 0 || num_classes == 0 {
            return domain("a dataset needs at least one feature and one class");
        }
        if features.len() != labels.len() * n_features {
            return Err(Error::Dimension { expected: labels.len() * n_features, got: features.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return domain(format!("label {bad} outside [0, {num_classes})"));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset feature".into()));
        }
        Ok(Self { features, n_features, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut features = Vec::with_capacity(idx.len() * self.n_features);
        for &i in idx {
            features.extend_from_slice(self.row(i));
        }
        Self {
            features,
            n_features: self.n_features,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Replaces the class count, e.g. so shards of one source agree.
    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Self> {
        if self.labels.iter().any(|&l| l >= num_classes) {
            return domain(format!("labels do not fit in {num_classes} classes"));
        }
        self.num_classes = num_classes;
        Ok(self)
    }
}

/// Isotropic Gaussian clusters around random class centers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub n_examples: usize,
    pub n_features: usize,
    pub num_classes: usize,
    /// Standard deviation of the class centers around the origin.
    pub center_scale: f64,
    /// Standard deviation of examples around their center.
    pub noise_scale: f64,
}

/// Balanced classes in random order.
pub fn gaussian_blobs(spec: &BlobSpec, seed: u64) -> Result<DatasetShard> {
    if spec.num_classes == 0 || spec.n_features == 0 {
        return domain("blob spec needs at least one class and one feature");
    }
    if !(spec.center_scale >= 0.0 && spec.noise_scale >= 0.0) {
        return domain("blob scales must be nonnegative");
    }
    let mut rng = stream(seed, Purpose::Data, 0, 0, 0);
    let centers: Vec<f64> = (0..spec.num_classes * spec.n_features)
        .map(|_| spec.center_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut labels: Vec<usize> = (0..spec.n_examples).map(|i| i % spec.num_classes).collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(spec.n_examples * spec.n_features);
    for &l in &labels {
        let c = &centers[l * spec.n_features..(l + 1) * spec.n_features];
        features.extend(c.iter().map(|&m| m + spec.noise_scale * rng.sample::<f64, _>(StandardNormal)));
    }
    DatasetShard::new(features, spec.n_features, labels, spec.num_classes)
}

/// Shuffles and holds out the last `test_fraction` of the examples.
pub fn train_test_split(data: &DatasetShard, test_fraction: f64, seed: u64) -> Result<(DatasetShard, DatasetShard)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return domain(format!("test fraction must lie in [0, 1), got {test_fraction}"));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut stream(seed, Purpose::Partition, 0, 0, u64::MAX));
    let n_test = (test_fraction * data.len() as f64).round() as usize;
    let (train, test) = idx.split_at(data.len() - n_test);
    Ok((data.subset(train), data.subset(test)))
}

fn shard_sizes(total: usize, n_clients: usize) -> Result<Vec<usize>> {
    if n_clients == 0 {
        return domain("need at least one client");
    }
    if n_clients > total {
        return Err(Error::Infeasible(format!("{n_clients} clients but only {total} examples")));
    }
    let (base, extra) = (total / n_clients, total % n_clients);
    Ok((0..n_clients).map(|i| base + usize::from(i < extra)).collect())
}

/// Uniformly random equal-size shards.
pub fn iid_partition(data: &DatasetShard, n_clients: usize, seed: u64) -> Result<Vec<DatasetShard>> {
    let sizes = shard_sizes(data.len(), n_clients)?;
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut stream(seed, Purpose::Partition, 0, 0, 0));
    let mut start = 0;
    Ok(sizes
        .into_iter()
        .map(|s| {
            let shard = data.subset(&idx[start..start + s]);
            start += s;
            shard
        })
        .collect())
}

/// Shards together with the class-proportion vectors they were drawn from.
#[derive(Debug, Clone)]
pub struct DirichletSplit {
    pub shards: Vec<DatasetShard>,
    pub proportions: Vec<Vec<f64>>,
}

fn dirichlet(alpha: f64, k: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Domain(format!("dirichlet concentration: {e}")))?;
    let mut p: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = p.iter().sum();
    if total > 0.0 && total.is_finite() {
        p.iter_mut().for_each(|v| *v /= total);
    } else {
        // Every gamma draw underflowed; all mass on one class is the limit.
        p.iter_mut().for_each(|v| *v = 0.0);
        p[rng.gen_range(0..k)] = 1.0;
    }
    Ok(p)
}

/// Non-IID split: client `i` draws class proportions `p_i ~ Dirichlet(α·1)`
/// and fills an (almost) equal-size shard with per-class quotas rounded from
/// `p_i`. Exhausted classes are backfilled from the rest, so shard sizes
/// always sum to the dataset size and no shard is empty.
pub fn dirichlet_partition(data: &DatasetShard, n_clients: usize, alpha: f64, seed: u64) -> Result<DirichletSplit> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return domain(format!("dirichlet concentration must be positive, got {alpha}"));
    }
    let sizes = shard_sizes(data.len(), n_clients)?;
    let k = data.num_classes();
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in data.labels().iter().enumerate() {
        pools[l].push(i);
    }
    let mut rng = stream(seed, Purpose::Partition, 0, 1, 0);
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let mut shards = Vec::with_capacity(n_clients);
    let mut proportions = Vec::with_capacity(n_clients);
    for s in sizes {
        let p = dirichlet(alpha, k, &mut rng)?;
        let available: Vec<usize> = pools.iter().map(Vec::len).collect();
        let quota: Vec<f64> = p.iter().map(|&v| v * s as f64).collect();
        let counts = largest_remainder(&quota, &available, s)?;
        let mut idx = Vec::with_capacity(s);
        for (pool, c) in pools.iter_mut().zip(counts) {
            idx.extend(pool.drain(pool.len() - c..));
        }
        shards.push(data.subset(&idx));
        proportions.push(p);
    }
    Ok(DirichletSplit { shards, proportions })
}

/// Reads a CSV with header `f0,…,fk,label`.
pub fn read_csv_dataset<R: Read>(reader: R) -> Result<DatasetShard> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let n_features = header.len().saturating_sub(1);
    if n_features == 0 || &header[n_features] != "label" {
        return Err(Error::Format("header must be f0,...,fk,label".into()));
    }
    for (j, name) in header.iter().take(n_features).enumerate() {
        if name != format!("f{j}") {
            return Err(Error::Format(format!("column {j} is named {name:?}, expected \"f{j}\"")));
        }
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        let row = line + 2;
        if record.len() != n_features + 1 {
            return Err(Error::Format(format!("line {row}: expected {} fields, got {}", n_features + 1, record.len())));
        }
        for field in record.iter().take(n_features) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("line {row}: bad feature value {field:?}")))?;
            if !v.is_finite() {
                return Err(Error::Format(format!("line {row}: non-finite feature")));
            }
            features.push(v);
        }
        let label = &record[n_features];
        labels.push(
            label
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("line {row}: bad label {label:?}")))?,
        );
    }
    if labels.is_empty() {
        return Err(Error::Format("no data rows".into()));
    }
    let num_classes = class_count(&labels)?;
    DatasetShard::new(features, n_features, labels, num_classes)
}

/// Largest class count accepted from a file.
pub const MAX_CLASSES: usize = 1 << 16;

fn class_count(labels: &[usize]) -> Result<usize> {
    match labels.iter().max() {
        Some(&m) if m < MAX_CLASSES => Ok(m + 1),
        Some(&m) => Err(Error::Format(format!("label {m} exceeds the limit of {MAX_CLASSES} classes"))),
        None => Err(Error::Format("no labels".into())),
    }
}

pub fn load_csv(path: &Path) -> Result<DatasetShard> {
    read_csv_dataset(BufReader::new(File::open(path)?))
}

/// A decoded IDX tensor, values widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

/// Decodes the IDX container used by the MNIST family of datasets.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let fmt = |m: &str| Error::Format(format!("idx: {m}"));
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(fmt("bad magic"));
    }
    let width = match bytes[2] {
        0x08 | 0x09 => 1,
        0x0B => 2,
        0x0C | 0x0D => 4,
        0x0E => 8,
        t => return Err(fmt(&format!("unknown element type 0x{t:02x}"))),
    };
    let ndims = usize::from(bytes[3]);
    if ndims == 0 {
        return Err(fmt("zero dimensions"));
    }
    let body = 4 + 4 * ndims;
    if bytes.len() < body {
        return Err(fmt("truncated header"));
    }
    let dims: Vec<usize> = bytes[4..body]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fmt("dimension product overflows"))?;
    let payload = &bytes[body..];
    if count.checked_mul(width) != Some(payload.len()) {
        return Err(fmt(&format!("expected {count} elements of {width} bytes, found {} bytes", payload.len())));
    }
    let values = match bytes[2] {
        0x08 => payload.iter().map(|&b| f64::from(b)).collect(),
        0x09 => payload.iter().map(|&b| f64::from(b as i8)).collect(),
        0x0B => payload.chunks_exact(2).map(|c| f64::from(i16::from_be_bytes([c[0], c[1]]))).collect(),
        0x0C => payload
            .chunks_exact(4)
            .map(|c| f64::from(i32::from_be_bytes([c[0], c[1], c[2], c[3]])))
            .collect(),
        0x0D => payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_be_bytes([c[0], c[1], c[2], c[3]])))
            .collect(),
        _ => payload
            .chunks_exact(8)
            .map(|c| f64::from_be_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    };
    Ok(IdxArray { dims, values })
}

/// Pairs an image tensor (`[n, …]`) with a label vector (`[n]`); pixel
/// values are scaled by `1/255`.
pub fn idx_dataset(images: &IdxArray, labels: &IdxArray) -> Result<DatasetShard> {
    let n = images.dims[0];
    if labels.dims.len() != 1 || labels.dims[0] != n {
        return Err(Error::Format("label tensor must be one-dimensional and match the image count".into()));
    }
    let n_features = images.dims[1..].iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let n_features = match n_features {
        Some(f) if n > 0 && f > 0 => f,
        _ => return Err(Error::Format("empty or oversized image tensor".into())),
    };
    let labels: Vec<usize> = labels
        .values
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v.is_finite() {
                Ok(v as usize)
            } else {
                Err(Error::Format(format!("bad label value {v}")))
            }
        })
        .collect::<Result<_>>()?;
    let num_classes = class_count(&labels)?;
    let features = images.values.iter().map(|v| v / 255.0).collect();
    DatasetShard::new(features, n_features, labels, num_classes)
}

/// Loads an image/label IDX pair, keeping at most `max_examples` rows.
pub fn load_idx(images: &Path, labels: &Path, max_examples: Option<usize>) -> Result<DatasetShard> {
    let data = idx_dataset(&parse_idx(&std::fs::read(images)?)?, &parse_idx(&std::fs::read(labels)?)?)?;
    Ok(match max_examples {
        Some(m) if m < data.len() => {
            let idx: Vec<usize> = (0..m).collect();
            data.subset(&idx)
        }
        _ => data,
    })
}
