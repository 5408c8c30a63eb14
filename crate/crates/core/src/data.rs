//! Synthetic datasets, shard-based non-IID partitioning, heterogeneity
//! statistics and a plain-text dump format.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::objectives::Objective;
use crate::param::ParamVector;
use crate::rng::{Purpose, RngContract};

/// Row-major collection of labelled samples with a common feature dimension.
///
/// Labels are stored as reals; classification tasks use non-negative integral
/// labels (see [`Dataset::class`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<f64>,
}

impl Dataset {
    pub fn new(dim: usize) -> Self {
        Self { dim, features: Vec::new(), labels: Vec::new() }
    }

    pub fn from_rows(dim: usize, rows: Vec<(f64, Vec<f64>)>) -> Result<Self> {
        let mut ds = Self::new(dim);
        for (label, x) in rows {
            ds.push(label, &x)?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, label: f64, features: &[f64]) -> Result<()> {
        if features.len() != self.dim {
            return Err(Error::config(format!(
                "sample has {} features, dataset dimension is {}",
                features.len(),
                self.dim
            )));
        }
        self.features.extend_from_slice(features);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn features(&self, j: usize) -> &[f64] {
        &self.features[j * self.dim..(j + 1) * self.dim]
    }

    #[inline]
    pub fn label(&self, j: usize) -> f64 {
        self.labels[j]
    }

    /// Class index of sample `j`, if its label is a non-negative integer.
    pub fn class(&self, j: usize) -> Option<usize> {
        let l = self.labels[j];
        (l >= 0.0 && l.fract() == 0.0).then_some(l as usize)
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// Number of classes implied by the largest integral label.
    pub fn num_classes(&self) -> usize {
        (0..self.len()).filter_map(|j| self.class(j)).max().map_or(0, |c| c + 1)
    }

    pub fn distinct_labels(&self) -> usize {
        let mut ls: Vec<u64> = self.labels.iter().map(|l| l.to_bits()).collect();
        ls.sort_unstable();
        ls.dedup();
        ls.len()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut out = Self::new(self.dim);
        for &j in indices {
            out.features.extend_from_slice(self.features(j));
            out.labels.push(self.labels[j]);
        }
        out
    }

    /// Per-coordinate mean of the feature vectors.
    pub fn feature_mean(&self) -> ParamVector {
        let mut acc = vec![0.0; self.dim];
        for j in 0..self.len() {
            for (a, x) in acc.iter_mut().zip(self.features(j)) {
                *a += x;
            }
        }
        let n = self.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        ParamVector::from_vec(acc)
    }

    /// One sample per line: label, then features, space separated. Values are
    /// written in shortest round-trip decimal form.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for j in 0..self.len() {
            write!(out, "{}", self.labels[j]).unwrap();
            for x in self.features(j) {
                write!(out, " {x}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut ds: Option<Dataset> = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let values: Vec<f64> = line
                .split_whitespace()
                .map(|tok| tok.parse::<f64>().map_err(|e| Error::Parse(format!("line {}: {tok:?}: {e}", lineno + 1))))
                .collect::<Result<_>>()?;
            let (label, x) = values.split_first().ok_or_else(|| Error::Parse("empty row".into()))?;
            let d = ds.get_or_insert_with(|| Dataset::new(x.len()));
            d.push(*label, x).map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
        }
        ds.ok_or_else(|| Error::Parse("no samples".into()))
    }
}

/// The local dataset `D_i` of one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub data: Dataset,
}

impl ClientDataset {
    pub fn new(client_id: usize, data: Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::config(format!("client {client_id} has an empty dataset")));
        }
        Ok(Self { client_id, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub shards_total: usize,
    pub shards_per_client: usize,
    pub seed: u64,
}

impl PartitionSpec {
    /// `shards_per_client` shards for each of `num_clients` clients.
    pub fn new(num_clients: usize, shards_per_client: usize, seed: u64) -> Self {
        Self { num_clients, shards_total: num_clients * shards_per_client, shards_per_client, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 || self.shards_per_client == 0 {
            return Err(Error::config("partition needs at least one client and one shard per client"));
        }
        if self.shards_total != self.num_clients * self.shards_per_client {
            return Err(Error::config(format!(
                "shards_total ({}) must equal num_clients ({}) x shards_per_client ({})",
                self.shards_total, self.num_clients, self.shards_per_client
            )));
        }
        Ok(())
    }
}

/// Gaussian blobs with unit covariance, one per class.
///
/// Class means sit on a circle in the first two coordinates with adjacent
/// means exactly `separation` apart (on a line when `d == 1`); remaining
/// coordinates are pure noise. Samples are emitted class by class.
pub fn make_synthetic_classification(
    num_classes: usize,
    per_class: usize,
    d: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if d < 1 {
        return Err(Error::config("feature dimension must be at least 1"));
    }
    if num_classes < 2 || per_class < 1 {
        return Err(Error::config("need at least 2 classes and 1 sample per class"));
    }
    if !(separation > 0.0) {
        return Err(Error::config("class separation must be positive"));
    }
    let means = class_means(num_classes, d, separation);
    let mut rng = RngContract::new(seed).stream(Purpose::Data, num_classes as u64, per_class as u64, d as u64);
    let mut ds = Dataset::new(d);
    let mut x = vec![0.0; d];
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            for (xi, mi) in x.iter_mut().zip(mean) {
                let z: f64 = rng.sample(StandardNormal);
                *xi = mi + z;
            }
            ds.push(c as f64, &x)?;
        }
    }
    Ok(ds)
}

fn class_means(num_classes: usize, d: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|c| {
            let mut m = vec![0.0; d];
            if d == 1 {
                m[0] = separation * (c as f64 - (num_classes as f64 - 1.0) / 2.0);
            } else {
                let angle = 2.0 * std::f64::consts::PI * c as f64 / num_classes as f64;
                let radius = separation / (2.0 * (std::f64::consts::PI / num_classes as f64).sin());
                m[0] = radius * angle.cos();
                m[1] = radius * angle.sin();
            }
            m
        })
        .collect()
}

/// Point clouds with exactly prescribed per-client means.
///
/// Each client gets `points_per_client` points (must be even) arranged in
/// mirrored pairs `mean ± spread * z` with standard normal `z`.
pub fn make_clustered_clients(
    means: &[Vec<f64>],
    points_per_client: usize,
    spread: f64,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if means.is_empty() {
        return Err(Error::config("no client means given"));
    }
    if points_per_client == 0 || !points_per_client.is_multiple_of(2) {
        return Err(Error::config("points_per_client must be a positive even number"));
    }
    let d = means[0].len();
    if d == 0 || means.iter().any(|m| m.len() != d) {
        return Err(Error::config("client means must share a nonzero dimension"));
    }
    let contract = RngContract::new(seed);
    means
        .iter()
        .enumerate()
        .map(|(i, mean)| {
            let mut rng = contract.stream(Purpose::Data, i as u64, 1, 0);
            let mut ds = Dataset::new(d);
            for _ in 0..points_per_client / 2 {
                let z: Vec<f64> = (0..d).map(|_| spread * rng.sample::<f64, _>(StandardNormal)).collect();
                let plus: Vec<f64> = mean.iter().zip(&z).map(|(m, z)| m + z).collect();
                let minus: Vec<f64> = mean.iter().zip(&z).map(|(m, z)| m - z).collect();
                ds.push(0.0, &plus)?;
                ds.push(0.0, &minus)?;
            }
            ClientDataset::new(i, ds)
        })
        .collect()
}

/// Sort by label (ties by original index), cut into `shards_total` contiguous
/// shards and deal `shards_per_client` random shards to each client.
pub fn partition_shards(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    spec.validate()?;
    let n = dataset.len();
    if n == 0 || !n.is_multiple_of(spec.shards_total) {
        return Err(Error::config(format!("{n} samples cannot be split into {} equal shards", spec.shards_total)));
    }
    let shard_size = n / spec.shards_total;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dataset.label(a).total_cmp(&dataset.label(b)).then(a.cmp(&b)));
    let mut shards: Vec<usize> = (0..spec.shards_total).collect();
    let mut rng = RngContract::new(spec.seed).stream(Purpose::Partition, spec.shards_total as u64, 0, 0);
    shards.shuffle(&mut rng);
    shards
        .chunks(spec.shards_per_client)
        .enumerate()
        .map(|(client, mine)| {
            let idx: Vec<usize> =
                mine.iter().flat_map(|&s| order[s * shard_size..(s + 1) * shard_size].iter().copied()).collect();
            ClientDataset::new(client, dataset.subset(&idx))
        })
        .collect()
}

/// Per-client heterogeneity `max_w ||∇f_i(w) − ∇f(w)||` over the probe points.
pub fn heterogeneity_stats(objectives: &[Objective], probes: &[ParamVector]) -> Result<Vec<f64>> {
    if probes.is_empty() {
        return Err(Error::config("heterogeneity_stats needs at least one probe point"));
    }
    let mut kappa = vec![0.0f64; objectives.len()];
    for w in probes {
        let grads: Vec<ParamVector> = objectives.iter().map(|o| o.full_grad(w)).collect::<Result<_>>()?;
        let global = ParamVector::mean(&grads).ok_or_else(|| Error::config("no objectives"))?;
        for (k, g) in kappa.iter_mut().zip(&grads) {
            *k = k.max(g.dist(&global));
        }
    }
    Ok(kappa)
}
