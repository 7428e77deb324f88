//! Synthetic classification data, non-IID partitioning and CSV ingestion.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Attempts allowed to draw a Dirichlet assignment with no undersized client.
pub const MAX_PARTITION_ATTEMPTS: usize = 100;

/// Row-major feature matrix with one integer label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
}

impl ClientDataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be >= 1"));
        }
        if num_classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::LengthMismatch {
                what: "features",
                expected: labels.len() * dim,
                found: features.len(),
            });
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("features"));
        }
        if let Some(l) = labels.iter().find(|l| **l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        Ok(ClientDataset {
            features,
            labels,
            dim,
            num_classes,
        })
    }

    /// Sample count `n`.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        ClientDataset::new(features, labels, self.dim, self.num_classes)
    }

    /// Concatenation of several datasets sharing dim and class count.
    pub fn concat(parts: &[&ClientDataset]) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptyDataset)?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (index, p) in parts.iter().enumerate() {
            if p.dim != first.dim {
                return Err(Error::DimensionMismatch {
                    index,
                    expected: first.dim,
                    found: p.dim,
                });
            }
            features.extend_from_slice(&p.features);
            labels.extend_from_slice(&p.labels);
        }
        ClientDataset::new(features, labels, first.dim, first.num_classes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub num_clients: usize,
    pub dirichlet_beta: f64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub noise_clients: Vec<usize>,
    #[serde(default)]
    pub label_noise_rate: f64,
    /// Derived from the experiment seed at run time; not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

fn default_val_fraction() -> f64 {
    0.2
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::invalid("partition.num_clients must be >= 1"));
        }
        if !(self.dirichlet_beta > 0.0 && self.dirichlet_beta.is_finite()) {
            return Err(Error::invalid("partition.dirichlet_beta must be positive"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::invalid("partition.val_fraction must be in (0,1)"));
        }
        if !(0.0..1.0).contains(&self.label_noise_rate) {
            return Err(Error::invalid("partition.label_noise_rate must be in [0,1)"));
        }
        if let Some(c) = self.noise_clients.iter().find(|c| **c >= self.num_clients) {
            return Err(Error::invalid(format!(
                "partition.noise_clients contains {c}, outside 0..{}",
                self.num_clients
            )));
        }
        Ok(())
    }
}

/// Gaussian class clusters around seeded centroids whose closest pair is
/// exactly distance 1 apart. Labels cycle through the classes, so counts
/// are balanced within one; rows are then shuffled.
pub fn make_blobs(
    num_classes: usize,
    dim: usize,
    n: usize,
    spread: f64,
    seed: u64,
) -> Result<ClientDataset> {
    if num_classes < 2 || dim == 0 || n < num_classes {
        return Err(Error::invalid(format!(
            "make_blobs needs num_classes >= 2, dim >= 1, n >= num_classes (got {num_classes}, {dim}, {n})"
        )));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::invalid("spread must be positive"));
    }
    let mut rng = Rng::new(seed);
    let mut centroids: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let mut min_dist = f64::INFINITY;
    for a in 0..num_classes {
        for b in a + 1..num_classes {
            let d = centroids[a]
                .iter()
                .zip(&centroids[b])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            min_dist = min_dist.min(d);
        }
    }
    if min_dist.is_nan() || min_dist <= 0.0 {
        return Err(Error::invalid("degenerate centroid draw"));
    }
    for c in centroids.iter_mut() {
        c.iter_mut().for_each(|x| *x /= min_dist);
    }

    let mut labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(n * dim);
    for &label in &labels {
        for &mu in &centroids[label] {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(mu + spread * z);
        }
    }
    ClientDataset::new(features, labels, dim, num_classes)
}

/// Draws from a symmetric Dirichlet(β) in log space so that tiny β does not
/// underflow every component to zero.
fn sample_dirichlet(beta: f64, k: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let gamma = Gamma::new(beta + 1.0, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / beta
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mass: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = mass.iter().sum();
    Ok(mass.into_iter().map(|m| m / total).collect())
}

/// Splits `data` across clients with per-class Dirichlet(β) label skew,
/// then splits each client into (train, val). Clients listed in
/// `noise_clients` get `label_noise_rate` of both splits relabelled.
///
/// Every client must end up with at least two samples so both splits are
/// non-empty; assignments are redrawn up to [`MAX_PARTITION_ATTEMPTS`] times.
pub fn partition_dirichlet(
    data: &ClientDataset,
    cfg: &PartitionConfig,
) -> Result<Vec<(ClientDataset, ClientDataset)>> {
    cfg.validate()?;
    let k = cfg.num_clients;
    if data.len() < k {
        return Err(Error::Infeasible(format!(
            "{} samples cannot cover {k} clients",
            data.len()
        )));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes()];
    for (i, &l) in data.labels().iter().enumerate() {
        by_class[l].push(i);
    }

    let mut assignment = None;
    for _ in 0..MAX_PARTITION_ATTEMPTS {
        let mut clients: Vec<Vec<usize>> = vec![Vec::new(); k];
        for class_indices in &by_class {
            if class_indices.is_empty() {
                continue;
            }
            let mut shuffled = class_indices.clone();
            shuffled.shuffle(&mut rng);
            let props = sample_dirichlet(cfg.dirichlet_beta, k, &mut rng)?;
            let n_c = shuffled.len() as f64;
            let mut cum = 0.0;
            let mut start = 0;
            for (client, p) in props.iter().enumerate() {
                cum += p;
                let end = if client + 1 == k {
                    shuffled.len()
                } else {
                    ((cum * n_c).round() as usize).clamp(start, shuffled.len())
                };
                clients[client].extend_from_slice(&shuffled[start..end]);
                start = end;
            }
        }
        if clients.iter().all(|c| c.len() >= 2) {
            assignment = Some(clients);
            break;
        }
    }
    let clients = assignment.ok_or_else(|| {
        Error::Infeasible(format!(
            "no assignment with >= 2 samples per client after {MAX_PARTITION_ATTEMPTS} attempts"
        ))
    })?;

    let mut out = Vec::with_capacity(k);
    for (client, mut idx) in clients.into_iter().enumerate() {
        idx.shuffle(&mut rng);
        let n_val = ((cfg.val_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        let mut val = data.subset(&idx[..n_val])?;
        let mut train = data.subset(&idx[n_val..])?;
        if cfg.noise_clients.contains(&client) && cfg.label_noise_rate > 0.0 {
            let s = crate::numerics::derive_seed(cfg.seed, &[client as u64]);
            train = inject_label_noise(&train, cfg.label_noise_rate, s)?;
            val = inject_label_noise(&val, cfg.label_noise_rate, s ^ 1)?;
        }
        out.push((train, val));
    }
    Ok(out)
}

/// Reassigns exactly `round(rate·n)` labels, each to a uniformly chosen
/// different class.
pub fn inject_label_noise(data: &ClientDataset, rate: f64, seed: u64) -> Result<ClientDataset> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("noise rate must be in [0,1), got {rate}")));
    }
    let n = data.len();
    let flips = (rate * n as f64).round() as usize;
    let mut rng = Rng::new(seed);
    let mut labels = data.labels.clone();
    let c = data.num_classes;
    for i in index::sample(&mut rng, n, flips).into_vec() {
        let offset = 1 + rng.random_range(0..c - 1);
        labels[i] = (labels[i] + offset) % c;
    }
    ClientDataset::new(data.features.clone(), labels, data.dim, c)
}

/// Empirical class proportions over `num_classes` classes.
pub fn label_distribution(data: &ClientDataset, num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0.0; num_classes];
    for &l in &data.labels {
        if l < num_classes {
            counts[l] += 1.0;
        }
    }
    let n = data.len() as f64;
    counts.iter_mut().for_each(|c| *c /= n);
    counts
}

/// Reads comma-separated rows of `d` feature columns followed by a
/// zero-based integer label.
pub fn load_csv(path: &Path, num_classes: usize, has_header: bool) -> Result<ClientDataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1 + usize::from(has_header);
        let record = record.map_err(|e| Error::Csv {
            row,
            message: e.to_string(),
        })?;
        if record.len() < 2 {
            return Err(Error::Csv {
                row,
                message: "need at least one feature column and a label".into(),
            });
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::Csv {
                    row,
                    message: format!("ragged row: {} columns, expected {w}", record.len()),
                })
            }
            Some(_) => {}
        }
        let (label_cell, feature_cells) = record
            .iter()
            .collect::<Vec<_>>()
            .split_last()
            .map(|(l, f)| (*l, f.to_vec()))
            .expect("record has >= 2 cells");
        for cell in feature_cells {
            let x: f64 = cell.parse().map_err(|_| Error::Csv {
                row,
                message: format!("non-numeric cell {cell:?}"),
            })?;
            if !x.is_finite() {
                return Err(Error::Csv {
                    row,
                    message: format!("non-finite cell {cell:?}"),
                });
            }
            features.push(x);
        }
        let label: usize = label_cell.parse().map_err(|_| Error::Csv {
            row,
            message: format!("label {label_cell:?} is not a non-negative integer"),
        })?;
        if label >= num_classes {
            return Err(Error::Csv {
                row,
                message: format!("label {label} out of range for {num_classes} classes"),
            });
        }
        labels.push(label);
    }
    let dim = width.ok_or(Error::EmptyDataset)? - 1;
    ClientDataset::new(features, labels, dim, num_classes)
}

/// Writes `data` in the format [`load_csv`] reads, without a header.
/// Values use shortest round-trip formatting.
pub fn write_csv(data: &ClientDataset, path: &Path) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    for i in 0..data.len() {
        let mut row: Vec<String> = data.row(i).iter().map(|x| x.to_string()).collect();
        row.push(data.labels[i].to_string());
        writer
            .write_record(&row)
            .map_err(|e| Error::Io(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::Io(e.to_string()))
}
