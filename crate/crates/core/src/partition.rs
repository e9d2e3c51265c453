//! Synthetic Gaussian-blob datasets and non-IID client partitioners.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{FlocoError, Result};
use crate::numerics::{norm2, RealMatrix};

/// Feature matrix with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: RealMatrix,
    labels: Vec<usize>,
    classes: usize,
}

impl LabeledDataset {
    pub fn new(features: RealMatrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(FlocoError::dims(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(FlocoError::invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn features(&self) -> &RealMatrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Indices of each class, in dataset order.
    pub fn class_pools(&self) -> Vec<Vec<usize>> {
        let mut pools = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            pools[l].push(i);
        }
        pools
    }
}

/// Isotropic Gaussian blobs with one centroid per class on a sphere.
#[derive(Debug, Clone)]
pub struct BlobGenerator {
    centroids: Vec<Vec<f64>>,
    spread: f64,
}

impl BlobGenerator {
    pub fn new<R: RngCore + ?Sized>(
        classes: usize,
        dim: usize,
        radius: f64,
        spread: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if classes < 2 || dim < 2 {
            return Err(FlocoError::invalid(format!(
                "blobs need at least 2 classes and 2 dimensions, got {classes} and {dim}"
            )));
        }
        if !(spread >= 0.0) || !(radius > 0.0) {
            return Err(FlocoError::invalid("spread must be >= 0 and radius > 0"));
        }
        let centroids = (0..classes)
            .map(|_| loop {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
                let n = norm2(&v);
                if n > 1e-12 {
                    break v.into_iter().map(|x| radius * x / n).collect();
                }
            })
            .collect();
        Ok(Self { centroids, spread })
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    /// `n_per_class` samples of every class, grouped by class.
    pub fn sample<R: RngCore + ?Sized>(&self, n_per_class: usize, rng: &mut R) -> LabeledDataset {
        let classes = self.centroids.len();
        let dim = self.centroids[0].len();
        let mut values = Vec::with_capacity(classes * n_per_class * dim);
        let mut labels = Vec::with_capacity(classes * n_per_class);
        for (c, centroid) in self.centroids.iter().enumerate() {
            for _ in 0..n_per_class {
                for &mu in centroid {
                    let z: f64 = StandardNormal.sample(&mut *rng);
                    values.push(mu + self.spread * z);
                }
                labels.push(c);
            }
        }
        let features = RealMatrix::new(labels.len(), dim, values).expect("consistent shape");
        LabeledDataset {
            features,
            labels,
            classes,
        }
    }
}

/// Centroid sphere radius used by [`synth_blobs`].
pub const BLOB_RADIUS: f64 = 1.0;

pub fn synth_blobs<R: RngCore + ?Sized>(
    classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    rng: &mut R,
) -> Result<LabeledDataset> {
    Ok(BlobGenerator::new(classes, dim, BLOB_RADIUS, spread, rng)?.sample(n_per_class, rng))
}

/// Disjoint per-client index lists into a parent dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionResult {
    client_indices: Vec<Vec<usize>>,
}

impl PartitionResult {
    /// Checks disjointness, range and nonemptiness against a dataset of `n`.
    pub fn new(client_indices: Vec<Vec<usize>>, n: usize) -> Result<Self> {
        let mut seen = vec![false; n];
        for (k, idx) in client_indices.iter().enumerate() {
            if idx.is_empty() {
                return Err(FlocoError::Empty(format!("client {k} received no samples")));
            }
            for &i in idx {
                if i >= n {
                    return Err(FlocoError::invalid(format!("index {i} out of range {n}")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(FlocoError::invalid(format!("index {i} assigned twice")));
                }
            }
        }
        Ok(Self { client_indices })
    }

    pub fn client_indices(&self) -> &[Vec<usize>] {
        &self.client_indices
    }

    pub fn clients(&self) -> usize {
        self.client_indices.len()
    }

    pub fn total_assigned(&self) -> usize {
        self.client_indices.iter().map(Vec::len).sum()
    }

    /// `counts[k][c]`: samples of class `c` held by client `k`.
    pub fn histogram(&self, data: &LabeledDataset) -> Vec<Vec<usize>> {
        self.client_indices
            .iter()
            .map(|idx| {
                let mut h = vec![0; data.classes()];
                for &i in idx {
                    h[data.labels()[i]] += 1;
                }
                h
            })
            .collect()
    }
}

fn client_budgets(n: usize, clients: usize) -> Vec<usize> {
    (0..clients)
        .map(|k| n / clients + usize::from(k < n % clients))
        .collect()
}

/// Splits `total` into integer parts proportional to `weights` (summing to
/// one) by the largest-remainder method. Ties go to the index that comes
/// first in the cyclic order starting at `offset`.
pub fn largest_remainder(weights: &[f64], total: usize, offset: usize) -> Vec<usize> {
    let n = weights.len();
    let exact: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut parts: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let assigned: usize = parts.iter().sum();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - parts[a] as f64;
        let rb = exact[b] - parts[b] as f64;
        rb.total_cmp(&ra)
            .then(((a + n - offset % n) % n).cmp(&((b + n - offset % n) % n)))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        parts[i] += 1;
    }
    parts
}

fn take_from(pool: &mut Vec<usize>, count: usize, into: &mut Vec<usize>) {
    let start = pool.len().saturating_sub(count);
    into.extend(pool.drain(start..).rev());
}

fn sample_dirichlet<R: RngCore + ?Sized>(classes: usize, beta: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(beta, 1.0).expect("beta checked positive");
    let mut phi: Vec<f64> = (0..classes).map(|_| gamma.sample(&mut *rng)).collect();
    let total: f64 = phi.iter().sum();
    if total > 0.0 && total.is_finite() {
        phi.iter_mut().for_each(|p| *p /= total);
    } else {
        // every draw underflowed: all mass on one class
        let c = rng.random_range(0..classes);
        phi = vec![0.0; classes];
        phi[c] = 1.0;
    }
    phi
}

/// Label-skewed split: client `k` draws class proportions `phi_k ~ Dir(beta)`
/// and fills an equal budget `N/K` from shuffled per-class pools; samples left
/// over once the pools run dry are handed to clients still below budget,
/// preferring each client's highest-`phi` classes.
pub fn partition_dirichlet<R: RngCore + ?Sized>(
    data: &LabeledDataset,
    clients: usize,
    beta: f64,
    rng: &mut R,
) -> Result<PartitionResult> {
    let n = data.len();
    if clients == 0 {
        return Err(FlocoError::invalid("need at least one client"));
    }
    if clients > n {
        return Err(FlocoError::invalid(format!(
            "{clients} clients but only {n} samples"
        )));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(FlocoError::invalid(format!(
            "concentration must be positive, got {beta}"
        )));
    }
    let classes = data.classes();
    let mut pools = data.class_pools();
    for pool in &mut pools {
        pool.shuffle(rng);
    }
    let phis: Vec<Vec<f64>> = (0..clients)
        .map(|_| sample_dirichlet(classes, beta, rng))
        .collect();
    let budgets = client_budgets(n, clients);

    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for k in 0..clients {
        let quotas = largest_remainder(&phis[k], budgets[k], k);
        for (c, &q) in quotas.iter().enumerate() {
            take_from(&mut pools[c], q, &mut assigned[k]);
        }
    }
    for k in 0..clients {
        let mut preference: Vec<usize> = (0..classes).collect();
        preference.sort_by(|&a, &b| phis[k][b].total_cmp(&phis[k][a]).then(a.cmp(&b)));
        for &c in &preference {
            let missing = budgets[k] - assigned[k].len();
            if missing == 0 {
                break;
            }
            take_from(&mut pools[c], missing, &mut assigned[k]);
        }
    }
    PartitionResult::new(assigned, n)
}

/// Group-based split: clients form `groups` equal groups, group `g` owns the
/// `g`-th contiguous block of `L / groups` primary classes, and every client
/// takes `q`% of an equal budget from its primary classes and the rest
/// evenly from all other classes. Samples are taken in dataset order.
pub fn partition_fivefold(
    data: &LabeledDataset,
    clients: usize,
    q: f64,
    groups: usize,
) -> Result<PartitionResult> {
    let classes = data.classes();
    if groups == 0 || clients == 0 {
        return Err(FlocoError::invalid("groups and clients must be positive"));
    }
    if !clients.is_multiple_of(groups) {
        return Err(FlocoError::invalid(format!(
            "{clients} clients not divisible into {groups} groups"
        )));
    }
    if !classes.is_multiple_of(groups) {
        return Err(FlocoError::invalid(format!(
            "{classes} classes not divisible into {groups} groups"
        )));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(FlocoError::invalid(format!("q must be in [0, 100], got {q}")));
    }
    let n = data.len();
    if clients > n {
        return Err(FlocoError::invalid(format!(
            "{clients} clients but only {n} samples"
        )));
    }
    let per_group_clients = clients / groups;
    let per_group_classes = classes / groups;
    let mut pools: Vec<Vec<usize>> = data
        .class_pools()
        .into_iter()
        .map(|mut p| {
            p.reverse();
            p
        })
        .collect();
    let budget = n / clients;

    let mut assigned = vec![Vec::new(); clients];
    for (k, held) in assigned.iter_mut().enumerate() {
        let g = k / per_group_clients;
        let primary = g * per_group_classes..(g + 1) * per_group_classes;
        let primary_total = ((q / 100.0) * budget as f64).round() as usize;
        let secondary_total = budget - primary_total;
        let primary_weights = vec![1.0 / per_group_classes as f64; per_group_classes];
        let others = classes - per_group_classes;
        let mut quotas = vec![0; classes];
        for (c, part) in primary
            .clone()
            .zip(largest_remainder(&primary_weights, primary_total, k))
        {
            quotas[c] = part;
        }
        if others > 0 {
            // equal shares; the units left after flooring go round-robin
            // across the group's clients so every class is drawn evenly
            let secondary: Vec<usize> = (0..classes).filter(|c| !primary.contains(c)).collect();
            let base = secondary_total / others;
            let extra = secondary_total % others;
            let start = (k % per_group_clients) * extra;
            for (i, &c) in secondary.iter().enumerate() {
                let pos = (i + others - start % others) % others;
                quotas[c] = base + usize::from(pos < extra);
            }
        }
        for (c, &quota) in quotas.iter().enumerate() {
            take_from(&mut pools[c], quota, held);
        }
    }
    PartitionResult::new(assigned, n)
}

/// Stratified split of one client's indices into `(train, test)`; each class
/// contributes `round(test_fraction * n_c)` test samples. A client with at
/// least two samples always gets a nonempty test set and train set.
pub fn stratified_split<R: RngCore + ?Sized>(
    data: &LabeledDataset,
    indices: &[usize],
    test_fraction: f64,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    let mut by_class = vec![Vec::new(); data.classes()];
    for &i in indices {
        by_class[data.labels()[i]].push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for pool in &mut by_class {
        pool.shuffle(rng);
        let n_test = (test_fraction * pool.len() as f64).round() as usize;
        test.extend_from_slice(&pool[..n_test]);
        train.extend_from_slice(&pool[n_test..]);
    }
    if indices.len() >= 2 {
        if test.is_empty() {
            test.push(train.pop().expect("at least two samples"));
        } else if train.is_empty() {
            train.push(test.pop().expect("at least two samples"));
        }
    }
    (train, test)
}

/// Writes `(client_id, class_id, count)` rows.
pub fn write_partition_stats<W: Write>(out: W, histogram: &[Vec<usize>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(["client_id", "class_id", "count"])?;
    for (k, row) in histogram.iter().enumerate() {
        for (c, count) in row.iter().enumerate() {
            w.write_record([k.to_string(), c.to_string(), count.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
