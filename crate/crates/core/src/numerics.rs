//! Dense vector/matrix helpers, keyed random streams, PCA and a
//! central-difference gradient oracle.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{FlocoError, Result};
use crate::simplex::SimplexPoint;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl RealMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows * cols != values.len() {
            return Err(FlocoError::dims(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(FlocoError::dims(format!(
                    "row {i} has length {}, expected {cols}",
                    r.len()
                )));
            }
            values.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            values,
        }
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.cols.max(1)).take(self.rows)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a * x`
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// What a random stream is used for. Part of the stream key so that, e.g.,
/// mini-batch order and simplex sampling never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    Data = 1,
    GlobalTest = 2,
    Partition = 3,
    Split = 4,
    Init = 5,
    Participants = 6,
    Batches = 7,
    Alpha = 8,
    FinetuneBatches = 9,
    FinetuneAlpha = 10,
    Surface = 11,
    Test = 255,
}

/// Identifies one independent stream below a master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub round: u64,
    pub client: u64,
    pub purpose: Purpose,
}

impl StreamKey {
    /// Client id used for server-side streams.
    pub const SERVER: u64 = u64::MAX;

    pub fn new(round: usize, client: usize, purpose: Purpose) -> Self {
        Self {
            round: round as u64,
            client: client as u64,
            purpose,
        }
    }

    pub fn server(round: usize, purpose: Purpose) -> Self {
        Self {
            round: round as u64,
            client: Self::SERVER,
            purpose,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic random stream derived from `(master_seed, key)`.
///
/// Streams with equal seed and key produce identical sequences regardless of
/// which thread creates them or in which order.
#[derive(Debug, Clone)]
pub struct RngStream {
    master_seed: u64,
    key: StreamKey,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, key: StreamKey) -> Self {
        let mut h = splitmix64(master_seed);
        for part in [key.round, key.client, key.purpose as u64] {
            h = splitmix64(h ^ part);
        }
        Self {
            master_seed,
            key,
            inner: ChaCha8Rng::seed_from_u64(h),
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn key(&self) -> StreamKey {
        self.key
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Uniform draw from the standard simplex with `dims + 1` coordinates,
/// via normalized unit-exponential variates.
pub fn sample_uniform_simplex<R: RngCore + ?Sized>(dims: usize, rng: &mut R) -> SimplexPoint {
    if dims == 0 {
        return SimplexPoint::vertex(0, 1);
    }
    let mut draws: Vec<f64> = (0..=dims).map(|_| Exp1.sample(&mut *rng)).collect();
    let total: f64 = draws.iter().sum();
    for d in &mut draws {
        *d /= total;
    }
    SimplexPoint::from_normalized(draws)
}

/// Projects rows onto their top `target_dims` principal directions.
///
/// Directions come from the eigen-decomposition of the centered scatter
/// matrix (or the equivalent Gram matrix when there are fewer rows than
/// columns), ordered by decreasing variance. Each direction is signed so its
/// largest-magnitude entry is positive. Directions with no variance are
/// returned as zero columns.
pub fn pca_project(rows: &[Vec<f64>], target_dims: usize) -> Result<Vec<Vec<f64>>> {
    if rows.len() < 2 {
        return Err(FlocoError::invalid(format!(
            "PCA needs at least 2 rows, got {}",
            rows.len()
        )));
    }
    let dim = rows[0].len();
    if rows.iter().any(|r| r.len() != dim) {
        return Err(FlocoError::dims("PCA rows have unequal lengths"));
    }
    if dim < target_dims {
        return Err(FlocoError::dims(format!(
            "PCA target {target_dims} exceeds input dimension {dim}"
        )));
    }
    let n = rows.len();
    let mut mean = vec![0.0; dim];
    for r in rows {
        axpy(1.0, r, &mut mean);
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered = DMatrix::from_fn(n, dim, |i, j| rows[i][j] - mean[j]);

    // (eigenvalue, unit direction in input space)
    let mut components: Vec<(f64, Vec<f64>)> = if n <= dim {
        let gram = &centered * centered.transpose();
        let eig = SymmetricEigen::new(gram);
        (0..n)
            .map(|c| {
                let lambda = eig.eigenvalues[c].max(0.0);
                let u = eig.eigenvectors.column(c);
                let v = centered.transpose() * u;
                let norm = v.norm();
                let dir = if norm > 0.0 {
                    v.iter().map(|x| x / norm).collect()
                } else {
                    vec![0.0; dim]
                };
                (lambda, dir)
            })
            .collect()
    } else {
        let scatter = centered.transpose() * &centered;
        let eig = SymmetricEigen::new(scatter);
        (0..dim)
            .map(|c| {
                let lambda = eig.eigenvalues[c].max(0.0);
                (lambda, eig.eigenvectors.column(c).iter().copied().collect())
            })
            .collect()
    };
    components.sort_by(|a, b| b.0.total_cmp(&a.0));
    let top = components.first().map_or(0.0, |c| c.0);
    let cutoff = (top * 1e-12).max(f64::MIN_POSITIVE);

    let mut out = vec![vec![0.0; target_dims]; n];
    for (j, (lambda, dir)) in components.iter().take(target_dims).enumerate() {
        if *lambda <= cutoff {
            continue;
        }
        let mut dir = dir.clone();
        let lead = dir
            .iter()
            .enumerate()
            .fold(
                (0, 0.0f64),
                |best, (i, v)| {
                    if v.abs() > best.1.abs() {
                        (i, *v)
                    } else {
                        best
                    }
                },
            )
            .0;
        if dir[lead] < 0.0 {
            dir.iter_mut().for_each(|v| *v = -*v);
        }
        for (i, o) in out.iter_mut().enumerate() {
            o[j] = centered.row(i).iter().zip(&dir).map(|(a, b)| a * b).sum();
        }
    }
    Ok(out)
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_gradient<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(FlocoError::invalid(format!("step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(FlocoError::NonFinite(format!(
                "objective not finite around coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}
