//! Dense linear algebra, Gaussian sampling and k-means.
//!
//! Everything here is 64-bit and deterministic given its inputs and seed.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

const SYMMETRY_RTOL: f64 = 1e-12;
const JITTER_SCALE: f64 = 1e-10;

/// Seed for every random stream in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Independent child seed for a named sub-stream (splitmix64 finaliser).
    pub fn derive(self, stream: u64) -> RngSeed {
        let mut z = self
            .0
            .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
            .wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        RngSeed(z ^ (z >> 31))
    }
}

/// Symmetric positive definite matrix. Construction checks symmetry and runs a
/// Cholesky factorisation, so holding one means the factor exists.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(Matrix);

impl SpdMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "SPD matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotSpd {
                pivot: 0,
                value: f64::NAN,
            });
        }
        let scale = m.amax().max(f64::MIN_POSITIVE);
        for i in 0..m.nrows() {
            for j in (i + 1)..m.ncols() {
                if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_RTOL * scale {
                    return Err(Error::NotSpd {
                        pivot: i,
                        value: m[(i, j)] - m[(j, i)],
                    });
                }
            }
        }
        cholesky(&m)?;
        Ok(SpdMatrix(m))
    }

    /// Symmetrises `m` by averaging with its transpose, then validates.
    pub fn from_symmetrized(m: Matrix) -> Result<Self> {
        let s = (&m + m.transpose()) * 0.5;
        Self::new(s)
    }

    pub fn identity(dim: usize) -> Self {
        SpdMatrix(Matrix::identity(dim, dim))
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(Matrix::from_diagonal(&Vector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(&self.0 * factor)
    }
}

fn try_cholesky(m: &Matrix) -> std::result::Result<Matrix, (usize, f64)> {
    let n = m.nrows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err((j, d));
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Lower Cholesky factor. One retry with a `1e-10 * trace / dim` diagonal
/// jitter before giving up.
pub fn cholesky(m: &Matrix) -> Result<Matrix> {
    match try_cholesky(m) {
        Ok(l) => Ok(l),
        Err(_) => {
            let n = m.nrows().max(1);
            let jitter = JITTER_SCALE * m.trace().abs() / n as f64;
            let mut jittered = m.clone();
            for i in 0..m.nrows() {
                jittered[(i, i)] += jitter;
            }
            try_cholesky(&jittered).map_err(|(pivot, value)| Error::NotSpd { pivot, value })
        }
    }
}

/// `ln |m|` via Cholesky.
pub fn logdet_spd(m: &SpdMatrix) -> Result<f64> {
    let l = cholesky(m.as_matrix())?;
    Ok(2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Symmetric principal square root via eigendecomposition.
pub fn sqrt_spd(m: &SpdMatrix) -> Result<SpdMatrix> {
    let eig = SymmetricEigen::new(m.as_matrix().clone());
    if let Some((i, &v)) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .find(|(_, &v)| v <= 0.0)
    {
        return Err(Error::NotSpd { pivot: i, value: v });
    }
    let roots = eig.eigenvalues.map(f64::sqrt);
    let q = &eig.eigenvectors;
    let r = q * Matrix::from_diagonal(&roots) * q.transpose();
    SpdMatrix::from_symmetrized(r)
}

/// `n` i.i.d. rows from `N(mean, cov)`, computed as `mean + L z`.
pub fn sample_mvn(mean: &[f64], cov: &SpdMatrix, n: usize, seed: RngSeed) -> Result<Matrix> {
    let d = mean.len();
    if cov.dim() != d {
        return Err(Error::DimensionMismatch(format!(
            "mean has length {d}, covariance is {0}x{0}",
            cov.dim()
        )));
    }
    let l = cholesky(cov.as_matrix())?;
    let mut rng = seed.rng();
    let mut out = Matrix::zeros(n, d);
    let mut z = vec![0.0; d];
    for row in 0..n {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        for i in 0..d {
            let mut acc = mean[i];
            for (k, zk) in z.iter().enumerate().take(i + 1) {
                acc += l[(i, k)] * zk;
            }
            out[(row, i)] = acc;
        }
    }
    Ok(out)
}

/// Random orthogonal matrix from the QR factorisation of a Gaussian matrix,
/// with column signs fixed so the distribution is Haar.
pub fn random_orthogonal(dim: usize, rng: &mut impl Rng) -> Matrix {
    let g = Matrix::from_fn(dim, dim, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `Q D Qᵀ` with `Q` Haar-orthogonal and eigenvalues log-uniform in
/// `[1, condition_cap]`.
pub fn random_spd(dim: usize, condition_cap: f64, seed: RngSeed) -> Result<SpdMatrix> {
    if dim == 0 {
        return Err(Error::DegenerateInput("random_spd needs dim >= 1".into()));
    }
    if condition_cap.is_nan() || condition_cap < 1.0 {
        return Err(Error::DegenerateInput(format!(
            "condition cap must be >= 1, got {condition_cap}"
        )));
    }
    let mut rng = seed.rng();
    let q = random_orthogonal(dim, &mut rng);
    let log_cap = condition_cap.ln();
    let eig = Vector::from_fn(dim, |_, _| (log_cap * rng.random::<f64>()).exp());
    let m = &q * Matrix::from_diagonal(&eig) * q.transpose();
    SpdMatrix::from_symmetrized(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Matrix,
    /// Distortion after each assignment step.
    pub distortion: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeansResult {
    pub fn final_distortion(&self) -> f64 {
        self.distortion.last().copied().unwrap_or(0.0)
    }
}

pub const KMEANS_DEFAULT_ITERS: usize = 100;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rows_of(x: &Matrix) -> Vec<Vec<f64>> {
    (0..x.nrows())
        .map(|i| x.row(i).iter().copied().collect())
        .collect()
}

/// Lloyd's algorithm with distance-weighted (k-means++) seeding.
pub fn kmeans(x: &Matrix, k: usize, seed: RngSeed, max_iters: usize) -> Result<KMeansResult> {
    let n = x.nrows();
    if k == 0 || n < k {
        return Err(Error::DegenerateInput(format!(
            "k-means needs n >= k >= 1, got n = {n}, k = {k}"
        )));
    }
    let pts = rows_of(x);
    let mut rng = seed.rng();

    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(pts[rng.random_range(0..n)].clone());
    let mut nearest: Vec<f64> = pts.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in nearest.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All remaining points coincide with existing centroids.
            rng.random_range(0..n)
        };
        centroids.push(pts[pick].clone());
        let c = centroids.last().unwrap();
        for (d, p) in nearest.iter_mut().zip(&pts) {
            *d = d.min(sq_dist(p, c));
        }
    }

    let dim = x.ncols();
    let mut assignments = vec![usize::MAX; n];
    let mut distortion = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters.max(1) {
        iterations += 1;
        let mut changed = false;
        let mut total = 0.0;
        for (i, p) in pts.iter().enumerate() {
            let (best, dist) = centroids
                .iter()
                .enumerate()
                .map(|(c, cv)| (c, sq_dist(p, cv)))
                .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
            total += dist;
        }
        distortion.push(total);
        if !changed {
            converged = true;
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in pts.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            // Empty clusters keep their previous centroid.
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (cv, s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *cv = s * inv;
                }
            }
        }
    }

    let centroids = Matrix::from_fn(k, dim, |i, j| centroids[i][j]);
    Ok(KMeansResult {
        assignments,
        centroids,
        distortion,
        iterations,
        converged,
    })
}

/// Best of `restarts` independent k-means runs by final distortion; the
/// earliest run wins ties.
pub fn kmeans_restarts(
    x: &Matrix,
    k: usize,
    seed: RngSeed,
    max_iters: usize,
    restarts: usize,
) -> Result<KMeansResult> {
    let mut best = kmeans(x, k, seed, max_iters)?;
    for r in 1..restarts {
        let run = kmeans(x, k, seed.derive(r as u64), max_iters)?;
        if run.final_distortion() < best.final_distortion() {
            best = run;
        }
    }
    Ok(best)
}

/// Unbiased sample covariance of the rows of `x`.
pub fn sample_covariance(x: &Matrix) -> Matrix {
    let n = x.nrows();
    let mean = x.row_mean();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    centered.transpose() * &centered / (n.saturating_sub(1).max(1) as f64)
}

/// Relative Frobenius error `‖a − b‖ / ‖b‖`.
pub fn rel_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}
