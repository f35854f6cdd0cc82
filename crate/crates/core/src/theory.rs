//! Class-conditional Gaussian model of two paired modalities.
//!
//! Each class carries `X ~ N(μ_x, S_x)`, `Y ~ N(μ_y, S_y)` and a diagonal
//! correlation `R`. Concatenating the two gives the fused Gaussian with
//! cross-covariance `S_xy = S_x^{1/2} R S_y^{1/2}`, whose determinant
//! factorises as `|I − R²|·|S_x|·|S_y|`. Larger correlation means a smaller
//! fused volume even when the marginals are unchanged.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::acc_gcd;
use crate::numerics::{
    cholesky, kmeans, logdet_spd, sample_covariance, sample_mvn, sqrt_spd, Matrix, RngSeed,
    SpdMatrix, Vector, KMEANS_DEFAULT_ITERS,
};

/// Largest accepted correlation coefficient.
pub const R_MAX: f64 = 0.999;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianClassModel {
    pub class_id: usize,
    pub mu_x: Vec<f64>,
    pub cov_x: SpdMatrix,
    pub mu_y: Vec<f64>,
    pub cov_y: SpdMatrix,
    /// Diagonal of the correlation matrix.
    pub r: Vec<f64>,
}

impl GaussianClassModel {
    pub fn new(
        class_id: usize,
        mu_x: Vec<f64>,
        cov_x: SpdMatrix,
        mu_y: Vec<f64>,
        cov_y: SpdMatrix,
        r: Vec<f64>,
    ) -> Result<Self> {
        let m = GaussianClassModel {
            class_id,
            mu_x,
            cov_x,
            mu_y,
            cov_y,
            r,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu_x.len() != self.cov_x.dim() || self.mu_y.len() != self.cov_y.dim() {
            return Err(Error::DimensionMismatch(
                "class mean and covariance sizes differ".into(),
            ));
        }
        if self.cov_x.dim() != self.cov_y.dim() {
            return Err(Error::DimensionMismatch(format!(
                "paired coordinates need d_x = d_y, got {} and {}",
                self.cov_x.dim(),
                self.cov_y.dim()
            )));
        }
        if self.r.len() != self.cov_x.dim() {
            return Err(Error::DimensionMismatch(format!(
                "correlation vector has {} entries for dimension {}",
                self.r.len(),
                self.cov_x.dim()
            )));
        }
        if let Some(bad) = self.r.iter().find(|v| !(0.0..=R_MAX).contains(*v)) {
            return Err(Error::InvalidSpec(format!(
                "correlation {bad} outside [0, {R_MAX}]"
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.cov_x.dim()
    }

    /// Same covariances and means, every correlation set to `rho`.
    pub fn with_uniform_r(&self, rho: f64) -> Result<Self> {
        let mut m = self.clone();
        m.r = vec![rho; self.dim()];
        m.validate()?;
        Ok(m)
    }

    /// Identity marginals at the origin with all correlations `rho`.
    pub fn isotropic(dim: usize, rho: f64) -> Result<Self> {
        Self::new(
            0,
            vec![0.0; dim],
            SpdMatrix::identity(dim),
            vec![0.0; dim],
            SpdMatrix::identity(dim),
            vec![rho; dim],
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedGaussian {
    pub mu_f: Vec<f64>,
    pub cov_f: SpdMatrix,
}

fn cross_covariance(model: &GaussianClassModel) -> Result<Matrix> {
    let sx = sqrt_spd(&model.cov_x)?;
    let sy = sqrt_spd(&model.cov_y)?;
    let r = Matrix::from_diagonal(&Vector::from_column_slice(&model.r));
    Ok(sx.as_matrix() * r * sy.as_matrix())
}

pub fn build_fused(model: &GaussianClassModel) -> Result<FusedGaussian> {
    model.validate()?;
    let d = model.dim();
    let sxy = cross_covariance(model)?;
    let mut cov = Matrix::zeros(2 * d, 2 * d);
    cov.view_mut((0, 0), (d, d)).copy_from(model.cov_x.as_matrix());
    cov.view_mut((d, d), (d, d)).copy_from(model.cov_y.as_matrix());
    cov.view_mut((0, d), (d, d)).copy_from(&sxy);
    cov.view_mut((d, 0), (d, d)).copy_from(&sxy.transpose());
    let mu_f = model.mu_x.iter().chain(&model.mu_y).copied().collect();
    Ok(FusedGaussian {
        mu_f,
        cov_f: SpdMatrix::new(cov)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassCompactness {
    pub class_id: usize,
    pub logdet_x: f64,
    pub logdet_y: f64,
    pub logdet_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompactnessReport {
    pub l_x: f64,
    pub l_y: f64,
    pub l_f: f64,
    pub per_class: Vec<ClassCompactness>,
}

/// Sums of per-class covariance determinants for each modality and the fusion.
pub fn compactness(models: &[GaussianClassModel]) -> Result<CompactnessReport> {
    let dim = models.first().map(|m| m.dim());
    let mut per_class = Vec::with_capacity(models.len());
    for m in models {
        if Some(m.dim()) != dim {
            return Err(Error::DimensionMismatch(
                "class models do not share dimensions".into(),
            ));
        }
        let fused = build_fused(m)?;
        per_class.push(ClassCompactness {
            class_id: m.class_id,
            logdet_x: logdet_spd(&m.cov_x)?,
            logdet_y: logdet_spd(&m.cov_y)?,
            logdet_f: logdet_spd(&fused.cov_f)?,
        });
    }
    Ok(CompactnessReport {
        l_x: per_class.iter().map(|c| c.logdet_x.exp()).sum(),
        l_y: per_class.iter().map(|c| c.logdet_y.exp()).sum(),
        l_f: per_class.iter().map(|c| c.logdet_f.exp()).sum(),
        per_class,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IdentityCheck {
    /// `|S_F|` from a factorisation of the assembled fused matrix.
    pub lhs: f64,
    /// `|I − R²|·|S_x|·|S_y|`.
    pub rhs: f64,
    /// `|S_x|·|S_y − S_xyᵀ S_x⁻¹ S_xy|`.
    pub schur: f64,
    pub rel_err: f64,
    /// Worst relative disagreement of the Schur form with either side.
    pub schur_rel_err: f64,
}

fn rel_from_logs(a: f64, b: f64) -> f64 {
    (a - b).exp_m1().abs()
}

pub fn alignment_identity_check(model: &GaussianClassModel) -> Result<IdentityCheck> {
    let fused = build_fused(model)?;
    let log_lhs = logdet_spd(&fused.cov_f)?;

    let log_sx = logdet_spd(&model.cov_x)?;
    let log_sy = logdet_spd(&model.cov_y)?;
    let log_coupling: f64 = model.r.iter().map(|r| (1.0 - r * r).ln()).sum();
    let log_rhs = log_coupling + log_sx + log_sy;

    let sxy = cross_covariance(model)?;
    let l = cholesky(model.cov_x.as_matrix())?;
    let lu = l.solve_lower_triangular(&sxy).ok_or(Error::NotSpd {
        pivot: 0,
        value: 0.0,
    })?;
    // S_xyᵀ S_x⁻¹ S_xy = (L⁻¹ S_xy)ᵀ (L⁻¹ S_xy)
    let schur_block = model.cov_y.as_matrix() - lu.transpose() * &lu;
    let log_schur = log_sx + logdet_spd(&SpdMatrix::from_symmetrized(schur_block)?)?;

    let tiny = f64::MIN_POSITIVE;
    let lhs = log_lhs.exp();
    let rel_err = if lhs > tiny {
        rel_from_logs(log_rhs, log_lhs)
    } else {
        (lhs - log_rhs.exp()).abs() / tiny
    };
    Ok(IdentityCheck {
        lhs,
        rhs: log_rhs.exp(),
        schur: log_schur.exp(),
        rel_err,
        schur_rel_err: rel_from_logs(log_schur, log_lhs).max(rel_from_logs(log_schur, log_rhs)),
    })
}

/// Random class model for identity checks: random SPD marginals and
/// correlations uniform in `[0, r_max]`.
pub fn random_model(dim: usize, r_max: f64, seed: RngSeed) -> Result<GaussianClassModel> {
    use rand::Rng;
    use rand_distr::StandardNormal;

    let cov_x = crate::numerics::random_spd(dim, 50.0, seed.derive(1))?;
    let cov_y = crate::numerics::random_spd(dim, 50.0, seed.derive(2))?;
    let mut rng = seed.derive(3).rng();
    let r = (0..dim).map(|_| rng.random::<f64>() * r_max).collect();
    let mu_x = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let mu_y = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    GaussianClassModel::new(0, mu_x, cov_x, mu_y, cov_y, r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub r: f64,
    pub l_f_analytic: f64,
    pub l_f_empirical: f64,
    pub kmeans_acc: f64,
}

/// Random unit vector scaled to `radius`.
pub(crate) fn sphere_point(dim: usize, radius: f64, rng: &mut impl rand::Rng) -> Vec<f64> {
    use rand_distr::StandardNormal;
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|a| a * radius / norm).collect();
        }
    }
}

/// Correlation sweep over `r_grid`.
///
/// Every grid point reuses the template covariances, the same class means
/// (offsets of `mean_separation·√d` from the template means in random
/// directions) and the same sampling seed, so only the coupling changes.
pub fn correlation_sweep(
    base: &GaussianClassModel,
    k_classes: usize,
    mean_separation: f64,
    r_grid: &[f64],
    n_per_class: usize,
    seed: RngSeed,
) -> Result<Vec<SweepRow>> {
    base.validate()?;
    if k_classes == 0 || n_per_class < 2 {
        return Err(Error::DegenerateInput(
            "sweep needs at least one class and two samples per class".into(),
        ));
    }
    if let Some(bad) = r_grid.iter().find(|v| !(0.0..=R_MAX).contains(*v)) {
        return Err(Error::InvalidSpec(format!(
            "sweep correlation {bad} outside [0, {R_MAX}]"
        )));
    }
    let d = base.dim();
    let radius = mean_separation * (d as f64).sqrt();
    let mut rng = seed.derive(0).rng();
    let class_means: Vec<(Vec<f64>, Vec<f64>)> = (0..k_classes)
        .map(|_| {
            let ox = sphere_point(d, radius, &mut rng);
            let oy = sphere_point(d, radius, &mut rng);
            (
                base.mu_x.iter().zip(ox).map(|(a, b)| a + b).collect(),
                base.mu_y.iter().zip(oy).map(|(a, b)| a + b).collect(),
            )
        })
        .collect();

    r_grid
        .par_iter()
        .map(|&rho| {
            let models = class_means
                .iter()
                .enumerate()
                .map(|(k, (mx, my))| {
                    GaussianClassModel::new(
                        k,
                        mx.clone(),
                        base.cov_x.clone(),
                        my.clone(),
                        base.cov_y.clone(),
                        vec![rho; d],
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let analytic = compactness(&models)?.l_f;

            let mut all = DMatrix::<f64>::zeros(k_classes * n_per_class, 2 * d);
            let mut labels = Vec::with_capacity(k_classes * n_per_class);
            let mut empirical = 0.0;
            for (k, m) in models.iter().enumerate() {
                let fused = build_fused(m)?;
                let draws = sample_mvn(&fused.mu_f, &fused.cov_f, n_per_class, seed.derive(100 + k as u64))?;
                let cov = sample_covariance(&draws);
                empirical += SpdMatrix::from_symmetrized(cov)
                    .and_then(|c| logdet_spd(&c))
                    .map(f64::exp)
                    .unwrap_or(0.0);
                all.view_mut((k * n_per_class, 0), (n_per_class, 2 * d))
                    .copy_from(&draws);
                labels.extend(std::iter::repeat_n(k, n_per_class));
            }
            let km = kmeans(&all, k_classes, seed.derive(1), KMEANS_DEFAULT_ITERS)?;
            let acc = acc_gcd(&km.assignments, &labels, &[])?.acc_all;
            Ok(SweepRow {
                r: rho,
                l_f_analytic: analytic,
                l_f_empirical: empirical,
                kmeans_acc: acc,
            })
        })
        .collect()
}
