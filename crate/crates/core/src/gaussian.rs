//! Dense Gaussian primitives: Mahalanobis distance between components,
//! confidence-ellipsoid volume, moment-matched merging, log-density and
//! covariance regularization.
//!
//! Everything here is a pure function of its inputs.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::ln_gamma;

use crate::error::{OcfError, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Condition-number estimate above which a covariance is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Relative jitter used by [`default_regularization`].
pub const DEFAULT_REG_RELATIVE: f64 = 1e-6;

/// Absolute floor on the regularization added to a covariance diagonal.
pub const REG_FLOOR: f64 = 1e-9;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One mixture component.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vector,
    pub cov: Matrix,
    /// Number of samples absorbed into this component.
    pub count: u64,
}

impl GaussianComponent {
    pub fn new(weight: f64, mean: Vector, cov: Matrix, count: u64) -> Self {
        Self {
            weight,
            mean,
            cov,
            count,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Fits a component to `points` with empirical (population) moments,
    /// regularized with the scale-relative default.
    pub fn fit<'a, I>(points: I, weight: f64) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Vector>,
    {
        let (mean, cov, n) = sample_moments(points)?;
        let lambda = default_regularization(&cov, DEFAULT_REG_RELATIVE);
        Ok(Self::new(
            weight,
            mean,
            regularize_covariance(&cov, lambda),
            n as u64,
        ))
    }
}

pub(crate) fn check_dims(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(OcfError::DimensionMismatch { expected, found });
    }
    Ok(())
}

fn cholesky(cov: &Matrix) -> Result<Cholesky<f64, Dyn>> {
    if !cov.is_square() {
        return Err(OcfError::NotPositiveDefinite(format!(
            "non-square {}x{} matrix",
            cov.nrows(),
            cov.ncols()
        )));
    }
    Cholesky::new(cov.clone())
        .ok_or_else(|| OcfError::NotPositiveDefinite("cholesky factorization failed".into()))
}

/// Cheap condition estimate from the Cholesky diagonal, `(max l_ii / min l_ii)^2`.
fn cholesky_condition(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for i in 0..l.nrows() {
        let v = l[(i, i)].abs();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        (hi / lo).powi(2)
    }
}

/// Mahalanobis distance between two component means under the average of
/// their covariances, `sqrt(dμᵀ Σ̄⁻¹ dμ)` with `Σ̄ = (Σ1 + Σ2) / 2`.
///
/// Returns [`OcfError::Degenerate`] when `Σ̄` is too ill-conditioned; callers
/// are expected to regularize and retry.
pub fn mahalanobis(mu1: &Vector, cov1: &Matrix, mu2: &Vector, cov2: &Matrix) -> Result<f64> {
    let d = mu1.len();
    check_dims(d, mu2.len())?;
    check_dims(d, cov1.nrows())?;
    check_dims(d, cov2.nrows())?;
    let avg = (cov1 + cov2) * 0.5;
    let chol = match cholesky(&avg) {
        Ok(c) => c,
        Err(_) => {
            return Err(OcfError::Degenerate {
                condition: f64::INFINITY,
            })
        }
    };
    let condition = cholesky_condition(&chol);
    if condition > MAX_CONDITION {
        return Err(OcfError::Degenerate { condition });
    }
    let diff = mu1 - mu2;
    let y = chol.l_dirty().solve_lower_triangular(&diff).ok_or(OcfError::Degenerate {
        condition: f64::INFINITY,
    })?;
    Ok(y.norm_squared().sqrt())
}

/// 95% quantile of the chi-squared distribution with `d` degrees of freedom.
pub fn chi2_quantile_95(d: usize) -> f64 {
    ChiSquared::new(d as f64)
        .expect("degrees of freedom are positive")
        .inverse_cdf(0.95)
}

/// `Σ ln sqrt(λ_i)` over the eigenvalues of `cov`, i.e. `ln Π sqrt(λ_i)`.
pub fn log_sqrt_eigen_product(cov: &Matrix) -> Result<f64> {
    if !cov.is_square() || cov.nrows() == 0 {
        return Err(OcfError::NotPositiveDefinite("empty or non-square matrix".into()));
    }
    let eigen = SymmetricEigen::new(cov.clone());
    let mut acc = 0.0;
    for &lambda in eigen.eigenvalues.iter() {
        if !(lambda > 0.0) {
            return Err(OcfError::NotPositiveDefinite(format!(
                "eigenvalue {lambda:e} is not positive"
            )));
        }
        acc += 0.5 * lambda.ln();
    }
    Ok(acc)
}

/// Log of the constant factor `π^{d/2} / Γ(d/2) · χ²_{0.95}(d)^{d/2}` in the
/// hyperellipsoid volume.
pub fn log_volume_prefactor(d: usize) -> f64 {
    let half = d as f64 / 2.0;
    half * std::f64::consts::PI.ln() - ln_gamma(half) + half * chi2_quantile_95(d).ln()
}

/// Log-volume of the 95% confidence hyperellipsoid of a Gaussian with
/// covariance `cov`.
pub fn log_ellipsoid_volume(cov: &Matrix) -> Result<f64> {
    Ok(log_volume_prefactor(cov.nrows()) + log_sqrt_eigen_product(cov)?)
}

pub fn ellipsoid_volume(cov: &Matrix) -> Result<f64> {
    log_ellipsoid_volume(cov).map(f64::exp)
}

/// `ln(V_merged / (V_1 + V_2))` given the three log-volumes, evaluated with
/// log-sum-exp so it stays finite for large `d`.
pub fn log_volume_ratio(log_v_merged: f64, log_v1: f64, log_v2: f64) -> f64 {
    let hi = log_v1.max(log_v2);
    let lo = log_v1.min(log_v2);
    log_v_merged - (hi + (lo - hi).exp().ln_1p())
}

/// Moment-matched merge of two components: weights and counts add, mean is the
/// weight-averaged mean and covariance includes the between-means spread.
pub fn merged_moments(c1: &GaussianComponent, c2: &GaussianComponent) -> Result<GaussianComponent> {
    let d = c1.dim();
    check_dims(d, c2.dim())?;
    let w = c1.weight + c2.weight;
    if !(c1.weight > 0.0 && c2.weight > 0.0) {
        return Err(OcfError::InvalidParameter(
            "merged components need positive weights".into(),
        ));
    }
    let (a, b) = (c1.weight / w, c2.weight / w);
    let mean = &c1.mean * a + &c2.mean * b;
    let d1 = &c1.mean - &mean;
    let d2 = &c2.mean - &mean;
    let mut cov = (&c1.cov + &d1 * d1.transpose()) * a + (&c2.cov + &d2 * d2.transpose()) * b;
    symmetrize(&mut cov);
    Ok(GaussianComponent::new(w, mean, cov, c1.count + c2.count))
}

/// Multivariate normal log-density.
pub fn gaussian_logpdf(x: &Vector, mu: &Vector, cov: &Matrix) -> Result<f64> {
    let density = GaussianDensity::new(mu, cov)?;
    check_dims(density.dim(), x.len())?;
    Ok(density.logpdf(x.as_slice()))
}

/// Pre-factorized Gaussian for repeated density evaluation.
#[derive(Clone, Debug)]
pub struct GaussianDensity {
    mean: Vec<f64>,
    /// Lower Cholesky factor, row-major.
    chol: Vec<f64>,
    log_norm: f64,
}

impl GaussianDensity {
    pub fn new(mu: &Vector, cov: &Matrix) -> Result<Self> {
        let d = mu.len();
        check_dims(d, cov.nrows())?;
        let chol = cholesky(cov)?;
        let l = chol.l();
        let mut flat = vec![0.0; d * d];
        let mut log_det_half = 0.0;
        for i in 0..d {
            for j in 0..=i {
                flat[i * d + j] = l[(i, j)];
            }
            log_det_half += l[(i, i)].ln();
        }
        Ok(Self {
            mean: mu.as_slice().to_vec(),
            chol: flat,
            log_norm: -0.5 * d as f64 * LN_2PI - log_det_half,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Squared Mahalanobis distance of `x` to the mean.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let d = self.mean.len();
        let mut y = [0.0f64; 64];
        let mut heap;
        let y: &mut [f64] = if d <= 64 {
            &mut y[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        let mut acc = 0.0;
        for i in 0..d {
            let row = &self.chol[i * d..i * d + i];
            let mut s = x[i] - self.mean[i];
            for (l, yj) in row.iter().zip(y.iter()) {
                s -= l * yj;
            }
            let v = s / self.chol[i * d + i];
            y[i] = v;
            acc += v * v;
        }
        acc
    }

    pub fn logpdf(&self, x: &[f64]) -> f64 {
        self.log_norm - 0.5 * self.quad_form(x)
    }
}

/// `cov + λ I`.
pub fn regularize_covariance(cov: &Matrix, lambda_reg: f64) -> Matrix {
    let mut out = cov.clone();
    for i in 0..out.nrows().min(out.ncols()) {
        out[(i, i)] += lambda_reg;
    }
    out
}

/// Scale-relative jitter `relative · trace(Σ)/d`, floored at [`REG_FLOOR`].
pub fn default_regularization(cov: &Matrix, relative: f64) -> f64 {
    let d = cov.nrows().max(1) as f64;
    let scaled = relative * cov.trace() / d;
    if scaled.is_finite() {
        scaled.max(REG_FLOOR)
    } else {
        REG_FLOOR
    }
}

pub(crate) fn symmetrize(m: &mut Matrix) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Population mean and covariance (divisor `n`) of a point set.
pub fn sample_moments<'a, I>(points: I) -> Result<(Vector, Matrix, usize)>
where
    I: IntoIterator<Item = &'a Vector>,
{
    let pts: Vec<&Vector> = points.into_iter().collect();
    let first = pts
        .first()
        .ok_or_else(|| OcfError::InvalidParameter("moments of an empty point set".into()))?;
    let d = first.len();
    let n = pts.len();
    let mut mean = Vector::zeros(d);
    for p in &pts {
        check_dims(d, p.len())?;
        mean += *p;
    }
    mean /= n as f64;
    let mut cov = Matrix::zeros(d, d);
    for p in &pts {
        let diff = *p - &mean;
        cov.syger(1.0, &diff, &diff, 1.0);
    }
    cov /= n as f64;
    symmetrize(&mut cov);
    Ok((mean, cov, n))
}

/// Weighted population moments with weights `w_i ≥ 0` (normalized internally).
pub(crate) fn weighted_moments(points: &[Vector], weights: &[f64]) -> Option<(Vector, Matrix, f64)> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let d = points[0].len();
    let mut mean = Vector::zeros(d);
    for (p, &w) in points.iter().zip(weights) {
        if w > 0.0 {
            mean.axpy(w, p, 1.0);
        }
    }
    mean /= total;
    let mut cov = Matrix::zeros(d, d);
    for (p, &w) in points.iter().zip(weights) {
        if w > 0.0 {
            let diff = p - &mean;
            cov.syger(w, &diff, &diff, 1.0);
        }
    }
    cov /= total;
    symmetrize(&mut cov);
    Some((mean, cov, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    #[test]
    fn mahalanobis_identity_is_euclidean() {
        let i = Matrix::identity(2, 2);
        let d = mahalanobis(&v(&[0.0, 0.0]), &i, &v(&[3.0, 4.0]), &i).unwrap();
        assert!((d - 5.0).abs() < 1e-12);
    }

    #[test]
    fn mahalanobis_scaled_cov() {
        let c = Matrix::identity(2, 2) * 4.0;
        let d = mahalanobis(&v(&[0.0, 0.0]), &c, &v(&[3.0, 4.0]), &c).unwrap();
        assert!((d - 2.5).abs() < 1e-12);
    }

    #[test]
    fn mahalanobis_equal_means_is_zero() {
        let c1 = Matrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let c2 = Matrix::from_row_slice(2, 2, &[1.0, -0.2, -0.2, 3.0]);
        let m = v(&[1.5, -2.0]);
        assert_eq!(mahalanobis(&m, &c1, &m, &c2).unwrap(), 0.0);
    }

    #[test]
    fn mahalanobis_flags_singular_average() {
        let z = Matrix::zeros(2, 2);
        let err = mahalanobis(&v(&[0.0, 0.0]), &z, &v(&[1.0, 0.0]), &z).unwrap_err();
        assert!(matches!(err, OcfError::Degenerate { .. }));
        let thin = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-14]);
        let err = mahalanobis(&v(&[0.0, 0.0]), &thin, &v(&[1.0, 0.0]), &thin).unwrap_err();
        assert!(matches!(err, OcfError::Degenerate { .. }));
    }

    #[test]
    fn volume_scaling_ratio_is_exact() {
        let i = Matrix::identity(2, 2);
        let v1 = ellipsoid_volume(&i).unwrap();
        let v4 = ellipsoid_volume(&(i * 4.0)).unwrap();
        assert_relative_eq!(v4 / v1, 4.0, max_relative = 1e-12);
    }

    #[test]
    fn volume_rejects_indefinite() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            ellipsoid_volume(&m),
            Err(OcfError::NotPositiveDefinite(_))
        ));
    }

    #[test]
    fn merged_moments_one_dimensional() {
        let c1 = GaussianComponent::new(0.5, v(&[0.0]), Matrix::identity(1, 1), 3);
        let c2 = GaussianComponent::new(0.5, v(&[2.0]), Matrix::identity(1, 1), 4);
        let m = merged_moments(&c1, &c2).unwrap();
        assert_relative_eq!(m.mean[0], 1.0);
        assert_relative_eq!(m.cov[(0, 0)], 2.0);
        assert_eq!(m.count, 7);
        assert_relative_eq!(m.weight, 1.0);
    }

    #[test]
    fn merged_identical_components() {
        let cov = Matrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let c = GaussianComponent::new(0.25, v(&[1.0, -1.0]), cov.clone(), 10);
        let m = merged_moments(&c, &c).unwrap();
        assert_eq!(m.mean, c.mean);
        assert_relative_eq!(m.cov, cov, epsilon = 1e-15);
        assert_relative_eq!(m.weight, 0.5);
    }

    #[test]
    fn logpdf_closed_forms() {
        let l = gaussian_logpdf(&v(&[0.0]), &v(&[0.0]), &Matrix::identity(1, 1)).unwrap();
        assert!((l + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        let l = gaussian_logpdf(&v(&[1.0, 2.0]), &v(&[1.0, 2.0]), &Matrix::identity(2, 2)).unwrap();
        assert!((l + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        assert!((l + 1.837_877_066_409_345).abs() < 1e-12);
    }

    #[test]
    fn logpdf_rejects_non_spd() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(gaussian_logpdf(&v(&[0.0, 0.0]), &v(&[0.0, 0.0]), &m).is_err());
    }

    #[test]
    fn regularize_zero_matrix() {
        let r = regularize_covariance(&Matrix::zeros(3, 3), 1e-6);
        assert_eq!(r, Matrix::identity(3, 3) * 1e-6);
    }

    #[test]
    fn regularize_shifts_spectrum() {
        let cov = Matrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let before = SymmetricEigen::new(cov.clone()).eigenvalues;
        let after = SymmetricEigen::new(regularize_covariance(&cov, 0.25)).eigenvalues;
        let mut b: Vec<f64> = before.iter().copied().collect();
        let mut a: Vec<f64> = after.iter().copied().collect();
        b.sort_by(f64::total_cmp);
        a.sort_by(f64::total_cmp);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn regularized_rank_deficient_is_spd() {
        // 3 points in d=5 give a rank-2 covariance.
        let pts = vec![
            v(&[1.0, 2.0, 0.0, 0.5, -1.0]),
            v(&[0.0, 1.0, 1.0, 0.0, 2.0]),
            v(&[2.0, 0.0, 1.0, 1.0, 0.0]),
        ];
        let (_, cov, _) = sample_moments(&pts).unwrap();
        let reg = regularize_covariance(&cov, default_regularization(&cov, DEFAULT_REG_RELATIVE));
        let eig = SymmetricEigen::new(reg).eigenvalues;
        assert!(eig.iter().all(|&l| l > 0.0));
    }

    #[test]
    fn default_regularization_floor() {
        assert_eq!(default_regularization(&Matrix::zeros(4, 4), 1e-6), REG_FLOOR);
        let cov = Matrix::identity(4, 4) * 8.0;
        assert!((default_regularization(&cov, 1e-6) - 8e-6).abs() < 1e-18);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let err = mahalanobis(
            &v(&[0.0, 0.0]),
            &Matrix::identity(2, 2),
            &v(&[0.0, 0.0, 0.0]),
            &Matrix::identity(3, 3),
        )
        .unwrap_err();
        assert!(matches!(err, OcfError::DimensionMismatch { .. }));
    }
}
