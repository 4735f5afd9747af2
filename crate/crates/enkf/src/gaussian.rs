//! Dense Gaussian and empirical-moment kernel.
//!
//! Everything downstream (filters, inversion, transports) is built on the
//! four operations here: PSD square roots with eigenvalue clipping, joint
//! Gaussian conditioning, ensemble moments, and seeded sampling.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rng::SeededStream;
#[cfg(test)]
use crate::rng::normal_vector;

/// Relative tolerance for symmetry checks.
pub const SYMMETRY_RTOL: f64 = 1e-12;
/// Relative tolerance (against trace/d) below which eigenvalues are clipped.
pub const CLIP_RTOL: f64 = 1e-12;
/// Covariances may dip this far (relative to trace/d) below zero and still
/// count as PSD.
pub const PSD_RTOL: f64 = 1e-10;
/// Condition number beyond which conditioning refuses to invert.
pub const MAX_CONDITION: f64 = 1e14;

/// Which normalization empirical covariances use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovScaling {
    /// Divide deviation outer products by `J`.
    OverJ,
    /// Divide by `J - 1` (the convention used by default).
    #[default]
    OverJMinus1,
}

impl CovScaling {
    pub fn denominator(&self, members: usize) -> f64 {
        match self {
            CovScaling::OverJ => members as f64,
            CovScaling::OverJMinus1 => (members - 1) as f64,
        }
    }
}

/// Mean vector plus symmetric PSD covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Gaussian {
    /// Validates symmetry and positive semi-definiteness before construction.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::DimensionMismatch { expected: mean.len(), got: cov.nrows() });
        }
        check_symmetric(&cov, SYMMETRY_RTOL)?;
        let sym = symmetrize(&cov);
        let eigs = nalgebra::SymmetricEigen::new(sym.clone()).eigenvalues;
        let scale = (sym.trace() / sym.nrows().max(1) as f64).abs().max(f64::MIN_POSITIVE);
        let min_eig = eigs.min();
        if min_eig < -PSD_RTOL * scale {
            return Err(Error::NotPsd { min_eig, tol: -PSD_RTOL * scale });
        }
        Ok(Self { mean, cov: sym })
    }

    /// Symmetrizes without the PSD eigenvalue check; for hot loops that keep
    /// covariances PSD by construction.
    pub fn from_parts(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { mean, cov: symmetrize(&cov) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn isotropic(dim: usize, mean: f64, var: f64) -> Self {
        Self {
            mean: DVector::from_element(dim, mean),
            cov: DMatrix::identity(dim, dim) * var,
        }
    }

    pub fn sqrt_cov(&self) -> Result<DMatrix<f64>> {
        Ok(psd_sqrt(&self.cov)?.matrix)
    }
}

/// Block mean/covariance over a (state, data) pair; the input to conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct JointGaussian {
    pub mean_v: DVector<f64>,
    pub mean_y: DVector<f64>,
    pub c_vv: DMatrix<f64>,
    pub c_vy: DMatrix<f64>,
    pub c_yy: DMatrix<f64>,
}

impl JointGaussian {
    pub fn new(
        mean_v: DVector<f64>,
        mean_y: DVector<f64>,
        c_vv: DMatrix<f64>,
        c_vy: DMatrix<f64>,
        c_yy: DMatrix<f64>,
    ) -> Result<Self> {
        let (dv, dy) = (mean_v.len(), mean_y.len());
        if c_vv.shape() != (dv, dv) || c_vy.shape() != (dv, dy) || c_yy.shape() != (dy, dy) {
            return Err(Error::DimensionMismatch { expected: dv + dy, got: c_vv.nrows() + c_yy.nrows() });
        }
        let j = Self {
            mean_v,
            mean_y,
            c_vv: symmetrize(&c_vv),
            c_vy,
            c_yy: symmetrize(&c_yy),
        };
        // The assembled block matrix must itself be a covariance.
        let block = j.block_cov();
        check_symmetric(&block, SYMMETRY_RTOL)?;
        let eigs = nalgebra::SymmetricEigen::new(block.clone()).eigenvalues;
        let scale = (block.trace() / block.nrows() as f64).abs().max(f64::MIN_POSITIVE);
        let min_eig = eigs.min();
        if min_eig < -PSD_RTOL * scale {
            return Err(Error::NotPsd { min_eig, tol: -PSD_RTOL * scale });
        }
        Ok(j)
    }

    pub fn dim_v(&self) -> usize {
        self.mean_v.len()
    }

    pub fn dim_y(&self) -> usize {
        self.mean_y.len()
    }

    pub fn block_cov(&self) -> DMatrix<f64> {
        let (dv, dy) = (self.dim_v(), self.dim_y());
        let mut block = DMatrix::zeros(dv + dy, dv + dy);
        block.view_mut((0, 0), (dv, dv)).copy_from(&self.c_vv);
        block.view_mut((0, dv), (dv, dy)).copy_from(&self.c_vy);
        block.view_mut((dv, 0), (dy, dv)).copy_from(&self.c_vy.transpose());
        block.view_mut((dv, dv), (dy, dy)).copy_from(&self.c_yy);
        block
    }

    pub fn block_mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim_v() + self.dim_y());
        m.rows_mut(0, self.dim_v()).copy_from(&self.mean_v);
        m.rows_mut(self.dim_v(), self.dim_y()).copy_from(&self.mean_y);
        m
    }

    /// Joint empirical moments of paired ensembles (columns are paired draws).
    pub fn from_ensembles(a: &Ensemble, b: &Ensemble, scaling: CovScaling) -> Result<Self> {
        let ga = empirical_moments(a, scaling)?;
        let gb = empirical_moments(b, scaling)?;
        let c_vy = cross_covariance(a, b, scaling)?;
        Ok(Self {
            mean_v: ga.mean,
            mean_y: gb.mean,
            c_vv: ga.cov,
            c_vy,
            c_yy: gb.cov,
        })
    }

    /// Kalman gain `C_vy * C_yy^{-1}`.
    pub fn kalman_gain(&self) -> Result<DMatrix<f64>> {
        let chol = cholesky_with_jitter(&self.c_yy)?;
        Ok(chol.solve(&self.c_vy.transpose()).transpose())
    }
}

/// `d x J` matrix of particles.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: DMatrix<f64>,
}

impl Ensemble {
    pub fn new(members: DMatrix<f64>) -> Result<Self> {
        if members.ncols() == 0 {
            return Err(Error::TooFewMembers { got: 0, need: 1 });
        }
        if members.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { what: "ensemble members" });
        }
        Ok(Self { members })
    }

    pub fn from_columns(cols: &[DVector<f64>]) -> Result<Self> {
        Self::new(DMatrix::from_columns(cols))
    }

    pub fn dim(&self) -> usize {
        self.members.nrows()
    }

    pub fn member_count(&self) -> usize {
        self.members.ncols()
    }

    pub fn member(&self, j: usize) -> DVector<f64> {
        self.members.column(j).into_owned()
    }

    pub fn mean(&self) -> DVector<f64> {
        let d = self.dim();
        let mut m = vec![0.0; d];
        for col in self.members.as_slice().chunks_exact(d) {
            for (acc, x) in m.iter_mut().zip(col) {
                *acc += x;
            }
        }
        let scale = 1.0 / self.member_count() as f64;
        DVector::from_iterator(d, m.into_iter().map(|x| x * scale))
    }

    /// Deviation matrix `X - mean 1^T`, unscaled.
    pub fn deviations(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mean = self.mean();
        let mut out = self.members.clone();
        for col in out.as_mut_slice().chunks_exact_mut(d) {
            for (x, m) in col.iter_mut().zip(mean.iter()) {
                *x -= m;
            }
        }
        out
    }

    /// Per-component standard deviations under `scaling`.
    pub fn component_std(&self, scaling: CovScaling) -> DVector<f64> {
        let devs = self.deviations();
        let denom = scaling.denominator(self.member_count());
        DVector::from_iterator(
            self.dim(),
            devs.row_iter().map(|r| (r.iter().map(|x| x * x).sum::<f64>() / denom).sqrt()),
        )
    }
}

/// `(M + M^T) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// `a * b^T` for paired column blocks, accumulated column by column.
///
/// Faster than the general matrix product for the small-by-wide shapes the
/// ensemble updates use, and with a fixed summation order.
pub(crate) fn paired_outer(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (d1, d2, n) = (a.nrows(), b.nrows(), a.ncols());
    debug_assert_eq!(n, b.ncols());
    let mut c = DMatrix::<f64>::zeros(d1, d2);
    let (asl, bsl) = (a.as_slice(), b.as_slice());
    let csl = c.as_mut_slice();
    for j in 0..n {
        let acol = &asl[j * d1..(j + 1) * d1];
        let bcol = &bsl[j * d2..(j + 1) * d2];
        for (bi, &bv) in bcol.iter().enumerate() {
            let dst = &mut csl[bi * d1..(bi + 1) * d1];
            for (ai, &av) in acol.iter().enumerate() {
                dst[ai] += av * bv;
            }
        }
    }
    c
}

/// `m * x` for a small matrix applied to a wide block, column by column.
pub(crate) fn apply_small(m: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let (rows, inner, n) = (m.nrows(), m.ncols(), x.ncols());
    debug_assert_eq!(inner, x.nrows());
    let mut out = DMatrix::<f64>::zeros(rows, n);
    let (msl, xsl) = (m.as_slice(), x.as_slice());
    let osl = out.as_mut_slice();
    for j in 0..n {
        let xcol = &xsl[j * inner..(j + 1) * inner];
        let ocol = &mut osl[j * rows..(j + 1) * rows];
        for (k, &xv) in xcol.iter().enumerate() {
            let mcol = &msl[k * rows..(k + 1) * rows];
            for (i, &mv) in mcol.iter().enumerate() {
                ocol[i] += mv * xv;
            }
        }
    }
    out
}

pub(crate) fn check_symmetric(m: &DMatrix<f64>, rtol: f64) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch { expected: m.nrows(), got: m.ncols() });
    }
    let scale = m.norm().max(1.0);
    let asym = (m - m.transpose()).norm() / scale;
    if asym > rtol {
        return Err(Error::NonSymmetric { asymmetry: asym, tol: rtol });
    }
    Ok(())
}

/// Symmetric PSD square root with clipped-eigenvalue reporting.
#[derive(Debug, Clone)]
pub struct PsdSqrt {
    pub matrix: DMatrix<f64>,
    /// Number of eigenvalues clipped to zero.
    pub clipped: usize,
}

/// Symmetric square root of a symmetric PSD matrix.
///
/// Eigenvalues below `CLIP_RTOL * trace / d` are zeroed, so rank-deficient
/// ensemble covariances are handled without error.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<PsdSqrt> {
    check_symmetric(m, SYMMETRY_RTOL.max(1e-9))?;
    let sym = symmetrize(m);
    let d = sym.nrows();
    let eig = nalgebra::SymmetricEigen::new(sym);
    let threshold = CLIP_RTOL * eig.eigenvalues.iter().sum::<f64>().max(0.0) / d.max(1) as f64;
    let mut clipped = 0;
    let roots = eig.eigenvalues.map(|l| {
        if l <= threshold {
            clipped += usize::from(l != 0.0);
            0.0
        } else {
            l.sqrt()
        }
    });
    let q = &eig.eigenvectors;
    let s = q * DMatrix::from_diagonal(&roots) * q.transpose();
    Ok(PsdSqrt { matrix: symmetrize(&s), clipped })
}

/// Clipped pseudo-inverse square root; returns the numerical rank alongside.
pub fn psd_inv_sqrt(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize)> {
    check_symmetric(m, SYMMETRY_RTOL.max(1e-9))?;
    let sym = symmetrize(m);
    let d = sym.nrows();
    let eig = nalgebra::SymmetricEigen::new(sym);
    let threshold = CLIP_RTOL * eig.eigenvalues.iter().sum::<f64>().max(0.0) / d.max(1) as f64;
    let mut rank = 0;
    let inv_roots = eig.eigenvalues.map(|l| {
        if l <= threshold {
            0.0
        } else {
            rank += 1;
            1.0 / l.sqrt()
        }
    });
    let q = &eig.eigenvectors;
    let s = q * DMatrix::from_diagonal(&inv_roots) * q.transpose();
    Ok((symmetrize(&s), rank))
}

pub(crate) fn cholesky_with_jitter(m: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(chol) = nalgebra::Cholesky::new(m.clone()) {
        return Ok(chol);
    }
    let jitter = CLIP_RTOL * m.trace().abs().max(f64::MIN_POSITIVE) / m.nrows().max(1) as f64;
    let jittered = m + DMatrix::identity(m.nrows(), m.ncols()) * jitter;
    nalgebra::Cholesky::new(jittered).ok_or(Error::SingularDataCovariance { cond: f64::INFINITY })
}

/// Options for [`condition_joint_opts`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ConditionOpts {
    /// When set, `c_yy` is inverted through a truncated pseudo-inverse with
    /// the given relative eigenvalue cutoff instead of Cholesky.
    pub pseudo_inverse: Option<f64>,
}

/// Conditions a joint Gaussian on an observed data value.
pub fn condition_joint(j: &JointGaussian, y_obs: &DVector<f64>) -> Result<Gaussian> {
    condition_joint_opts(j, y_obs, ConditionOpts::default())
}

pub fn condition_joint_opts(
    j: &JointGaussian,
    y_obs: &DVector<f64>,
    opts: ConditionOpts,
) -> Result<Gaussian> {
    if y_obs.len() != j.dim_y() {
        return Err(Error::DimensionMismatch { expected: j.dim_y(), got: y_obs.len() });
    }
    let innovation = y_obs - &j.mean_y;
    let (gain, cov_reduction) = match opts.pseudo_inverse {
        Some(cutoff) => {
            let eig = nalgebra::SymmetricEigen::new(symmetrize(&j.c_yy));
            let max_eig = eig.eigenvalues.amax();
            let inv = eig.eigenvalues.map(|l| if l > cutoff * max_eig { 1.0 / l } else { 0.0 });
            let pinv = &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose();
            let gain = &j.c_vy * pinv;
            let red = &gain * j.c_vy.transpose();
            (gain, red)
        }
        None => {
            let eigs = nalgebra::SymmetricEigen::new(symmetrize(&j.c_yy)).eigenvalues;
            let (max_eig, min_eig) = (eigs.max(), eigs.min());
            let cond = if min_eig <= 0.0 { f64::INFINITY } else { max_eig / min_eig };
            if cond > MAX_CONDITION {
                return Err(Error::SingularDataCovariance { cond });
            }
            let chol = cholesky_with_jitter(&j.c_yy)?;
            let gain = chol.solve(&j.c_vy.transpose()).transpose();
            let red = &gain * j.c_vy.transpose();
            (gain, red)
        }
    };
    let mean = &j.mean_v + &gain * innovation;
    let cov = symmetrize(&(&j.c_vv - cov_reduction));
    Gaussian::new(mean, cov)
}

/// Empirical mean and covariance of an ensemble.
pub fn empirical_moments(e: &Ensemble, scaling: CovScaling) -> Result<Gaussian> {
    if e.member_count() < 2 {
        return Err(Error::TooFewMembers { got: e.member_count(), need: 2 });
    }
    let devs = e.deviations();
    let cov = paired_outer(&devs, &devs) / scaling.denominator(e.member_count());
    Ok(Gaussian::from_parts(e.mean(), cov))
}

/// Scaled cross-covariance of two paired ensembles.
pub fn cross_covariance(a: &Ensemble, b: &Ensemble, scaling: CovScaling) -> Result<DMatrix<f64>> {
    if a.member_count() != b.member_count() {
        return Err(Error::MemberCountMismatch { a: a.member_count(), b: b.member_count() });
    }
    if a.member_count() < 2 {
        return Err(Error::TooFewMembers { got: a.member_count(), need: 2 });
    }
    let da = a.deviations();
    let db = b.deviations();
    Ok(paired_outer(&da, &db) / scaling.denominator(a.member_count()))
}

/// `n` independent draws `mean + cov^{1/2} xi`; draw `j` is the `j`-th
/// column of the stream keyed `(phase, step, 0)` and so does not depend on
/// `n`.
pub fn sample(g: &Gaussian, n: usize, stream: &SeededStream, phase: &str, step: u64) -> Result<Ensemble> {
    let root = g.sqrt_cov()?;
    let d = g.dim();
    let xi = crate::rng::normal_matrix(&mut stream.rng(phase, step, 0), d, n);
    let mut m = root * xi;
    for mut col in m.column_iter_mut() {
        col += &g.mean;
    }
    Ensemble::new(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random_spd(d: usize, rng: &mut rand_chacha::ChaCha12Rng) -> DMatrix<f64> {
        let a = crate::rng::normal_matrix(rng, d, d);
        symmetrize(&(&a * a.transpose())) + DMatrix::identity(d, d) * 0.1
    }

    #[test]
    fn psd_sqrt_identity_and_diagonal() {
        let s = psd_sqrt(&DMatrix::identity(3, 3)).unwrap();
        assert_relative_eq!(s.matrix, DMatrix::identity(3, 3), epsilon = 1e-14);
        assert_eq!(s.clipped, 0);

        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let s = psd_sqrt(&m).unwrap();
        let expect = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]));
        assert_relative_eq!(s.matrix, expect, epsilon = 1e-14);
    }

    #[test]
    fn psd_sqrt_random_spd_against_eigen_oracle() {
        let stream = SeededStream::new(11);
        let mut rng = stream.rng("spd", 0, 0);
        let m = random_spd(5, &mut rng);
        let s = psd_sqrt(&m).unwrap().matrix;
        let err = (&s * &s - &m).norm() / m.norm();
        assert!(err < 1e-10, "relative reconstruction error {err}");

        // Independent oracle: direct eigendecomposition reconstruction.
        let eig = nalgebra::SymmetricEigen::new(m.clone());
        let oracle = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt))
            * eig.eigenvectors.transpose();
        assert_relative_eq!(s, symmetrize(&oracle), epsilon = 1e-9);
    }

    #[test]
    fn psd_sqrt_rejects_asymmetric() {
        let mut m = DMatrix::identity(3, 3);
        m[(0, 1)] = 0.5;
        assert!(matches!(psd_sqrt(&m), Err(Error::NonSymmetric { .. })));
    }

    #[test]
    fn psd_sqrt_clips_rank_deficient() {
        // Rank-1 matrix: one eigenvalue positive, rest zero or tiny negative.
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let m = &v * v.transpose();
        let s = psd_sqrt(&m).unwrap();
        let err = (&s.matrix * &s.matrix - &m).norm() / m.norm();
        assert!(err < 1e-12);
    }

    #[test]
    fn psd_sqrt_idempotent_on_own_square() {
        let stream = SeededStream::new(3);
        let mut rng = stream.rng("spd", 0, 1);
        let m = random_spd(4, &mut rng);
        let s = psd_sqrt(&m).unwrap().matrix;
        let s2 = psd_sqrt(&(&s * &s)).unwrap().matrix;
        assert!((s2 - &s).norm() / s.norm() < 1e-9);
    }

    #[test]
    fn condition_zero_cross_covariance_is_identity() {
        let j = JointGaussian::new(
            DVector::from_vec(vec![1.0, -2.0]),
            DVector::from_vec(vec![0.5]),
            DMatrix::identity(2, 2) * 3.0,
            DMatrix::zeros(2, 1),
            DMatrix::identity(1, 1) * 2.0,
        )
        .unwrap();
        let g = condition_joint(&j, &DVector::from_vec(vec![7.0])).unwrap();
        assert_relative_eq!(g.mean, j.mean_v, epsilon = 1e-14);
        assert_relative_eq!(g.cov, j.c_vv, epsilon = 1e-14);
    }

    #[test]
    fn condition_scalar_hand_computed() {
        // m = 0, C = 1, C_vy = 1, C_yy = 2, o = 0, y = 2 -> mean 1, cov 0.5
        let j = JointGaussian::new(
            DVector::from_vec(vec![0.0]),
            DVector::from_vec(vec![0.0]),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 2.0),
        )
        .unwrap();
        let g = condition_joint(&j, &DVector::from_vec(vec![2.0])).unwrap();
        assert_relative_eq!(g.mean[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(g.cov[(0, 0)], 0.5, epsilon = 1e-14);
    }

    /// Dense-grid Bayes oracle: evaluate the joint density on a state grid at
    /// the observed data value, normalize, and take moments.
    fn grid_condition_oracle(
        j: &JointGaussian,
        y_obs: &DVector<f64>,
        half_width: f64,
        n: usize,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let dv = j.dim_v();
        assert!(dv <= 3);
        let block = j.block_cov();
        let prec = block.clone().try_inverse().unwrap();
        let marg_std: Vec<f64> = (0..dv).map(|i| j.c_vv[(i, i)].sqrt()).collect();
        let axes: Vec<Vec<f64>> = (0..dv)
            .map(|i| {
                (0..n)
                    .map(|k| {
                        j.mean_v[i] - half_width * marg_std[i]
                            + 2.0 * half_width * marg_std[i] * k as f64 / (n - 1) as f64
                    })
                    .collect()
            })
            .collect();
        let mut pts: Vec<DVector<f64>> = vec![];
        let mut wts: Vec<f64> = vec![];
        let total: usize = n.pow(dv as u32);
        for flat in 0..total {
            let mut idx = flat;
            let mut v = DVector::zeros(dv);
            for i in 0..dv {
                v[i] = axes[i][idx % n];
                idx /= n;
            }
            let mut z = DVector::zeros(dv + j.dim_y());
            z.rows_mut(0, dv).copy_from(&(&v - &j.mean_v));
            z.rows_mut(dv, j.dim_y()).copy_from(&(y_obs - &j.mean_y));
            let q = (z.transpose() * &prec * &z)[(0, 0)];
            pts.push(v);
            wts.push((-0.5 * q).exp());
        }
        let wsum: f64 = wts.iter().sum();
        let mut m = DVector::zeros(dv);
        for (p, w) in pts.iter().zip(&wts) {
            m += p * (*w / wsum);
        }
        let mut c = DMatrix::zeros(dv, dv);
        for (p, w) in pts.iter().zip(&wts) {
            let d = p - &m;
            c += &d * d.transpose() * (*w / wsum);
        }
        (m, c)
    }

    #[test]
    fn condition_matches_grid_bayes_oracle() {
        let stream = SeededStream::new(5);
        let mut rng = stream.rng("joint", 0, 0);
        // Random 3+2 joint built from a full random SPD block.
        let block = random_spd(5, &mut rng);
        let j = JointGaussian::new(
            normal_vector(&mut rng, 3),
            normal_vector(&mut rng, 2),
            block.view((0, 0), (3, 3)).into_owned(),
            block.view((0, 3), (3, 2)).into_owned(),
            block.view((3, 3), (2, 2)).into_owned(),
        )
        .unwrap();
        let y_obs = &j.mean_y + normal_vector(&mut rng, 2) * 0.3;
        let g = condition_joint(&j, &y_obs).unwrap();
        let (om, oc) = grid_condition_oracle(&j, &y_obs, 8.0, 121);
        assert!((g.mean - om).amax() < 1e-6);
        assert!((g.cov - oc).amax() < 1e-6);
    }

    #[test]
    fn condition_singular_data_covariance_errors() {
        let j = JointGaussian::new(
            DVector::zeros(1),
            DVector::zeros(2),
            DMatrix::identity(1, 1),
            DMatrix::zeros(1, 2),
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
        )
        .unwrap();
        let err = condition_joint(&j, &DVector::zeros(2));
        assert!(matches!(err, Err(Error::SingularDataCovariance { .. })));
        // Pseudo-inverse mode handles it.
        let g = condition_joint_opts(
            &j,
            &DVector::zeros(2),
            ConditionOpts { pseudo_inverse: Some(1e-12) },
        )
        .unwrap();
        assert!(g.cov[(0, 0)] <= 1.0 + 1e-12);
    }

    #[test]
    fn condition_covariance_never_increases() {
        let stream = SeededStream::new(9);
        for k in 0..10u64 {
            let mut rng = stream.rng("loewner", k, 0);
            let block = random_spd(6, &mut rng);
            let j = JointGaussian::new(
                normal_vector(&mut rng, 3),
                normal_vector(&mut rng, 3),
                block.view((0, 0), (3, 3)).into_owned(),
                block.view((0, 3), (3, 3)).into_owned(),
                block.view((3, 3), (3, 3)).into_owned(),
            )
            .unwrap();
            let g = condition_joint(&j, &j.mean_y).unwrap();
            let diff = symmetrize(&(&j.c_vv - &g.cov));
            let min_eig = nalgebra::SymmetricEigen::new(diff).eigenvalues.min();
            assert!(min_eig > -1e-10 * j.c_vv.trace() / 3.0, "Loewner order violated: {min_eig}");
        }
    }

    #[test]
    fn empirical_moments_two_point_and_degenerate() {
        let e = Ensemble::new(DMatrix::from_row_slice(1, 2, &[0.0, 2.0])).unwrap();
        let g = empirical_moments(&e, CovScaling::OverJMinus1).unwrap();
        assert_relative_eq!(g.mean[0], 1.0);
        assert_relative_eq!(g.cov[(0, 0)], 2.0);

        let e = Ensemble::new(DMatrix::from_element(2, 5, 3.0)).unwrap();
        let g = empirical_moments(&e, CovScaling::OverJ).unwrap();
        assert_eq!(g.cov, DMatrix::zeros(2, 2));
    }

    #[test]
    fn empirical_moments_too_few_members() {
        let e = Ensemble::new(DMatrix::from_element(2, 1, 0.0)).unwrap();
        assert!(matches!(
            empirical_moments(&e, CovScaling::OverJ),
            Err(Error::TooFewMembers { .. })
        ));
    }

    #[test]
    fn empirical_moments_monte_carlo() {
        let g = Gaussian::isotropic(2, 0.0, 1.0);
        let stream = SeededStream::new(2024);
        let e = sample(&g, 100_000, &stream, "mc", 0).unwrap();
        let m = empirical_moments(&e, CovScaling::OverJMinus1).unwrap();
        assert!((m.cov - DMatrix::identity(2, 2)).norm() < 0.02);
    }

    #[test]
    fn cross_covariance_self_and_constant() {
        let stream = SeededStream::new(6);
        let e = sample(&Gaussian::isotropic(3, 1.0, 2.0), 50, &stream, "cc", 0).unwrap();
        let c = cross_covariance(&e, &e, CovScaling::OverJMinus1).unwrap();
        let g = empirical_moments(&e, CovScaling::OverJMinus1).unwrap();
        assert_relative_eq!(c, g.cov, epsilon = 1e-12);

        let constant = Ensemble::new(DMatrix::from_element(2, 50, 4.0)).unwrap();
        let c = cross_covariance(&e, &constant, CovScaling::OverJ).unwrap();
        assert!(c.norm() < 1e-14);
    }

    #[test]
    fn cross_covariance_member_mismatch() {
        let a = Ensemble::new(DMatrix::zeros(2, 4)).unwrap();
        let b = Ensemble::new(DMatrix::zeros(2, 5)).unwrap();
        assert!(matches!(
            cross_covariance(&a, &b, CovScaling::OverJ),
            Err(Error::MemberCountMismatch { .. })
        ));
    }

    #[test]
    fn cross_covariance_linear_map_stein() {
        let stream = SeededStream::new(77);
        let mut rng = stream.rng("stein", 0, 0);
        let l = crate::rng::normal_matrix(&mut rng, 2, 3);
        let a = sample(&Gaussian::isotropic(3, 0.0, 1.0), 100_000, &stream, "stein-s", 0).unwrap();
        let b = Ensemble::new(&l * &a.members).unwrap();
        let c = cross_covariance(&a, &b, CovScaling::OverJMinus1).unwrap();
        // Exact algebraic identity against the empirical covariance...
        let emp = empirical_moments(&a, CovScaling::OverJMinus1).unwrap();
        assert_relative_eq!(c, &emp.cov * l.transpose(), epsilon = 1e-10);
        // ...and the Stein / linear-case value cov(a) L^T = L^T within MC error.
        assert!((c - l.transpose()).norm() < 0.03);
    }

    #[test]
    fn sample_degenerate_and_deterministic() {
        let g = Gaussian::new(DVector::from_vec(vec![1.0, 2.0]), DMatrix::zeros(2, 2)).unwrap();
        let stream = SeededStream::new(1);
        let e = sample(&g, 7, &stream, "s", 0).unwrap();
        for col in e.members.column_iter() {
            assert_relative_eq!(col.into_owned(), g.mean, epsilon = 0.0);
        }
        let g = Gaussian::isotropic(3, 0.0, 1.0);
        let a = sample(&g, 16, &stream, "s", 1).unwrap();
        let b = sample(&g, 16, &stream, "s", 1).unwrap();
        assert_eq!(a.members, b.members);
    }

    #[test]
    fn sample_clt_bounds() {
        let g = Gaussian::new(
            DVector::from_element(1, 3.0),
            DMatrix::from_element(1, 1, 4.0),
        )
        .unwrap();
        let stream = SeededStream::new(99);
        let e = sample(&g, 100_000, &stream, "clt", 0).unwrap();
        let m = empirical_moments(&e, CovScaling::OverJMinus1).unwrap();
        assert!((m.mean[0] - 3.0).abs() < 0.05);
        assert!((m.cov[(0, 0)] - 4.0).abs() < 0.15);
    }

    #[test]
    fn kalman_transport_matches_conditioning_moments() {
        // Sampling the joint, applying v + K(y_obs - y) member-wise, and
        // taking moments converges to condition_joint output.
        let base = SeededStream::new(31);
        let mut rng = base.rng("setup", 0, 0);
        let block = random_spd(4, &mut rng);
        let j = JointGaussian::new(
            normal_vector(&mut rng, 2),
            normal_vector(&mut rng, 2),
            block.view((0, 0), (2, 2)).into_owned(),
            block.view((0, 2), (2, 2)).into_owned(),
            block.view((2, 2), (2, 2)).into_owned(),
        )
        .unwrap();
        let y_obs = &j.mean_y + DVector::from_vec(vec![0.4, -0.2]);
        let target = condition_joint(&j, &y_obs).unwrap();
        let gain = j.kalman_gain().unwrap();
        let joint_g = Gaussian::new(j.block_mean(), j.block_cov()).unwrap();

        let jn = 20_000usize;
        let scale_m = target.cov.trace().sqrt();
        let scale_c = target.cov.norm();
        let mut pass = 0;
        for seed in 0..20u64 {
            let s = base.substream(&format!("rep{seed}"));
            let pairs = sample(&joint_g, jn, &s, "joint", 0).unwrap();
            let cols: Vec<DVector<f64>> = (0..jn)
                .map(|k| {
                    let z = pairs.member(k);
                    let v = z.rows(0, 2).into_owned();
                    let y = z.rows(2, 2).into_owned();
                    &v + &gain * (&y_obs - &y)
                })
                .collect();
            let pushed = Ensemble::from_columns(&cols).unwrap();
            let got = empirical_moments(&pushed, CovScaling::OverJMinus1).unwrap();
            let tol = 5.0 / (jn as f64).sqrt();
            if (got.mean - &target.mean).norm() <= tol * scale_m
                && (got.cov - &target.cov).norm() <= 2.0 * tol * scale_c
            {
                pass += 1;
            }
        }
        assert!(pass >= 18, "only {pass}/20 seeds within transport tolerance");
    }

    #[test]
    fn moments_sample_fixed_point() {
        let stream = SeededStream::new(8);
        let e = sample(&Gaussian::isotropic(2, 1.0, 3.0), 50_000, &stream, "fp0", 0).unwrap();
        let g1 = empirical_moments(&e, CovScaling::OverJ).unwrap();
        let e2 = sample(&Gaussian::new(g1.mean.clone(), g1.cov.clone()).unwrap(), 50_000, &stream, "fp1", 0).unwrap();
        let g2 = empirical_moments(&e2, CovScaling::OverJ).unwrap();
        assert!((g2.mean - g1.mean).norm() < 0.05);
        assert!((g2.cov - g1.cov).norm() < 0.1);
    }
}
