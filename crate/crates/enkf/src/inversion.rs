//! Ensemble Kalman methods for inverse problems: the Tikhonov extension,
//! prior-to-posterior transport, iteration-to-infinity (classical and
//! Bayesian), covariance-preconditioned Langevin sampling via statistical
//! linearization, the Gaussian projected inversion filter, grid and linear
//! posterior oracles, and the Lorenz '96 time-averaged forward map.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{
    cross_covariance, empirical_moments, psd_sqrt, symmetrize, CovScaling, Ensemble, Gaussian,
};
use crate::models::{l96_flow, pick_inner_step, L96Params};
use crate::rng::{normal_matrix, normal_vector, SeededStream};

fn broadcast(v: &DVector<f64>, cols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(v.len(), cols);
    for mut col in m.column_iter_mut() {
        col.copy_from(v);
    }
    m
}

type ForwardFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Forward map, data, noise covariance, and Gaussian prior.
#[derive(Clone)]
pub struct InverseProblem {
    forward: ForwardFn,
    pub data: DVector<f64>,
    pub noise_cov: DMatrix<f64>,
    pub prior: Gaussian,
    /// Set when the forward map is linear.
    pub linear: Option<DMatrix<f64>>,
}

impl InverseProblem {
    pub fn new<G>(forward: G, data: DVector<f64>, noise_cov: DMatrix<f64>, prior: Gaussian) -> Result<Self>
    where
        G: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        if nalgebra::Cholesky::new(noise_cov.clone()).is_none() {
            return Err(Error::NotPsd { min_eig: f64::NAN, tol: 0.0 });
        }
        if nalgebra::Cholesky::new(prior.cov.clone()).is_none() {
            return Err(Error::NotPsd { min_eig: f64::NAN, tol: 0.0 });
        }
        Ok(Self { forward: Arc::new(forward), data, noise_cov, prior, linear: None })
    }

    pub fn linear(l: DMatrix<f64>, data: DVector<f64>, noise_cov: DMatrix<f64>, prior: Gaussian) -> Result<Self> {
        let mat = l.clone();
        let mut p = Self::new(move |u| &mat * u, data, noise_cov, prior)?;
        p.linear = Some(l);
        Ok(p)
    }

    pub fn dim_u(&self) -> usize {
        self.prior.dim()
    }

    pub fn dim_w(&self) -> usize {
        self.data.len()
    }

    pub fn apply_forward(&self, u: &DVector<f64>) -> DVector<f64> {
        (self.forward)(u)
    }

    /// Forward images of every ensemble member, in parallel.
    pub fn forward_ensemble(&self, e: &Ensemble) -> Result<Ensemble> {
        let fwd = self.forward.clone();
        let cols: Vec<DVector<f64>> = (0..e.member_count())
            .into_par_iter()
            .map(|j| fwd(&e.member(j)))
            .collect();
        Ensemble::from_columns(&cols)
    }

    /// Data misfit `1/2 |w - G(u)|^2_Gamma`.
    pub fn misfit(&self, u: &DVector<f64>) -> f64 {
        let r = &self.data - self.apply_forward(u);
        let solve = nalgebra::Cholesky::new(self.noise_cov.clone()).unwrap().solve(&r);
        0.5 * r.dot(&solve)
    }

    /// Regularized misfit `misfit + 1/2 |u - m0|^2_{C0}`.
    pub fn misfit_regularized(&self, u: &DVector<f64>) -> f64 {
        let d = u - &self.prior.mean;
        let solve = nalgebra::Cholesky::new(self.prior.cov.clone()).unwrap().solve(&d);
        self.misfit(u) + 0.5 * d.dot(&solve)
    }
}

/// The Tikhonov extension: stacked forward map, stacked data, and block
/// noise covariance `diag(Gamma, C0)`.
#[derive(Clone)]
pub struct RegularizedProblem {
    forward: ForwardFn,
    pub data: DVector<f64>,
    pub noise_cov: DMatrix<f64>,
    pub dim_u: usize,
    pub dim_w: usize,
}

impl RegularizedProblem {
    pub fn apply_forward(&self, u: &DVector<f64>) -> DVector<f64> {
        (self.forward)(u)
    }

    pub fn forward_ensemble(&self, e: &Ensemble) -> Result<Ensemble> {
        let fwd = self.forward.clone();
        let cols: Vec<DVector<f64>> = (0..e.member_count())
            .into_par_iter()
            .map(|j| fwd(&e.member(j)))
            .collect();
        Ensemble::from_columns(&cols)
    }

    /// `1/2 |w_R - G_R(u)|^2_{Gamma_R}`.
    pub fn misfit(&self, u: &DVector<f64>) -> f64 {
        let r = &self.data - self.apply_forward(u);
        let solve = nalgebra::Cholesky::new(self.noise_cov.clone()).unwrap().solve(&r);
        0.5 * r.dot(&solve)
    }
}

/// Stacks the identity onto the forward map: `G_R(u) = (G(u), u)`,
/// `w_R = (w, m0)`, `Gamma_R = diag(Gamma, C0)`.
pub fn regularize(p: &InverseProblem) -> RegularizedProblem {
    let (du, dw) = (p.dim_u(), p.dim_w());
    let fwd = p.forward.clone();
    let stacked = move |u: &DVector<f64>| {
        let g = fwd(u);
        let mut out = DVector::zeros(dw + du);
        out.rows_mut(0, dw).copy_from(&g);
        out.rows_mut(dw, du).copy_from(u);
        out
    };
    let mut data = DVector::zeros(dw + du);
    data.rows_mut(0, dw).copy_from(&p.data);
    data.rows_mut(dw, du).copy_from(&p.prior.mean);
    let mut cov = DMatrix::zeros(dw + du, dw + du);
    cov.view_mut((0, 0), (dw, dw)).copy_from(&p.noise_cov);
    cov.view_mut((dw, dw), (du, du)).copy_from(&p.prior.cov);
    RegularizedProblem { forward: Arc::new(stacked), data, noise_cov: cov, dim_u: du, dim_w: dw }
}

/// Stacked linear forward matrix `(L; I)`.
pub fn regularized_matrix(l: &DMatrix<f64>) -> DMatrix<f64> {
    let (dw, du) = (l.nrows(), l.ncols());
    let mut lr = DMatrix::zeros(dw + du, du);
    lr.view_mut((0, 0), (dw, du)).copy_from(l);
    lr.view_mut((dw, 0), (du, du)).copy_from(&DMatrix::identity(du, du));
    lr
}

/// Exact Gaussian posterior for a linear forward map, in precision form.
pub fn linear_posterior(l: &DMatrix<f64>, p: &InverseProblem) -> Result<Gaussian> {
    let gamma_inv = p
        .noise_cov
        .clone()
        .try_inverse()
        .ok_or(Error::SingularDataCovariance { cond: f64::INFINITY })?;
    let c0_inv = p
        .prior
        .cov
        .clone()
        .try_inverse()
        .ok_or(Error::NotPsd { min_eig: f64::NAN, tol: 0.0 })?;
    let precision = l.transpose() * &gamma_inv * l + &c0_inv;
    let rhs = l.transpose() * &gamma_inv * &p.data + &c0_inv * &p.prior.mean;
    let chol = nalgebra::Cholesky::new(symmetrize(&precision))
        .ok_or(Error::SingularDataCovariance { cond: f64::INFINITY })?;
    let mean = chol.solve(&rhs);
    let cov = chol.inverse();
    Gaussian::new(mean, symmetrize(&cov))
}

/// Rectangular grid for the homotopy density oracle (`d_u <= 3`).
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub n: Vec<usize>,
}

impl GridSpec {
    pub fn dim(&self) -> usize {
        self.n.len()
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 || d > 3 || self.lo.len() != d || self.hi.len() != d {
            return Err(Error::Config("grid oracle supports 1 <= d_u <= 3".into()));
        }
        for i in 0..d {
            if self.n[i] < 2 || self.n[i] > 201 || self.hi[i] <= self.lo[i] {
                return Err(Error::Config(format!("bad grid axis {i}")));
            }
        }
        Ok(())
    }

    pub fn point(&self, flat: usize) -> DVector<f64> {
        let d = self.dim();
        let mut idx = flat;
        DVector::from_fn(d, |i, _| {
            let k = idx % self.n[i];
            idx /= self.n[i];
            self.lo[i] + (self.hi[i] - self.lo[i]) * k as f64 / (self.n[i] - 1) as f64
        })
    }

    pub fn total(&self) -> usize {
        self.n.iter().product()
    }
}

/// Normalized density weights on a grid, with moments by quadrature.
#[derive(Debug, Clone)]
pub struct GridDensity {
    pub spec: GridSpec,
    pub log_density: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GridDensity {
    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.spec.dim());
        for (flat, w) in self.weights.iter().enumerate() {
            m += self.spec.point(flat) * *w;
        }
        m
    }

    pub fn cov(&self) -> DMatrix<f64> {
        let m = self.mean();
        let d = self.spec.dim();
        let mut c = DMatrix::zeros(d, d);
        for (flat, w) in self.weights.iter().enumerate() {
            let dev = self.spec.point(flat) - &m;
            c += &dev * dev.transpose() * *w;
        }
        c
    }
}

/// Homotopy density `rho(u, t) = exp(-t Phi(u)) rho_0(u)` on a grid,
/// normalized by quadrature.
pub fn grid_posterior(p: &InverseProblem, t: f64, spec: &GridSpec) -> Result<GridDensity> {
    spec.validate()?;
    if spec.dim() != p.dim_u() {
        return Err(Error::DimensionMismatch { expected: p.dim_u(), got: spec.dim() });
    }
    let c0_chol = nalgebra::Cholesky::new(p.prior.cov.clone())
        .ok_or(Error::NotPsd { min_eig: f64::NAN, tol: 0.0 })?;
    let total = spec.total();
    let log_density: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|flat| {
            let u = spec.point(flat);
            let d0 = &u - &p.prior.mean;
            let prior_quad = 0.5 * d0.dot(&c0_chol.solve(&d0));
            -t * p.misfit(&u) - prior_quad
        })
        .collect();
    let max_log = log_density.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max_log.is_finite() || max_log < -700.0 {
        return Err(Error::GridUnderflow);
    }
    let unnorm: Vec<f64> = log_density.iter().map(|l| (l - max_log).exp()).collect();
    let sum: f64 = unnorm.iter().sum();
    if sum <= 0.0 {
        return Err(Error::GridUnderflow);
    }
    let weights = unnorm.iter().map(|w| w / sum).collect();
    Ok(GridDensity { spec: spec.clone(), log_density, weights })
}

fn transport_gains(
    p_noise: &DMatrix<f64>,
    e: &Ensemble,
    images: &Ensemble,
    dt: f64,
    noise_mult: f64,
    scaling: CovScaling,
) -> Result<DMatrix<f64>> {
    let c_ug = cross_covariance(e, images, scaling)?;
    let c_gg = empirical_moments(images, scaling)?.cov;
    let denom = symmetrize(&(c_gg * dt + p_noise * noise_mult));
    let chol = nalgebra::Cholesky::new(denom)
        .ok_or(Error::SingularDataCovariance { cond: f64::INFINITY })?;
    Ok(chol.solve(&(c_ug * dt).transpose()).transpose())
}

/// One step of ensemble Kalman inversion in transport form: `N dt = 1`
/// transports prior to posterior.
pub fn eki_transport_step(
    p: &InverseProblem,
    e: &Ensemble,
    dt: f64,
    stream: &SeededStream,
    step: u64,
) -> Result<Ensemble> {
    if e.member_count() < 2 {
        return Err(Error::TooFewMembers { got: e.member_count(), need: 2 });
    }
    let j = e.member_count();
    let images = p.forward_ensemble(e)?;
    // Gain dt C_uG (dt C_GG + Gamma)^{-1}.
    let gain = transport_gains(&p.noise_cov, e, &images, dt, 1.0, CovScaling::default())?;
    let noise_root = psd_sqrt(&(&p.noise_cov / dt))?.matrix;
    let eta = normal_matrix(&mut stream.rng("eki-data", step, 0), p.dim_w(), j);
    let perturbed = broadcast(&p.data, j) + noise_root * eta;
    Ensemble::new(&e.members + gain * (perturbed - &images.members))
}

/// Parameters of the iteration-to-infinity dynamical system.
#[derive(Debug, Clone)]
pub struct IterInfParams {
    pub alpha: f64,
    pub sigma_prime: f64,
    pub gamma_prime: f64,
    pub anchor: DVector<f64>,
    pub pred_noise_cov: DMatrix<f64>,
}

impl IterInfParams {
    pub fn new(
        alpha: f64,
        sigma_prime: f64,
        gamma_prime: f64,
        anchor: DVector<f64>,
        pred_noise_cov: DMatrix<f64>,
    ) -> Result<Self> {
        if !(0.0 < alpha && alpha <= 1.0) || sigma_prime < 0.0 || gamma_prime <= 0.0 {
            return Err(Error::Config(format!(
                "iteration-to-infinity needs alpha in (0,1], sigma' >= 0, gamma' > 0; got {alpha}, {sigma_prime}, {gamma_prime}"
            )));
        }
        Ok(Self { alpha, sigma_prime, gamma_prime, anchor, pred_noise_cov })
    }
}

/// One step of ensemble Kalman inversion iterated to a steady state
/// (classical, Tikhonov-Phillips flavored).
pub fn eki_iterinf_step(
    p: &InverseProblem,
    params: &IterInfParams,
    e: &Ensemble,
    stream: &SeededStream,
    step: u64,
) -> Result<Ensemble> {
    if e.member_count() < 2 {
        return Err(Error::TooFewMembers { got: e.member_count(), need: 2 });
    }
    let j = e.member_count();
    let d = e.dim();
    let pred_root = psd_sqrt(&(&params.pred_noise_cov * params.sigma_prime))?.matrix;
    let xi = normal_matrix(&mut stream.rng("iterinf-pred", step, 0), d, j);
    let predicted = Ensemble::new(
        &e.members * params.alpha + broadcast(&params.anchor, j) * (1.0 - params.alpha) + pred_root * xi,
    )?;
    let images = p.forward_ensemble(&predicted)?;
    let gain = transport_gains(&p.noise_cov, &predicted, &images, 1.0, params.gamma_prime, CovScaling::default())?;
    let data_root = psd_sqrt(&(&p.noise_cov * params.gamma_prime))?.matrix;
    let eta = normal_matrix(&mut stream.rng("iterinf-data", step, 0), p.dim_w(), j);
    let perturbed = broadcast(&p.data, j) + data_root * eta;
    Ensemble::new(&predicted.members + gain * (perturbed - &images.members))
}

/// Prediction style for the Bayesian iteration-to-infinity step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BayesPrediction {
    /// Additive noise `N(0, alpha C_n)`.
    #[default]
    Stochastic,
    /// Multiplicative inflation of deviations by `sqrt(1 + alpha)`.
    DeterministicInflation,
}

/// One step of the Bayesian iteration-to-infinity method: operates on the
/// Tikhonov-extended problem with covariance-proportional prediction noise.
pub fn eki_bayes_iterinf_step(
    p: &InverseProblem,
    alpha: f64,
    e: &Ensemble,
    stream: &SeededStream,
    step: u64,
    prediction: BayesPrediction,
) -> Result<Ensemble> {
    if e.member_count() < 2 {
        return Err(Error::TooFewMembers { got: e.member_count(), need: 2 });
    }
    if alpha <= 0.0 {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    let j = e.member_count();
    let reg = regularize(p);
    let moments = empirical_moments(e, CovScaling::default())?;
    let predicted = match prediction {
        BayesPrediction::Stochastic => {
            let root = psd_sqrt(&(&moments.cov * alpha))?.matrix;
            let xi = normal_matrix(&mut stream.rng("bayes-pred", step, 0), e.dim(), j);
            Ensemble::new(&e.members + root * xi)?
        }
        BayesPrediction::DeterministicInflation => {
            let factor = (1.0 + alpha).sqrt();
            let mean = broadcast(&moments.mean, j);
            Ensemble::new(&mean + (&e.members - &mean) * factor)?
        }
    };
    let images = reg.forward_ensemble(&predicted)?;
    let noise_mult = 1.0 + alpha.recip();
    let gain = transport_gains(&reg.noise_cov, &predicted, &images, 1.0, noise_mult, CovScaling::default())?;
    let data_root = psd_sqrt(&(&reg.noise_cov * noise_mult))?.matrix;
    let eta = normal_matrix(&mut stream.rng("bayes-data", step, 0), reg.data.len(), j);
    let perturbed = broadcast(&reg.data, j) + data_root * eta;
    Ensemble::new(&predicted.members + gain * (perturbed - &images.members))
}

/// Deterministic drift of the preconditioned Langevin sampler, one column
/// per member: the data misfit enters through statistical linearization, the
/// Gaussian prior term exactly.
pub fn eks_drift(p: &InverseProblem, e: &Ensemble, scaling: CovScaling) -> Result<DMatrix<f64>> {
    let j = e.member_count();
    let images = p.forward_ensemble(e)?;
    let c_ug = cross_covariance(e, &images, scaling)?;
    let cov = empirical_moments(e, scaling)?.cov;
    let gamma_chol = nalgebra::Cholesky::new(p.noise_cov.clone())
        .ok_or(Error::SingularDataCovariance { cond: f64::INFINITY })?;
    let prior_chol = nalgebra::Cholesky::new(p.prior.cov.clone())
        .ok_or(Error::NotPsd { min_eig: f64::NAN, tol: 0.0 })?;
    let misfits = gamma_chol.solve(&(&images.members - broadcast(&p.data, j)));
    let prior_pull = prior_chol.solve(&(&e.members - broadcast(&p.prior.mean, j)));
    Ok(-(c_ug * misfits + cov * prior_pull))
}

/// One Euler-Maruyama step of the ensemble Kalman sampler
/// `du = -[C_uG Gamma^{-1}(G(u) - w) + C C0^{-1}(u - m0)] dt + sqrt(2C) dW`.
pub fn eks_step(
    p: &InverseProblem,
    e: &Ensemble,
    dt: f64,
    stream: &SeededStream,
    step: u64,
) -> Result<Ensemble> {
    if e.member_count() < 3 {
        return Err(Error::TooFewMembers { got: e.member_count(), need: 3 });
    }
    let scaling = CovScaling::default();
    let drifts = eks_drift(p, e, scaling)?;
    let cov = empirical_moments(e, scaling)?.cov;
    let noise_root = psd_sqrt(&(cov * 2.0))?.matrix;
    let xi = normal_matrix(&mut stream.rng("eks", step, 0), e.dim(), e.member_count());
    Ensemble::new(&e.members + drifts * dt + noise_root * xi * dt.sqrt())
}

/// One step of the Gaussian projected inversion filter with Monte Carlo
/// moments under the current Gaussian.
pub fn gpf_inversion_step(
    p: &InverseProblem,
    g: &Gaussian,
    dt: f64,
    quad_size: usize,
    stream: &SeededStream,
    step: u64,
) -> Result<Gaussian> {
    let root = g.sqrt_cov()?;
    let d = g.dim();
    let xi = normal_matrix(&mut stream.rng("gpf-inv", step, 0), d, quad_size);
    let us = Ensemble::new(broadcast(&g.mean, quad_size) + root * xi)?;
    let gs = p.forward_ensemble(&us)?;
    let scaling = CovScaling::OverJMinus1;
    let c_ug = cross_covariance(&us, &gs, scaling)?;
    let g_moments = empirical_moments(&gs, scaling)?;
    let denom = symmetrize(&(&g_moments.cov * dt + &p.noise_cov));
    let chol = nalgebra::Cholesky::new(denom)
        .ok_or(Error::SingularDataCovariance { cond: f64::INFINITY })?;
    let gain = chol.solve(&(&c_ug * dt).transpose()).transpose();
    let mean = &g.mean + &gain * (&p.data - &g_moments.mean);
    let cov = symmetrize(&(&g.cov - &gain * c_ug.transpose()));
    Gaussian::new(mean, cov)
}

/// Rate diagnostics for the deterministic mean-field transport ODE on an
/// invertible linear problem.
#[derive(Debug, Clone)]
pub struct RateReport {
    pub t: Vec<f64>,
    /// `|B^{1/2} d(t)|^2 * t / |B^{1/2} d(0)|^2`, expected `<= 1` for `t >= 1`.
    pub decay_ratio: Vec<f64>,
    /// Sup-norm residual against the closed-form mean bias.
    pub bias_residual: Vec<f64>,
    pub decay_bound_ok: bool,
    pub max_bias_residual: f64,
}

/// Integrates the deterministic mean-field ODE for an invertible linear
/// forward map and checks the algebraic convergence rates.
pub fn analyze_linear_rates(
    l: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    prior: &Gaussian,
    w: &DVector<f64>,
    d0: &DVector<f64>,
    t_grid: &[f64],
) -> Result<RateReport> {
    if l.nrows() != l.ncols() {
        return Err(Error::SingularForward);
    }
    let l_inv = l.clone().try_inverse().ok_or(Error::SingularForward)?;
    let gamma_inv = gamma
        .clone()
        .try_inverse()
        .ok_or(Error::SingularDataCovariance { cond: f64::INFINITY })?;
    let b = l.transpose() * &gamma_inv * l;
    let b_sqrt = psd_sqrt(&b)?.matrix;
    let u_star = &l_inv * w;
    let t_max = t_grid.iter().cloned().fold(0.0f64, f64::max);
    if t_max <= 0.0 {
        return Err(Error::Config("rate grid must contain positive times".into()));
    }

    let dt = 1e-4;
    let steps = (t_max / dt).round() as usize;
    let d0_norm2 = (&b_sqrt * d0).norm_squared();

    // RK4 on the coupled (m, C, d) system:
    //   dm/dt = -C B (m - u*),  dC/dt = -C B C,  dd/dt = -1/2 C B d.
    let mut m = prior.mean.clone();
    let mut c = prior.cov.clone();
    let mut dev = d0.clone();
    let mut report_t = vec![];
    let mut decay = vec![];
    let mut bias_res = vec![];
    let mut grid_sorted: Vec<f64> = t_grid.to_vec();
    grid_sorted.sort_by(f64::total_cmp);
    let mut next_idx = 0usize;

    let deriv = |m: &DVector<f64>, c: &DMatrix<f64>, dev: &DVector<f64>| {
        let cb = c * &b;
        (-(&cb) * (m - &u_star), -(&cb) * c, -(&cb) * dev * 0.5)
    };
    let mut record = |t: f64, m: &DVector<f64>, dev: &DVector<f64>| {
        let ratio = if d0_norm2 == 0.0 { 0.0 } else { (&b_sqrt * dev).norm_squared() * t / d0_norm2 };
        // Closed-form bias: m(t) - u* = t^{-1} L^{-1} Gamma (L C0 L^T + t^{-1} Gamma)^{-1} L (m0 - u*).
        let inner = l * &prior.cov * l.transpose() + gamma / t;
        let bias = &l_inv * gamma * inner.try_inverse().unwrap() * l * (&prior.mean - &u_star) / t;
        let residual = ((m - &u_star) - bias).amax();
        report_t.push(t);
        decay.push(ratio);
        bias_res.push(residual);
    };

    for step in 0..steps {
        let t_next = (step + 1) as f64 * dt;
        let (k1m, k1c, k1d) = deriv(&m, &c, &dev);
        let (k2m, k2c, k2d) = deriv(&(&m + &k1m * (dt / 2.0)), &(&c + &k1c * (dt / 2.0)), &(&dev + &k1d * (dt / 2.0)));
        let (k3m, k3c, k3d) = deriv(&(&m + &k2m * (dt / 2.0)), &(&c + &k2c * (dt / 2.0)), &(&dev + &k2d * (dt / 2.0)));
        let (k4m, k4c, k4d) = deriv(&(&m + &k3m * dt), &(&c + &k3c * dt), &(&dev + &k3d * dt));
        m += (k1m + k2m * 2.0 + k3m * 2.0 + k4m) * (dt / 6.0);
        c = symmetrize(&(&c + (k1c + k2c * 2.0 + k3c * 2.0 + k4c) * (dt / 6.0)));
        dev += (k1d + k2d * 2.0 + k3d * 2.0 + k4d) * (dt / 6.0);
        while next_idx < grid_sorted.len() && grid_sorted[next_idx] <= t_next + dt * 0.5 {
            record(grid_sorted[next_idx], &m, &dev);
            next_idx += 1;
        }
    }

    let decay_bound_ok = report_t
        .iter()
        .zip(&decay)
        .all(|(t, r)| *t < 1.0 || *r <= 1.0 + 1e-9);
    let max_bias_residual = bias_res.iter().cloned().fold(0.0, f64::max);
    Ok(RateReport { t: report_t, decay_ratio: decay, bias_residual: bias_res, decay_bound_ok, max_bias_residual })
}

/// Time-averaged Lorenz '96 statistics as a forward map: runs the model with
/// forcing `u` for time `t_end` and returns the spatial mean of the state
/// and the spatial mean of the temporal variance.
///
/// The random initial condition is keyed by the bits of `u`, so the map is a
/// deterministic function of `(u, seed)`.
pub fn time_averaged_forward_map(
    base: &L96Params,
    u: f64,
    t_end: f64,
    tau: f64,
    init: &Gaussian,
    stream: &SeededStream,
) -> Result<DVector<f64>> {
    let mut params = base.clone();
    params.f = u;
    let dt_inner = pick_inner_step(tau, 1e-3);
    let n = (t_end / tau).round() as usize;
    let l = params.l;
    let root = init.sqrt_cov()?;
    let mut rng = stream.rng("fwdmap-init", 0, u.to_bits());
    let mut v = &init.mean + &root * normal_vector(&mut rng, l);

    let mut sum = DVector::zeros(l);
    let mut sum_sq = DVector::zeros(l);
    for _ in 0..n {
        v = l96_flow(&params, &v, tau, dt_inner)?;
        sum += &v;
        sum_sq += v.component_mul(&v);
    }
    let nf = n as f64;
    let mean_per_site = &sum / nf;
    let var_per_site = &sum_sq / nf - mean_per_site.component_mul(&mean_per_site);
    let w1 = mean_per_site.sum() / l as f64;
    let w2 = var_per_site.sum() / l as f64;
    if !(w1.is_finite() && w2.is_finite()) {
        return Err(Error::NonFinite { what: "time-averaged statistics" });
    }
    Ok(DVector::from_vec(vec![w1, w2]))
}
