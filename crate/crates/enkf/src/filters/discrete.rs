//! Discrete-time state estimators: 3DVAR, the Kalman filter, the Gaussian
//! projected filter, stochastic EnKF, both ensemble adjustment filters, and
//! the ensemble transform filter with its weight formulation.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{
    condition_joint, cross_covariance, empirical_moments, psd_inv_sqrt, psd_sqrt, symmetrize,
    CovScaling, Ensemble, Gaussian, JointGaussian,
};
use crate::models::{DynamicsModel, ObservationModel};
use crate::rng::{normal_matrix, normal_vector, SeededStream};

fn broadcast(v: &DVector<f64>, cols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(v.len(), cols);
    for mut col in m.column_iter_mut() {
        col.copy_from(v);
    }
    m
}

/// Which mismatch drives the correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InnovationKind {
    /// `y - h(forecast)`: noise-free control form.
    Control,
    /// `y - (h(forecast) + eta)`: simulated-data form.
    #[default]
    Stochastic,
    /// `y - (h(forecast) + mean h)/2`: deterministic form.
    Deterministic,
}

/// Observed-minus-predicted mismatch tagged with its variant.
#[derive(Debug, Clone, PartialEq)]
pub struct Innovation {
    pub value: DVector<f64>,
    pub kind: InnovationKind,
}

/// Finite representation of the filtering distribution.
#[derive(Debug, Clone)]
pub enum StateRep {
    Point(DVector<f64>),
    Gaussian(Gaussian),
    Ensemble(Ensemble),
}

#[derive(Debug, Clone)]
pub struct FilterState {
    pub state: StateRep,
    pub step: u64,
}

impl FilterState {
    pub fn estimate(&self) -> DVector<f64> {
        match &self.state {
            StateRep::Point(v) => v.clone(),
            StateRep::Gaussian(g) => g.mean.clone(),
            StateRep::Ensemble(e) => e.mean(),
        }
    }

    pub fn spread(&self, scaling: CovScaling) -> DVector<f64> {
        match &self.state {
            StateRep::Point(v) => DVector::zeros(v.len()),
            StateRep::Gaussian(g) => g.cov.diagonal().map(f64::sqrt),
            StateRep::Ensemble(e) => e.component_std(scaling),
        }
    }
}

/// One 3DVAR step with fixed gain: `Psi(v) + K (y - h(Psi(v)))`.
pub fn threedvar_step(
    dynamics: &DynamicsModel,
    obs: &ObservationModel,
    gain: &DMatrix<f64>,
    v: &DVector<f64>,
    y_obs: &DVector<f64>,
) -> Result<DVector<f64>> {
    let forecast = dynamics.flow(v)?;
    let predicted = obs.observe(&forecast);
    Ok(&forecast + gain * (y_obs - predicted))
}

/// Noisy 3DVAR: the fixed-gain update driven by simulated state and data.
pub fn noisy_threedvar_step(
    dynamics: &DynamicsModel,
    obs: &ObservationModel,
    gain: &DMatrix<f64>,
    v: &DVector<f64>,
    y_obs: &DVector<f64>,
    stream: &SeededStream,
    step: u64,
) -> Result<DVector<f64>> {
    let xi = normal_vector(&mut stream.rng("3dvar-state", step, 0), dynamics.dim());
    let forecast = dynamics.flow(v)? + dynamics.noise_sqrt() * xi;
    let eta = normal_vector(&mut stream.rng("3dvar-obs", step, 0), obs.dim_y());
    let simulated = obs.observe(&forecast) + obs.noise_sqrt() * eta;
    Ok(&forecast + gain * (y_obs - simulated))
}

/// One predict-update cycle of the Kalman filter for a linear system.
pub fn kalman_step(
    m: &DMatrix<f64>,
    h: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    prior: &Gaussian,
    y_obs: &DVector<f64>,
) -> Result<Gaussian> {
    let mean_f = m * &prior.mean;
    let cov_f = symmetrize(&(m * &prior.cov * m.transpose() + sigma));
    let c_vy = &cov_f * h.transpose();
    let c_yy = symmetrize(&(h * &cov_f * h.transpose() + gamma));
    let joint = JointGaussian {
        mean_y: h * &mean_f,
        mean_v: mean_f,
        c_vv: cov_f,
        c_vy,
        c_yy,
    };
    condition_joint(&joint, y_obs)
}

/// Gaussian projected filter step: Monte Carlo moments of the predicted
/// (state, data) pair followed by Gaussian conditioning.
pub fn gpf_step(
    dynamics: &DynamicsModel,
    obs: &ObservationModel,
    prior: &Gaussian,
    y_obs: &DVector<f64>,
    quad_size: usize,
    stream: &SeededStream,
    step: u64,
) -> Result<Gaussian> {
    let root = prior.sqrt_cov()?;
    let d = prior.dim();
    let dy = obs.dim_y();
    let xi0 = normal_matrix(&mut stream.rng("gpf-init", step, 0), d, quad_size);
    let mut init = root * xi0;
    for mut col in init.column_iter_mut() {
        col += &prior.mean;
    }
    let mut states = dynamics.flow_matrix(&init)?;
    states += dynamics.noise_sqrt() * normal_matrix(&mut stream.rng("gpf-state", step, 0), d, quad_size);
    let mut data = obs.observe_matrix(&states);
    data += obs.noise_sqrt() * normal_matrix(&mut stream.rng("gpf-obs", step, 0), dy, quad_size);
    let joint =
        JointGaussian::from_ensembles(&Ensemble::new(states)?, &Ensemble::new(data)?, CovScaling::OverJMinus1)?;
    condition_joint(&joint, y_obs)
}

/// Forecast phase shared by the ensemble filters: `Psi(v_j) + xi_j`. Flows
/// run member-parallel; the noise block is one draw keyed
/// `("forecast", step, 0)`.
pub fn forecast_ensemble(
    dynamics: &DynamicsModel,
    e: &Ensemble,
    stream: &SeededStream,
    step: u64,
) -> Result<Ensemble> {
    let mut m = dynamics.flow_matrix(&e.members)?;
    let xi = normal_matrix(&mut stream.rng("forecast", step, 0), e.dim(), e.member_count());
    dynamics.add_noise(&mut m, &xi);
    Ensemble::new(m)
}

/// Per-member observation images `h(v_j)` of a forecast ensemble.
pub fn observe_ensemble(obs: &ObservationModel, forecast: &Ensemble) -> Result<Ensemble> {
    Ensemble::new(obs.observe_matrix(&forecast.members))
}

/// Simulated data `h(v_j) + eta_j`.
pub fn simulate_data(
    obs: &ObservationModel,
    forecast: &Ensemble,
    stream: &SeededStream,
    step: u64,
) -> Result<Ensemble> {
    simulate_data_from_images(obs, &observe_ensemble(obs, forecast)?, stream, step)
}

/// Simulated data built on precomputed noise-free images.
pub fn simulate_data_from_images(
    obs: &ObservationModel,
    images: &Ensemble,
    stream: &SeededStream,
    step: u64,
) -> Result<Ensemble> {
    let eta = normal_matrix(&mut stream.rng("sim-data", step, 0), obs.dim_y(), images.member_count());
    let mut data = images.members.clone();
    obs.add_noise(&mut data, &eta);
    Ensemble::new(data)
}

/// Empirical gain `C_vh (C_hh + Gamma)^{-1}`, the form that keeps the inverted
/// matrix positive-definite.
pub fn empirical_gain(
    obs: &ObservationModel,
    forecast: &Ensemble,
    images: &Ensemble,
    scaling: CovScaling,
) -> Result<DMatrix<f64>> {
    let c_vh = cross_covariance(forecast, images, scaling)?;
    let c_hh = empirical_moments(images, scaling)?.cov;
    let denom = symmetrize(&(c_hh + &obs.noise_cov));
    let chol = nalgebra::Cholesky::new(denom)
        .ok_or(Error::SingularDataCovariance { cond: f64::INFINITY })?;
    Ok(chol.solve(&c_vh.transpose()).transpose())
}

/// Stochastic EnKF analysis on a precomputed simulated-data ensemble.
pub fn enkf_analysis(
    obs: &ObservationModel,
    forecast: &Ensemble,
    simulated: &Ensemble,
    y_obs: &DVector<f64>,
    scaling: CovScaling,
) -> Result<Ensemble> {
    let images = observe_ensemble(obs, forecast)?;
    enkf_analysis_with_images(obs, forecast, &images, simulated, y_obs, scaling)
}

/// Stochastic EnKF analysis with noise-free images supplied by the caller.
pub fn enkf_analysis_with_images(
    obs: &ObservationModel,
    forecast: &Ensemble,
    images: &Ensemble,
    simulated: &Ensemble,
    y_obs: &DVector<f64>,
    scaling: CovScaling,
) -> Result<Ensemble> {
    if forecast.member_count() < 2 {
        return Err(Error::TooFewMembers { got: forecast.member_count(), need: 2 });
    }
    let gain = empirical_gain(obs, forecast, images, scaling)?;
    let innovations = broadcast(y_obs, forecast.member_count()) - &simulated.members;
    Ensemble::new(&forecast.members + crate::gaussian::apply_small(&gain, &innovations))
}

/// Deterministic-innovation EnKF analysis: `v + K (y - (h(v) + mean h)/2)`.
pub fn enkf_analysis_deterministic(
    obs: &ObservationModel,
    forecast: &Ensemble,
    y_obs: &DVector<f64>,
    scaling: CovScaling,
) -> Result<Ensemble> {
    if forecast.member_count() < 2 {
        return Err(Error::TooFewMembers { got: forecast.member_count(), need: 2 });
    }
    let j = forecast.member_count();
    let images = observe_ensemble(obs, forecast)?;
    let gain = empirical_gain(obs, forecast, &images, scaling)?;
    let innovations =
        broadcast(y_obs, j) - (&images.members + broadcast(&images.mean(), j)) * 0.5;
    Ensemble::new(&forecast.members + gain * innovations)
}

/// One stochastic EnKF step: forecast, simulate data, analyze.
pub fn enkf_step(
    dynamics: &DynamicsModel,
    obs: &ObservationModel,
    e: &Ensemble,
    y_obs: &DVector<f64>,
    stream: &SeededStream,
    step: u64,
) -> Result<Ensemble> {
    enkf_step_with(dynamics, obs, e, y_obs, stream, step, InnovationKind::Stochastic, CovScaling::default())
}

pub fn enkf_step_with(
    dynamics: &DynamicsModel,
    obs: &ObservationModel,
    e: &Ensemble,
    y_obs: &DVector<f64>,
    stream: &SeededStream,
    step: u64,
    innovation: InnovationKind,
    scaling: CovScaling,
) -> Result<Ensemble> {
    let forecast = forecast_ensemble(dynamics, e, stream, step)?;
    let images = observe_ensemble(obs, &forecast)?;
    match innovation {
        InnovationKind::Stochastic => {
            let simulated = simulate_data_from_images(obs, &images, stream, step)?;
            enkf_analysis_with_images(obs, &forecast, &images, &simulated, y_obs, scaling)
        }
        InnovationKind::Deterministic => {
            let j = forecast.member_count();
            let gain = empirical_gain(obs, &forecast, &images, scaling)?;
            let innovations =
                broadcast(y_obs, j) - (&images.members + broadcast(&images.mean(), j)) * 0.5;
            Ensemble::new(&forecast.members + crate::gaussian::apply_small(&gain, &innovations))
        }
        InnovationKind::Control => {
            let gain = empirical_gain(obs, &forecast, &images, scaling)?;
            let innovations = broadcast(y_obs, forecast.member_count()) - &images.members;
            Ensemble::new(&forecast.members + crate::gaussian::apply_small(&gain, &innovations))
        }
    }
}

fn analysis_mean(
    obs: &ObservationModel,
    forecast: &Ensemble,
    images: &Ensemble,
    y_obs: &DVector<f64>,
    scaling: CovScaling,
) -> Result<(DVector<f64>, DVector<f64>, DMatrix<f64>)> {
    let gain = empirical_gain(obs, forecast, images, scaling)?;
    let h_mean = images.mean();
    let mean = forecast.mean() + &gain * (y_obs - &h_mean);
    Ok((mean, h_mean, gain))
}

/// EAKF adjusting deviations in state space: mean moves by the Kalman update,
/// deviations are rescaled by `C^{1/2} Chat^{-1/2}`.
pub fn eakf_state_analysis(
    obs: &ObservationModel,
    forecast: &Ensemble,
    y_obs: &DVector<f64>,
    scaling: CovScaling,
    strict: bool,
) -> Result<Ensemble> {
    if forecast.member_count() < 2 {
        return Err(Error::TooFewMembers { got: forecast.member_count(), need: 2 });
    }
    let images = observe_ensemble(obs, forecast)?;
    let (mean, _, gain) = analysis_mean(obs, forecast, &images, y_obs, scaling)?;
    let prior_cov = empirical_moments(forecast, scaling)?.cov;
    let c_vh = cross_covariance(forecast, &images, scaling)?;
    let post_cov = symmetrize(&(&prior_cov - &gain * c_vh.transpose()));
    let (inv_root, rank) = psd_inv_sqrt(&prior_cov)?;
    if strict && rank < forecast.dim() {
        return Err(Error::RankDeficientState { rank, dim: forecast.dim() });
    }
    let transform = psd_sqrt(&post_cov)?.matrix * inv_root;
    let devs = forecast.deviations();
    Ensemble::new(broadcast(&mean, forecast.member_count()) + transform * devs)
}

/// EAKF adjusting through observation space with the secondary gain
/// `Ktilde = C_vh [(C_hh + Gamma) + Gamma^{1/2} (C_hh + Gamma)^{1/2}]^{-1}`.
pub fn eakf_obs_analysis(
    obs: &ObservationModel,
    forecast: &Ensemble,
    y_obs: &DVector<f64>,
    scaling: CovScaling,
) -> Result<Ensemble> {
    if forecast.member_count() < 2 {
        return Err(Error::TooFewMembers { got: forecast.member_count(), need: 2 });
    }
    let images = observe_ensemble(obs, forecast)?;
    let (mean, _, _) = analysis_mean(obs, forecast, &images, y_obs, scaling)?;
    let k_tilde = secondary_gain(obs, forecast, &images, scaling)?;
    let devs = forecast.deviations();
    let h_devs = images.deviations();
    Ensemble::new(broadcast(&mean, forecast.member_count()) + devs - k_tilde * h_devs)
}

/// The deterministic-map gain of the observation-space adjustment filter.
pub fn secondary_gain(
    obs: &ObservationModel,
    forecast: &Ensemble,
    images: &Ensemble,
    scaling: CovScaling,
) -> Result<DMatrix<f64>> {
    let c_vh = cross_covariance(forecast, images, scaling)?;
    let c_hh = empirical_moments(images, scaling)?.cov;
    let s = symmetrize(&(&c_hh + &obs.noise_cov));
    let gamma_sqrt = psd_sqrt(&obs.noise_cov)?.matrix;
    let s_sqrt = psd_sqrt(&s)?.matrix;
    // Y = (C_hh + Gamma) + Gamma^{1/2} (C_hh + Gamma)^{1/2} is not symmetric;
    // Ktilde Y = C_vh solves through Y^T.
    let denom = &s + gamma_sqrt * s_sqrt;
    let lu = denom.transpose().lu();
    lu.solve(&c_vh.transpose())
        .map(|x| x.transpose())
        .ok_or(Error::SingularDataCovariance { cond: f64::INFINITY })
}

/// `J x J` transform weights realizing the full ETKF update, kept in factored
/// form so large ensembles never materialize the dense matrix.
#[derive(Debug, Clone)]
pub struct EtkfWeights {
    members: usize,
    /// Mean-shift weights `b` (deviation combination producing the mean move).
    b: DVector<f64>,
    /// `J x r` factor of the low-rank part of `Z`.
    v_factor: DMatrix<f64>,
    /// `(1 + lambda_i)^{-1/2} - 1` for each retained mode.
    z_diag: DVector<f64>,
}

impl EtkfWeights {
    /// Applies `Z` (right transform) to a deviation matrix.
    fn apply_z(&self, devs: &DMatrix<f64>) -> DMatrix<f64> {
        let dv = devs * &self.v_factor; // d x r
        let scaled = dv * DMatrix::from_diagonal(&self.z_diag); // d x r
        devs + scaled * self.v_factor.transpose()
    }

    /// Dense `S` with columns summing to one; intended for small ensembles.
    pub fn dense(&self) -> DMatrix<f64> {
        let j = self.members;
        let jf = j as f64;
        let z = {
            let eye = DMatrix::identity(j, j);
            let low = &self.v_factor * DMatrix::from_diagonal(&self.z_diag) * self.v_factor.transpose();
            eye + low
        };
        let b_mean = self.b.sum() / jf;
        let mut s = DMatrix::zeros(j, j);
        for col in 0..j {
            let col_mean = z.column(col).sum() / jf;
            for row in 0..j {
                s[(row, col)] = 1.0 / jf + (self.b[row] - b_mean) + (z[(row, col)] - col_mean);
            }
        }
        s
    }

    pub fn member_count(&self) -> usize {
        self.members
    }
}

/// ETKF analysis. Returns the updated ensemble together with the transform
/// weights that realize the whole update as `v_j = sum_i vhat_i S_ij`.
pub fn etkf_analysis(
    obs: &ObservationModel,
    forecast: &Ensemble,
    y_obs: &DVector<f64>,
    scaling: CovScaling,
) -> Result<(Ensemble, EtkfWeights)> {
    let j = forecast.member_count();
    if j < 2 {
        return Err(Error::TooFewMembers { got: j, need: 2 });
    }
    let images = observe_ensemble(obs, forecast)?;
    let denom = scaling.denominator(j).sqrt();
    let devs = forecast.deviations();
    let h_devs = images.deviations() / denom; // scaled: Hhat
    let h_mean = images.mean();

    // Spectral shortcut: the nonzero eigenpairs of Hhat^T Gamma^{-1} Hhat come
    // from the small d_y x d_y Gram matrix.
    let gamma_chol = nalgebra::Cholesky::new(obs.noise_cov.clone())
        .ok_or(Error::SingularDataCovariance { cond: f64::INFINITY })?;
    let gamma_inv_sqrt = psd_inv_sqrt(&obs.noise_cov)?.0;
    let b_mat = &gamma_inv_sqrt * &h_devs; // d_y x J
    let gram = symmetrize(&(&b_mat * b_mat.transpose()));
    let eig = nalgebra::SymmetricEigen::new(gram);
    let tol = 1e-14 * eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let mut modes: Vec<(f64, DVector<f64>)> = vec![];
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > tol {
            let u = eig.eigenvectors.column(i).into_owned();
            let v = (b_mat.transpose() * u) / lambda.sqrt(); // J-vector, unit norm
            modes.push((lambda, v));
        }
    }
    let r = modes.len();
    let mut v_factor = DMatrix::zeros(j, r.max(1));
    let mut z_diag = DVector::zeros(r.max(1));
    let mut z2_diag = DVector::zeros(r.max(1));
    for (i, (lambda, v)) in modes.iter().enumerate() {
        v_factor.set_column(i, v);
        z_diag[i] = (1.0 + lambda).powf(-0.5) - 1.0;
        z2_diag[i] = (1.0 + lambda).recip() - 1.0;
    }

    // Gain K = Vhat Z^2 Hhat^T Gamma^{-1} applied to the control innovation.
    let innovation = gamma_chol.solve(&(y_obs - &h_mean));
    let ht_inn = h_devs.transpose() * innovation; // J-vector
    let z2_ht_inn = {
        let low = &v_factor * DMatrix::from_diagonal(&z2_diag) * (v_factor.transpose() * &ht_inn);
        ht_inn + low
    };
    let b = &z2_ht_inn / denom; // deviation weights for the mean shift
    let mean = forecast.mean() + (&devs * &b);

    let weights = EtkfWeights { members: j, b, v_factor, z_diag };
    let new_devs = weights.apply_z(&devs);
    let ensemble = Ensemble::new(broadcast(&mean, j) + new_devs)?;
    Ok((ensemble, weights))
}

pub fn eakf_state_step(
    dynamics: &DynamicsModel,
    obs: &ObservationModel,
    e: &Ensemble,
    y_obs: &DVector<f64>,
    stream: &SeededStream,
    step: u64,
) -> Result<Ensemble> {
    let forecast = forecast_ensemble(dynamics, e, stream, step)?;
    eakf_state_analysis(obs, &forecast, y_obs, CovScaling::default(), false)
}

pub fn eakf_obs_step(
    dynamics: &DynamicsModel,
    obs: &ObservationModel,
    e: &Ensemble,
    y_obs: &DVector<f64>,
    stream: &SeededStream,
    step: u64,
) -> Result<Ensemble> {
    let forecast = forecast_ensemble(dynamics, e, stream, step)?;
    eakf_obs_analysis(obs, &forecast, y_obs, CovScaling::default())
}

pub fn etkf_step(
    dynamics: &DynamicsModel,
    obs: &ObservationModel,
    e: &Ensemble,
    y_obs: &DVector<f64>,
    stream: &SeededStream,
    step: u64,
) -> Result<(Ensemble, EtkfWeights)> {
    let forecast = forecast_ensemble(dynamics, e, stream, step)?;
    etkf_analysis(obs, &forecast, y_obs, CovScaling::default())
}
