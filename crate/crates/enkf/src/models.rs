//! Dynamical and observation models: Lorenz '96 singlescale and multiscale,
//! linear systems, the RK4 flow map, and the 9-to-6 selection observation
//! with its matching gain.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::psd_sqrt;

/// Blow-up threshold for flow maps.
pub const BLOWUP_LIMIT: f64 = 1e6;

/// Scalar closure applied componentwise to the slow state.
#[derive(Debug, Clone, PartialEq)]
pub enum Closure {
    Zero,
    /// `c[0] + c[1] x + c[2] x^2 + c[3] x^3`
    Cubic([f64; 4]),
}

impl Closure {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Closure::Zero => 0.0,
            Closure::Cubic(c) => c[0] + x * (c[1] + x * (c[2] + x * c[3])),
        }
    }

    /// The cubic fitted once per process from the multiscale model at its
    /// default parameters.
    pub fn default_cubic() -> Closure {
        static FIT: OnceLock<[f64; 4]> = OnceLock::new();
        let coeffs = FIT.get_or_init(|| {
            let p = L96MultiscaleParams::default();
            let grid: Vec<f64> = (0..26).map(|k| -10.0 + k as f64).collect();
            match fit_default_closure(&p, &grid, 5.0) {
                Ok(Closure::Cubic(c)) => c,
                _ => unreachable!("default closure fit failed"),
            }
        });
        Closure::Cubic(*coeffs)
    }
}

/// Singlescale Lorenz '96 parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct L96Params {
    pub l: usize,
    pub f: f64,
    pub h_v: f64,
    pub closure: Closure,
}

impl L96Params {
    pub fn new(l: usize, f: f64, h_v: f64, closure: Closure) -> Result<Self> {
        if l < 4 {
            return Err(Error::Config(format!("L96 needs L >= 4, got {l}")));
        }
        Ok(Self { l, f, h_v, closure })
    }
}

impl Default for L96Params {
    /// L = 9, F = 10, h_v = -0.8 with the fitted cubic closure.
    fn default() -> Self {
        Self { l: 9, f: 10.0, h_v: -0.8, closure: Closure::default_cubic() }
    }
}

/// Multiscale Lorenz '96 parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L96MultiscaleParams {
    pub l: usize,
    pub j: usize,
    pub eps: f64,
    pub h_v: f64,
    pub h_w: f64,
    pub f: f64,
}

impl L96MultiscaleParams {
    pub fn new(l: usize, j: usize, eps: f64, h_v: f64, h_w: f64, f: f64) -> Result<Self> {
        if l < 4 || j < 4 {
            return Err(Error::Config(format!("multiscale L96 needs L, J >= 4, got L={l}, J={j}")));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("scale separation must be positive, got {eps}")));
        }
        Ok(Self { l, j, eps, h_v, h_w, f })
    }
}

impl Default for L96MultiscaleParams {
    /// L = 9, J = 8, h_v = -0.8, h_w = 1, F = 10, eps = 2^-7.
    fn default() -> Self {
        Self { l: 9, j: 8, eps: 2f64.powi(-7), h_v: -0.8, h_w: 1.0, f: 10.0 }
    }
}

/// Lorenz '96 right-hand side with cyclic indices.
pub fn l96_vector_field(p: &L96Params, v: &DVector<f64>) -> Result<DVector<f64>> {
    let l = p.l;
    if v.len() != l {
        return Err(Error::DimensionMismatch { expected: l, got: v.len() });
    }
    let idx = |i: isize| -> f64 { v[(i.rem_euclid(l as isize)) as usize] };
    Ok(DVector::from_fn(l, |ell, _| {
        let i = ell as isize;
        -idx(i - 1) * (idx(i - 2) - idx(i + 1)) - v[ell] + p.f + p.h_v * p.closure.eval(v[ell])
    }))
}

fn fast_at(w: &DMatrix<f64>, ell: isize, j: isize) -> f64 {
    // Boundary conditions: w_{l+L,j} = w_{l,j}, w_{l,j+J} = w_{l+1,j}.
    let l = w.nrows() as isize;
    let jj = w.ncols() as isize;
    let mut ell = ell;
    let mut j = j;
    while j >= jj {
        j -= jj;
        ell += 1;
    }
    while j < 0 {
        j += jj;
        ell -= 1;
    }
    w[(ell.rem_euclid(l) as usize, j as usize)]
}

/// Multiscale Lorenz '96 right-hand side; `w` is `L x J` (row = slow index).
pub fn l96ms_vector_field(
    p: &L96MultiscaleParams,
    v: &DVector<f64>,
    w: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if v.len() != p.l {
        return Err(Error::DimensionMismatch { expected: p.l, got: v.len() });
    }
    if w.nrows() != p.l || w.ncols() != p.j {
        return Err(Error::DimensionMismatch { expected: p.l * p.j, got: w.nrows() * w.ncols() });
    }
    let idx = |i: isize| -> f64 { v[(i.rem_euclid(p.l as isize)) as usize] };
    let slow = DVector::from_fn(p.l, |ell, _| {
        let i = ell as isize;
        let wbar = w.row(ell).sum() / p.j as f64;
        -idx(i - 1) * (idx(i - 2) - idx(i + 1)) - v[ell] + p.f + p.h_v * wbar
    });
    let fast = DMatrix::from_fn(p.l, p.j, |ell, j| {
        let (ei, ji) = (ell as isize, j as isize);
        let r = -fast_at(w, ei, ji + 1) * (fast_at(w, ei, ji + 2) - fast_at(w, ei, ji - 1))
            - w[(ell, j)]
            + p.h_w * v[ell];
        r / p.eps
    });
    Ok((slow, fast))
}

/// Classical fourth-order Runge-Kutta over `[0, tau]` with fixed inner step.
pub fn rk4_flow<F>(field: F, v0: &DVector<f64>, tau: f64, dt_inner: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    if tau <= 0.0 || dt_inner <= 0.0 {
        return Err(Error::StepMismatch { interval: tau, dt: dt_inner });
    }
    let n = (tau / dt_inner).round() as usize;
    if n == 0 || (n as f64 * dt_inner - tau).abs() > 1e-9 * tau.max(dt_inner) {
        return Err(Error::StepMismatch { interval: tau, dt: dt_inner });
    }
    let dt = tau / n as f64;
    let mut v = v0.clone();
    for _ in 0..n {
        let k1 = field(&v);
        let k2 = field(&(&v + &k1 * (dt / 2.0)));
        let k3 = field(&(&v + &k2 * (dt / 2.0)));
        let k4 = field(&(&v + &k3 * dt));
        v += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        if v.amax() > BLOWUP_LIMIT || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { what: "rk4 flow state" });
        }
    }
    Ok(v)
}

/// Reusable stage buffers for the in-place Lorenz '96 RK4 flow.
#[derive(Debug, Clone)]
pub struct L96Scratch {
    k: [Vec<f64>; 4],
    stage: Vec<f64>,
}

impl L96Scratch {
    pub fn new(l: usize) -> Self {
        Self {
            k: [vec![0.0; l], vec![0.0; l], vec![0.0; l], vec![0.0; l]],
            stage: vec![0.0; l],
        }
    }
}

/// In-place, allocation-free Lorenz '96 RK4 flow over `[0, tau]`.
///
/// Matches `rk4_flow` over `l96_vector_field` to rounding.
pub fn l96_flow_in_place(
    p: &L96Params,
    v: &mut [f64],
    tau: f64,
    dt_inner: f64,
    scratch: &mut L96Scratch,
) -> Result<()> {
    if tau <= 0.0 || dt_inner <= 0.0 {
        return Err(Error::StepMismatch { interval: tau, dt: dt_inner });
    }
    let n = (tau / dt_inner).round() as usize;
    if n == 0 || (n as f64 * dt_inner - tau).abs() > 1e-9 * tau.max(dt_inner) {
        return Err(Error::StepMismatch { interval: tau, dt: dt_inner });
    }
    let dt = tau / n as f64;
    let l = p.l;
    if v.len() != l || scratch.stage.len() != l {
        return Err(Error::DimensionMismatch { expected: l, got: v.len() });
    }
    let field = |state: &[f64], out: &mut [f64]| {
        for i in 0..l {
            let im1 = state[(i + l - 1) % l];
            let im2 = state[(i + l - 2) % l];
            let ip1 = state[(i + 1) % l];
            out[i] = -im1 * (im2 - ip1) - state[i] + p.f + p.h_v * p.closure.eval(state[i]);
        }
    };
    for _ in 0..n {
        let [k1, k2, k3, k4] = &mut scratch.k;
        let stage = &mut scratch.stage;
        field(v, k1);
        for i in 0..l {
            stage[i] = v[i] + 0.5 * dt * k1[i];
        }
        field(stage, k2);
        for i in 0..l {
            stage[i] = v[i] + 0.5 * dt * k2[i];
        }
        field(stage, k3);
        for i in 0..l {
            stage[i] = v[i] + dt * k3[i];
        }
        field(stage, k4);
        let mut sup = 0.0f64;
        for i in 0..l {
            v[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            sup = sup.max(v[i].abs());
        }
        if !(sup <= BLOWUP_LIMIT) {
            return Err(Error::NonFinite { what: "l96 flow state" });
        }
    }
    Ok(())
}

/// Lorenz '96 RK4 flow returning a fresh state vector.
pub fn l96_flow(p: &L96Params, v0: &DVector<f64>, tau: f64, dt_inner: f64) -> Result<DVector<f64>> {
    let mut v: Vec<f64> = v0.iter().copied().collect();
    let mut scratch = L96Scratch::new(p.l);
    l96_flow_in_place(p, &mut v, tau, dt_inner, &mut scratch)?;
    Ok(DVector::from_vec(v))
}

/// Time-averages the frozen-`v` fast subsystem on a grid of slow values and
/// fits a cubic to the averages.
pub fn fit_default_closure(
    p: &L96MultiscaleParams,
    v_grid: &[f64],
    t_avg: f64,
) -> Result<Closure> {
    // The fast ring needs roughly 0.025 fast-time units per RK4 step to stay
    // stable at the largest forcings on the grid.
    let dt = p.eps / 40.0;
    let steps = (t_avg / dt).ceil() as usize;
    let burn = steps / 5;
    let mut xs = Vec::with_capacity(v_grid.len());
    let mut ys = Vec::with_capacity(v_grid.len());
    for &x in v_grid {
        let v = DVector::from_element(p.l, x);
        // Deterministic perturbed start near the linear equilibrium.
        let mut w = DMatrix::from_fn(p.l, p.j, |ell, j| {
            p.h_w * x + 0.01 * ((ell * p.j + j) as f64 + 1.0).sin()
        });
        let mut acc = 0.0;
        let mut count = 0usize;
        for step in 0..steps {
            let (_, fast) = l96ms_vector_field(p, &v, &w)?;
            // RK4 on the fast block alone (v frozen).
            let k1 = fast;
            let k2 = l96ms_vector_field(p, &v, &(&w + &k1 * (dt / 2.0)))?.1;
            let k3 = l96ms_vector_field(p, &v, &(&w + &k2 * (dt / 2.0)))?.1;
            let k4 = l96ms_vector_field(p, &v, &(&w + &k3 * dt))?.1;
            w += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
            if w.amax() > BLOWUP_LIMIT || w.iter().any(|e| !e.is_finite()) {
                return Err(Error::NonFinite { what: "fast subsystem state" });
            }
            if step >= burn {
                acc += w.sum() / (p.l * p.j) as f64;
                count += 1;
            }
        }
        xs.push(x);
        ys.push(acc / count as f64);
    }
    // Cubic least squares via the normal equations on the Vandermonde system.
    let vand = DMatrix::from_fn(xs.len(), 4, |r, c| xs[r].powi(c as i32));
    let rhs = DVector::from_vec(ys);
    let gram = vand.transpose() * &vand;
    let coeffs = gram
        .lu()
        .solve(&(vand.transpose() * rhs))
        .ok_or(Error::SingularForward)?;
    Ok(Closure::Cubic([coeffs[0], coeffs[1], coeffs[2], coeffs[3]]))
}

/// The 9-state observation operator selecting components (1,2,4,5,7,8) and
/// the gain placing data back into those slots.
pub fn l96_observation() -> (DMatrix<f64>, DMatrix<f64>) {
    let observed = [0usize, 1, 3, 4, 6, 7];
    let mut h = DMatrix::zeros(6, 9);
    let mut k = DMatrix::zeros(9, 6);
    for (row, &col) in observed.iter().enumerate() {
        h[(row, col)] = 1.0;
        k[(col, row)] = 1.0;
    }
    (h, k)
}

type FlowFn = Arc<dyn Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync>;
type ObsFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

fn diagonal_of(m: &DMatrix<f64>) -> Option<DVector<f64>> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i != j && m[(i, j)] != 0.0 {
                return None;
            }
        }
    }
    Some(m.diagonal())
}

fn add_scaled_noise(out: &mut DMatrix<f64>, sqrt: &DMatrix<f64>, diag: &Option<DVector<f64>>, xi: &DMatrix<f64>) {
    match diag {
        Some(d) => {
            let n = d.len();
            for (ocol, xcol) in out
                .as_mut_slice()
                .chunks_exact_mut(n)
                .zip(xi.as_slice().chunks_exact(n))
            {
                for i in 0..n {
                    ocol[i] += d[i] * xcol[i];
                }
            }
        }
        None => *out += sqrt * xi,
    }
}

#[derive(Clone)]
enum FlowKind {
    Linear(DMatrix<f64>),
    L96 { params: L96Params, tau: f64, dt_inner: f64 },
    Generic(FlowFn),
}

/// Flow map plus process noise covariance.
#[derive(Clone)]
pub struct DynamicsModel {
    kind: FlowKind,
    pub process_noise_cov: DMatrix<f64>,
    noise_sqrt: DMatrix<f64>,
    noise_sqrt_diag: Option<DVector<f64>>,
}

impl DynamicsModel {
    pub fn from_flow<F>(flow: F, process_noise_cov: DMatrix<f64>) -> Result<Self>
    where
        F: Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync + 'static,
    {
        let noise_sqrt = psd_sqrt(&process_noise_cov)?.matrix;
        let noise_sqrt_diag = diagonal_of(&noise_sqrt);
        Ok(Self { kind: FlowKind::Generic(Arc::new(flow)), process_noise_cov, noise_sqrt, noise_sqrt_diag })
    }

    pub fn linear(m: DMatrix<f64>, process_noise_cov: DMatrix<f64>) -> Result<Self> {
        let noise_sqrt = psd_sqrt(&process_noise_cov)?.matrix;
        let noise_sqrt_diag = diagonal_of(&noise_sqrt);
        Ok(Self { kind: FlowKind::Linear(m), process_noise_cov, noise_sqrt, noise_sqrt_diag })
    }

    /// Lorenz '96 solution operator over interval `tau`.
    ///
    /// The inner step is `min(tau, 1e-3)`.
    pub fn l96(params: L96Params, tau: f64, process_noise_cov: DMatrix<f64>) -> Result<Self> {
        let dt_inner = pick_inner_step(tau, 1e-3);
        let noise_sqrt = psd_sqrt(&process_noise_cov)?.matrix;
        let noise_sqrt_diag = diagonal_of(&noise_sqrt);
        Ok(Self { kind: FlowKind::L96 { params, tau, dt_inner }, process_noise_cov, noise_sqrt, noise_sqrt_diag })
    }

    /// The transition matrix when the flow is linear.
    pub fn linear_matrix(&self) -> Option<&DMatrix<f64>> {
        match &self.kind {
            FlowKind::Linear(m) => Some(m),
            _ => None,
        }
    }

    pub fn flow(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.kind {
            FlowKind::Linear(m) => Ok(m * v),
            FlowKind::L96 { params, tau, dt_inner } => l96_flow(params, v, *tau, *dt_inner),
            FlowKind::Generic(f) => f(v),
        }
    }

    /// Flow of every column: one matrix product for linear dynamics, a
    /// member-parallel in-place sweep for Lorenz '96, a per-column map
    /// otherwise. Bit-identical at any thread count.
    pub fn flow_matrix(&self, members: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        use rayon::prelude::*;
        match &self.kind {
            FlowKind::Linear(m) => Ok(crate::gaussian::apply_small(m, members)),
            FlowKind::L96 { params, tau, dt_inner } => {
                let l = params.l;
                let mut out = members.clone();
                let results: Vec<Result<()>> = out
                    .as_mut_slice()
                    .par_chunks_mut(l)
                    .map_init(
                        || L96Scratch::new(l),
                        |scratch, col| l96_flow_in_place(params, col, *tau, *dt_inner, scratch),
                    )
                    .collect();
                for r in results {
                    r?;
                }
                Ok(out)
            }
            FlowKind::Generic(f) => {
                let cols: Result<Vec<DVector<f64>>> = (0..members.ncols())
                    .into_par_iter()
                    .map(|k| f(&members.column(k).into_owned()))
                    .collect();
                Ok(DMatrix::from_columns(&cols?))
            }
        }
    }

    pub fn noise_sqrt(&self) -> &DMatrix<f64> {
        &self.noise_sqrt
    }

    /// `out += noise_sqrt * xi`, streamed when the root is diagonal.
    pub fn add_noise(&self, out: &mut DMatrix<f64>, xi: &DMatrix<f64>) {
        add_scaled_noise(out, &self.noise_sqrt, &self.noise_sqrt_diag, xi);
    }

    pub fn dim(&self) -> usize {
        self.process_noise_cov.nrows()
    }
}

/// Observation map plus strictly positive-definite noise covariance.
#[derive(Clone)]
pub struct ObservationModel {
    h: ObsFn,
    pub noise_cov: DMatrix<f64>,
    noise_sqrt: DMatrix<f64>,
    noise_sqrt_diag: Option<DVector<f64>>,
    pub linear: Option<DMatrix<f64>>,
    dim_y: usize,
}

impl ObservationModel {
    pub fn nonlinear<F>(h: F, dim_y: usize, noise_cov: DMatrix<f64>) -> Result<Self>
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        if nalgebra::Cholesky::new(noise_cov.clone()).is_none() {
            return Err(Error::NotPsd { min_eig: f64::NAN, tol: 0.0 });
        }
        let noise_sqrt = psd_sqrt(&noise_cov)?.matrix;
        let noise_sqrt_diag = diagonal_of(&noise_sqrt);
        Ok(Self { h: Arc::new(h), noise_cov, noise_sqrt, noise_sqrt_diag, linear: None, dim_y })
    }

    pub fn linear(h: DMatrix<f64>, noise_cov: DMatrix<f64>) -> Result<Self> {
        let dim_y = h.nrows();
        if nalgebra::Cholesky::new(noise_cov.clone()).is_none() {
            return Err(Error::NotPsd { min_eig: f64::NAN, tol: 0.0 });
        }
        let noise_sqrt = psd_sqrt(&noise_cov)?.matrix;
        let noise_sqrt_diag = diagonal_of(&noise_sqrt);
        let mat = h.clone();
        Ok(Self {
            h: Arc::new(move |v| &mat * v),
            noise_cov,
            noise_sqrt,
            noise_sqrt_diag,
            linear: Some(h),
            dim_y,
        })
    }

    pub fn observe(&self, v: &DVector<f64>) -> DVector<f64> {
        (self.h)(v)
    }

    /// Observation images of every column, using one matrix product when the
    /// operator is linear.
    pub fn observe_matrix(&self, members: &DMatrix<f64>) -> DMatrix<f64> {
        if let Some(h) = &self.linear {
            return crate::gaussian::apply_small(h, members);
        }
        let mut out = DMatrix::zeros(self.dim_y, members.ncols());
        for (j, col) in members.column_iter().enumerate() {
            out.set_column(j, &(self.h)(&col.into_owned()));
        }
        out
    }

    pub fn noise_sqrt(&self) -> &DMatrix<f64> {
        &self.noise_sqrt
    }

    /// `out += noise_sqrt * eta`, streamed when the root is diagonal.
    pub fn add_noise(&self, out: &mut DMatrix<f64>, eta: &DMatrix<f64>) {
        add_scaled_noise(out, &self.noise_sqrt, &self.noise_sqrt_diag, eta);
    }

    pub fn dim_y(&self) -> usize {
        self.dim_y
    }
}

/// Largest step `<= dt_max` that divides `tau` into an integer number of steps.
pub fn pick_inner_step(tau: f64, dt_max: f64) -> f64 {
    if tau <= dt_max {
        return tau;
    }
    let n = (tau / dt_max).ceil();
    tau / n
}
