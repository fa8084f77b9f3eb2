//! Second variation of the quantum Lagrangian and the minimum-Fisher ground
//! state.

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::dynamics::{quantum_lagrangian, stationary_trajectory, DynamicsError, Model};
use crate::fields::{DensityFloor, FieldsError, HydroState, PhysParams};
use crate::grid::{Boundary, Grid, GridError, RealField};

/// Stationarity required of the state handed to [`second_variation`].
pub const STATIONARY_TOL: f64 = 1e-6;
/// Largest admissible `|∫δP|`.
pub const MEAN_FREE_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum VariationError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Fields(#[from] FieldsError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("state is not stationary: max |dH/dP - E| = {residual:e}")]
    NotStationary { residual: f64 },
    #[error("perturbation is not mean-free: integral {integral:e}")]
    NotMeanFree { integral: f64 },
    #[error("perturbation does not vanish at the boundary ({value:e})")]
    BoundaryNotZero { value: f64 },
    #[error("P + eps*dP is not positive at node {index}")]
    FloorViolation { index: usize },
    #[error("epsilon must be finite and non-zero")]
    BadEpsilon,
    #[error("no convergence after {iterations} iterations (best energy {energy})")]
    NonConvergence { iterations: usize, energy: f64, best: Box<GroundState> },
    #[error("non-finite gradient at iteration {0}")]
    NanGradient(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariationReport {
    pub epsilon: f64,
    pub delta_l_measured: f64,
    pub delta_l_closed_form: f64,
    pub residual: f64,
}

/// Lagrange multiplier `E = ∫P·δℋ/δP` and the worst deviation from it over
/// nodes with `P > 1e-6·max P` (including `|δℋ/δS|`).
pub fn stationarity(state: &HydroState, params: &PhysParams) -> Result<(f64, f64), VariationError> {
    let model = Model::new(state.grid(), params)?;
    let (p, s) = (state.p().values(), state.s().values());
    let ev = model.evaluate(p, s);
    let e: f64 = (0..p.len()).map(|k| model.lat.w[k] * p[k] * ev.dh_dp[k]).sum::<f64>()
        / model.lat.w.iter().zip(p).map(|(w, p)| w * p).sum::<f64>();
    let cut = 1e-6 * state.p().max_value();
    let dev = (0..p.len())
        .filter(|&k| p[k] > cut)
        .map(|k| (ev.dh_dp[k] - e).abs().max(ev.dh_ds[k].abs()))
        .fold(0.0, f64::max);
    Ok((e, dev))
}

/// `ΔL_QM` for `P → P + εδP` at fixed `S`, measured from [`quantum_lagrangian`]
/// over a unit time window and compared with the closed form
/// `(ε²λ/2)∫P·(1/m)(∂(δP/P))²`, whose edge discretization is the exact
/// second-order term of the discrete Fisher functional.
pub fn second_variation(
    state: &HydroState,
    delta_p: &RealField,
    epsilon: f64,
    params: &PhysParams,
) -> Result<VariationReport, VariationError> {
    if !(epsilon.is_finite() && epsilon != 0.0) {
        return Err(VariationError::BadEpsilon);
    }
    state.p().same_grid(delta_p)?;
    let (energy, residual) = stationarity(state, params)?;
    if residual > STATIONARY_TOL {
        return Err(VariationError::NotStationary { residual });
    }
    let integral = delta_p.integrate()?;
    if integral.abs() > MEAN_FREE_TOL {
        return Err(VariationError::NotMeanFree { integral });
    }
    let dp = delta_p.values();
    let grid = state.grid();
    if grid.bc() == Boundary::Dirichlet {
        let scale = dp.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let edge = dp[0].abs().max(dp[dp.len() - 1].abs());
        if edge > 1e-8 * scale {
            return Err(VariationError::BoundaryNotZero { value: edge });
        }
    }
    let perturbed = state.p().zip_map(delta_p, |p, d| p + epsilon * d)?;
    if let Some(index) = perturbed.values().iter().position(|&v| !(v > 0.0)) {
        return Err(VariationError::FloorViolation { index });
    }
    let moved = HydroState::with_checks(perturbed, state.s().clone(), DensityFloor::Absolute(0.0), f64::INFINITY)?;

    let l0 = quantum_lagrangian(&stationary_trajectory(state, energy, 1.0)?, params)?;
    let l1 = quantum_lagrangian(&stationary_trajectory(&moved, energy, 1.0)?, params)?;
    let measured = l1 - l0;

    let model = Model::new(grid, params)?;
    let p = state.p().values();
    let h = model.lat.h;
    let closed: f64 = model
        .lat
        .edges()
        .map(|(i, j)| {
            let dr = (dp[j] / p[j] - dp[i] / p[i]) / h;
            h * (p[i] * p[j]).sqrt() * dr * dr
        })
        .sum::<f64>()
        * 0.5
        * epsilon
        * epsilon
        * params.lambda
        * params.inverse_metric();
    Ok(VariationReport {
        epsilon,
        delta_l_measured: measured,
        delta_l_closed_form: closed,
        residual: (measured - closed).abs(),
    })
}

/// Result of [`minimize_ground_state`].
#[derive(Debug, Clone, PartialEq)]
pub struct GroundState {
    pub p: RealField,
    pub energy: f64,
    pub iterations: usize,
    /// Energy after each accepted step, starting with the initial guess.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct MinimizeOptions {
    /// Stop when the relative energy change of an accepted step drops below
    /// this and the stationarity residual is below `stationarity_tol`.
    pub rel_tol: f64,
    /// Bound on `max|δℋ/δP − E|` over nodes with `P > 1e-6·max P`. Energy
    /// differences stop resolving the tails long before this is met.
    pub stationarity_tol: f64,
    pub max_iterations: usize,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self { rel_tol: 1e-12, stationarity_tol: 1e-6, max_iterations: 100_000 }
    }
}

pub fn minimize_ground_state(
    params: &PhysParams,
    grid: &Grid,
    init: &RealField,
) -> Result<GroundState, VariationError> {
    minimize_ground_state_with(params, grid, init, MinimizeOptions::default())
}

/// Projected gradient descent on `a = √P` for `ℋ[a², S = 0]` with `Σwa² = 1`.
///
/// The weighted gradient is `2a·δℋ/δP`, projected onto the tangent of the
/// constraint. Each line search starts from the Barzilai–Borwein step and
/// halves it until the energy does not increase, so accepted energies never
/// rise.
pub fn minimize_ground_state_with(
    params: &PhysParams,
    grid: &Grid,
    init: &RealField,
    opts: MinimizeOptions,
) -> Result<GroundState, VariationError> {
    init.same_grid(&RealField::constant(grid, 0.0)?)?;
    let model = Model::new(grid, params)?;
    let w = &model.lat.w;
    let n = grid.len();
    let zeros = vec![0.0; n];
    let normalize = |a: &mut Vec<f64>| {
        let norm = w.iter().zip(a.iter()).map(|(w, a)| w * a * a).sum::<f64>().sqrt();
        a.iter_mut().for_each(|v| *v /= norm);
    };
    let mut a: Vec<f64> = init.values().iter().map(|&v| v.max(0.0).sqrt()).collect();
    if a.iter().all(|&v| v == 0.0) || a.iter().any(|v| !v.is_finite()) {
        return Err(FieldsError::DegenerateDensity.into());
    }
    normalize(&mut a);
    let square = |a: &[f64]| a.iter().map(|v| v * v).collect::<Vec<f64>>();

    let mut ev = model.evaluate(&square(&a), &zeros);
    let mut energy = ev.energy;
    let mut history = vec![energy];
    // a safe first step: the largest frequency is ≈ 4λ/(m h²) + max V
    let vmax = model.v.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut tau = 0.25 / (8.0 * params.lambda * params.inverse_metric() / (model.lat.h * model.lat.h) + vmax + 1.0);
    let mut iterations = 0;
    let finish = |a: &[f64], energy: f64, iterations: usize, history: Vec<f64>| -> Result<GroundState, VariationError> {
        Ok(GroundState { p: RealField::new(grid.clone(), square(a))?, energy, iterations, history })
    };

    let residual = |a: &[f64], dh_dp: &[f64]| {
        let e: f64 = (0..n).map(|k| w[k] * a[k] * a[k] * dh_dp[k]).sum();
        let cut = 1e-6 * a.iter().fold(0.0f64, |m, v| m.max(v * v));
        (0..n).filter(|&k| a[k] * a[k] > cut).map(|k| (dh_dp[k] - e).abs()).fold(0.0, f64::max)
    };
    let mut previous: Option<(Vec<f64>, Vec<f64>)> = None;
    while iterations < opts.max_iterations {
        iterations += 1;
        let mut g: Vec<f64> = (0..n).map(|k| 2.0 * a[k] * ev.dh_dp[k]).collect();
        if g.iter().any(|v| !v.is_finite()) {
            return Err(VariationError::NanGradient(iterations));
        }
        let along: f64 = (0..n).map(|k| w[k] * g[k] * a[k]).sum();
        for k in 0..n {
            g[k] -= along * a[k];
        }
        if let Some((a_prev, g_prev)) = &previous {
            let (mut ss, mut sy) = (0.0, 0.0);
            for k in 0..n {
                let (ds, dg) = (a[k] - a_prev[k], g[k] - g_prev[k]);
                ss += w[k] * ds * ds;
                sy += w[k] * ds * dg;
            }
            if sy > 0.0 && (ss / sy).is_finite() {
                tau = ss / sy;
            }
        }
        let gg: f64 = (0..n).map(|k| w[k] * g[k] * g[k]).sum();
        let curvature = model.static_form(&g, &g) - energy * gg;
        loop {
            let raw: Vec<f64> = (0..n).map(|k| a[k] - tau * g[k]).collect();
            let mut trial: Vec<f64> = raw.iter().map(|v| v.abs()).collect();
            normalize(&mut trial);
            let tev = model.evaluate(&square(&trial), &zeros);
            // E(a − τg) − E(a) for the Rayleigh quotient with ⟨a, g⟩ = 0;
            // the direct difference of energies loses it to round-off
            let change = if raw.iter().all(|&v| v >= 0.0) {
                (-tau * gg + tau * tau * curvature) / (1.0 + tau * tau * gg)
            } else {
                tev.energy - energy
            };
            if change <= 0.0 {
                previous = Some((std::mem::replace(&mut a, trial), g));
                ev = tev;
                energy += change;
                history.push(energy);
                if -change < opts.rel_tol * energy.abs() && residual(&a, &ev.dh_dp) <= opts.stationarity_tol {
                    return finish(&a, ev.energy, iterations, history);
                }
                break;
            }
            tau *= 0.5;
            if tau < 1e-300 {
                // stalled: no step keeps the energy from rising
                let best = finish(&a, ev.energy, iterations, history)?;
                return Err(VariationError::NonConvergence { iterations, energy, best: Box::new(best) });
            }
        }
    }
    let best = finish(&a, energy, iterations, history)?;
    Err(VariationError::NonConvergence { iterations, energy, best: Box::new(best) })
}

/// Lowest `count` eigenpairs of the discrete Hamiltonian at `S = 0`, i.e. of
/// `K a = E W a` with `ℋ[a², 0] = aᵀKa` and `W` the quadrature weights.
/// Densities `a²` are normalized; the ground-state amplitude is made positive.
pub fn eigensolve(params: &PhysParams, grid: &Grid, count: usize) -> Result<Vec<(f64, RealField)>, VariationError> {
    let model = Model::new(grid, params)?;
    let n = grid.len();
    let w = &model.lat.w;
    let f = 2.0 * params.lambda * params.inverse_metric() / model.lat.h;
    let mut k = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = w[i] * model.v[i];
    }
    for (i, j) in model.lat.edges() {
        k[(i, i)] += f;
        k[(j, j)] += f;
        k[(i, j)] -= f;
        k[(j, i)] -= f;
    }
    let scale: Vec<f64> = w.iter().map(|w| w.sqrt().recip()).collect();
    let b = DMatrix::from_fn(n, n, |i, j| scale[i] * k[(i, j)] * scale[j]);
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
    order
        .into_iter()
        .take(count)
        .map(|idx| {
            let v = eig.eigenvectors.column(idx);
            let dens: Vec<f64> = (0..n).map(|i| (scale[i] * v[i]).powi(2)).collect();
            Ok((eig.eigenvalues[idx], RealField::new(grid.clone(), dens)?))
        })
        .collect()
}

/// Ground state of the discrete Hamiltonian from the dense eigensolve.
pub fn eigensolve_ground_state(params: &PhysParams, grid: &Grid) -> Result<(f64, RealField), VariationError> {
    Ok(eigensolve(params, grid, 1)?.remove(0))
}

/// `δP = P·(φ − ∫Pφ)` for the Gaussian bump `φ = amp·exp(−(x−c)²/2s²)`: mean-free
/// and vanishing wherever `P` does.
pub fn mean_free_bump(p: &RealField, center: f64, width: f64, amp: f64) -> Result<RealField, VariationError> {
    let phi = RealField::from_fn(p.grid(), |x, _| amp * (-(x - center).powi(2) / (2.0 * width * width)).exp())?;
    let mean = p.zip_map(&phi, |a, b| a * b)?.integrate()?;
    Ok(p.zip_map(&phi, |a, b| a * (b - mean))?)
}
