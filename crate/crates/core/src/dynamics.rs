//! Hamiltonian hydrodynamics of `(P, S)` and the reference Schrödinger
//! propagator.
//!
//! Everything here is one-dimensional. The discrete Hamiltonian lives on the
//! edges between neighbouring nodes. With `a = √P`, `q = 2√λ` and edge spacing
//! `h`,
//!
//! ```text
//! ℋ = Σᵢ wᵢ Vᵢ Pᵢ + Σₑ [ h·aᵢaⱼ·(2q/h)² sin²(ΔSₑ/2q)/2m + (2λ/m)(Δaₑ)²/h ]
//! ```
//!
//! where `wᵢ` are the quadrature weights. For small phase differences the
//! first edge term is `½P(∂S)²/m` and the second is the Fisher term
//! `(λ/2m)∫P′²/P`. When `λ = (ℏ/2)²` the sum equals
//! `(ℏ²/2m)Σₑ|Δψ|²/h + ΣwV|ψ|²` exactly, so the hydrodynamical flow and the
//! Schrödinger flow on the same grid are the same ODE written in different
//! variables. For `λ = 0` the kinetic term takes its limit `(ΔS/h)²/2m`.
//!
//! Dirichlet grids have edges only between interior neighbours (no flux
//! leaves the box); periodic grids also join the last node to the first.
//!
//! Functional derivatives follow `δF/δPᵢ = (1/wᵢ)·∂F/∂Pᵢ`, so
//! `Σ wᵢ (δF/δPᵢ) φᵢ` is the directional derivative.

use std::str::FromStr;

use num_complex::Complex64;
use thiserror::Error;

use crate::fields::{DensityFloor, FieldsError, HydroState, PhysParams, WaveFunction};
use crate::grid::{Boundary, ComplexField, Grid, GridError, RealField};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Fields(#[from] FieldsError),
    #[error("dynamics is implemented for 1D grids only, got dimension {0}")]
    UnsupportedDimension(usize),
    #[error("need at least 3 time samples, got {0}")]
    TooFewSamples(usize),
    #[error("sample times must be strictly increasing (index {0})")]
    NonMonotoneTimes(usize),
    #[error("trajectories must share one grid")]
    MixedGrids,
    #[error("invalid time step: {0}")]
    InvalidStep(String),
    #[error("non-finite or negative density at step {step} (last good step {})", .step - 1)]
    Blowup { step: usize, index: usize },
    #[error("density {density:e} fell below floor {floor:e} at node {index}, step {step}")]
    NodeFormation { step: usize, index: usize, density: f64, floor: f64 },
    #[error("singular tridiagonal system (pivot {0})")]
    SingularSystem(usize),
    #[error("unknown functional `{0}`")]
    UnknownFunctional(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Hamilton–Jacobi flow without the Fisher term (λ = 0).
    Classical,
    /// Includes the Fisher (quantum potential) term.
    Quantum,
}

/// Sampled evolution with per-sample diagnostics.
#[derive(Debug, Clone)]
pub struct Trajectory<T> {
    times: Vec<f64>,
    states: Vec<T>,
    norms: Vec<f64>,
    energies: Vec<f64>,
}

impl<T> Trajectory<T> {
    pub fn new() -> Self {
        Self { times: Vec::new(), states: Vec::new(), norms: Vec::new(), energies: Vec::new() }
    }

    /// Appends a sample; `time` must exceed the previous one.
    pub fn push(&mut self, time: f64, state: T, norm: f64, energy: f64) -> Result<(), DynamicsError> {
        if let Some(&last) = self.times.last() {
            if !(time > last) {
                return Err(DynamicsError::NonMonotoneTimes(self.times.len()));
            }
        }
        self.times.push(time);
        self.states.push(state);
        self.norms.push(norm);
        self.energies.push(energy);
        Ok(())
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[T] {
        &self.states
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Option<&T> {
        self.states.last()
    }
}

impl<T> Default for Trajectory<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `δℋ/δP` and `δℋ/δS`.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalGradient {
    pub dh_dp: RealField,
    pub dh_ds: RealField,
}

/// Node weights and edge list of a 1D grid.
#[derive(Debug, Clone)]
pub(crate) struct Lattice {
    pub(crate) n: usize,
    pub(crate) h: f64,
    pub(crate) w: Vec<f64>,
    periodic: bool,
}

impl Lattice {
    pub(crate) fn new(grid: &Grid) -> Result<Self, DynamicsError> {
        if grid.dim() != 1 {
            return Err(DynamicsError::UnsupportedDimension(grid.dim()));
        }
        Ok(Self { n: grid.len(), h: grid.dx(), w: grid.weights(), periodic: grid.bc() == Boundary::Periodic })
    }

    pub(crate) fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let count = if self.periodic { self.n } else { self.n - 1 };
        (0..count).map(move |i| (i, (i + 1) % self.n))
    }

    fn sum(&self, v: &[f64]) -> f64 {
        self.w.iter().zip(v).map(|(w, x)| w * x).sum()
    }
}

/// Edge-level kinetic discretization for a given `λ`.
#[derive(Debug, Clone, Copy)]
struct Coupling {
    q: f64,
    inv_m: f64,
    h: f64,
    fisher: f64,
}

impl Coupling {
    fn new(params: &PhysParams, h: f64) -> Self {
        let inv_m = params.inverse_metric();
        Self { q: 2.0 * params.lambda.sqrt(), inv_m, h, fisher: 2.0 * params.lambda * inv_m / h }
    }

    /// Kinetic energy per unit `aᵢaⱼ` carried by an edge.
    fn kinetic(&self, ds: f64) -> f64 {
        let g = if self.q > 0.0 { 2.0 * self.q * (ds / (2.0 * self.q)).sin() } else { ds };
        0.5 * self.inv_m * g * g / self.h
    }

    /// `∂(kinetic)/∂ΔS`.
    fn kinetic_slope(&self, ds: f64) -> f64 {
        let g = if self.q > 0.0 { self.q * (ds / self.q).sin() } else { ds };
        self.inv_m * g / self.h
    }

    /// Discrete `∫P∂S` contribution per unit `aᵢaⱼ`.
    fn momentum(&self, ds: f64) -> f64 {
        if self.q > 0.0 {
            self.q * (ds / self.q).sin()
        } else {
            ds
        }
    }

    fn momentum_slope(&self, ds: f64) -> f64 {
        if self.q > 0.0 {
            (ds / self.q).cos()
        } else {
            1.0
        }
    }
}

/// Grid, coupling and sampled potential; reused across evaluations.
#[derive(Debug, Clone)]
pub(crate) struct Model {
    pub(crate) lat: Lattice,
    c: Coupling,
    pub(crate) v: Vec<f64>,
    xs: Vec<f64>,
}

pub(crate) struct Evaluation {
    pub(crate) energy: f64,
    pub(crate) dh_dp: Vec<f64>,
    pub(crate) dh_ds: Vec<f64>,
}

impl Model {
    pub(crate) fn new(grid: &Grid, params: &PhysParams) -> Result<Self, DynamicsError> {
        let lat = Lattice::new(grid)?;
        let c = Coupling::new(params, lat.h);
        let v = params.potential_on(grid)?.into_values();
        Ok(Self { lat, c, v, xs: grid.xs() })
    }

    pub(crate) fn energy(&self, p: &[f64], s: &[f64]) -> f64 {
        let mut e = self.lat.sum(&self.v.iter().zip(p).map(|(v, p)| v * p).collect::<Vec<_>>());
        for (i, j) in self.lat.edges() {
            let (ai, aj) = (p[i].sqrt(), p[j].sqrt());
            let da = aj - ai;
            e += ai * aj * self.c.kinetic(s[j] - s[i]) + self.c.fisher * da * da;
        }
        e
    }

    pub(crate) fn evaluate(&self, p: &[f64], s: &[f64]) -> Evaluation {
        let n = self.lat.n;
        let a: Vec<f64> = p.iter().map(|v| v.sqrt()).collect();
        let mut gp = vec![0.0; n];
        let mut gs = vec![0.0; n];
        let mut energy = 0.0;
        for (i, j) in self.lat.edges() {
            let ds = s[j] - s[i];
            let kin = self.c.kinetic(ds);
            let da = a[j] - a[i];
            energy += a[i] * a[j] * kin + self.c.fisher * da * da;
            // ∂/∂Pᵢ of aᵢaⱼ·kin is ½(aⱼ/aᵢ)·kin; of f·(aⱼ−aᵢ)² is −f(aⱼ−aᵢ)/aᵢ
            gp[i] += 0.5 * a[j] / a[i] * kin - self.c.fisher * da / a[i];
            gp[j] += 0.5 * a[i] / a[j] * kin + self.c.fisher * da / a[j];
            let flux = a[i] * a[j] * self.c.kinetic_slope(ds);
            gs[j] += flux;
            gs[i] -= flux;
        }
        for k in 0..n {
            energy += self.lat.w[k] * self.v[k] * p[k];
            gp[k] = self.v[k] + gp[k] / self.lat.w[k];
            gs[k] /= self.lat.w[k];
        }
        Evaluation { energy, dh_dp: gp, dh_ds: gs }
    }

    /// Symmetric bilinear form of `ℋ[a², S = 0]` in the amplitude `a`.
    pub(crate) fn static_form(&self, u: &[f64], v: &[f64]) -> f64 {
        let mut q: f64 = (0..self.lat.n).map(|k| self.lat.w[k] * self.v[k] * u[k] * v[k]).sum();
        for (i, j) in self.lat.edges() {
            q += self.c.fisher * (u[j] - u[i]) * (v[j] - v[i]);
        }
        q
    }

    fn momentum(&self, p: &[f64], s: &[f64]) -> f64 {
        self.lat.edges().map(|(i, j)| (p[i] * p[j]).sqrt() * self.c.momentum(s[j] - s[i])).sum()
    }

    fn momentum_gradient(&self, p: &[f64], s: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut gp = vec![0.0; self.lat.n];
        let mut gs = vec![0.0; self.lat.n];
        for (i, j) in self.lat.edges() {
            let ds = s[j] - s[i];
            let (ai, aj) = (p[i].sqrt(), p[j].sqrt());
            let m = self.c.momentum(ds);
            gp[i] += 0.5 * aj / ai * m;
            gp[j] += 0.5 * ai / aj * m;
            let slope = ai * aj * self.c.momentum_slope(ds);
            gs[j] += slope;
            gs[i] -= slope;
        }
        for k in 0..self.lat.n {
            gp[k] /= self.lat.w[k];
            gs[k] /= self.lat.w[k];
        }
        (gp, gs)
    }

    /// Discrete Fisher information `(2/m) Σₑ (Δa)²/h`, i.e. `(1/m)·½∫P′²/P`.
    fn fisher(&self, p: &[f64]) -> f64 {
        2.0 * self.c.inv_m / self.lat.h
            * self
                .lat
                .edges()
                .map(|(i, j)| {
                    let da = p[j].sqrt() - p[i].sqrt();
                    da * da
                })
                .sum::<f64>()
    }
}

fn mode_params(params: &PhysParams, mode: Mode) -> Result<PhysParams, DynamicsError> {
    match mode {
        Mode::Quantum => Ok(params.clone()),
        Mode::Classical => Ok(params.with_lambda(0.0)?),
    }
}

/// The discrete Hamiltonian ℋ[P, S].
pub fn hamiltonian(state: &HydroState, params: &PhysParams) -> Result<f64, DynamicsError> {
    let model = Model::new(state.grid(), params)?;
    Ok(model.energy(state.p().values(), state.s().values()))
}

/// Discrete Fisher information matching the quantum term of [`hamiltonian`]:
/// `λ·fisher_information_edge(P) = ℋ[P,S] − ℋ_{λ=0}[P,S]`.
pub fn fisher_information_edge(p: &RealField, params: &PhysParams) -> Result<f64, DynamicsError> {
    let model = Model::new(p.grid(), &params.with_lambda(0.0)?)?;
    Ok(model.fisher(p.values()))
}

pub fn functional_derivatives(
    state: &HydroState,
    params: &PhysParams,
) -> Result<FunctionalGradient, DynamicsError> {
    let model = Model::new(state.grid(), params)?;
    let ev = model.evaluate(state.p().values(), state.s().values());
    let grid = state.grid().clone();
    Ok(FunctionalGradient { dh_dp: RealField::new(grid.clone(), ev.dh_dp)?, dh_ds: RealField::new(grid, ev.dh_ds)? })
}

/// `(∂P/∂t, ∂S/∂t) = (δℋ/δS, −δℋ/δP)`.
pub fn hydro_rhs(
    state: &HydroState,
    params: &PhysParams,
    mode: Mode,
) -> Result<(RealField, RealField), DynamicsError> {
    let g = functional_derivatives(state, &mode_params(params, mode)?)?;
    Ok((g.dh_ds, g.dh_dp.map(|v| -v)?))
}

/// Bohm quantum potential `−(ℏ²/2m)(√P)″/√P` with the grid's second
/// derivative. Agrees with the quantum part of `−δℋ/δP` at interior nodes
/// when `λ = (ℏ/2)²`.
pub fn bohm_potential(p: &RealField, params: &PhysParams) -> Result<RealField, DynamicsError> {
    let a = p.map(f64::sqrt)?;
    let d2 = a.derivative(0, 2)?;
    let c = -params.hbar * params.hbar * params.inverse_metric() / 2.0;
    Ok(d2.zip_map(&a, |d, a| c * d / a)?)
}

/// Registered functionals with exact discrete gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Functional {
    /// ℋ
    Hamiltonian,
    /// `N = ∫P`
    Norm,
    /// `X = ∫xP`
    Position,
    /// `Π = ∫P∂S`, edge form consistent with the kinetic term of ℋ.
    Momentum,
}

impl FromStr for Functional {
    type Err = DynamicsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "H" | "hamiltonian" => Ok(Self::Hamiltonian),
            "N" | "norm" => Ok(Self::Norm),
            "X" | "position" => Ok(Self::Position),
            "Pi" | "momentum" => Ok(Self::Momentum),
            other => Err(DynamicsError::UnknownFunctional(other.to_string())),
        }
    }
}

impl Functional {
    pub fn value(self, state: &HydroState, params: &PhysParams) -> Result<f64, DynamicsError> {
        let model = Model::new(state.grid(), params)?;
        let (p, s) = (state.p().values(), state.s().values());
        Ok(match self {
            Self::Hamiltonian => model.energy(p, s),
            Self::Norm => model.lat.sum(p),
            Self::Position => model.lat.sum(&p.iter().zip(&model.xs).map(|(p, x)| p * x).collect::<Vec<_>>()),
            Self::Momentum => model.momentum(p, s),
        })
    }

    pub fn gradient(self, state: &HydroState, params: &PhysParams) -> Result<(RealField, RealField), DynamicsError> {
        let model = Model::new(state.grid(), params)?;
        let (p, s) = (state.p().values(), state.s().values());
        let n = p.len();
        let (gp, gs) = match self {
            Self::Hamiltonian => {
                let ev = model.evaluate(p, s);
                (ev.dh_dp, ev.dh_ds)
            }
            Self::Norm => (vec![1.0; n], vec![0.0; n]),
            Self::Position => (model.xs.clone(), vec![0.0; n]),
            Self::Momentum => model.momentum_gradient(p, s),
        };
        let grid = state.grid().clone();
        Ok((RealField::new(grid.clone(), gp)?, RealField::new(grid, gs)?))
    }
}

/// `{F, G} = ∫(δF/δP·δG/δS − δF/δS·δG/δP)`.
pub fn poisson_bracket(
    f: Functional,
    g: Functional,
    state: &HydroState,
    params: &PhysParams,
) -> Result<f64, DynamicsError> {
    let (fp, fs) = f.gradient(state, params)?;
    let (gp, gs) = g.gradient(state, params)?;
    let w = state.grid().weights();
    Ok((0..w.len())
        .map(|k| w[k] * (fp.values()[k] * gs.values()[k] - fs.values()[k] * gp.values()[k]))
        .sum())
}

/// Stability heuristic `0.25·m·dx²/ℏ` for explicit quantum-mode stepping.
pub fn dt_max(grid: &Grid, params: &PhysParams) -> f64 {
    0.25 * params.mass * grid.dx() * grid.dx() / params.hbar
}

/// Coordinates in which the Runge–Kutta stages are combined.
///
/// Both integrate the same vector field [`hydro_rhs`]. The density chart is
/// singular where `P → 0`: far Gaussian tails pick up near-nodes from
/// round-off-level radiation and the phase there swings faster than any
/// practical step resolves. The Madelung chart `ψ = √P·e^{iS/q}`, `q = 2√λ`,
/// is regular through such points; `S` accumulates the phase increments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Chart {
    Density,
    /// Falls back to [`Chart::Density`] when `λ = 0`.
    #[default]
    Madelung,
}

#[derive(Debug, Clone, Copy)]
pub struct EvolveOptions {
    /// Abort with [`DynamicsError::NodeFormation`] when P drops below this.
    pub floor: DensityFloor,
    /// Record every n-th step (the final step is always recorded).
    pub sample_every: usize,
    pub chart: Chart,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self { floor: DensityFloor::Absolute(1e-300), sample_every: 1, chart: Chart::default() }
    }
}

fn check_step(dt: f64, sample_every: usize) -> Result<(), DynamicsError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(DynamicsError::InvalidStep(format!("dt must be positive, got {dt}")));
    }
    if sample_every == 0 {
        return Err(DynamicsError::InvalidStep("sample_every must be at least 1".into()));
    }
    Ok(())
}

fn axpy(y: &[f64], a: f64, x: &[f64]) -> Vec<f64> {
    y.iter().zip(x).map(|(y, x)| y + a * x).collect()
}

fn density_step(model: &Model, p: &mut [f64], s: &mut [f64], dt: f64) {
    let rhs = |p: &[f64], s: &[f64]| {
        let ev = model.evaluate(p, s);
        (ev.dh_ds, ev.dh_dp)
    };
    let (k1p, k1s) = rhs(p, s);
    let (p2, s2) = (axpy(p, 0.5 * dt, &k1p), axpy(s, -0.5 * dt, &k1s));
    let (k2p, k2s) = rhs(&p2, &s2);
    let (p3, s3) = (axpy(p, 0.5 * dt, &k2p), axpy(s, -0.5 * dt, &k2s));
    let (k3p, k3s) = rhs(&p3, &s3);
    let (p4, s4) = (axpy(p, dt, &k3p), axpy(s, -dt, &k3s));
    let (k4p, k4s) = rhs(&p4, &s4);
    for k in 0..p.len() {
        p[k] += dt / 6.0 * (k1p[k] + 2.0 * k2p[k] + 2.0 * k3p[k] + k4p[k]);
        s[k] -= dt / 6.0 * (k1s[k] + 2.0 * k2s[k] + 2.0 * k3s[k] + k4s[k]);
    }
}

fn madelung_step(model: &Model, p: &mut [f64], s: &mut [f64], dt: f64) {
    let q = model.c.q;
    let rhs = |psi: &[Complex64]| -> Vec<Complex64> {
        let p: Vec<f64> = psi.iter().map(|z| z.norm_sqr()).collect();
        let s: Vec<f64> = psi.iter().map(|z| q * z.arg()).collect();
        let ev = model.evaluate(&p, &s);
        // ψ̇ = ψ·(Ṗ/2P + iṠ/q)
        (0..psi.len()).map(|k| psi[k] * Complex64::new(0.5 * ev.dh_ds[k] / p[k], -ev.dh_dp[k] / q)).collect()
    };
    let add = |y: &[Complex64], a: f64, x: &[Complex64]| -> Vec<Complex64> {
        y.iter().zip(x).map(|(y, x)| y + a * x).collect()
    };
    let psi: Vec<Complex64> = p.iter().zip(s.iter()).map(|(&p, &s)| Complex64::from_polar(p.sqrt(), s / q)).collect();
    let k1 = rhs(&psi);
    let k2 = rhs(&add(&psi, 0.5 * dt, &k1));
    let k3 = rhs(&add(&psi, 0.5 * dt, &k2));
    let k4 = rhs(&add(&psi, dt, &k3));
    for k in 0..psi.len() {
        let next = psi[k] + dt / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
        p[k] = next.norm_sqr();
        s[k] += q * (next * psi[k].conj()).arg();
    }
}

/// Fourth-order Runge–Kutta integration of [`hydro_rhs`]. No renormalization.
pub fn evolve_hydro(
    state: &HydroState,
    params: &PhysParams,
    dt: f64,
    steps: usize,
    mode: Mode,
    opts: EvolveOptions,
) -> Result<Trajectory<HydroState>, DynamicsError> {
    check_step(dt, opts.sample_every)?;
    let model = Model::new(state.grid(), &mode_params(params, mode)?)?;
    let madelung = opts.chart == Chart::Madelung && model.c.q > 0.0;
    let grid = state.grid().clone();
    let mut p = state.p().values().to_vec();
    let mut s = state.s().values().to_vec();
    let floor = opts.floor.resolve(state.p().max_value());

    let mut traj = Trajectory::new();
    let record = |traj: &mut Trajectory<HydroState>, t: f64, p: &[f64], s: &[f64]| -> Result<(), DynamicsError> {
        let st = HydroState::from_parts(RealField::new(grid.clone(), p.to_vec())?, RealField::new(grid.clone(), s.to_vec())?);
        traj.push(t, st, model.lat.sum(p), model.energy(p, s))
    };
    record(&mut traj, 0.0, &p, &s)?;

    for step in 1..=steps {
        if madelung {
            madelung_step(&model, &mut p, &mut s, dt);
        } else {
            density_step(&model, &mut p, &mut s, dt);
        }
        if let Some(index) = (0..p.len()).find(|&k| !(p[k] >= 0.0 && p[k].is_finite() && s[k].is_finite())) {
            return Err(DynamicsError::Blowup { step, index });
        }
        if let Some(index) = (0..p.len()).find(|&k| p[k] < floor || p[k] == 0.0) {
            return Err(DynamicsError::NodeFormation { step, index, density: p[index], floor });
        }
        if step % opts.sample_every == 0 || step == steps {
            record(&mut traj, step as f64 * dt, &p, &s)?;
        }
    }
    Ok(traj)
}

/// `Σₑ (ℏ²/2m)|Δψ|²/h + Σ wV|ψ|²`: the canonical-coordinate Hamiltonian.
pub(crate) fn canonical_energy(model: &Model, hbar: f64, psi: &[Complex64]) -> f64 {
    let c = 0.5 * hbar * hbar * model.c.inv_m / model.lat.h;
    let mut e: f64 = model.lat.edges().map(|(i, j)| c * (psi[j] - psi[i]).norm_sqr()).sum();
    for k in 0..psi.len() {
        e += model.lat.w[k] * model.v[k] * psi[k].norm_sqr();
    }
    e
}

/// LU factors of a complex tridiagonal matrix (Thomas algorithm).
struct Tridiagonal {
    lower: Vec<Complex64>,
    upper: Vec<Complex64>,
    pivots: Vec<Complex64>,
}

impl Tridiagonal {
    /// `lower[i]` couples row i to i−1, `upper[i]` couples row i to i+1.
    fn factor(diag: &[Complex64], lower: &[Complex64], upper: &[Complex64]) -> Result<Self, DynamicsError> {
        let n = diag.len();
        let mut pivots = Vec::with_capacity(n);
        let mut ratio = vec![Complex64::new(0.0, 0.0); n];
        for i in 0..n {
            let d = if i == 0 { diag[0] } else { diag[i] - lower[i] * ratio[i - 1] };
            if d.norm() <= f64::MIN_POSITIVE {
                return Err(DynamicsError::SingularSystem(i));
            }
            pivots.push(d);
            if i + 1 < n {
                ratio[i] = upper[i] / d;
            }
        }
        Ok(Self { lower: lower.to_vec(), upper: ratio, pivots })
    }

    fn solve(&self, rhs: &[Complex64]) -> Vec<Complex64> {
        let n = rhs.len();
        let mut y = vec![Complex64::new(0.0, 0.0); n];
        for i in 0..n {
            let r = if i == 0 { rhs[0] } else { rhs[i] - self.lower[i] * y[i - 1] };
            y[i] = r / self.pivots[i];
        }
        for i in (0..n.saturating_sub(1)).rev() {
            let next = y[i + 1];
            y[i] -= self.upper[i] * next;
        }
        y
    }
}

/// Solver for `(W + iτH)x = b`, cyclic on periodic grids (Sherman–Morrison).
struct CrankNicolson {
    tri: Tridiagonal,
    // periodic correction: x = y − z·(vᵀy)/(1 + vᵀz)
    cyclic: Option<(Vec<Complex64>, Complex64, Complex64)>,
    diag_rhs: Vec<Complex64>,
    off_rhs: Complex64,
    periodic: bool,
}

impl CrankNicolson {
    fn new(model: &Model, hbar: f64, dt: f64) -> Result<Self, DynamicsError> {
        let n = model.lat.n;
        let tau = 0.5 * dt / hbar;
        let c = 0.5 * hbar * hbar * model.c.inv_m / model.lat.h;
        let mut hd = vec![0.0; n];
        for (i, j) in model.lat.edges() {
            hd[i] += c;
            hd[j] += c;
        }
        let i = Complex64::i();
        let diag: Vec<Complex64> =
            (0..n).map(|k| model.lat.w[k] + i * tau * (hd[k] + model.lat.w[k] * model.v[k])).collect();
        let diag_rhs: Vec<Complex64> =
            (0..n).map(|k| model.lat.w[k] - i * tau * (hd[k] + model.lat.w[k] * model.v[k])).collect();
        let off = -i * tau * c;
        let off_rhs = i * tau * c;
        let periodic = model.lat.periodic;
        let lower = vec![off; n];
        let upper = vec![off; n];
        if !periodic {
            return Ok(Self { tri: Tridiagonal::factor(&diag, &lower, &upper)?, cyclic: None, diag_rhs, off_rhs, periodic });
        }
        // A = B + u vᵀ with u = (γ, 0, …, off), v = (1, 0, …, off/γ)
        let gamma = -diag[0];
        let mut b = diag.clone();
        b[0] -= gamma;
        b[n - 1] -= off * off / gamma;
        let tri = Tridiagonal::factor(&b, &lower, &upper)?;
        let mut u = vec![Complex64::new(0.0, 0.0); n];
        u[0] = gamma;
        u[n - 1] = off;
        let z = tri.solve(&u);
        let vz = z[0] + off / gamma * z[n - 1];
        let denom = Complex64::new(1.0, 0.0) + vz;
        if denom.norm() <= f64::MIN_POSITIVE {
            return Err(DynamicsError::SingularSystem(0));
        }
        Ok(Self { tri, cyclic: Some((z, off / gamma, denom)), diag_rhs, off_rhs, periodic })
    }

    fn step(&self, psi: &[Complex64]) -> Vec<Complex64> {
        let n = psi.len();
        let rhs: Vec<Complex64> = (0..n)
            .map(|k| {
                let mut r = self.diag_rhs[k] * psi[k];
                if k > 0 || self.periodic {
                    r += self.off_rhs * psi[(k + n - 1) % n];
                }
                if k + 1 < n || self.periodic {
                    r += self.off_rhs * psi[(k + 1) % n];
                }
                r
            })
            .collect();
        let mut y = self.tri.solve(&rhs);
        if let Some((z, v_last, denom)) = &self.cyclic {
            let factor = (y[0] + v_last * y[n - 1]) / denom;
            for k in 0..n {
                y[k] -= factor * z[k];
            }
        }
        y
    }
}

/// Crank–Nicolson propagation of `iℏ∂ψ/∂t = Hψ` with the discrete Hamiltonian
/// shared with the hydrodynamics. Diagnostics use the canonical energy.
pub fn evolve_schrodinger(
    psi: &WaveFunction,
    params: &PhysParams,
    dt: f64,
    steps: usize,
    sample_every: usize,
) -> Result<Trajectory<WaveFunction>, DynamicsError> {
    check_step(dt, sample_every)?;
    let grid = psi.grid().clone();
    let model = Model::new(&grid, params)?;
    let cn = CrankNicolson::new(&model, params.hbar, dt)?;
    let mut traj = Trajectory::new();
    let mut cur = psi.psi().values().to_vec();
    let norm = |v: &[Complex64]| model.lat.w.iter().zip(v).map(|(w, z)| w * z.norm_sqr()).sum::<f64>();
    let mut record = |t: f64, v: &[Complex64]| -> Result<(), DynamicsError> {
        let wf = WaveFunction::from_field(ComplexField::new(grid.clone(), v.to_vec())?);
        traj.push(t, wf, norm(v), canonical_energy(&model, params.hbar, v))
    };
    record(0.0, &cur)?;
    for step in 1..=steps {
        cur = cn.step(&cur);
        if step % sample_every == 0 || step == steps {
            record(step as f64 * dt, &cur)?;
        }
    }
    Ok(traj)
}

/// Second-order finite-difference `∂S/∂t` at every sample.
fn time_derivatives(traj: &Trajectory<HydroState>) -> Vec<Vec<f64>> {
    let t = traj.times();
    let s: Vec<&[f64]> = traj.states().iter().map(|st| st.s().values()).collect();
    let k = t.len();
    // three-point Lagrange derivative at node `at` of the stencil (i0, i0+1, i0+2)
    let stencil = |i0: usize, at: usize| -> Vec<f64> {
        let (x0, x1, x2) = (t[i0], t[i0 + 1], t[i0 + 2]);
        let x = t[at];
        let c0 = ((x - x1) + (x - x2)) / ((x0 - x1) * (x0 - x2));
        let c1 = ((x - x0) + (x - x2)) / ((x1 - x0) * (x1 - x2));
        let c2 = ((x - x0) + (x - x1)) / ((x2 - x0) * (x2 - x1));
        (0..s[0].len()).map(|n| c0 * s[i0][n] + c1 * s[i0 + 1][n] + c2 * s[i0 + 2][n]).collect()
    };
    (0..k).map(|at| stencil(at.saturating_sub(1).min(k - 3), at)).collect()
}

fn trapezoid(t: &[f64], f: &[f64]) -> f64 {
    t.windows(2).zip(f.windows(2)).map(|(t, f)| 0.5 * (t[1] - t[0]) * (f[0] + f[1])).sum()
}

fn check_trajectory(traj: &Trajectory<HydroState>) -> Result<&Grid, DynamicsError> {
    if traj.len() < 3 {
        return Err(DynamicsError::TooFewSamples(traj.len()));
    }
    let grid = traj.states()[0].grid();
    if traj.states().iter().any(|s| s.grid() != grid) {
        return Err(DynamicsError::MixedGrids);
    }
    Ok(grid)
}

/// `∫∫P(∂S/∂t + ½(∂S)²/m + V)` with the kinetic edge form of [`hamiltonian`]
/// for the same parameters; trapezoid rule in time.
pub fn classical_lagrangian(traj: &Trajectory<HydroState>, params: &PhysParams) -> Result<f64, DynamicsError> {
    let grid = check_trajectory(traj)?;
    let model = Model::new(grid, params)?;
    let classical = Model { c: Coupling { fisher: 0.0, ..model.c }, ..model };
    let dsdt = time_derivatives(traj);
    let integrand: Vec<f64> = traj
        .states()
        .iter()
        .zip(&dsdt)
        .map(|(st, st_dot)| {
            let p = st.p().values();
            let pdot: Vec<f64> = p.iter().zip(st_dot).map(|(p, d)| p * d).collect();
            classical.lat.sum(&pdot) + classical.energy(p, st.s().values())
        })
        .collect();
    Ok(trapezoid(traj.times(), &integrand))
}

/// `L_CL + λ∫I dt` with I from [`fisher_information_edge`].
pub fn quantum_lagrangian(traj: &Trajectory<HydroState>, params: &PhysParams) -> Result<f64, DynamicsError> {
    let lcl = classical_lagrangian(traj, params)?;
    let model = Model::new(check_trajectory(traj)?, params)?;
    let info: Vec<f64> = traj.states().iter().map(|st| model.fisher(st.p().values())).collect();
    Ok(lcl + params.lambda * trapezoid(traj.times(), &info))
}

/// Samples a time-independent density with `S = S₀ − E·t` at `t = 0, T/2, T`.
pub fn stationary_trajectory(
    state: &HydroState,
    energy: f64,
    window: f64,
) -> Result<Trajectory<HydroState>, DynamicsError> {
    let mut traj = Trajectory::new();
    for t in [0.0, 0.5 * window, window] {
        let s = state.s().map(|s| s - energy * t)?;
        traj.push(t, state.with_s(s)?, state.p().integrate()?, energy)?;
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{gaussian_density, madelung_forward, normalize};
    use crate::potential::PotentialExpr;

    fn params(v: &str) -> PhysParams {
        PhysParams::paper(1.0, 1.0, PotentialExpr::parse(v).unwrap()).unwrap()
    }

    fn gaussian_state(grid: &Grid, center: f64, sigma: f64, s: impl Fn(f64) -> f64) -> HydroState {
        let p = normalize(&gaussian_density(grid, center, sigma).unwrap(), DensityFloor::Absolute(1e-300)).unwrap();
        let s = RealField::from_fn(grid, |x, _| s(x)).unwrap();
        HydroState::with_checks(p, s, DensityFloor::Absolute(1e-300), 1e-10).unwrap()
    }

    #[test]
    fn oscillator_ground_state_energy() {
        let g = Grid::new_1d(-10.0, 10.0, 2001, Boundary::Dirichlet).unwrap();
        let st = gaussian_state(&g, 0.0, 0.5f64.sqrt(), |_| 0.0);
        let e = hamiltonian(&st, &params("0.5*x^2")).unwrap();
        assert!((e - 0.5).abs() < 1e-5, "{e}");
        let shifted = hamiltonian(&st, &params("0.5*x^2 + 3")).unwrap();
        assert!((shifted - e - 3.0).abs() < 1e-12);
    }

    #[test]
    fn plane_wave_energy() {
        let g = Grid::new_1d(0.0, 100.0, 2000, Boundary::Periodic).unwrap();
        let k = 2.0 * std::f64::consts::PI / 100.0;
        let p = RealField::constant(&g, 0.01).unwrap();
        let st = HydroState::new(p, RealField::from_fn(&g, |x, _| k * x).unwrap()).unwrap();
        let e = hamiltonian(&st, &params("0")).unwrap();
        assert!((e - 0.5 * k * k).abs() < 1e-8, "{e}");
    }

    #[test]
    fn canonical_energy_matches() {
        let g = Grid::new_1d(-10.0, 10.0, 401, Boundary::Dirichlet).unwrap();
        let st = gaussian_state(&g, 0.3, 1.2, |x| 0.7 * x + 0.2 * x * x);
        let p = params("0.5*x^2");
        let model = Model::new(&g, &p).unwrap();
        let psi = madelung_forward(&st, 1.0);
        let e1 = hamiltonian(&st, &p).unwrap();
        let e2 = canonical_energy(&model, 1.0, psi.psi().values());
        assert!((e1 - e2).abs() < 1e-12 * e1.abs(), "{e1} {e2}");
    }

    #[test]
    fn constant_phase_has_no_flux() {
        let g = Grid::new_1d(-10.0, 10.0, 301, Boundary::Dirichlet).unwrap();
        let st = gaussian_state(&g, 0.0, 1.0, |_| 2.5);
        let grad = functional_derivatives(&st, &params("x^2")).unwrap();
        assert!(grad.dh_ds.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn divergence_integrates_to_zero() {
        for bc in [Boundary::Dirichlet, Boundary::Periodic] {
            let g = Grid::new_1d(-10.0, 10.0, 300, bc).unwrap();
            let st = gaussian_state(&g, 0.5, 1.3, |x| (x * 0.8).sin() + 0.1 * x * x);
            let grad = functional_derivatives(&st, &params("0.5*x^2")).unwrap();
            assert!(grad.dh_ds.integrate().unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn classical_plane_wave_rate() {
        // no-flux walls pile up density at the ends, so only interior dP/dt vanishes
        let g = Grid::new_1d(0.0, 10.0, 201, Boundary::Dirichlet).unwrap();
        let k = 1.7;
        let st = HydroState::new(RealField::constant(&g, 0.1).unwrap(), RealField::from_fn(&g, |x, _| k * x).unwrap())
            .unwrap();
        let (dp, ds) = hydro_rhs(&st, &params("0"), Mode::Classical).unwrap();
        assert!(dp.values()[1..200].iter().all(|v| v.abs() < 1e-12));
        assert!(ds.values().iter().all(|v| (v + 0.5 * k * k).abs() < 1e-12));
    }

    #[test]
    fn classical_is_quantum_without_lambda() {
        let g = Grid::new_1d(-8.0, 8.0, 200, Boundary::Dirichlet).unwrap();
        let st = gaussian_state(&g, 0.2, 1.0, |x| 0.3 * x * x);
        let base = params("0.5*x^2");
        let a = hydro_rhs(&st, &base, Mode::Classical).unwrap();
        let b = hydro_rhs(&st, &base.with_lambda(0.0).unwrap(), Mode::Quantum).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn quantum_term_is_bohm_potential() {
        let g = Grid::new_1d(-8.0, 8.0, 400, Boundary::Dirichlet).unwrap();
        let st = gaussian_state(&g, 0.0, 1.1, |_| 0.0);
        let p = params("0");
        let (_, q) = hydro_rhs(&st, &p, Mode::Quantum).unwrap();
        let bohm = bohm_potential(st.p(), &p).unwrap();
        for i in 1..g.len() - 1 {
            let want = -bohm.values()[i];
            assert!((q.values()[i] - want).abs() < 1e-8 * (1.0 + want.abs()), "{i}");
        }
    }

    #[test]
    fn unknown_functional() {
        assert!(matches!("entropy".parse::<Functional>(), Err(DynamicsError::UnknownFunctional(_))));
        assert_eq!("H".parse::<Functional>().unwrap(), Functional::Hamiltonian);
    }

    #[test]
    fn cyclic_solver_matches_dense() {
        let g = Grid::new_1d(0.0, 1.0, 12, Boundary::Periodic).unwrap();
        let model = Model::new(&g, &params("3*x")).unwrap();
        let cn = CrankNicolson::new(&model, 1.0, 0.01).unwrap();
        let psi: Vec<Complex64> = (0..12).map(|k| Complex64::new((k as f64).sin(), 0.3 * k as f64)).collect();
        let next = cn.step(&psi);
        // apply (W + iτH) to the result and compare with (W − iτH)ψ
        let n = 12;
        let tau = 0.005;
        let c = 0.5 / model.lat.h;
        let apply = |v: &[Complex64], sign: f64| -> Vec<Complex64> {
            (0..n)
                .map(|k| {
                    let h = (2.0 * c + model.lat.w[k] * model.v[k]) * v[k] - c * (v[(k + 1) % n] + v[(k + n - 1) % n]);
                    model.lat.w[k] * v[k] + Complex64::i() * sign * tau * h
                })
                .collect()
        };
        let lhs = apply(&next, 1.0);
        let rhs = apply(&psi, -1.0);
        for k in 0..n {
            assert!((lhs[k] - rhs[k]).norm() < 1e-13);
        }
    }

    #[test]
    fn stationary_lagrangian_window() {
        let g = Grid::new_1d(-8.0, 8.0, 401, Boundary::Dirichlet).unwrap();
        let st = gaussian_state(&g, 0.0, 0.5f64.sqrt(), |_| 0.0);
        let p = params("0.5*x^2");
        let l1 = classical_lagrangian(&stationary_trajectory(&st, 0.5, 1.0).unwrap(), &p).unwrap();
        let l2 = classical_lagrangian(&stationary_trajectory(&st, 0.5, 2.0).unwrap(), &p).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-8);
        let mut short = Trajectory::new();
        short.push(0.0, st.clone(), 1.0, 0.5).unwrap();
        short.push(1.0, st.clone(), 1.0, 0.5).unwrap();
        assert!(matches!(classical_lagrangian(&short, &p), Err(DynamicsError::TooFewSamples(2))));
        assert!(short.push(1.0, st, 1.0, 0.5).is_err());
    }
}
