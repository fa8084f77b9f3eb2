//! Symplectic form, Fisher metric and the compatible complex structures on the
//! `(δP, δS)` tangent space, and their canonical form in `(ψ, ψ*)`.

use num_complex::Complex64;
use thiserror::Error;

use crate::dynamics::{canonical_energy, DynamicsError, Model};
use crate::fields::{DensityFloor, HydroState, PhysParams, WaveFunction};
use crate::grid::{GridError, RealField};

pub type Mat2 = [[f64; 2]; 2];
pub type CMat2 = [[Complex64; 2]; 2];

/// The canonical symplectic matrix on `(δP, δS)`.
pub const OMEGA: Mat2 = [[0.0, 1.0], [-1.0, 0.0]];

#[derive(Debug, Error)]
pub enum KahlerError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("density must be positive, got {value:e} at node {index}")]
    NonPositive { index: usize, value: f64 },
    #[error("A must be finite (node {0})")]
    NonFiniteA(usize),
    #[error("hbar must be positive and finite, got {0}")]
    BadHbar(f64),
    #[error("canonical transform needs A = 0 blocks (A = {value} at node {index})")]
    NonZeroA { index: usize, value: f64 },
    #[error("singular Jacobian at node {index}: P = {density:e} below floor {floor:e}")]
    SingularJacobian { index: usize, density: f64, floor: f64 },
}

/// `g^(P) = 1/(2P)` pointwise.
pub fn fisher_metric_density(p: &RealField) -> Result<RealField, KahlerError> {
    check_positive(p)?;
    Ok(p.map(|v| 0.5 / v)?)
}

/// `ds²(δP, δ′P) = ∫ g^(P) δP δ′P`.
pub fn fisher_ds2(p: &RealField, dp: &RealField, dp2: &RealField) -> Result<f64, KahlerError> {
    let gp = fisher_metric_density(p)?;
    let prod = dp.zip_map(dp2, |a, b| a * b)?;
    Ok(gp.zip_map(&prod, |g, v| g * v)?.integrate()?)
}

fn check_positive(p: &RealField) -> Result<(), KahlerError> {
    match p.values().iter().position(|&v| !(v > 0.0 && v.is_finite())) {
        Some(index) => Err(KahlerError::NonPositive { index, value: p.values()[index] }),
        None => Ok(()),
    }
}

/// Ω, g(A), J(A) and `g^(P)` at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KahlerPoint {
    pub omega: Mat2,
    pub g: Mat2,
    pub j: Mat2,
    pub a: f64,
    pub gp: f64,
}

impl KahlerPoint {
    pub fn new(p: f64, a: f64, hbar: f64) -> Result<Self, KahlerError> {
        if !(p > 0.0 && p.is_finite()) {
            return Err(KahlerError::NonPositive { index: 0, value: p });
        }
        if !a.is_finite() {
            return Err(KahlerError::NonFiniteA(0));
        }
        if !(hbar > 0.0 && hbar.is_finite()) {
            return Err(KahlerError::BadHbar(hbar));
        }
        let gp = 0.5 / p;
        let k = hbar * gp;
        let inv = (1.0 + a * a) / k;
        Ok(Self { omega: OMEGA, g: [[k, a], [a, inv]], j: [[a, inv], [-k, -a]], a, gp })
    }

    /// Residuals of `Ω = gJ`, `JᵀgJ = g` and `J² = −1` at this point.
    pub fn residuals(&self) -> KahlerResiduals {
        let gj = mul(&self.g, &self.j);
        let jtgj = mul(&transpose(&self.j), &gj);
        let jj = mul(&self.j, &self.j);
        KahlerResiduals {
            r1: max_abs_diff(&self.omega, &gj),
            r2: max_abs_diff(&jtgj, &self.g),
            r3: max_abs_diff(&jj, &[[-1.0, 0.0], [0.0, -1.0]]),
        }
    }

    /// Smallest eigenvalue of the symmetric metric block.
    pub fn min_metric_eigenvalue(&self) -> f64 {
        let [[p, q], [_, r]] = self.g;
        let mean = 0.5 * (p + r);
        let det = p * r - q * q;
        // the smaller root via the product of roots avoids cancellation
        det / (mean + (mean * mean - det).max(0.0).sqrt())
    }
}

fn mul(x: &Mat2, y: &Mat2) -> Mat2 {
    let e = |i: usize, k: usize| x[i][0].mul_add(y[0][k], x[i][1] * y[1][k]);
    [[e(0, 0), e(0, 1)], [e(1, 0), e(1, 1)]]
}

fn transpose(x: &Mat2) -> Mat2 {
    [[x[0][0], x[1][0]], [x[0][1], x[1][1]]]
}

fn max_abs_diff(x: &Mat2, y: &Mat2) -> f64 {
    let mut m = 0.0f64;
    for i in 0..2 {
        for k in 0..2 {
            m = m.max((x[i][k] - y[i][k]).abs());
        }
    }
    m
}

/// Maximum entrywise residuals of the three Kähler conditions.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KahlerResiduals {
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
}

impl KahlerResiduals {
    pub fn max(&self) -> f64 {
        self.r1.max(self.r2).max(self.r3)
    }

    fn merge(self, o: Self) -> Self {
        Self { r1: self.r1.max(o.r1), r2: self.r2.max(o.r2), r3: self.r3.max(o.r3) }
    }
}

/// The free function `A` of the family.
#[derive(Debug, Clone, PartialEq)]
pub enum AField {
    Constant(f64),
    Field(RealField),
}

/// Per-point blocks of the A-family over a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct KahlerBlocks {
    points: Vec<KahlerPoint>,
}

impl KahlerBlocks {
    pub fn points(&self) -> &[KahlerPoint] {
        &self.points
    }

    pub fn from_points(points: Vec<KahlerPoint>) -> Self {
        Self { points }
    }
}

pub fn kahler_family(p: &RealField, a: &AField, hbar: f64) -> Result<KahlerBlocks, KahlerError> {
    check_positive(p)?;
    let avals: Vec<f64> = match a {
        AField::Constant(c) => vec![*c; p.len()],
        AField::Field(f) => {
            p.same_grid(f)?;
            f.values().to_vec()
        }
    };
    let points = p
        .values()
        .iter()
        .zip(&avals)
        .enumerate()
        .map(|(index, (&pv, &av))| {
            KahlerPoint::new(pv, av, hbar).map_err(|e| match e {
                KahlerError::NonFiniteA(_) => KahlerError::NonFiniteA(index),
                KahlerError::NonPositive { value, .. } => KahlerError::NonPositive { index, value },
                other => other,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(KahlerBlocks { points })
}

pub fn check_kahler_conditions(blocks: &KahlerBlocks) -> KahlerResiduals {
    blocks.points.iter().fold(KahlerResiduals::default(), |acc, pt| acc.merge(pt.residuals()))
}

fn cmul(x: &CMat2, y: &CMat2) -> CMat2 {
    let e = |i: usize, k: usize| x[i][0] * y[0][k] + x[i][1] * y[1][k];
    [[e(0, 0), e(0, 1)], [e(1, 0), e(1, 1)]]
}

fn ctranspose(x: &CMat2) -> CMat2 {
    [[x[0][0], x[1][0]], [x[0][1], x[1][1]]]
}

fn complexify(x: &Mat2) -> CMat2 {
    let c = |v: f64| Complex64::new(v, 0.0);
    [[c(x[0][0]), c(x[0][1])], [c(x[1][0]), c(x[1][1])]]
}

fn cmax_abs_diff(x: &CMat2, y: &CMat2) -> f64 {
    let mut m = 0.0f64;
    for i in 0..2 {
        for k in 0..2 {
            m = m.max((x[i][k] - y[i][k]).norm());
        }
    }
    m
}

/// `Ω′ = [[0, iℏ], [−iℏ, 0]]`, `g′ = [[0, ℏ], [ℏ, 0]]`, `J′ = diag(−i, i)`.
pub fn canonical_constants(hbar: f64) -> (CMat2, CMat2, CMat2) {
    let z = Complex64::new(0.0, 0.0);
    let i = Complex64::i();
    (
        [[z, i * hbar], [-i * hbar, z]],
        [[z, Complex64::new(hbar, 0.0)], [Complex64::new(hbar, 0.0), z]],
        [[-i, z], [z, i]],
    )
}

/// Blocks in `(δψ, δψ*)` coordinates, one per grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalBlocks {
    pub omega: Vec<CMat2>,
    pub g: Vec<CMat2>,
    pub j: Vec<CMat2>,
}

/// Distance from the canonical constants and spread across the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanonicalReport {
    pub max_deviation: f64,
    pub max_spread: f64,
}

impl CanonicalBlocks {
    pub fn report(&self, hbar: f64) -> CanonicalReport {
        let (o, g, j) = canonical_constants(hbar);
        let mut dev = 0.0f64;
        let mut spread = 0.0f64;
        for k in 0..self.omega.len() {
            dev = dev
                .max(cmax_abs_diff(&self.omega[k], &o))
                .max(cmax_abs_diff(&self.g[k], &g))
                .max(cmax_abs_diff(&self.j[k], &j));
            spread = spread
                .max(cmax_abs_diff(&self.omega[k], &self.omega[0]))
                .max(cmax_abs_diff(&self.g[k], &self.g[0]))
                .max(cmax_abs_diff(&self.j[k], &self.j[0]));
        }
        CanonicalReport { max_deviation: dev, max_spread: spread }
    }
}

/// Transforms A = 0 blocks with the Jacobian `T` of `(P, S) → (ψ, ψ*)`:
/// `Ω′ = (T⁻¹)ᵀΩT⁻¹`, `g′ = (T⁻¹)ᵀgT⁻¹`, `J′ = TJT⁻¹`.
pub fn canonical_transform(
    blocks: &KahlerBlocks,
    state: &HydroState,
    hbar: f64,
    floor: DensityFloor,
) -> Result<CanonicalBlocks, KahlerError> {
    if !(hbar > 0.0 && hbar.is_finite()) {
        return Err(KahlerError::BadHbar(hbar));
    }
    let p = state.p().values();
    let s = state.s().values();
    if blocks.points.len() != p.len() {
        return Err(GridError::LengthMismatch { expected: p.len(), got: blocks.points.len() }.into());
    }
    let f = floor.resolve(state.p().max_value());
    let i = Complex64::i();
    let mut out = CanonicalBlocks { omega: Vec::new(), g: Vec::new(), j: Vec::new() };
    for (k, pt) in blocks.points.iter().enumerate() {
        if pt.a != 0.0 {
            return Err(KahlerError::NonZeroA { index: k, value: pt.a });
        }
        if !(p[k] >= f && p[k] > 0.0) {
            return Err(KahlerError::SingularJacobian { index: k, density: p[k], floor: f });
        }
        let psi = Complex64::from_polar(p[k].sqrt(), s[k] / hbar);
        let t: CMat2 = [[psi / (2.0 * p[k]), i * psi / hbar], [psi.conj() / (2.0 * p[k]), -i * psi.conj() / hbar]];
        let det = t[0][0] * t[1][1] - t[0][1] * t[1][0];
        let tinv: CMat2 = [[t[1][1] / det, -t[0][1] / det], [-t[1][0] / det, t[0][0] / det]];
        let tinv_t = ctranspose(&tinv);
        out.omega.push(cmul(&tinv_t, &cmul(&complexify(&pt.omega), &tinv)));
        out.g.push(cmul(&tinv_t, &cmul(&complexify(&pt.g), &tinv)));
        out.j.push(cmul(&t, &cmul(&complexify(&pt.j), &tinv)));
    }
    Ok(out)
}

/// `(1/2ℏ)∫(φ, φ*)·[g′ + iΩ′]·(χ, χ*)ᵀ` with the canonical blocks.
pub fn dirac_product(phi: &WaveFunction, chi: &WaveFunction, hbar: f64) -> Result<Complex64, KahlerError> {
    if !(hbar > 0.0 && hbar.is_finite()) {
        return Err(KahlerError::BadHbar(hbar));
    }
    phi.psi().same_grid(chi.psi())?;
    let (omega, g, _) = canonical_constants(hbar);
    let i = Complex64::i();
    let m: CMat2 = [[g[0][0] + i * omega[0][0], g[0][1] + i * omega[0][1]], [g[1][0] + i * omega[1][0], g[1][1] + i * omega[1][1]]];
    let integrand = phi.psi().zip_map(chi.psi(), |f, c| {
        let u = [f, f.conj()];
        let v = [c, c.conj()];
        let mut acc = Complex64::new(0.0, 0.0);
        for a in 0..2 {
            for b in 0..2 {
                acc += u[a] * m[a][b] * v[b];
            }
        }
        acc / (2.0 * hbar)
    })?;
    Ok(integrand.integrate()?)
}

/// `∫{(ℏ²/2m)|∂ψ|² + V|ψ|²}` on the edge discretization shared with the
/// hydrodynamical Hamiltonian; real by construction.
pub fn hamiltonian_canonical(psi: &WaveFunction, params: &PhysParams) -> Result<f64, KahlerError> {
    let model = Model::new(psi.grid(), params)?;
    Ok(canonical_energy(&model, params.hbar, psi.psi().values()))
}
