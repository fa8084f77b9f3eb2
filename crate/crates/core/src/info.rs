//! Cross-entropy and the Fisher information of the shift family `P(y + θ)`.
//!
//! The Fisher matrix keeps the factor ½ of the cross-entropy expansion:
//! `J(P(·+Δ) : P) ≈ I_jk Δ^j Δ^k` with `I_jk = ½ ∫ (1/P) ∂_j P ∂_k P`.
//! For a Gaussian this is `½ Σ⁻¹`, half the usual statistics convention.

use thiserror::Error;

use crate::fields::{normalize, DensityFloor, FieldsError, PhysParams};
use crate::grid::{Boundary, Grid, GridError, RealField};

/// Densities whose boundary value exceeds this fraction of the maximum are
/// rejected by [`fisher_matrix`].
pub const BOUNDARY_DECAY: f64 = 1e-6;

/// Largest shift, in grid spacings, accepted by [`verify_quadratic_expansion`].
pub const MAX_SHIFT_CELLS: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InfoError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Fields(#[from] FieldsError),
    #[error("density must be strictly positive (index {index}, value {value:e})")]
    NonPositive { index: usize, value: f64 },
    #[error("density does not decay at the boundary (P = {value:e} at index {index}, max {max:e}); quadrature unreliable")]
    BoundaryNotNegligible { index: usize, value: f64, max: f64 },
    #[error("shift {shift} exceeds {MAX_SHIFT_CELLS} grid spacings ({limit}) along axis {axis}")]
    ShiftTooLarge { axis: usize, shift: f64, limit: f64 },
    #[error("shift vector has {got} components for a {dim}-dimensional grid")]
    ShiftDimension { got: usize, dim: usize },
}

/// Symmetric `dim × dim` Fisher matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl FisherMatrix {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.entries[j * self.dim + k]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|j| self.get(j, j)).sum()
    }

    /// `I_jk Δ^j Δ^k`.
    pub fn quadratic_form(&self, delta: &[f64]) -> f64 {
        let mut q = 0.0;
        for j in 0..self.dim {
            for k in 0..self.dim {
                q += self.get(j, k) * delta[j] * delta[k];
            }
        }
        q
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        match self.dim {
            1 => vec![self.entries[0]],
            _ => {
                let (a, b, d) = (self.get(0, 0), self.get(0, 1), self.get(1, 1));
                let mean = 0.5 * (a + d);
                let r = (0.25 * (a - d).powi(2) + b * b).sqrt();
                vec![mean - r, mean + r]
            }
        }
    }
}

fn check_positive(p: &RealField) -> Result<(), InfoError> {
    match p.values().iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
        Some((index, &value)) => Err(InfoError::NonPositive { index, value }),
        None => Ok(()),
    }
}

/// `J(Q:P) = ∫ Q ln(Q/P)`.
pub fn cross_entropy(q: &RealField, p: &RealField) -> Result<f64, InfoError> {
    q.same_grid(p)?;
    check_positive(q)?;
    check_positive(p)?;
    Ok(q.zip_map(p, |a, b| a * (a / b).ln())?.integrate()?)
}

fn check_boundary_decay(p: &RealField) -> Result<(), InfoError> {
    let grid = p.grid();
    if grid.bc() == Boundary::Periodic {
        return Ok(());
    }
    let max = p.max_value();
    let limit = BOUNDARY_DECAY * max;
    for k in boundary_indices(grid) {
        let value = p.values()[k];
        if value > limit {
            return Err(InfoError::BoundaryNotNegligible { index: k, value, max });
        }
    }
    Ok(())
}

fn boundary_indices(grid: &Grid) -> Vec<usize> {
    match grid.axes() {
        [x] => vec![0, x.n - 1],
        [x, y] => (0..grid.len())
            .filter(|&k| {
                let (i, j) = (k / y.n, k % y.n);
                i == 0 || j == 0 || i == x.n - 1 || j == y.n - 1
            })
            .collect(),
        _ => Vec::new(),
    }
}

/// `I_jk = ½ ∫ (1/P) ∂_j P ∂_k P` from grid derivatives and quadrature.
pub fn fisher_matrix(p: &RealField) -> Result<FisherMatrix, InfoError> {
    check_positive(p)?;
    check_boundary_decay(p)?;
    let dim = p.grid().dim();
    let grads = (0..dim)
        .map(|a| p.derivative(a, 1))
        .collect::<Result<Vec<_>, _>>()?;
    let mut entries = vec![0.0; dim * dim];
    for j in 0..dim {
        for k in j..dim {
            let integrand = RealField::new(
                p.grid().clone(),
                p.values()
                    .iter()
                    .zip(grads[j].values().iter().zip(grads[k].values()))
                    .map(|(&pv, (&a, &b))| 0.5 * a * b / pv)
                    .collect(),
            )?;
            let v = integrand.integrate()?;
            entries[j * dim + k] = v;
            entries[k * dim + j] = v;
        }
    }
    Ok(FisherMatrix { dim, entries })
}

/// Contraction `g^{ik} I_ik` with `g = diag(1/m, …)`; the time direction of
/// extended configuration space carries metric 0 and is simply absent.
pub fn fisher_information(p: &RealField, params: &PhysParams) -> Result<f64, InfoError> {
    Ok(params.inverse_metric() * fisher_matrix(p)?.trace())
}

/// Outcome of comparing the exact shifted cross-entropy with its quadratic form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpansionReport {
    pub kl: f64,
    pub quad: f64,
    pub residual: f64,
}

/// Evaluates `J(P(·+Δ) : P)` and `I_jk Δ^j Δ^k`.
///
/// The shifted density is produced by cubic Lagrange interpolation of the
/// gridded `P` and renormalized on the grid.
pub fn verify_quadratic_expansion(p: &RealField, delta: &[f64]) -> Result<ExpansionReport, InfoError> {
    let grid = p.grid();
    if delta.len() != grid.dim() {
        return Err(InfoError::ShiftDimension { got: delta.len(), dim: grid.dim() });
    }
    for (axis, (&d, ax)) in delta.iter().zip(grid.axes()).enumerate() {
        let limit = MAX_SHIFT_CELLS * ax.dx;
        if !(d.abs() <= limit) {
            return Err(InfoError::ShiftTooLarge { axis, shift: d, limit });
        }
    }
    let fisher = fisher_matrix(p)?;
    let quad = fisher.quadratic_form(delta);
    if delta.iter().all(|&d| d == 0.0) {
        return Ok(ExpansionReport { kl: 0.0, quad, residual: quad.abs() });
    }
    let shifted = shift_density(p, delta)?;
    let kl = cross_entropy(&shifted, p)?;
    Ok(ExpansionReport { kl, quad, residual: (kl - quad).abs() })
}

/// `P(y + Δ)` sampled on the same grid, renormalized.
pub fn shift_density(p: &RealField, delta: &[f64]) -> Result<RealField, InfoError> {
    let grid = p.grid();
    let tiny = f64::MIN_POSITIVE;
    let values: Vec<f64> = match grid.axes() {
        [x] => (0..x.n)
            .map(|i| interp_line(p.values(), 1, 0, x.n, i as f64 + delta[0] / x.dx, grid.bc()))
            .collect(),
        [x, y] => {
            // shift along y first, then along x
            let mut tmp = vec![0.0; grid.len()];
            for i in 0..x.n {
                for j in 0..y.n {
                    tmp[i * y.n + j] =
                        interp_line(p.values(), 1, i * y.n, y.n, j as f64 + delta[1] / y.dx, grid.bc());
                }
            }
            let mut out = vec![0.0; grid.len()];
            for i in 0..x.n {
                for j in 0..y.n {
                    out[i * y.n + j] = interp_line(&tmp, y.n, j, x.n, i as f64 + delta[0] / x.dx, grid.bc());
                }
            }
            out
        }
        _ => unreachable!("grid dimension is validated at construction"),
    };
    let shifted = RealField::new(grid.clone(), values.into_iter().map(|v| v.max(tiny)).collect())?;
    Ok(normalize(&shifted, DensityFloor::Absolute(tiny))?)
}

/// Four-point Lagrange interpolation at fractional index `t` of the line
/// `f[offset + k·stride]`, `k < n`. Outside a Dirichlet domain the edge value
/// is held; periodic lines wrap.
fn interp_line(f: &[f64], stride: usize, offset: usize, n: usize, t: f64, bc: Boundary) -> f64 {
    let at = |k: isize| -> f64 {
        let idx = match bc {
            Boundary::Periodic => k.rem_euclid(n as isize) as usize,
            Boundary::Dirichlet => k.clamp(0, n as isize - 1) as usize,
        };
        f[offset + idx * stride]
    };
    let base = t.floor();
    let s = t - base;
    let k = base as isize;
    let (fm, f0, f1, f2) = (at(k - 1), at(k), at(k + 1), at(k + 2));
    let wm = -s * (s - 1.0) * (s - 2.0) / 6.0;
    let w0 = (s + 1.0) * (s - 1.0) * (s - 2.0) / 2.0;
    let w1 = -(s + 1.0) * s * (s - 2.0) / 2.0;
    let w2 = (s + 1.0) * s * (s - 1.0) / 6.0;
    wm * fm + w0 * f0 + w1 * f1 + w2 * f2
}
