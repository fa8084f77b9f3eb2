//! Hydrodynamical state `(P, S)`, wavefunctions, physical parameters and the
//! Madelung map `ψ = √P · exp(iS/ℏ)` between them.

use std::f64::consts::PI;

use num_complex::Complex64;
use thiserror::Error;

use crate::format::sci;
use crate::grid::{ComplexField, Grid, GridError, RealField};
use crate::potential::{EvalError, PotentialExpr};

/// Default tolerance on `|∫P − 1|`.
pub const DEFAULT_NORM_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldsError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Potential(#[from] EvalError),
    #[error("density is not normalized: integral = {norm}")]
    NotNormalized { norm: f64 },
    #[error("density {value:e} below floor {floor:e} at index {index}")]
    BelowFloor { index: usize, value: f64, floor: f64 },
    #[error("density must be non-negative with positive integral")]
    DegenerateDensity,
    #[error("wavefunction has a node at index {index} (|psi|^2 = {density:e} < floor {floor:e}); phase undefined")]
    Node { index: usize, density: f64, floor: f64 },
    #[error("invalid physical parameters: {0}")]
    InvalidParams(String),
    #[error("anchor index {anchor} outside grid of {len} points")]
    BadAnchor { anchor: usize, len: usize },
    #[error("malformed state file: {0}")]
    Csv(String),
}

/// Minimum admissible density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DensityFloor {
    /// Fraction of the maximum density.
    Relative(f64),
    Absolute(f64),
}

impl Default for DensityFloor {
    fn default() -> Self {
        DensityFloor::Relative(1e-12)
    }
}

impl DensityFloor {
    pub fn resolve(self, max_density: f64) -> f64 {
        match self {
            DensityFloor::Relative(r) => r * max_density,
            DensityFloor::Absolute(a) => a,
        }
    }
}

/// Mass, ℏ, the Fisher coupling λ and the potential.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysParams {
    pub mass: f64,
    pub hbar: f64,
    pub lambda: f64,
    pub potential: PotentialExpr,
}

impl PhysParams {
    /// λ = (ℏ/2)², the coupling for which the hydrodynamics is Schrödinger's.
    pub fn paper(mass: f64, hbar: f64, potential: PotentialExpr) -> Result<Self, FieldsError> {
        Self::explicit(mass, hbar, 0.25 * hbar * hbar, potential)
    }

    pub fn explicit(
        mass: f64,
        hbar: f64,
        lambda: f64,
        potential: PotentialExpr,
    ) -> Result<Self, FieldsError> {
        if !(mass.is_finite() && mass > 0.0) {
            return Err(FieldsError::InvalidParams(format!("mass must be positive, got {mass}")));
        }
        if !(hbar.is_finite() && hbar > 0.0) {
            return Err(FieldsError::InvalidParams(format!("hbar must be positive, got {hbar}")));
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(FieldsError::InvalidParams(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(Self { mass, hbar, lambda, potential })
    }

    /// Diagonal entry `1/m` of the inverse configuration-space metric.
    pub fn inverse_metric(&self) -> f64 {
        1.0 / self.mass
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self, FieldsError> {
        Self::explicit(self.mass, self.hbar, lambda, self.potential.clone())
    }

    pub fn potential_on(&self, grid: &Grid) -> Result<RealField, FieldsError> {
        Ok(self.potential.sample(grid)?)
    }
}

/// Probability density `P` and action `S` on a common grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HydroState {
    p: RealField,
    s: RealField,
}

impl HydroState {
    /// Checks the default floor (`1e-12 · max P`) and normalization (`1e-8`).
    pub fn new(p: RealField, s: RealField) -> Result<Self, FieldsError> {
        Self::with_checks(p, s, DensityFloor::default(), DEFAULT_NORM_TOL)
    }

    pub fn with_checks(
        p: RealField,
        s: RealField,
        floor: DensityFloor,
        tol_norm: f64,
    ) -> Result<Self, FieldsError> {
        p.same_grid(&s)?;
        check_floor(&p, floor)?;
        let norm = p.integrate()?;
        if (norm - 1.0).abs() > tol_norm {
            return Err(FieldsError::NotNormalized { norm });
        }
        Ok(Self { p, s })
    }

    /// Skips the density checks; used for states produced by the integrators,
    /// which carry their own diagnostics.
    pub(crate) fn from_parts(p: RealField, s: RealField) -> Self {
        debug_assert_eq!(p.grid(), s.grid());
        Self { p, s }
    }

    pub fn p(&self) -> &RealField {
        &self.p
    }

    pub fn s(&self) -> &RealField {
        &self.s
    }

    pub fn grid(&self) -> &Grid {
        self.p.grid()
    }

    /// Replaces the action, keeping the density.
    pub fn with_s(&self, s: RealField) -> Result<Self, FieldsError> {
        self.p.same_grid(&s)?;
        Ok(Self { p: self.p.clone(), s })
    }
}

fn check_floor(p: &RealField, floor: DensityFloor) -> Result<(), FieldsError> {
    let floor = floor.resolve(p.max_value());
    if let Some((index, &value)) = p.values().iter().enumerate().find(|(_, &v)| !(v >= floor) || v <= 0.0) {
        return Err(FieldsError::BelowFloor { index, value, floor });
    }
    Ok(())
}

/// A complex wavefunction with unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveFunction {
    psi: ComplexField,
}

impl WaveFunction {
    pub fn new(psi: ComplexField) -> Result<Self, FieldsError> {
        Self::with_tolerance(psi, DEFAULT_NORM_TOL)
    }

    pub fn with_tolerance(psi: ComplexField, tol_norm: f64) -> Result<Self, FieldsError> {
        let norm = psi.map(|z| z.norm_sqr())?.integrate()?;
        if (norm - 1.0).abs() > tol_norm {
            return Err(FieldsError::NotNormalized { norm });
        }
        Ok(Self { psi })
    }

    /// Rescales `psi` to unit norm.
    pub fn normalized(psi: ComplexField) -> Result<Self, FieldsError> {
        let norm = psi.map(|z| z.norm_sqr())?.integrate()?;
        if !(norm > 0.0) {
            return Err(FieldsError::DegenerateDensity);
        }
        let scale = norm.sqrt().recip();
        Ok(Self { psi: psi.map(|z| z * scale)? })
    }

    pub(crate) fn from_field(psi: ComplexField) -> Self {
        Self { psi }
    }

    pub fn psi(&self) -> &ComplexField {
        &self.psi
    }

    pub fn grid(&self) -> &Grid {
        self.psi.grid()
    }

    pub fn density(&self) -> RealField {
        self.psi
            .map(|z| z.norm_sqr())
            .expect("squared modulus of finite values is finite")
    }

    pub fn norm(&self) -> f64 {
        self.density().integrate().unwrap_or(f64::NAN)
    }
}

/// `P / ∫P`, then clamps to the floor and renormalizes once.
pub fn normalize(p: &RealField, floor: DensityFloor) -> Result<RealField, FieldsError> {
    if p.values().iter().any(|&v| v < 0.0) {
        return Err(FieldsError::DegenerateDensity);
    }
    let total = p.integrate()?;
    if !(total > 0.0) {
        return Err(FieldsError::DegenerateDensity);
    }
    let scaled = p.map(|v| v / total)?;
    let f = floor.resolve(scaled.max_value());
    if scaled.values().iter().all(|&v| v >= f) {
        return Ok(scaled);
    }
    let clamped = scaled.map(|v| v.max(f))?;
    let total = clamped.integrate()?;
    Ok(clamped.map(|v| v / total)?)
}

/// `ψ = √P · exp(iS/ℏ)` pointwise.
pub fn madelung_forward(state: &HydroState, hbar: f64) -> WaveFunction {
    let psi = state
        .p
        .zip_map(&state.s, |p, s| Complex64::from_polar(p.sqrt(), s / hbar))
        .expect("state fields share a grid and are finite");
    WaveFunction::from_field(psi)
}

/// Inverse Madelung map.
///
/// `P = |ψ|²`; `S = ℏ·arg ψ` unwrapped by marching outward from `anchor`
/// (default: grid center) so that neighbouring values differ by less than
/// `πℏ`. On 2D grids the march follows a boustrophedon raster path.
pub fn madelung_inverse(
    psi: &WaveFunction,
    hbar: f64,
    anchor: Option<usize>,
    floor: DensityFloor,
) -> Result<HydroState, FieldsError> {
    let grid = psi.grid().clone();
    let density = psi.density();
    let f = floor.resolve(density.max_value());
    if let Some((index, &d)) = density.values().iter().enumerate().find(|(_, &d)| d < f || d <= 0.0) {
        return Err(FieldsError::Node { index, density: d, floor: f });
    }
    let anchor = anchor.unwrap_or_else(|| grid.center_index());
    if anchor >= grid.len() {
        return Err(FieldsError::BadAnchor { anchor, len: grid.len() });
    }

    let path = raster_path(&grid);
    let start = path.iter().position(|&k| k == anchor).expect("path visits every point");
    let phase = |k: usize| {
        let a = psi.psi().values()[k].arg();
        // arg returns [-π, π]; the anchor branch is (-π, π]
        if a <= -PI {
            a + 2.0 * PI
        } else {
            a
        }
    };
    let mut theta = vec![0.0; grid.len()];
    theta[anchor] = phase(anchor);
    for dir in [1isize, -1] {
        let mut prev = anchor;
        let mut pos = start as isize + dir;
        while pos >= 0 && (pos as usize) < path.len() {
            let k = path[pos as usize];
            let raw = phase(k);
            let turns = ((theta[prev] - raw) / (2.0 * PI)).round();
            theta[k] = raw + 2.0 * PI * turns;
            prev = k;
            pos += dir;
        }
    }
    let s = RealField::new(grid, theta.into_iter().map(|t| hbar * t).collect())?;
    Ok(HydroState { p: density, s })
}

fn raster_path(grid: &Grid) -> Vec<usize> {
    match grid.axes() {
        [x] => (0..x.n).collect(),
        [x, y] => (0..x.n)
            .flat_map(|i| {
                let row: Vec<usize> = if i % 2 == 0 {
                    (0..y.n).map(|j| i * y.n + j).collect()
                } else {
                    (0..y.n).rev().map(|j| i * y.n + j).collect()
                };
                row
            })
            .collect(),
        _ => unreachable!("grid dimension is validated at construction"),
    }
}

/// Velocity `u = (1/m) ∂S` along each axis.
pub fn velocity_field(state: &HydroState, params: &PhysParams) -> Result<Vec<RealField>, FieldsError> {
    let g = params.inverse_metric();
    (0..state.grid().dim())
        .map(|axis| Ok(state.s.derivative(axis, 1)?.map(|v| g * v)?))
        .collect()
}

fn coord_header(grid: &Grid) -> &'static str {
    if grid.dim() == 1 {
        "x"
    } else {
        "x,y"
    }
}

fn coord_text(grid: &Grid, k: usize) -> String {
    let [x, y] = grid.point(k);
    if grid.dim() == 1 {
        sci(x)
    } else {
        format!("{},{}", sci(x), sci(y))
    }
}

/// CSV with header `x[,y],P,S`.
pub fn hydro_to_csv(state: &HydroState) -> String {
    let grid = state.grid();
    let mut out = format!("{},P,S\n", coord_header(grid));
    for k in 0..grid.len() {
        out.push_str(&format!(
            "{},{},{}\n",
            coord_text(grid, k),
            sci(state.p.values()[k]),
            sci(state.s.values()[k])
        ));
    }
    out
}

/// CSV with header `x[,y],re_psi,im_psi`.
pub fn wave_to_csv(psi: &WaveFunction) -> String {
    let grid = psi.grid();
    let mut out = format!("{},re_psi,im_psi\n", coord_header(grid));
    for (k, z) in psi.psi().values().iter().enumerate() {
        out.push_str(&format!("{},{},{}\n", coord_text(grid, k), sci(z.re), sci(z.im)));
    }
    out
}

/// Reads the two data columns of a state CSV written on `grid`.
///
/// Coordinates must match the grid nodes to within `1e-9` of the spacing.
pub fn read_state_csv(text: &str, grid: &Grid) -> Result<(RealField, RealField), FieldsError> {
    let ncoord = grid.dim();
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| FieldsError::Csv("empty file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() != ncoord + 2 {
        return Err(FieldsError::Csv(format!("expected {} columns, header is `{header}`", ncoord + 2)));
    }
    let mut a = Vec::with_capacity(grid.len());
    let mut b = Vec::with_capacity(grid.len());
    for (row, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let vals: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| FieldsError::Csv(format!("row {}: {e}", row + 2)))?;
        if vals.len() != ncoord + 2 {
            return Err(FieldsError::Csv(format!("row {} has {} columns", row + 2, vals.len())));
        }
        if row >= grid.len() {
            return Err(FieldsError::Csv("more rows than grid points".into()));
        }
        let pt = grid.point(row);
        for c in 0..ncoord {
            if (vals[c] - pt[c]).abs() > 1e-9 * grid.axes()[c].dx.max(1.0) {
                return Err(FieldsError::Csv(format!("row {} coordinate does not match the grid", row + 2)));
            }
        }
        a.push(vals[ncoord]);
        b.push(vals[ncoord + 1]);
    }
    if a.len() != grid.len() {
        return Err(FieldsError::Csv(format!("{} rows for {} grid points", a.len(), grid.len())));
    }
    Ok((RealField::new(grid.clone(), a)?, RealField::new(grid.clone(), b)?))
}

/// Normalized Gaussian density `N(center, σ²)` on a 1D grid.
pub fn gaussian_density(grid: &Grid, center: f64, sigma: f64) -> Result<RealField, FieldsError> {
    let c = (2.0 * PI * sigma * sigma).sqrt().recip();
    Ok(RealField::from_fn(grid, |x, _| c * (-(x - center).powi(2) / (2.0 * sigma * sigma)).exp())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Boundary;

    fn grid() -> Grid {
        Grid::new_1d(-10.0, 10.0, 801, Boundary::Dirichlet).unwrap()
    }

    fn state(s: impl Fn(f64) -> f64) -> HydroState {
        let g = grid();
        let p = gaussian_density(&g, 0.3, 1.1).unwrap();
        let p = normalize(&p, DensityFloor::Relative(1e-30)).unwrap();
        let s = RealField::from_fn(&g, |x, _| s(x)).unwrap();
        HydroState::with_checks(p, s, DensityFloor::Relative(1e-30), 1e-12).unwrap()
    }

    #[test]
    fn params_default_lambda() {
        let p = PhysParams::paper(1.0, 2.0, PotentialExpr::zero()).unwrap();
        assert_eq!(p.lambda, 1.0);
        assert!(PhysParams::explicit(1.0, 1.0, -0.1, PotentialExpr::zero()).is_err());
        assert!(PhysParams::paper(0.0, 1.0, PotentialExpr::zero()).is_err());
    }

    #[test]
    fn normalize_examples() {
        let g = grid();
        let unit = gaussian_density(&g, 0.0, 1.0).unwrap();
        let twice = unit.map(|v| 2.0 * v).unwrap();
        let n = normalize(&twice, DensityFloor::Relative(1e-30)).unwrap();
        let scale = unit.integrate().unwrap();
        assert!(n.max_abs_diff(&unit.map(|v| v / scale).unwrap()).unwrap() < 1e-14);

        let again = normalize(&n, DensityFloor::Relative(1e-30)).unwrap();
        assert!(again.max_abs_diff(&n).unwrap() < 1e-14);

        let holed = RealField::from_fn(&g, |x, _| if x.abs() < 2.0 { 0.0 } else { 1.0 }).unwrap();
        let floored = normalize(&holed, DensityFloor::default()).unwrap();
        let floor = 1e-12 * floored.max_value();
        assert!(floored.min_value() >= floor * (1.0 - 1e-12));
        assert!((floored.integrate().unwrap() - 1.0).abs() < 1e-12);

        assert_eq!(
            normalize(&RealField::constant(&g, 0.0).unwrap(), DensityFloor::default()),
            Err(FieldsError::DegenerateDensity)
        );
    }

    #[test]
    fn hydro_state_rejects_bad_density() {
        let g = grid();
        let s = RealField::constant(&g, 0.0).unwrap();
        let p = gaussian_density(&g, 0.0, 1.0).unwrap().map(|v| 3.0 * v).unwrap();
        assert!(matches!(
            HydroState::with_checks(p, s.clone(), DensityFloor::Absolute(0.0), 1e-8),
            Err(FieldsError::NotNormalized { .. })
        ));
        let p = gaussian_density(&g, 0.0, 1.0).unwrap();
        assert!(matches!(HydroState::new(p, s), Err(FieldsError::BelowFloor { .. })));
    }

    #[test]
    fn forward_of_gaussian_is_real_amplitude() {
        let st = state(|_| 0.0);
        let psi = madelung_forward(&st, 1.0);
        for (z, p) in psi.psi().values().iter().zip(st.p().values()) {
            assert_eq!(z.im, 0.0);
            assert!(z.re > 0.0);
            assert!((z.norm_sqr() - p).abs() <= 4.0 * f64::EPSILON * p);
        }
    }

    #[test]
    fn phase_periodicity() {
        let hbar = 0.7;
        let a = state(|x| 0.4 * x);
        let b = state(|x| 0.4 * x + 2.0 * PI * hbar);
        let (pa, pb) = (madelung_forward(&a, hbar), madelung_forward(&b, hbar));
        for (za, zb) in pa.psi().values().iter().zip(pb.psi().values()) {
            assert!((za - zb).norm() < 1e-14);
        }
    }

    #[test]
    fn plane_wave_forward_and_inverse() {
        let g = Grid::new_1d(0.0, 4.0, 400, Boundary::Periodic).unwrap();
        let (hbar, k) = (1.0, 2.0 * PI * 3.0 / 4.0);
        let p = RealField::constant(&g, 0.25).unwrap();
        let s = RealField::from_fn(&g, |x, _| hbar * k * x).unwrap();
        let st = HydroState::new(p, s).unwrap();
        let psi = madelung_forward(&st, hbar);
        for (z, x) in psi.psi().values().iter().zip(g.xs()) {
            assert!((z - Complex64::from_polar(0.5, k * x)).norm() < 1e-13);
        }
        let back = madelung_inverse(&psi, hbar, None, DensityFloor::default()).unwrap();
        let offset = back.s().values()[0];
        for (s, x) in back.s().values().iter().zip(g.xs()) {
            assert!((s - offset - hbar * k * x).abs() < 1e-10);
        }
    }

    #[test]
    fn round_trip_is_identity_modulo_one_branch() {
        let hbar = 1.3;
        let st = state(|x| 2.0 * x + 0.3 * x * x - 5.0);
        let back = madelung_inverse(&madelung_forward(&st, hbar), hbar, None, DensityFloor::Relative(1e-30)).unwrap();
        assert!(back.p().max_abs_diff(st.p()).unwrap() < 1e-12);
        let shift = back.s().values()[0] - st.s().values()[0];
        let k = (shift / (2.0 * PI * hbar)).round();
        for (b, a) in back.s().values().iter().zip(st.s().values()) {
            assert!((b - a - 2.0 * PI * hbar * k).abs() < 1e-12);
        }
        let anchor = st.grid().center_index();
        assert!(back.s().values()[anchor].abs() <= PI * hbar);
    }

    #[test]
    fn node_is_refused() {
        let g = grid();
        let psi = ComplexField::from_fn(&g, |x, _| {
            Complex64::new(x * (-0.5 * x * x).exp() * (2.0 / PI.sqrt()).sqrt(), 0.0)
        })
        .unwrap();
        let psi = WaveFunction::normalized(psi).unwrap();
        assert!(matches!(
            madelung_inverse(&psi, 1.0, None, DensityFloor::default()),
            Err(FieldsError::Node { .. })
        ));
    }

    #[test]
    fn velocity_examples() {
        let params = PhysParams::paper(4.0, 1.0, PotentialExpr::zero()).unwrap();
        let u = velocity_field(&state(|x| 2.0 * x), &params).unwrap();
        assert!(u[0].values().iter().all(|v| (v - 0.5).abs() < 1e-12));
        let u = velocity_field(&state(|_| 3.0), &params).unwrap();
        assert!(u[0].values().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn velocity_is_linear_in_action() {
        let params = PhysParams::paper(1.7, 1.0, PotentialExpr::zero()).unwrap();
        let s1 = |x: f64| x.sin() * 0.3;
        let s2 = |x: f64| 0.1 * x * x;
        let u1 = velocity_field(&state(s1), &params).unwrap();
        let u2 = velocity_field(&state(s2), &params).unwrap();
        let u12 = velocity_field(&state(|x| s1(x) + s2(x)), &params).unwrap();
        for k in 0..u1[0].len() {
            let sum = u1[0].values()[k] + u2[0].values()[k];
            assert!((u12[0].values()[k] - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_round_trip() {
        let st = state(|x| 0.2 * x);
        let text = hydro_to_csv(&st);
        assert!(text.starts_with("x,P,S\n"));
        let (p, s) = read_state_csv(&text, st.grid()).unwrap();
        assert_eq!(&p, st.p());
        assert_eq!(&s, st.s());
        let csv = wave_to_csv(&madelung_forward(&st, 1.0));
        assert!(csv.starts_with("x,re_psi,im_psi\n"));
        assert_eq!(csv.lines().count(), st.grid().len() + 1);
    }
}
