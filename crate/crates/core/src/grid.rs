//! Uniform tensor-product grids, sampled fields, finite differences and quadrature.
//!
//! Every other module works on [`Field`]s living on a [`Grid`]. Derivatives are
//! second-order central differences in the interior; Dirichlet grids close the
//! stencil with second-order one-sided formulas, periodic grids wrap around.
//! Quadrature is the trapezoidal rule on Dirichlet grids and the rectangle rule
//! on periodic grids.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Sub};

use num_complex::Complex64;
use thiserror::Error;

/// Smallest admissible number of points per axis.
pub const MIN_POINTS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("axis bounds must satisfy min < max (got min={min}, max={max})")]
    InvalidBounds { min: f64, max: f64 },
    #[error("each axis needs at least {MIN_POINTS} points (got {n})")]
    TooFewPoints { n: usize },
    #[error("grid dimension must be 1 or 2 (got {0})")]
    UnsupportedDimension(usize),
    #[error("axis {axis} out of range for a {dim}-dimensional grid")]
    AxisOutOfRange { axis: usize, dim: usize },
    #[error("derivative order {0} not supported (use 1 or 2)")]
    UnsupportedOrder(u8),
    #[error("axis has {n} points, too few for the stencil")]
    StencilTooSmall { n: usize },
    #[error("field has {got} values but the grid has {expected} points")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite value at grid index {index}")]
    NonFinite { index: usize },
    #[error("fields live on different grids")]
    GridMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Boundary {
    Dirichlet,
    Periodic,
}

impl fmt::Display for Boundary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Boundary::Dirichlet => f.write_str("dirichlet"),
            Boundary::Periodic => f.write_str("periodic"),
        }
    }
}

/// One axis of a tensor-product grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub n: usize,
    pub dx: f64,
}

impl Axis {
    fn new(min: f64, max: f64, n: usize, bc: Boundary) -> Result<Self, GridError> {
        if !(min.is_finite() && max.is_finite() && min < max) {
            return Err(GridError::InvalidBounds { min, max });
        }
        if n < MIN_POINTS {
            return Err(GridError::TooFewPoints { n });
        }
        let dx = match bc {
            Boundary::Dirichlet => (max - min) / (n - 1) as f64,
            Boundary::Periodic => (max - min) / n as f64,
        };
        Ok(Self { min, max, n, dx })
    }

    /// Coordinate of node `i`.
    #[inline]
    pub fn coord(&self, i: usize) -> f64 {
        self.min + i as f64 * self.dx
    }

    pub fn coords(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.coord(i)).collect()
    }

    pub fn length(&self) -> f64 {
        self.max - self.min
    }
}

/// A uniform 1D or 2D grid with a boundary-condition tag.
///
/// Values on a 2D grid are stored row-major with the x index slow and the
/// y index fast: `index = i * ny + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    axes: Vec<Axis>,
    bc: Boundary,
}

impl Grid {
    pub fn new_1d(min: f64, max: f64, n: usize, bc: Boundary) -> Result<Self, GridError> {
        Ok(Self {
            axes: vec![Axis::new(min, max, n, bc)?],
            bc,
        })
    }

    pub fn new_2d(
        x: (f64, f64, usize),
        y: (f64, f64, usize),
        bc: Boundary,
    ) -> Result<Self, GridError> {
        Ok(Self {
            axes: vec![Axis::new(x.0, x.1, x.2, bc)?, Axis::new(y.0, y.1, y.2, bc)?],
            bc,
        })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn bc(&self) -> Boundary {
        self.bc
    }

    pub fn axis(&self, axis: usize) -> Result<&Axis, GridError> {
        self.axes.get(axis).ok_or(GridError::AxisOutOfRange {
            axis,
            dim: self.dim(),
        })
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    /// Spacing of the first axis; the only spacing on 1D grids.
    pub fn dx(&self) -> f64 {
        self.axes[0].dx
    }

    /// Total number of grid points.
    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.n).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinates of the point with flat index `index` (`y` is 0 on 1D grids).
    pub fn point(&self, index: usize) -> [f64; 2] {
        match self.axes.as_slice() {
            [x] => [x.coord(index), 0.0],
            [x, y] => [x.coord(index / y.n), y.coord(index % y.n)],
            _ => unreachable!("grid dimension is validated at construction"),
        }
    }

    /// Coordinates along the first axis, one per grid point of a 1D grid.
    pub fn xs(&self) -> Vec<f64> {
        self.axes[0].coords()
    }

    /// Quadrature weights: trapezoid (Dirichlet) or rectangle (Periodic),
    /// tensor product on 2D grids.
    pub fn weights(&self) -> Vec<f64> {
        let vol = self.cell_volume();
        self.unit_weights().into_iter().map(|w| w * vol).collect()
    }

    /// Product of the spacings of all axes.
    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(|a| a.dx).product()
    }

    /// Quadrature weights divided by the cell volume (1, or 1/2 and 1/4 at
    /// Dirichlet edges and corners).
    pub fn unit_weights(&self) -> Vec<f64> {
        let per_axis: Vec<Vec<f64>> = self
            .axes
            .iter()
            .map(|a| {
                let mut w = vec![1.0; a.n];
                if self.bc == Boundary::Dirichlet {
                    w[0] *= 0.5;
                    w[a.n - 1] *= 0.5;
                }
                w
            })
            .collect();
        match per_axis.as_slice() {
            [wx] => wx.clone(),
            [wx, wy] => wx
                .iter()
                .flat_map(|&a| wy.iter().map(move |&b| a * b))
                .collect(),
            _ => unreachable!("grid dimension is validated at construction"),
        }
    }

    /// Flat index of the grid point nearest the domain center.
    pub fn center_index(&self) -> usize {
        match self.axes.as_slice() {
            [x] => x.n / 2,
            [x, y] => (x.n / 2) * y.n + y.n / 2,
            _ => unreachable!("grid dimension is validated at construction"),
        }
    }

    /// `(offset, stride, count)` triples describing every grid line along `axis`.
    fn lines(&self, axis: usize) -> Vec<(usize, usize, usize)> {
        match (self.axes.as_slice(), axis) {
            ([x], 0) => vec![(0, 1, x.n)],
            ([x, y], 0) => (0..y.n).map(|j| (j, y.n, x.n)).collect(),
            ([x, y], 1) => (0..x.n).map(|i| (i * y.n, 1, y.n)).collect(),
            _ => Vec::new(),
        }
    }
}

/// Numbers a [`Field`] can hold: `f64` or `Complex64`.
pub trait Scalar:
    Copy
    + Default
    + Send
    + Sync
    + fmt::Debug
    + PartialEq
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<f64, Output = Self>
    + AddAssign
{
    fn is_finite(self) -> bool;
}

impl Scalar for f64 {
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

impl Scalar for Complex64 {
    #[inline]
    fn is_finite(self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
}

/// Values sampled at every point of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Field<T: Scalar> {
    grid: Grid,
    values: Vec<T>,
}

pub type RealField = Field<f64>;
pub type ComplexField = Field<Complex64>;

impl<T: Scalar> Field<T> {
    /// Wraps `values`, checking the length and that every entry is finite.
    pub fn new(grid: Grid, values: Vec<T>) -> Result<Self, GridError> {
        if values.len() != grid.len() {
            return Err(GridError::LengthMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite { index });
        }
        Ok(Self { grid, values })
    }

    /// Samples `f(x, y)` at every grid point (`y` is 0 on 1D grids).
    pub fn from_fn(grid: &Grid, f: impl Fn(f64, f64) -> T) -> Result<Self, GridError> {
        let values = (0..grid.len())
            .map(|k| {
                let [x, y] = grid.point(k);
                f(x, y)
            })
            .collect();
        Self::new(grid.clone(), values)
    }

    pub fn constant(grid: &Grid, value: T) -> Result<Self, GridError> {
        Self::new(grid.clone(), vec![value; grid.len()])
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_grid<U: Scalar>(&self, other: &Field<U>) -> Result<(), GridError> {
        if self.grid == other.grid {
            Ok(())
        } else {
            Err(GridError::GridMismatch)
        }
    }

    /// Pointwise map onto a field of possibly different scalar kind.
    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Result<Field<U>, GridError> {
        Field::new(self.grid.clone(), self.values.iter().map(|&v| f(v)).collect())
    }

    /// Pointwise combination of two fields on the same grid.
    pub fn zip_map<U: Scalar, R: Scalar>(
        &self,
        other: &Field<U>,
        f: impl Fn(T, U) -> R,
    ) -> Result<Field<R>, GridError> {
        self.same_grid(other)?;
        Field::new(
            self.grid.clone(),
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    /// Finite-difference derivative of order 1 or 2 along `axis`.
    pub fn derivative(&self, axis: usize, order: u8) -> Result<Self, GridError> {
        let ax = *self.grid.axis(axis)?;
        if !(order == 1 || order == 2) {
            return Err(GridError::UnsupportedOrder(order));
        }
        if ax.n < 4 {
            return Err(GridError::StencilTooSmall { n: ax.n });
        }
        let periodic = self.grid.bc == Boundary::Periodic;
        let mut out = vec![T::default(); self.values.len()];
        let mut line = Vec::with_capacity(ax.n);
        let mut dline = vec![T::default(); ax.n];
        for (offset, stride, count) in self.grid.lines(axis) {
            line.clear();
            line.extend((0..count).map(|k| self.values[offset + k * stride]));
            match order {
                1 => first_derivative_line(&line, ax.dx, periodic, &mut dline),
                _ => second_derivative_line(&line, ax.dx, periodic, &mut dline),
            }
            for (k, &d) in dline.iter().enumerate().take(count) {
                out[offset + k * stride] = d;
            }
        }
        Field::new(self.grid.clone(), out)
    }

    /// Quadrature of the field over the whole domain.
    pub fn integrate(&self) -> Result<T, GridError> {
        if let Some(index) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite { index });
        }
        Ok(weighted_sum(&self.grid.unit_weights(), &self.values) * self.grid.cell_volume())
    }
}

impl RealField {
    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Largest absolute pointwise difference to `other`.
    pub fn max_abs_diff(&self, other: &RealField) -> Result<f64, GridError> {
        self.same_grid(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

pub(crate) fn weighted_sum<T: Scalar>(weights: &[f64], values: &[T]) -> T {
    let mut acc = T::default();
    for (&w, &v) in weights.iter().zip(values) {
        acc += v * w;
    }
    acc
}

fn first_derivative_line<T: Scalar>(f: &[T], h: f64, periodic: bool, out: &mut [T]) {
    let n = f.len();
    let c = 0.5 / h;
    for i in 1..n - 1 {
        out[i] = (f[i + 1] - f[i - 1]) * c;
    }
    if periodic {
        out[0] = (f[1] - f[n - 1]) * c;
        out[n - 1] = (f[0] - f[n - 2]) * c;
    } else {
        out[0] = (f[1] * 4.0 - f[0] * 3.0 - f[2]) * c;
        out[n - 1] = (f[n - 1] * 3.0 - f[n - 2] * 4.0 + f[n - 3]) * c;
    }
}

fn second_derivative_line<T: Scalar>(f: &[T], h: f64, periodic: bool, out: &mut [T]) {
    let n = f.len();
    let c = 1.0 / (h * h);
    for i in 1..n - 1 {
        out[i] = (f[i + 1] + f[i - 1] - f[i] * 2.0) * c;
    }
    if periodic {
        out[0] = (f[1] + f[n - 1] - f[0] * 2.0) * c;
        out[n - 1] = (f[0] + f[n - 2] - f[n - 1] * 2.0) * c;
    } else {
        out[0] = (f[0] * 2.0 - f[1] * 5.0 + f[2] * 4.0 - f[3]) * c;
        out[n - 1] = (f[n - 1] * 2.0 - f[n - 2] * 5.0 + f[n - 3] * 4.0 - f[n - 4]) * c;
    }
}
