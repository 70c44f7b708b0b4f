//! Velocity discretization carrying the Maxwellian structure, macroscopic
//! moments and the projections onto the collision invariants.

use crate::error::{invalid, LabError, Result};
use crate::quadrature::{gauss_hermite_probabilists, lagrange_differentiation_matrix};
use crate::scalar::Scalar;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Coefficient vector of u (or û) over the velocity nodes.
pub type DistributionSlice<T> = Vec<T>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridStrategy {
    GaussHermiteTensor,
    UniformTruncated,
}

/// Serializable description from which a grid is rebuilt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDescription {
    pub dim: usize,
    pub order: usize,
    pub strategy: GridStrategy,
}

/// Half-width of the uniform truncated grid.
pub const UNIFORM_HALF_WIDTH: f64 = 8.0;

#[derive(Clone, Debug)]
pub struct VelocityGrid {
    desc: GridDescription,
    axis: Vec<f64>,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    maxwellian: Vec<f64>,
    sqrt_m: Vec<f64>,
    weight_fn: Vec<f64>,
    speed_sq: Vec<f64>,
    axis_derivative: DMatrix<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    P,
    P0,
    P1,
    IMinusP,
    IMinusP1,
}

/// Macroscopic coefficients (a, b, c) of a slice.
#[derive(Clone, Debug, PartialEq)]
pub struct MacroState<T> {
    pub a: T,
    pub b: Vec<T>,
    pub c: T,
}

impl<T: Scalar> MacroState<T> {
    pub fn zero(dim: usize) -> Self {
        Self {
            a: T::ZERO,
            b: vec![T::ZERO; dim],
            c: T::ZERO,
        }
    }

    /// a + n c, the density paired with the electric potential.
    pub fn density(&self) -> T {
        self.a + self.c * self.b.len() as f64
    }
}

/// Moments A_jm and B_j of a slice.
#[derive(Clone, Debug, PartialEq)]
pub struct HighMoments<T> {
    pub a: Vec<Vec<T>>,
    pub b: Vec<T>,
}

/// Collision invariants evaluated on the grid.
#[derive(Clone, Debug)]
pub struct BasisSet {
    /// Orthonormal e_j √M, j = 0..=n+1.
    pub orthonormal: Vec<Vec<f64>>,
    /// √M, ξ_j √M, |ξ|² √M.
    pub spanning: Vec<Vec<f64>>,
}

/// One row of the Maxwellian moment table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentCheck {
    pub label: String,
    pub computed: f64,
    pub expected: f64,
}

impl MomentCheck {
    pub fn error(&self) -> f64 {
        (self.computed - self.expected).abs()
    }
}

/// Builds a tensor velocity grid.
pub fn build_grid(dim: usize, order: usize, strategy: GridStrategy) -> Result<VelocityGrid> {
    VelocityGrid::new(&GridDescription {
        dim,
        order,
        strategy,
    })
}

impl VelocityGrid {
    pub fn new(desc: &GridDescription) -> Result<Self> {
        if !(1..=3).contains(&desc.dim) {
            return Err(invalid(
                "dim",
                format!("{} is not in {{1, 2, 3}}", desc.dim),
            ));
        }
        if desc.order < 4 {
            return Err(invalid(
                "order",
                format!("{} < 4 cannot resolve fourth moments", desc.order),
            ));
        }
        let order = desc.order;
        let (axis, axis_w) = match desc.strategy {
            GridStrategy::GaussHermiteTensor => {
                let (x, w) = gauss_hermite_probabilists(order);
                // ∫·dξ weights: ω / M₁
                let w = x
                    .iter()
                    .zip(&w)
                    .map(|(&x, &w)| w / maxwellian_1d(x))
                    .collect::<Vec<_>>();
                (x, w)
            }
            GridStrategy::UniformTruncated => {
                let h = 2.0 * UNIFORM_HALF_WIDTH / (order - 1) as f64;
                let x = (0..order)
                    .map(|i| -UNIFORM_HALF_WIDTH + h * i as f64)
                    .collect::<Vec<_>>();
                let mut w = vec![h; order];
                w[0] *= 0.5;
                w[order - 1] *= 0.5;
                (x, w)
            }
        };
        let dim = desc.dim;
        let len = order.pow(dim as u32);
        let mut nodes = Vec::with_capacity(len * dim);
        let mut weights = Vec::with_capacity(len);
        for flat in 0..len {
            let mut rem = flat;
            let mut idx = vec![0; dim];
            for d in (0..dim).rev() {
                idx[d] = rem % order;
                rem /= order;
            }
            let mut wt = 1.0;
            for &i in &idx {
                nodes.push(axis[i]);
                wt *= axis_w[i];
            }
            weights.push(wt);
        }
        let speed_sq: Vec<f64> = nodes
            .chunks(dim)
            .map(|v| v.iter().map(|x| x * x).sum())
            .collect();
        let norm = (2.0 * PI).powf(-(dim as f64) / 2.0);
        let maxwellian: Vec<f64> = speed_sq.iter().map(|s| norm * (-0.5 * s).exp()).collect();
        let sqrt_m = maxwellian.iter().map(|m| m.sqrt()).collect();
        let weight_fn = speed_sq.iter().map(|s| (1.0 + s).sqrt()).collect();
        let axis_derivative = match desc.strategy {
            GridStrategy::GaussHermiteTensor => hermite_function_derivative(&axis),
            GridStrategy::UniformTruncated => centered_difference(&axis),
        };
        Ok(Self {
            desc: desc.clone(),
            axis,
            nodes,
            weights,
            maxwellian,
            sqrt_m,
            weight_fn,
            speed_sq,
            axis_derivative,
        })
    }

    pub fn description(&self) -> &GridDescription {
        &self.desc
    }
    pub fn dim(&self) -> usize {
        self.desc.dim
    }
    pub fn order(&self) -> usize {
        self.desc.order
    }
    pub fn len(&self) -> usize {
        self.weights.len()
    }
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
    pub fn node(&self, i: usize) -> &[f64] {
        let d = self.desc.dim;
        &self.nodes[i * d..(i + 1) * d]
    }
    /// One-dimensional nodes of the tensor grid.
    pub fn axis(&self) -> &[f64] {
        &self.axis
    }
    /// Integration weights for ∫·dξ.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn maxwellian(&self) -> &[f64] {
        &self.maxwellian
    }
    pub fn sqrt_m(&self) -> &[f64] {
        &self.sqrt_m
    }
    /// w(ξ) = (1 + |ξ|²)^{1/2}.
    pub fn weight_fn(&self) -> &[f64] {
        &self.weight_fn
    }
    pub fn speed_sq(&self) -> &[f64] {
        &self.speed_sq
    }
    pub fn max_speed(&self) -> f64 {
        self.speed_sq.iter().cloned().fold(0.0, f64::max).sqrt()
    }
    /// Flat index of a tensor multi-index.
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().fold(0, |acc, &i| acc * self.desc.order + i)
    }
    /// Stride of axis `d` in the flat layout.
    pub fn stride(&self, d: usize) -> usize {
        self.desc.order.pow((self.desc.dim - 1 - d) as u32)
    }

    pub fn check<T>(&self, u: &[T]) -> Result<()> {
        if u.len() != self.len() {
            return Err(LabError::GridMismatch {
                expected: self.len(),
                got: u.len(),
            });
        }
        Ok(())
    }

    /// ⟨f, M⟩ = ∫ f(ξ) M(ξ) dξ by quadrature.
    pub fn maxwellian_moment(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        (0..self.len())
            .map(|i| self.weights[i] * self.maxwellian[i] * f(self.node(i)))
            .sum()
    }

    /// ∫ u dξ.
    pub fn integrate<T: Scalar>(&self, u: &[T]) -> T {
        let mut s = T::ZERO;
        for (&w, &v) in self.weights.iter().zip(u) {
            s += v * w;
        }
        s
    }

    /// ⟨u, v⟩ = ∫ u conj(v) dξ.
    pub fn inner<T: Scalar>(&self, u: &[T], v: &[T]) -> T {
        let mut s = T::ZERO;
        for i in 0..u.len() {
            s += u[i] * v[i].conj() * self.weights[i];
        }
        s
    }

    pub fn norm<T: Scalar>(&self, u: &[T]) -> f64 {
        self.norm_sq(u).sqrt()
    }

    pub fn norm_sq<T: Scalar>(&self, u: &[T]) -> f64 {
        u.iter().zip(&self.weights).map(|(v, w)| w * v.abs2()).sum()
    }

    /// ∫ √M u dξ = a + n c.
    pub fn density<T: Scalar>(&self, u: &[T]) -> T {
        let mut s = T::ZERO;
        for i in 0..u.len() {
            s += u[i] * (self.weights[i] * self.sqrt_m[i]);
        }
        s
    }

    pub fn macro_project<T: Scalar>(&self, u: &[T]) -> Result<MacroState<T>> {
        self.check(u)?;
        Ok(self.macro_unchecked(u))
    }

    pub(crate) fn macro_unchecked<T: Scalar>(&self, u: &[T]) -> MacroState<T> {
        let n = self.dim();
        let nf = n as f64;
        let mut m = MacroState::zero(n);
        for i in 0..self.len() {
            let ws = self.weights[i] * self.sqrt_m[i];
            let v = u[i] * ws;
            let s2 = self.speed_sq[i];
            m.a += v * (0.5 * (nf + 2.0 - s2));
            m.c += v * ((s2 - nf) / (2.0 * nf));
            for (j, &x) in self.node(i).iter().enumerate() {
                m.b[j] += v * x;
            }
        }
        m
    }

    /// {a + b·ξ + c|ξ|²}√M.
    pub fn compose_macro<T: Scalar>(&self, m: &MacroState<T>) -> Vec<T> {
        (0..self.len())
            .map(|i| {
                let mut v = m.a + m.c * self.speed_sq[i];
                for (j, &x) in self.node(i).iter().enumerate() {
                    v += m.b[j] * x;
                }
                v * self.sqrt_m[i]
            })
            .collect()
    }

    pub fn project<T: Scalar>(&self, u: &[T], which: Projection) -> Result<Vec<T>> {
        self.check(u)?;
        Ok(self.project_unchecked(u, which))
    }

    pub(crate) fn project_unchecked<T: Scalar>(&self, u: &[T], which: Projection) -> Vec<T> {
        let m = self.macro_unchecked(u);
        let nf = self.dim() as f64;
        let rho = m.density();
        let part = |i: usize, p0: bool, p1: bool| -> T {
            let mut v = T::ZERO;
            if p0 {
                v += rho;
            }
            if p1 {
                v += m.c * (self.speed_sq[i] - nf);
                for (j, &x) in self.node(i).iter().enumerate() {
                    v += m.b[j] * x;
                }
            }
            v * self.sqrt_m[i]
        };
        (0..self.len())
            .map(|i| match which {
                Projection::P => part(i, true, true),
                Projection::P0 => part(i, true, false),
                Projection::P1 => part(i, false, true),
                Projection::IMinusP => u[i] - part(i, true, true),
                Projection::IMinusP1 => u[i] - part(i, false, true),
            })
            .collect()
    }

    /// A_jm = ⟨(ξ_jξ_m − δ_jm)√M, u⟩ and B_j = ⟨(|ξ|² − (n+2))ξ_j√M, u⟩.
    pub fn high_moments<T: Scalar>(&self, u: &[T]) -> Result<HighMoments<T>> {
        self.check(u)?;
        Ok(self.high_moments_unchecked(u))
    }

    pub(crate) fn high_moments_unchecked<T: Scalar>(&self, u: &[T]) -> HighMoments<T> {
        let n = self.dim();
        let nf = n as f64;
        let mut a = vec![vec![T::ZERO; n]; n];
        let mut b = vec![T::ZERO; n];
        for i in 0..self.len() {
            let v = u[i] * (self.weights[i] * self.sqrt_m[i]);
            let x = self.node(i);
            for j in 0..n {
                for m in j..n {
                    let kron = if j == m { 1.0 } else { 0.0 };
                    a[j][m] += v * (x[j] * x[m] - kron);
                }
                b[j] += v * ((self.speed_sq[i] - nf - 2.0) * x[j]);
            }
        }
        for j in 0..n {
            for m in 0..j {
                a[j][m] = a[m][j];
            }
        }
        HighMoments { a, b }
    }

    /// (∫ w^power |u|² dξ)^{1/2} for power ∈ {−1, 0, 1, 2}.
    pub fn weighted_norm<T: Scalar>(&self, u: &[T], power: f64) -> Result<f64> {
        self.check(u)?;
        check_power(power)?;
        Ok(weighted_norm_with(self, &self.weight_fn, u, power))
    }

    /// Orthonormal collision invariants and the spanning set.
    pub fn basis(&self) -> BasisSet {
        let n = self.dim();
        let nf = n as f64;
        let mut orthonormal = vec![self.sqrt_m.clone()];
        let mut spanning = vec![self.sqrt_m.clone()];
        for j in 0..n {
            let e: Vec<f64> = (0..self.len())
                .map(|i| self.node(i)[j] * self.sqrt_m[i])
                .collect();
            orthonormal.push(e.clone());
            spanning.push(e);
        }
        orthonormal.push(
            (0..self.len())
                .map(|i| (self.speed_sq[i] - nf) / (2.0 * nf).sqrt() * self.sqrt_m[i])
                .collect(),
        );
        spanning.push(
            (0..self.len())
                .map(|i| self.speed_sq[i] * self.sqrt_m[i])
                .collect(),
        );
        BasisSet {
            orthonormal,
            spanning,
        }
    }

    /// ∂u/∂ξ_axis for u = √M p: spectral on Hermite grids, centered differences on uniform grids.
    pub fn velocity_derivative<T: Scalar>(&self, u: &[T], axis: usize) -> Vec<T> {
        let order = self.order();
        let stride = self.stride(axis);
        let mut out = vec![T::ZERO; u.len()];
        for base in 0..self.len() {
            if (base / stride) % order != 0 {
                continue;
            }
            for i in 0..order {
                let mut acc = T::ZERO;
                for j in 0..order {
                    let d = self.axis_derivative[(i, j)];
                    if d != 0.0 {
                        acc += u[base + j * stride] * d;
                    }
                }
                out[base + i * stride] = acc;
            }
        }
        out
    }

    /// One-dimensional derivative matrix acting on u-values along an axis.
    pub fn axis_derivative_matrix(&self) -> &DMatrix<f64> {
        &self.axis_derivative
    }

    /// Four-point Lagrange stencil on the axis nodes around x (extrapolating at the ends).
    pub fn axis_stencil(&self, x: f64) -> ([usize; 4], [f64; 4]) {
        let ax = &self.axis;
        let n = ax.len();
        let pos = ax.partition_point(|&v| v < x);
        let start = pos.saturating_sub(2).min(n - 4);
        let idx = [start, start + 1, start + 2, start + 3];
        let mut w = [1.0; 4];
        for a in 0..4 {
            for b in 0..4 {
                if a != b {
                    w[a] *= (x - ax[idx[b]]) / (ax[idx[a]] - ax[idx[b]]);
                }
            }
        }
        (idx, w)
    }
}

pub(crate) fn check_power(power: f64) -> Result<()> {
    if [-1.0, 0.0, 1.0, 2.0].contains(&power) {
        Ok(())
    } else {
        Err(invalid(
            "power",
            format!("{power} is not in {{-1, 0, 1, 2}}"),
        ))
    }
}

pub(crate) fn weighted_norm_with<T: Scalar>(
    grid: &VelocityGrid,
    weight: &[f64],
    u: &[T],
    power: f64,
) -> f64 {
    (0..u.len())
        .map(|i| grid.weights[i] * weight[i].powf(power) * u[i].abs2())
        .sum::<f64>()
        .sqrt()
}

fn maxwellian_1d(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// d/dξ acting on u = √M₁ p with p the nodal polynomial interpolant.
fn hermite_function_derivative(x: &[f64]) -> DMatrix<f64> {
    let d = lagrange_differentiation_matrix(x);
    let n = x.len();
    DMatrix::from_fn(n, n, |i, j| {
        let ratio = (0.25 * (x[j] * x[j] - x[i] * x[i])).exp();
        let mut v = d[(i, j)] * ratio;
        if i == j {
            v -= 0.5 * x[i];
        }
        v
    })
}

fn centered_difference(x: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    let h = x[1] - x[0];
    let mut d = DMatrix::zeros(n, n);
    for i in 1..n - 1 {
        d[(i, i + 1)] = 0.5 / h;
        d[(i, i - 1)] = -0.5 / h;
    }
    d[(0, 0)] = -1.0 / h;
    d[(0, 1)] = 1.0 / h;
    d[(n - 1, n - 1)] = 1.0 / h;
    d[(n - 1, n - 2)] = -1.0 / h;
    d
}

/// The Maxwellian moment table: ⟨1⟩, ⟨ξ_j²⟩, ⟨|ξ|²⟩, ⟨ξ_j²ξ_m²⟩ (j≠m), ⟨ξ_j⁴⟩,
/// ⟨|ξ|²ξ_j²⟩, ⟨|ξ|⁴⟩, ⟨|ξ|⁴ξ_j²⟩, ⟨|ξ|⁶⟩.
pub fn maxwellian_moment_table(grid: &VelocityGrid) -> Vec<MomentCheck> {
    let n = grid.dim() as f64;
    let s2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let mut rows = vec![
        ("<1>", grid.maxwellian_moment(|_| 1.0), 1.0),
        ("<xi_1^2>", grid.maxwellian_moment(|v| v[0] * v[0]), 1.0),
        ("<|xi|^2>", grid.maxwellian_moment(s2), n),
        ("<xi_1^4>", grid.maxwellian_moment(|v| v[0].powi(4)), 3.0),
        (
            "<|xi|^2 xi_1^2>",
            grid.maxwellian_moment(|v| s2(v) * v[0] * v[0]),
            n + 2.0,
        ),
        (
            "<|xi|^4>",
            grid.maxwellian_moment(|v| s2(v).powi(2)),
            n * (n + 2.0),
        ),
        (
            "<|xi|^4 xi_1^2>",
            grid.maxwellian_moment(|v| s2(v).powi(2) * v[0] * v[0]),
            (n + 2.0) * (n + 4.0),
        ),
        (
            "<|xi|^6>",
            grid.maxwellian_moment(|v| s2(v).powi(3)),
            n * (n + 2.0) * (n + 4.0),
        ),
    ];
    if grid.dim() >= 2 {
        rows.insert(
            3,
            (
                "<xi_1^2 xi_2^2>",
                grid.maxwellian_moment(|v| v[0] * v[0] * v[1] * v[1]),
                1.0,
            ),
        );
    }
    rows.into_iter()
        .map(|(label, computed, expected)| MomentCheck {
            label: label.to_string(),
            computed,
            expected,
        })
        .collect()
}
