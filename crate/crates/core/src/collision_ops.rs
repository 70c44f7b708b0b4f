//! Linearized collision operators L = −ν + K (hard spheres and a relaxation
//! surrogate) and the bilinear collision term Γ.

use crate::dense::{
    asymmetry, check_guard, generalized_eigenvalues, invariant_basis, micro_basis, sqrt_weights,
    DENSE_NODE_GUARD,
};
use crate::error::{invalid, LabError, Result};
use crate::quadrature::{gauss_legendre, gauss_legendre_on};
use crate::scalar::Scalar;
use crate::velocity_space::{check_power, weighted_norm_with, Projection, VelocityGrid};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HardSphere,
    BgkSurrogate,
}

/// Structural diagnostics recorded at assembly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssemblyReport {
    pub kind: BackendKind,
    pub nodes: usize,
    pub angular_order: usize,
    /// Relative size of the weighted antisymmetric part before symmetrization.
    pub symmetrization_deviation: f64,
    /// |⟨Lu,v⟩ − ⟨u,Lv⟩| / (|u||v|) maximized over coordinate pairs after symmetrization.
    pub self_adjointness_residual: f64,
    /// |L(e√M)| / |L| for each orthonormal invariant.
    pub kernel_defect: Vec<f64>,
    pub nu_over_w_min: f64,
    pub nu_over_w_max: f64,
}

/// Collision frequency, K action and Γ evaluator over a velocity grid.
#[derive(Clone, Debug)]
pub struct CollisionBackend {
    kind: BackendKind,
    grid: Arc<VelocityGrid>,
    nu: Vec<f64>,
    sqrt_w: Vec<f64>,
    /// L in weighted coordinates (symmetric); hard sphere only.
    l_weighted: Option<DMatrix<f64>>,
    /// K = L + ν in plain coordinates; hard sphere only.
    k_action: Option<DMatrix<f64>>,
    angular_order: usize,
    certified_coercivity: Option<f64>,
    report: AssemblyReport,
}

/// Handle for the bilinear map (u, v) ↦ Γ(u, v); evaluation is by quadrature on demand.
#[derive(Clone, Copy, Debug)]
pub struct GammaTensor<'a> {
    backend: &'a CollisionBackend,
}

impl GammaTensor<'_> {
    pub fn kind(&self) -> BackendKind {
        self.backend.kind
    }
    pub fn apply<T: Scalar>(&self, u: &[T], v: &[T]) -> Result<Vec<T>> {
        apply_gamma(self.backend, u, v)
    }
}

/// Hemisphere rule for ω about an axis: Gauss-Legendre in cos θ ∈ [0,1] × trapezoid in φ.
#[derive(Clone, Debug)]
struct HemisphereRule {
    cos: Vec<f64>,
    sin: Vec<f64>,
    cos_w: Vec<f64>,
    phi_cos: Vec<f64>,
    phi_sin: Vec<f64>,
    phi_w: f64,
}

impl HemisphereRule {
    fn new(angular_order: usize) -> Self {
        let (c, w) = gauss_legendre_on(angular_order.div_ceil(2).max(3), 0.0, 1.0);
        let nphi = angular_order.max(3);
        let phis: Vec<f64> = (0..nphi)
            .map(|j| 2.0 * PI * j as f64 / nphi as f64)
            .collect();
        Self {
            sin: c.iter().map(|c| (1.0 - c * c).max(0.0).sqrt()).collect(),
            cos: c,
            cos_w: w,
            phi_cos: phis.iter().map(|p| p.cos()).collect(),
            phi_sin: phis.iter().map(|p| p.sin()).collect(),
            phi_w: 2.0 * PI / nphi as f64,
        }
    }

    /// Calls f(ω, cos θ, weight) over the hemisphere ω·axis > 0.
    fn for_each(&self, axis: [f64; 3], mut f: impl FnMut([f64; 3], f64, f64)) {
        let (e1, e2) = orthonormal_frame(axis);
        for (k, &c) in self.cos.iter().enumerate() {
            let s = self.sin[k];
            for j in 0..self.phi_cos.len() {
                let (cp, sp) = (self.phi_cos[j], self.phi_sin[j]);
                let om = [
                    c * axis[0] + s * (cp * e1[0] + sp * e2[0]),
                    c * axis[1] + s * (cp * e1[1] + sp * e2[1]),
                    c * axis[2] + s * (cp * e1[2] + sp * e2[2]),
                ];
                f(om, c, self.cos_w[k] * self.phi_w);
            }
        }
    }
}

fn orthonormal_frame(v: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let seed = if v[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let d = seed[0] * v[0] + seed[1] * v[1] + seed[2] * v[2];
    let mut e1 = [seed[0] - d * v[0], seed[1] - d * v[1], seed[2] - d * v[2]];
    let n = (e1[0] * e1[0] + e1[1] * e1[1] + e1[2] * e1[2]).sqrt();
    e1.iter_mut().for_each(|x| *x /= n);
    let e2 = [
        v[1] * e1[2] - v[2] * e1[1],
        v[2] * e1[0] - v[0] * e1[2],
        v[0] * e1[1] - v[1] * e1[0],
    ];
    (e1, e2)
}

fn require_dim3(grid: &VelocityGrid) -> Result<()> {
    if grid.dim() != 3 {
        return Err(invalid(
            "dim",
            format!("hard-sphere collisions need dim 3, got {}", grid.dim()),
        ));
    }
    Ok(())
}

fn require_angular(angular_order: usize) -> Result<()> {
    if angular_order < 6 {
        return Err(invalid("angular_order", format!("{angular_order} < 6")));
    }
    Ok(())
}

/// Hard-sphere collision frequency ν(ξ) = ∫∫ |(ξ−ξ_*)·ω| M_* dω dξ_* at every node.
///
/// The ξ_* integral is taken in relative velocity z = ξ − ξ_* (radial Gauss-Legendre
/// panels, polar and azimuthal integrals in closed form); the ω integral uses the
/// hemisphere rule of the given order.
pub fn collision_frequency(grid: &VelocityGrid, angular_order: usize) -> Result<Vec<f64>> {
    require_dim3(grid)?;
    require_angular(angular_order)?;
    let rule = HemisphereRule::new(angular_order);
    Ok(grid
        .speed_sq()
        .iter()
        .map(|s| hard_sphere_frequency(s.sqrt(), &rule))
        .collect())
}

fn hard_sphere_frequency(speed: f64, rule: &HemisphereRule) -> f64 {
    // ∫_{S²} |z·ω| dω for |z| = 1
    let mut ang = 0.0;
    rule.for_each([0.0, 0.0, 1.0], |_, c, w| ang += 2.0 * c * w);
    let rmax = speed + 12.0;
    let panels = 32;
    let h = rmax / panels as f64;
    let (rx, rw) = gauss_legendre(10);
    let norm = (2.0 * PI).powf(-1.5);
    let mut total = 0.0;
    for p in 0..panels {
        for (x, w) in rx.iter().zip(&rw) {
            let r = h * (p as f64 + 0.5 * (x + 1.0));
            // ∫_{-1}^{1} exp(−|ξ − z|²/2) d cos β in closed form
            let polar = if speed * r < 1e-8 {
                2.0 * (-0.5 * (speed * speed + r * r)).exp()
            } else {
                ((-0.5 * (speed - r).powi(2)).exp() - (-0.5 * (speed + r).powi(2)).exp())
                    / (speed * r)
            };
            total += 0.5 * h * w * r * r * r * ang * 2.0 * PI * polar * norm;
        }
    }
    total
}

impl CollisionBackend {
    pub fn kind(&self) -> BackendKind {
        self.kind
    }
    pub fn grid(&self) -> &VelocityGrid {
        &self.grid
    }
    pub fn grid_arc(&self) -> Arc<VelocityGrid> {
        self.grid.clone()
    }
    pub fn nu(&self) -> &[f64] {
        &self.nu
    }
    pub fn max_nu(&self) -> f64 {
        self.nu.iter().cloned().fold(0.0, f64::max)
    }
    pub fn k_action(&self) -> Option<&DMatrix<f64>> {
        self.k_action.as_ref()
    }
    pub fn angular_order(&self) -> usize {
        self.angular_order
    }
    pub fn certified_coercivity(&self) -> Option<f64> {
        self.certified_coercivity
    }
    pub fn report(&self) -> &AssemblyReport {
        &self.report
    }
    pub fn gamma(&self) -> GammaTensor<'_> {
        GammaTensor { backend: self }
    }

    /// (∫ ν^power |u|² dξ)^{1/2}.
    pub fn nu_weighted_norm<T: Scalar>(&self, u: &[T], power: f64) -> Result<f64> {
        self.grid.check(u)?;
        check_power(power)?;
        Ok(weighted_norm_with(&self.grid, &self.nu, u, power))
    }

    /// Dense L in weighted coordinates y = w^{1/2} u (symmetric matrix).
    pub fn dense_weighted_l(&self) -> Result<DMatrix<f64>> {
        if let Some(l) = &self.l_weighted {
            return Ok(l.clone());
        }
        check_guard(self.grid.len(), DENSE_NODE_GUARD)?;
        let n = self.grid.len();
        let b = invariant_basis(&self.grid);
        let q = DMatrix::<f64>::identity(n, n) - &b * b.transpose();
        let nu = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(self.nu.clone()));
        Ok(-(&q * nu * &q))
    }

    pub(crate) fn apply_l_unchecked<T: Scalar>(&self, u: &[T]) -> Vec<T> {
        match &self.l_weighted {
            Some(l) => {
                let n = u.len();
                let y: Vec<T> = (0..n).map(|i| u[i] * self.sqrt_w[i]).collect();
                let mut out = vec![T::ZERO; n];
                for (i, o) in out.iter_mut().enumerate() {
                    let mut acc = T::ZERO;
                    for (j, &yj) in y.iter().enumerate() {
                        acc += yj * l[(i, j)];
                    }
                    *o = acc * (1.0 / self.sqrt_w[i]);
                }
                out
            }
            None => {
                let f = self.grid.project_unchecked(u, Projection::IMinusP);
                let g: Vec<T> = f.iter().zip(&self.nu).map(|(&v, &nu)| v * nu).collect();
                self.grid
                    .project_unchecked(&g, Projection::IMinusP)
                    .into_iter()
                    .map(|v| -v)
                    .collect()
            }
        }
    }
}

/// Relaxation surrogate L_s u = −{I−P}(ν {I−P}u) with ν = w.
pub fn assemble_bgk(grid: Arc<VelocityGrid>) -> CollisionBackend {
    let nu = grid.weight_fn().to_vec();
    let (lo, hi) = (1.0, 1.0);
    let report = AssemblyReport {
        kind: BackendKind::BgkSurrogate,
        nodes: grid.len(),
        angular_order: 0,
        symmetrization_deviation: 0.0,
        self_adjointness_residual: 0.0,
        kernel_defect: vec![0.0; grid.dim() + 2],
        nu_over_w_min: lo,
        nu_over_w_max: hi,
    };
    CollisionBackend {
        kind: BackendKind::BgkSurrogate,
        sqrt_w: sqrt_weights(&grid),
        grid,
        nu,
        l_weighted: None,
        k_action: None,
        angular_order: 0,
        certified_coercivity: Some(1.0),
        report,
    }
}

/// Hard-sphere linearized operator on a three-dimensional grid.
///
/// The quadratic form −⟨v, Lu⟩ = ¼ ∫∫∫ |V·ω| M M_* Δg Δh with g = u/√M and
/// Δg = g' + g_*' − g − g_* is discretized by the grid rule in (ξ, ξ_*), the
/// hemisphere rule in ω and local cubic interpolation of g at post-collision
/// velocities. The result is symmetrized in the weighted inner product.
pub fn assemble_hard_sphere(
    grid: Arc<VelocityGrid>,
    angular_order: usize,
) -> Result<CollisionBackend> {
    require_dim3(&grid)?;
    require_angular(angular_order)?;
    check_guard(grid.len(), DENSE_NODE_GUARD)?;
    let n = grid.len();
    let rule = HemisphereRule::new(angular_order);
    let quad: Vec<f64> = (0..n)
        .map(|i| grid.weights()[i] * grid.maxwellian()[i])
        .collect();
    let mut s = vec![0.0f64; n * n];
    let mut entries: Vec<(usize, f64)> = Vec::with_capacity(2 * 64 + 2);
    for a in 0..n {
        let xa = grid.node(a);
        for b in a + 1..n {
            let xb = grid.node(b);
            let v = [xa[0] - xb[0], xa[1] - xb[1], xa[2] - xb[2]];
            let vn = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            let axis = [v[0] / vn, v[1] / vn, v[2] / vn];
            // hemisphere doubling × pair symmetry × ¼
            let pair = quad[a] * quad[b];
            rule.for_each(axis, |om, c, w| {
                let vd = vn * c;
                let xp = [xa[0] - vd * om[0], xa[1] - vd * om[1], xa[2] - vd * om[2]];
                let xs = [xb[0] + vd * om[0], xb[1] + vd * om[1], xb[2] + vd * om[2]];
                entries.clear();
                push_stencil(&grid, &xp, &mut entries);
                push_stencil(&grid, &xs, &mut entries);
                entries.push((a, -1.0));
                entries.push((b, -1.0));
                let coef = w * vd * pair;
                for &(p, rp) in entries.iter() {
                    let cp = coef * rp;
                    let row = &mut s[p * n..(p + 1) * n];
                    for &(q, rq) in entries.iter() {
                        row[q] += cp * rq;
                    }
                }
            });
        }
    }
    // −L in weighted coordinates: diag(ω)^{-1/2} S diag(ω)^{-1/2}
    let isq: Vec<f64> = quad.iter().map(|q| 1.0 / q.sqrt()).collect();
    let raw = DMatrix::from_fn(n, n, |i, j| -s[i * n + j] * isq[i] * isq[j]);
    let symmetrization_deviation = asymmetry(&raw);
    if symmetrization_deviation > 1e-3 {
        return Err(LabError::Assembly(format!(
            "symmetrization deviation {symmetrization_deviation:e} exceeds 1e-3"
        )));
    }
    let l = (&raw + raw.transpose()) * 0.5;
    let nu = collision_frequency(&grid, angular_order)?;
    let sqrt_w = sqrt_weights(&grid);
    let k = DMatrix::from_fn(n, n, |i, j| {
        let mut v = l[(i, j)] * sqrt_w[j] / sqrt_w[i];
        if i == j {
            v += nu[i];
        }
        v
    });
    let basis = invariant_basis(&grid);
    let lnorm = l.norm();
    let kernel_defect = (0..basis.ncols())
        .map(|j| (&l * basis.column(j)).norm() / lnorm)
        .collect();
    let ratios: Vec<f64> = nu
        .iter()
        .zip(grid.weight_fn())
        .map(|(a, b)| a / b)
        .collect();
    let report = AssemblyReport {
        kind: BackendKind::HardSphere,
        nodes: n,
        angular_order,
        symmetrization_deviation,
        self_adjointness_residual: (&l - l.transpose()).amax() / lnorm,
        kernel_defect,
        nu_over_w_min: ratios.iter().cloned().fold(f64::INFINITY, f64::min),
        nu_over_w_max: ratios.iter().cloned().fold(0.0, f64::max),
    };
    Ok(CollisionBackend {
        kind: BackendKind::HardSphere,
        grid,
        nu,
        sqrt_w,
        l_weighted: Some(l),
        k_action: Some(k),
        angular_order,
        certified_coercivity: None,
        report,
    })
}

fn push_stencil(grid: &VelocityGrid, x: &[f64; 3], out: &mut Vec<(usize, f64)>) {
    let (i0, w0) = grid.axis_stencil(x[0]);
    let (i1, w1) = grid.axis_stencil(x[1]);
    let (i2, w2) = grid.axis_stencil(x[2]);
    let (s0, s1) = (grid.stride(0), grid.stride(1));
    for a in 0..4 {
        for b in 0..4 {
            let wab = w0[a] * w1[b];
            let base = i0[a] * s0 + i1[b] * s1;
            for c in 0..4 {
                out.push((base + i2[c], wab * w2[c]));
            }
        }
    }
}

/// L u = −ν u + K u (matrix-free for the surrogate).
pub fn apply_l<T: Scalar>(backend: &CollisionBackend, u: &[T]) -> Result<Vec<T>> {
    backend.grid.check(u)?;
    Ok(backend.apply_l_unchecked(u))
}

/// Symmetric bilinear collision term.
///
/// Hard spheres: weak-form quadrature of (1/√M) Q(√M u, √M v), exactly
/// orthogonal to the collision invariants. Surrogate: Γ_s(u,v) = {I−P}[ρ_u ν v],
/// ρ_u = ∫√M u dξ (non-physical, bilinear with microscopic range).
pub fn apply_gamma<T: Scalar>(backend: &CollisionBackend, u: &[T], v: &[T]) -> Result<Vec<T>> {
    let grid = &backend.grid;
    grid.check(u)?;
    grid.check(v)?;
    Ok(backend.gamma_unchecked(u, v))
}

impl CollisionBackend {
    pub(crate) fn gamma_unchecked<T: Scalar>(&self, u: &[T], v: &[T]) -> Vec<T> {
        let grid = &self.grid;
        match self.kind {
            BackendKind::BgkSurrogate => {
                let rho = grid.density(u);
                let g: Vec<T> = v
                    .iter()
                    .zip(&self.nu)
                    .map(|(&x, &nu)| x * rho * nu)
                    .collect();
                grid.project_unchecked(&g, Projection::IMinusP)
            }
            BackendKind::HardSphere => self.hard_sphere_gamma(u, v),
        }
    }

    fn hard_sphere_gamma<T: Scalar>(&self, u: &[T], v: &[T]) -> Vec<T> {
        let grid = &self.grid;
        let n = grid.len();
        let rule = HemisphereRule::new(self.angular_order);
        let f: Vec<T> = (0..n)
            .map(|i| u[i] * (grid.weights()[i] * grid.sqrt_m()[i]))
            .collect();
        let g: Vec<T> = (0..n)
            .map(|i| v[i] * (grid.weights()[i] * grid.sqrt_m()[i]))
            .collect();
        let mut acc = vec![T::ZERO; n];
        let mut entries: Vec<(usize, f64)> = Vec::with_capacity(2 * 64);
        for a in 0..n {
            let xa = grid.node(a);
            for b in a + 1..n {
                let prod = f[a] * g[b] + g[a] * f[b];
                if prod == T::ZERO {
                    continue;
                }
                let xb = grid.node(b);
                let dv = [xa[0] - xb[0], xa[1] - xb[1], xa[2] - xb[2]];
                let vn = (dv[0] * dv[0] + dv[1] * dv[1] + dv[2] * dv[2]).sqrt();
                let axis = [dv[0] / vn, dv[1] / vn, dv[2] / vn];
                rule.for_each(axis, |om, c, w| {
                    let vd = vn * c;
                    let xp = [xa[0] - vd * om[0], xa[1] - vd * om[1], xa[2] - vd * om[2]];
                    let xs = [xb[0] + vd * om[0], xb[1] + vd * om[1], xb[2] + vd * om[2]];
                    // full sphere (×2) and pairs a<b (×2) cancel the ¼ of the weak form
                    let coef = prod * (w * vd);
                    entries.clear();
                    push_stencil(grid, &xp, &mut entries);
                    push_stencil(grid, &xs, &mut entries);
                    for &(p, r) in entries.iter() {
                        acc[p] += coef * r;
                    }
                    acc[a] -= coef;
                    acc[b] -= coef;
                });
            }
        }
        (0..n)
            .map(|i| acc[i] * (1.0 / (grid.weights()[i] * grid.sqrt_m()[i])))
            .collect()
    }
}

/// Measured coercivity constant λ̂ = min −⟨u,Lu⟩ / |ν^{1/2}{I−P}u|² over random samples
/// and, when dense assembly is possible, over the microscopic generalized eigenproblem.
pub fn coercivity_estimate(
    backend: &mut CollisionBackend,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples < 10 {
        return Err(invalid("samples", format!("{samples} < 10")));
    }
    let grid = backend.grid.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = f64::INFINITY;
    for _ in 0..samples {
        let u: Vec<f64> = (0..grid.len())
            .map(|i| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z / backend.sqrt_w[i]
            })
            .collect();
        let lu = backend.apply_l_unchecked(&u);
        let num = -grid.inner(&u, &lu);
        let f = grid.project_unchecked(&u, Projection::IMinusP);
        let den = weighted_norm_with(&grid, &backend.nu, &f, 1.0).powi(2);
        if den > 0.0 {
            best = best.min(num / den);
        }
    }
    if grid.len() <= 4096 {
        let l = backend.dense_weighted_l()?;
        let u = micro_basis(&grid);
        let a = -(u.transpose() * &l * &u);
        let nu = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(backend.nu.clone()));
        let b = u.transpose() * nu * &u;
        if let Some(ev) = generalized_eigenvalues(&a, &b) {
            best = best.min(ev[0]);
        }
    }
    if backend.kind == BackendKind::BgkSurrogate && (best - 1.0).abs() < 1e-12 {
        best = 1.0;
    }
    if !(best > 0.0) {
        return Err(LabError::Coercivity(best));
    }
    backend.certified_coercivity = Some(best);
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::velocity_space::{build_grid, GridStrategy};
    use std::sync::OnceLock;

    fn hard_sphere() -> &'static CollisionBackend {
        static HS: OnceLock<CollisionBackend> = OnceLock::new();
        HS.get_or_init(|| {
            let g = Arc::new(build_grid(3, 6, GridStrategy::GaussHermiteTensor).unwrap());
            let mut b = assemble_hard_sphere(g, 6).unwrap();
            coercivity_estimate(&mut b, 20, 1).unwrap();
            b
        })
    }

    fn random_slice(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// ν(|ξ|) by composite Simpson in the relative speed, polar angle in closed form.
    fn frequency_oracle(s: f64) -> f64 {
        let m = 40_000;
        let rmax = s + 14.0;
        let h = rmax / m as f64;
        let f = |r: f64| {
            let polar = if s * r == 0.0 {
                2.0 * (-0.5 * (s * s + r * r)).exp()
            } else {
                ((-0.5 * (s - r).powi(2)).exp() - (-0.5 * (s + r).powi(2)).exp()) / (s * r)
            };
            (2.0 * PI).powf(-1.5) * 2.0 * PI * r * r * r * 2.0 * PI * polar
        };
        let mut acc = f(0.0) + f(rmax);
        for i in 1..m {
            acc += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn frequency_rejects_bad_arguments() {
        let g2 = build_grid(2, 6, GridStrategy::GaussHermiteTensor).unwrap();
        assert!(collision_frequency(&g2, 8).is_err());
        assert!(assemble_hard_sphere(Arc::new(g2), 8).is_err());
        let g3 = build_grid(3, 4, GridStrategy::GaussHermiteTensor).unwrap();
        assert!(collision_frequency(&g3, 4).is_err());
    }

    #[test]
    fn frequency_at_origin_matches_radial_oracle() {
        let g = build_grid(3, 5, GridStrategy::GaussHermiteTensor).unwrap();
        let nu = collision_frequency(&g, 6).unwrap();
        let centre = g.flat_index(&[2, 2, 2]);
        assert!(g.speed_sq()[centre] < 1e-24);
        let oracle = frequency_oracle(0.0);
        assert!((nu[centre] - oracle).abs() / oracle < 1e-4);
        for (i, s2) in g.speed_sq().iter().enumerate() {
            let o = frequency_oracle(s2.sqrt());
            assert!((nu[i] - o).abs() / o < 1e-4, "node {i}: {} vs {o}", nu[i]);
        }
    }

    #[test]
    fn frequency_converges_in_angular_order() {
        let g = build_grid(3, 6, GridStrategy::GaussHermiteTensor).unwrap();
        let a = collision_frequency(&g, 6).unwrap();
        let b = collision_frequency(&g, 12).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() / y < 1e-6);
        }
    }

    #[test]
    fn frequency_monotone_and_comparable_to_weight() {
        let g = build_grid(3, 10, GridStrategy::GaussHermiteTensor).unwrap();
        let nu = collision_frequency(&g, 6).unwrap();
        let mut pairs: Vec<(f64, f64)> = g.speed_sq().iter().cloned().zip(nu.clone()).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in pairs.windows(2) {
            if w[1].0 > w[0].0 + 1e-12 {
                assert!(w[1].1 > w[0].1);
            }
        }
        for (n, w) in nu.iter().zip(g.weight_fn()) {
            let r = n / w;
            assert!(r > 2.0 && r < 4.0 * (2.0 * PI).sqrt(), "ratio {r}");
        }
    }

    #[test]
    fn hard_sphere_structure() {
        let b = hard_sphere();
        let g = b.grid();
        let rep = b.report();
        assert!(rep.symmetrization_deviation < 1e-3);
        let basis = g.basis();
        for e in &basis.orthonormal {
            let le = apply_l(b, e).unwrap();
            assert!(g.norm(&le) <= 1e-3 * g.norm(e));
        }
        assert!(rep.nu_over_w_min > 0.0 && rep.nu_over_w_min <= rep.nu_over_w_max);
        for s in 0..100 {
            let u = random_slice(g.len(), s);
            let v = random_slice(g.len(), 1000 + s);
            let lu = apply_l(b, &u).unwrap();
            let lv = apply_l(b, &v).unwrap();
            let res = (g.inner(&lu, &v) - g.inner(&u, &lv)).abs();
            assert!(res <= 1e-8 * g.norm(&u) * g.norm(&v));
            assert!(-g.inner(&u, &lu) >= 0.0);
        }
        assert!(b.certified_coercivity().unwrap() > 0.0);
    }

    #[test]
    fn hard_sphere_coercivity_bound_holds_on_samples() {
        let b = hard_sphere();
        let g = b.grid();
        let lam = b.certified_coercivity().unwrap();
        for s in 0..30 {
            let u = random_slice(g.len(), 77 + s);
            let lu = apply_l(b, &u).unwrap();
            let f = g.project(&u, Projection::IMinusP).unwrap();
            let rhs = lam * b.nu_weighted_norm(&f, 1.0).unwrap().powi(2);
            assert!(-g.inner(&u, &lu) >= rhs * (1.0 - 1e-10));
        }
    }

    #[test]
    fn k_action_matches_l_plus_nu() {
        let b = hard_sphere();
        let g = b.grid();
        let u = random_slice(g.len(), 5);
        let lu = apply_l(b, &u).unwrap();
        let ku = b.k_action().unwrap() * nalgebra::DVector::from_vec(u.clone());
        for i in 0..g.len() {
            assert!((lu[i] + b.nu()[i] * u[i] - ku[i]).abs() < 1e-9 * (1.0 + ku[i].abs()));
        }
    }

    #[test]
    fn hard_sphere_gamma_conserves_and_is_bilinear() {
        let b = hard_sphere();
        let g = b.grid();
        let zero = vec![0.0; g.len()];
        let basis = g.basis();
        for s in 0..5 {
            let u: Vec<f64> = random_slice(g.len(), 10 + s)
                .iter()
                .zip(g.sqrt_m())
                .map(|(x, m)| x * m.sqrt())
                .collect();
            let v: Vec<f64> = random_slice(g.len(), 20 + s)
                .iter()
                .zip(g.sqrt_m())
                .map(|(x, m)| x * m.sqrt())
                .collect();
            let gu0 = apply_gamma(b, &u, &zero).unwrap();
            assert!(gu0.iter().all(|x| *x == 0.0));
            let guv = apply_gamma(b, &u, &v).unwrap();
            let scale = g.norm(&u) * g.norm(&v);
            for e in &basis.orthonormal {
                assert!(g.inner(&guv, e).abs() <= 1e-6 * scale.max(1.0));
            }
            let w: Vec<f64> = u.iter().zip(&v).map(|(a, c)| 2.0 * a - 3.0 * c).collect();
            let gwv = apply_gamma(b, &w, &v).unwrap();
            let gvv = apply_gamma(b, &v, &v).unwrap();
            for i in 0..g.len() {
                let lin = 2.0 * guv[i] - 3.0 * gvv[i];
                assert!((gwv[i] - lin).abs() <= 1e-9 * (1.0 + lin.abs()));
            }
        }
    }

    #[test]
    fn hard_sphere_gamma_obeys_weighted_bound() {
        let b = hard_sphere();
        let g = b.grid();
        let mut worst: f64 = 0.0;
        for s in 0..50 {
            let u = random_slice(g.len(), 300 + s);
            let v = random_slice(g.len(), 400 + s);
            let gam = apply_gamma(b, &u, &v).unwrap();
            let lhs = b.nu_weighted_norm(&gam, -1.0).unwrap();
            let rhs = b.nu_weighted_norm(&u, 1.0).unwrap() * g.norm(&v)
                + g.norm(&u) * b.nu_weighted_norm(&v, 1.0).unwrap();
            assert!(lhs.is_finite() && rhs > 0.0);
            worst = worst.max(lhs / rhs);
        }
        assert!(worst.is_finite() && worst > 0.0);
    }

    #[test]
    fn surrogate_structure() {
        let g = Arc::new(build_grid(2, 6, GridStrategy::GaussHermiteTensor).unwrap());
        let mut b = assemble_bgk(g.clone());
        let e1: Vec<f64> = (0..g.len()).map(|i| g.node(i)[0] * g.sqrt_m()[i]).collect();
        assert!(g.norm(&apply_l(&b, &e1).unwrap()) < 1e-12);
        for s in 0..20 {
            let u = random_slice(g.len(), s);
            let v = random_slice(g.len(), 50 + s);
            let lu = apply_l(&b, &u).unwrap();
            let lv = apply_l(&b, &v).unwrap();
            let f = g.project(&u, Projection::IMinusP).unwrap();
            let d = b.nu_weighted_norm(&f, 1.0).unwrap().powi(2);
            assert!((-g.inner(&u, &lu) - d).abs() <= 1e-12 * d);
            assert!((g.inner(&lu, &v) - g.inner(&u, &lv)).abs() <= 1e-12 * g.norm(&u) * g.norm(&v));
        }
        assert!(apply_l(&b, &vec![0.0; g.len()])
            .unwrap()
            .iter()
            .all(|x| *x == 0.0));
        let lam = coercivity_estimate(&mut b, 10, 3).unwrap();
        assert!((lam - 1.0).abs() < 1e-12);
        assert!(coercivity_estimate(&mut b, 9, 3).is_err());
    }

    #[test]
    fn surrogate_gamma_is_microscopic() {
        let g = Arc::new(build_grid(1, 12, GridStrategy::GaussHermiteTensor).unwrap());
        let b = assemble_bgk(g.clone());
        let u = random_slice(g.len(), 1);
        let v = random_slice(g.len(), 2);
        let gam = b.gamma().apply(&u, &v).unwrap();
        let p = g.project(&gam, Projection::P).unwrap();
        assert!(g.norm(&p) < 1e-12 * g.norm(&gam).max(1.0));
        assert!(apply_gamma(&b, &u, &vec![0.0; g.len() + 1]).is_err());
    }

    #[test]
    fn rayleigh_quotient_is_scale_invariant() {
        let b = hard_sphere();
        let g = b.grid();
        let u = random_slice(g.len(), 9);
        let q = |u: &[f64]| {
            let lu = apply_l(b, u).unwrap();
            let f = g.project(u, Projection::IMinusP).unwrap();
            -g.inner(u, &lu) / b.nu_weighted_norm(&f, 1.0).unwrap().powi(2)
        };
        let u2: Vec<f64> = u.iter().map(|x| 2.0 * x).collect();
        assert!((q(&u) - q(&u2)).abs() < 1e-12 * q(&u).abs());
    }
}
