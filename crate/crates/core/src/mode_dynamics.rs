//! Per-wavenumber evolution of the linearized system, the free-energy and total
//! energy functionals, certified constant calibration and Lyapunov audits.
//!
//! Dense forms act on weighted coordinates y = w^{1/2} û, in which the velocity
//! inner product is Euclidean.

use crate::collision_ops::CollisionBackend;
use crate::dense::{
    check_guard, cholesky_pd, generalized_eigenvalues, hermitian_part, micro_basis,
    micro_projector, sqrt_weights, DENSE_NODE_GUARD,
};
use crate::error::{invalid, LabError, Result};
use crate::scalar::Complex64;
use crate::velocity_space::{MacroState, Projection, VelocityGrid};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Linear generator of one Fourier mode: û ↦ −iξ·k û − i(ξ·k/|k|²)(a+nc)√M + Lû.
#[derive(Clone, Debug)]
pub struct ModeOperator {
    k: Vec<f64>,
    k_sq: f64,
    xi_k: Vec<f64>,
    backend: Arc<CollisionBackend>,
}

/// Mode state û(t, k, ·) with the derived field Φ̂ = −(a+nc)/|k|².
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeState {
    pub u: Vec<Complex64>,
    pub t: f64,
    pub k: Vec<f64>,
    pub phi: Complex64,
}

/// Dissipation rate λ and source constant C of a one-step inequality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InequalityConstants {
    pub lambda: f64,
    pub constant: f64,
}

/// Certified constants of the per-mode energy method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyFunctionalParams {
    pub kappa1: f64,
    pub kappa2: f64,
    /// Weight θ of the 2θcδ_jm shift in the A-moments (0 unless n = 1).
    pub theta: f64,
    /// Decay constant of the combined inequality.
    pub lambda: f64,
    /// Source constant of the combined inequality.
    pub source_constant: f64,
    /// E ≥ λ₁(‖û‖² + |a+nc|²/|k|²).
    pub lambda_lower: f64,
    /// E ≤ λ₂(‖û‖² + |a+nc|²/|k|²).
    pub lambda_upper: f64,
    /// Free-energy dissipation inequality, when certifiable.
    pub free_energy_bound: Option<InequalityConstants>,
    /// L² energy inequality, when certifiable.
    pub l2_bound: Option<InequalityConstants>,
    /// Time step as a fraction of the stability bound 0.5/(max|ξ·k| + max ν).
    pub dt_fraction: f64,
}

impl EnergyFunctionalParams {
    /// Functional weights only; all certified constants unset (zero).
    pub fn uncalibrated(kappa1: f64, kappa2: f64) -> Self {
        Self {
            kappa1,
            kappa2,
            theta: 0.0,
            lambda: 0.0,
            source_constant: 0.0,
            lambda_lower: 0.0,
            lambda_upper: 0.0,
            free_energy_bound: None,
            l2_bound: None,
            dt_fraction: 0.5,
        }
    }

    /// Certified time step for a mode.
    pub fn step_size(&self, op: &ModeOperator) -> f64 {
        self.dt_fraction * op.stability_bound()
    }
}

/// Search grid and sampling sizes for calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// κ₁ ∈ {2^j : j ∈ kappa1_exponents}.
    pub kappa1_exponents: (i32, i32),
    /// κ₂ ∈ {2^{-j} : j ∈ kappa2_exponents}.
    pub kappa2_exponents: (i32, i32),
    /// θ ∈ {2^{-j} : j ∈ theta_exponents}, searched for n = 1 only.
    pub theta_exponents: (i32, i32),
    pub dt_fraction: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            kappa1_exponents: (0, 8),
            kappa2_exponents: (1, 12),
            theta_exponents: (0, 10),
            dt_fraction: 0.5,
            steps: 40,
            seed: 7,
        }
    }
}

/// Stored evolution of one mode; `source_norms[i]` is ‖ν^{-1/2}{I−P}ĥ‖² on step i.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeTrajectory {
    pub dt: f64,
    pub states: Vec<ModeState>,
    pub source_norms: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditedInequality {
    /// E(t+dt) ≤ (1 − λ dt |k|²/(1+|k|²)) E(t) + C dt ‖ν^{-1/2}{I−P}ĥ‖².
    Combined,
    /// ∂_t Re E_free + λ r(|b|²+|c|²) + λ|a+nc|² ≤ C(‖{I−P}û‖² + ‖ν^{-1/2}{I−P}ĥ‖²).
    FreeEnergy,
    /// ∂_t(‖û‖² + |a+nc|²/|k|²) + λ‖ν^{1/2}{I−P}û‖² ≤ C‖ν^{-1/2}{I−P}ĥ‖².
    L2Energy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditViolation {
    pub step: usize,
    pub inequality: AuditedInequality,
    pub margin: f64,
}

/// Normalized margins (right side minus left side over a scale) per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovReport {
    pub steps: usize,
    pub dt: f64,
    pub combined: Vec<f64>,
    /// Empty when the free-energy inequality is not certified.
    pub free_energy: Vec<f64>,
    /// Empty when the L² inequality is not certified.
    pub l2_energy: Vec<f64>,
    pub worst_combined: f64,
    pub worst_free_energy: Option<f64>,
    pub worst_l2_energy: Option<f64>,
    pub violations: Vec<AuditViolation>,
}

impl LyapunovReport {
    pub fn worst(&self) -> f64 {
        [self.worst_free_energy, self.worst_l2_energy]
            .into_iter()
            .flatten()
            .fold(self.worst_combined, f64::min)
    }
    pub fn passed(&self, tol: f64) -> bool {
        self.worst() >= -tol
    }
}

/// Tolerance below which a margin is reported as a violation.
pub const AUDIT_TOLERANCE: f64 = 1e-6;

/// Integrator budget granted to the discrete inequality certificates (normalized margin).
pub const CERTIFICATE_BUDGET: f64 = 1e-7;

pub fn assemble_mode_operator(k: &[f64], backend: Arc<CollisionBackend>) -> Result<ModeOperator> {
    let grid = backend.grid();
    if k.len() != grid.dim() {
        return Err(invalid(
            "k",
            format!("{} components for a dim-{} grid", k.len(), grid.dim()),
        ));
    }
    if k.iter().any(|x| !x.is_finite()) {
        return Err(invalid("k", "non-finite component"));
    }
    let xi_k = (0..grid.len())
        .map(|i| grid.node(i).iter().zip(k).map(|(x, k)| x * k).sum())
        .collect();
    Ok(ModeOperator {
        k: k.to_vec(),
        k_sq: k.iter().map(|x| x * x).sum(),
        xi_k,
        backend,
    })
}

impl ModeOperator {
    pub fn k(&self) -> &[f64] {
        &self.k
    }
    pub fn k_sq(&self) -> f64 {
        self.k_sq
    }
    pub fn has_field(&self) -> bool {
        self.k_sq > 0.0
    }
    /// |k|²/(1+|k|²).
    pub fn rate_factor(&self) -> f64 {
        self.k_sq / (1.0 + self.k_sq)
    }
    pub fn backend(&self) -> &CollisionBackend {
        &self.backend
    }
    pub fn grid(&self) -> &VelocityGrid {
        self.backend.grid()
    }
    /// 0.5 / (max|ξ·k| + max ν).
    pub fn stability_bound(&self) -> f64 {
        let s = self.xi_k.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        0.5 / (s + self.backend.max_nu())
    }

    pub fn apply(&self, u: &[Complex64]) -> Result<Vec<Complex64>> {
        self.grid().check(u)?;
        Ok(self.apply_unchecked(u))
    }

    fn apply_unchecked(&self, u: &[Complex64]) -> Vec<Complex64> {
        let grid = self.grid();
        let mut out = self.backend.apply_l_unchecked(u);
        let rho = if self.has_field() {
            grid.density(u) / self.k_sq
        } else {
            Complex64::new(0.0, 0.0)
        };
        let sm = grid.sqrt_m();
        for i in 0..u.len() {
            out[i] -= I * self.xi_k[i] * (u[i] + rho * sm[i]);
        }
        out
    }

    /// Free-streaming part −iξ·k û.
    pub fn apply_streaming(&self, u: &[Complex64]) -> Result<Vec<Complex64>> {
        self.grid().check(u)?;
        Ok(u.iter()
            .zip(&self.xi_k)
            .map(|(&x, &s)| -I * s * x)
            .collect())
    }

    /// Dense generator in weighted coordinates.
    pub fn dense_generator(&self) -> Result<DMatrix<Complex64>> {
        let grid = self.grid();
        check_guard(grid.len(), DENSE_NODE_GUARD)?;
        let l = self.backend.dense_weighted_l()?;
        let r = density_functional(grid);
        let n = grid.len();
        let mut a = l.map(|x| Complex64::new(x, 0.0));
        for i in 0..n {
            a[(i, i)] -= I * self.xi_k[i];
            if self.has_field() {
                let f = -I * self.xi_k[i] * r[i] / self.k_sq;
                for j in 0..n {
                    a[(i, j)] += f * r[j];
                }
            }
        }
        Ok(a)
    }
}

/// Functional y ↦ a+nc = ρ in weighted coordinates (unit vector).
fn density_functional(grid: &VelocityGrid) -> DVector<f64> {
    let sw = sqrt_weights(grid);
    DVector::from_fn(grid.len(), |i, _| sw[i] * grid.sqrt_m()[i])
}

impl ModeState {
    pub fn new(u: Vec<Complex64>, k: &[f64], t: f64, grid: &VelocityGrid) -> Result<Self> {
        grid.check(&u)?;
        let mut s = Self {
            u,
            t,
            k: k.to_vec(),
            phi: Complex64::new(0.0, 0.0),
        };
        s.refresh_field(grid);
        Ok(s)
    }

    pub fn zero(k: &[f64], grid: &VelocityGrid) -> Self {
        Self {
            u: vec![Complex64::new(0.0, 0.0); grid.len()],
            t: 0.0,
            k: k.to_vec(),
            phi: Complex64::new(0.0, 0.0),
        }
    }

    pub fn k_sq(&self) -> f64 {
        self.k.iter().map(|x| x * x).sum()
    }

    fn refresh_field(&mut self, grid: &VelocityGrid) {
        let ksq = self.k_sq();
        self.phi = if ksq > 0.0 {
            -grid.density(&self.u) / ksq
        } else {
            Complex64::new(0.0, 0.0)
        };
    }

    pub fn macro_state(&self, grid: &VelocityGrid) -> MacroState<Complex64> {
        grid.macro_unchecked(&self.u)
    }
}

/// Explicit RK4 step with the source held constant over the step.
pub fn step(
    op: &ModeOperator,
    state: &ModeState,
    dt: f64,
    source: Option<&[Complex64]>,
) -> Result<ModeState> {
    let grid = op.grid();
    grid.check(&state.u)?;
    let bound = op.stability_bound();
    if !(dt > 0.0) || dt > bound * (1.0 + 1e-12) {
        return Err(LabError::StepGuard { dt, bound });
    }
    if let Some(h) = source {
        check_microscopic(grid, h)?;
    }
    let n = state.u.len();
    let f = |u: &[Complex64]| {
        let mut r = op.apply_unchecked(u);
        if let Some(h) = source {
            for (x, y) in r.iter_mut().zip(h) {
                *x += y;
            }
        }
        r
    };
    let stage = |k: &[Complex64], c: f64| -> Vec<Complex64> {
        (0..n).map(|i| state.u[i] + k[i] * (c * dt)).collect()
    };
    let k1 = f(&state.u);
    let k2 = f(&stage(&k1, 0.5));
    let k3 = f(&stage(&k2, 0.5));
    let k4 = f(&stage(&k3, 1.0));
    let u: Vec<Complex64> = (0..n)
        .map(|i| state.u[i] + (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * (dt / 6.0))
        .collect();
    let mut next = ModeState {
        u,
        t: state.t + dt,
        k: state.k.clone(),
        phi: state.phi,
    };
    next.refresh_field(grid);
    Ok(next)
}

fn check_microscopic(grid: &VelocityGrid, h: &[Complex64]) -> Result<()> {
    grid.check(h)?;
    let p = grid.project_unchecked(h, Projection::P);
    let pn = grid.norm(&p);
    if pn > 1e-8 * grid.norm(h).max(1.0) {
        return Err(LabError::NonMicroscopicSource(pn));
    }
    Ok(())
}

/// ‖ν^{-1/2}{I−P}ĥ‖².
pub fn source_norm_sq(backend: &CollisionBackend, h: &[Complex64]) -> Result<f64> {
    let f = backend.grid().project(h, Projection::IMinusP)?;
    Ok(backend.nu_weighted_norm(&f, -1.0)?.powi(2))
}

/// Runs `steps` RK4 steps; the source is evaluated at each step midpoint.
pub fn evolve(
    op: &ModeOperator,
    initial: ModeState,
    dt: f64,
    steps: usize,
    source: Option<&dyn Fn(f64) -> Vec<Complex64>>,
) -> Result<ModeTrajectory> {
    let mut states = Vec::with_capacity(steps + 1);
    let mut source_norms = Vec::with_capacity(steps);
    let mut cur = initial;
    for _ in 0..steps {
        let h = source.map(|s| s(cur.t + 0.5 * dt));
        let next = step(op, &cur, dt, h.as_deref())?;
        source_norms.push(match &h {
            Some(h) => source_norm_sq(op.backend(), h)?,
            None => 0.0,
        });
        states.push(std::mem::replace(&mut cur, next));
    }
    states.push(cur);
    Ok(ModeTrajectory {
        dt,
        states,
        source_norms,
    })
}

fn k_factor(k: &[f64]) -> Vec<Complex64> {
    let ksq: f64 = k.iter().map(|x| x * x).sum();
    k.iter().map(|&kj| I * kj / (1.0 + ksq)).collect()
}

/// Re E_free of a slice at wavenumber k.
///
/// The A-moments in the first sum are A_jm({I−P}û) + 2θcδ_jm; θ = 0 is the
/// standard functional. For n = 1, A₁₁({I−P}û) vanishes identically and θ > 0
/// supplies the missing pairing of b against the temperature mode.
pub fn free_energy_of(
    grid: &VelocityGrid,
    u: &[Complex64],
    k: &[f64],
    kappa1: f64,
    theta: f64,
) -> Result<f64> {
    grid.check(u)?;
    if k.len() != grid.dim() {
        return Err(invalid("k", "dimension mismatch"));
    }
    let n = grid.dim();
    let nf = n as f64;
    let m = grid.macro_unchecked(u);
    let micro = grid.project_unchecked(u, Projection::IMinusP);
    let mut hm = grid.high_moments_unchecked(&micro);
    for j in 0..n {
        hm.a[j][j] += m.c * (2.0 * theta);
    }
    let q = k_factor(k);
    let rho = m.a + m.c * nf;
    let mut e = Complex64::new(0.0, 0.0);
    for mm in 0..n {
        let mut f1 = q[mm] * hm.a[mm][mm] * 0.5;
        for j in 0..n {
            f1 += q[j] * hm.a[j][mm];
        }
        e += kappa1 * f1 * (-m.b[mm]).conj();
    }
    for j in 0..n {
        e += kappa1 * hm.b[j] * (q[j] * m.c).conj();
    }
    for mm in 0..n {
        e += m.b[mm] * (q[mm] * rho).conj();
    }
    Ok(e.re)
}

/// Re E_free(û(t,k)) with κ₁ from the params.
pub fn free_energy(
    state: &ModeState,
    params: &EnergyFunctionalParams,
    grid: &VelocityGrid,
) -> Result<f64> {
    free_energy_of(grid, &state.u, &state.k, params.kappa1, params.theta)
}

/// E = ‖û‖² + |a+nc|²/|k|² + κ₂ Re E_free; rejects k = 0.
pub fn total_energy(
    state: &ModeState,
    params: &EnergyFunctionalParams,
    grid: &VelocityGrid,
) -> Result<f64> {
    let ksq = state.k_sq();
    if ksq == 0.0 {
        return Err(invalid("k", "total energy needs k ≠ 0 in whole space"));
    }
    let rho = grid.density(&state.u);
    let free = free_energy(state, params, grid)?;
    Ok(grid.norm_sq(&state.u) + rho.norm_sqr() / ksq + params.kappa2 * free)
}

/// Hermitian matrices of the quadratic forms in weighted coordinates.
#[derive(Clone, Debug)]
pub struct EnergyForms {
    /// ‖û‖² + |ρ|²/|k|².
    pub base: DMatrix<Complex64>,
    /// Re E_free.
    pub free: DMatrix<Complex64>,
    /// r(|b|²+|c|²) + |ρ|².
    pub dissipated_macro: DMatrix<Complex64>,
    /// ‖{I−P}û‖².
    pub micro: DMatrix<Complex64>,
    /// ‖ν^{1/2}{I−P}û‖².
    pub micro_nu: DMatrix<Complex64>,
}

impl EnergyForms {
    pub fn total(&self, kappa2: f64) -> DMatrix<Complex64> {
        &self.base + &self.free * Complex64::new(kappa2, 0.0)
    }
}

struct Functionals {
    rho: DVector<f64>,
    b: Vec<DVector<f64>>,
    c: DVector<f64>,
    a_hi: Vec<Vec<DVector<f64>>>,
    b_hi: Vec<DVector<f64>>,
}

fn functionals(grid: &VelocityGrid) -> Functionals {
    let n = grid.dim();
    let nf = n as f64;
    let len = grid.len();
    let sw = sqrt_weights(grid);
    let q = micro_projector(grid);
    let g =
        |f: &dyn Fn(usize) -> f64| DVector::from_fn(len, |i, _| sw[i] * grid.sqrt_m()[i] * f(i));
    let rho = g(&|_| 1.0);
    let b = (0..n).map(|j| g(&|i| grid.node(i)[j])).collect();
    let c = g(&|i| (grid.speed_sq()[i] - nf) / (2.0 * nf));
    let a_hi = (0..n)
        .map(|j| {
            (0..n)
                .map(|m| {
                    let kron = if j == m { 1.0 } else { 0.0 };
                    &q * g(&|i| grid.node(i)[j] * grid.node(i)[m] - kron)
                })
                .collect()
        })
        .collect();
    let b_hi = (0..n)
        .map(|j| &q * g(&|i| (grid.speed_sq()[i] - nf - 2.0) * grid.node(i)[j]))
        .collect();
    Functionals {
        rho,
        b,
        c,
        a_hi,
        b_hi,
    }
}

fn cplx(v: &DVector<f64>) -> DVector<Complex64> {
    v.map(|x| Complex64::new(x, 0.0))
}

/// Matrix X with yᴴXy = f₁(y)·conj(f₂(y)) for f(y) = φᵀy.
fn pairing(phi1: &DVector<Complex64>, phi2: &DVector<Complex64>) -> DMatrix<Complex64> {
    phi2.map(|x| x.conj()) * phi1.transpose()
}

/// Dense quadratic forms for a mode; requires k ≠ 0.
pub fn energy_forms(op: &ModeOperator, kappa1: f64, theta: f64) -> Result<EnergyForms> {
    if !op.has_field() {
        return Err(invalid("k", "energy forms need k ≠ 0"));
    }
    let grid = op.grid();
    check_guard(grid.len(), DENSE_NODE_GUARD)?;
    let n = grid.dim();
    let len = grid.len();
    let f = functionals(grid);
    let q = k_factor(op.k());
    let rho = cplx(&f.rho);
    let mut x = DMatrix::<Complex64>::zeros(len, len);
    let theta_c = cplx(&f.c) * Complex64::new(2.0 * theta, 0.0);
    for m in 0..n {
        let amm = cplx(&f.a_hi[m][m]) + &theta_c;
        let mut f1 = &amm * (q[m] * 0.5 * kappa1);
        for j in 0..n {
            let ajm = if j == m {
                amm.clone()
            } else {
                cplx(&f.a_hi[j][m])
            };
            f1 += ajm * (q[j] * kappa1);
        }
        x += pairing(&f1, &(-cplx(&f.b[m])));
    }
    for j in 0..n {
        x += pairing(
            &(cplx(&f.b_hi[j]) * Complex64::new(kappa1, 0.0)),
            &(cplx(&f.c) * q[j]),
        );
    }
    for m in 0..n {
        x += pairing(&cplx(&f.b[m]), &(&rho * q[m]));
    }
    let free = hermitian_part(&x);
    let mut base = DMatrix::<Complex64>::identity(len, len);
    base += &rho * rho.transpose() * Complex64::new(1.0 / op.k_sq(), 0.0);
    let r = op.rate_factor();
    let mut mac = &rho * rho.transpose();
    for bm in &f.b {
        let bc = cplx(bm);
        mac += &bc * bc.transpose() * Complex64::new(r, 0.0);
    }
    let cc = cplx(&f.c);
    mac += &cc * cc.transpose() * Complex64::new(r, 0.0);
    let micro = micro_projector(grid).map(|x| Complex64::new(x, 0.0));
    let nu = op.backend().nu();
    let micro_nu = {
        let qm = micro_projector(grid);
        let d = DMatrix::from_diagonal(&DVector::from_vec(nu.to_vec()));
        (&qm * d * &qm).map(|x| Complex64::new(x, 0.0))
    };
    Ok(EnergyForms {
        base,
        free,
        dissipated_macro: mac,
        micro,
        micro_nu,
    })
}

/// RK4 propagator S(hA) and constant-source map T in weighted coordinates.
fn rk4_maps(a: &DMatrix<Complex64>, dt: f64) -> (DMatrix<Complex64>, DMatrix<Complex64>) {
    let n = a.nrows();
    let id = DMatrix::<Complex64>::identity(n, n);
    let ha = a * Complex64::new(dt, 0.0);
    let c = |x: f64| Complex64::new(x, 0.0);
    // T/dt = I + hA/2 + (hA)²/6 + (hA)³/24, S = I + hA·(T/dt)
    let inner = &id * c(1.0 / 6.0) + &ha * c(1.0 / 24.0);
    let t_over = &id + &ha * (&id * c(0.5) + &ha * inner);
    let s = &id + &ha * &t_over;
    (s, t_over * c(dt))
}

/// Generalized eigenvalues (G, G₀) bounding E against ‖û‖² + |ρ|²/|k|².
pub fn equivalence(
    backend: &Arc<CollisionBackend>,
    k_samples: &[Vec<f64>],
    kappa1: f64,
    kappa2: f64,
    theta: f64,
) -> Result<(f64, f64)> {
    if kappa2 == 0.0 {
        return Ok((1.0, 1.0));
    }
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for k in k_samples {
        let op = assemble_mode_operator(k, backend.clone())?;
        let forms = energy_forms(&op, kappa1, theta)?;
        let ev = generalized_eigenvalues(&forms.total(kappa2), &forms.base)
            .ok_or_else(|| LabError::Calibration("base form not positive definite".into()))?;
        lo = lo.min(ev[0]);
        hi = hi.max(ev[ev.len() - 1]);
    }
    Ok((lo, hi))
}

fn real_diag(v: impl Iterator<Item = f64>) -> DMatrix<Complex64> {
    let d: Vec<Complex64> = v.map(|x| Complex64::new(x, 0.0)).collect();
    DMatrix::from_diagonal(&DVector::from_vec(d))
}

/// Discrete one-step data of a mode: y₁ = S y₀ + W z with h = U z microscopic.
struct StepMaps {
    s: DMatrix<Complex64>,
    w: DMatrix<Complex64>,
    /// ‖ν^{-1/2} U z‖² as a form in z.
    nz: DMatrix<Complex64>,
}

impl StepMaps {
    fn new(a: &DMatrix<Complex64>, dt: f64, u: &DMatrix<Complex64>, nu: &[f64]) -> Self {
        let (s, t) = rk4_maps(a, dt);
        let nz = hermitian_part(&(u.adjoint() * real_diag(nu.iter().map(|x| 1.0 / x)) * u));
        Self { w: t * u, s, nz }
    }

    /// Forms of M(y₀) and M(y₁) in the joint variable x = (y₀, z).
    fn lift(&self, m: &DMatrix<Complex64>) -> (DMatrix<Complex64>, DMatrix<Complex64>) {
        let ny = self.s.nrows();
        let nz = self.w.ncols();
        let mut before = DMatrix::<Complex64>::zeros(ny + nz, ny + nz);
        before.view_mut((0, 0), (ny, ny)).copy_from(m);
        let mut j = DMatrix::<Complex64>::zeros(ny, ny + nz);
        j.view_mut((0, 0), (ny, ny)).copy_from(&self.s);
        j.view_mut((0, ny), (ny, nz)).copy_from(&self.w);
        (before, hermitian_part(&(j.adjoint() * m * &j)))
    }

    fn source_block(&self) -> DMatrix<Complex64> {
        let ny = self.s.nrows();
        let nz = self.w.ncols();
        let mut b = DMatrix::<Complex64>::zeros(ny + nz, ny + nz);
        b.view_mut((ny, ny), (nz, nz)).copy_from(&self.nz);
        b
    }
}

/// CERTIFICATE_BUDGET·dt·(avg scale(y) + ‖ν^{-1/2}h‖²) as a joint form.
fn budget(maps: &StepMaps, scale: &DMatrix<Complex64>, dt: f64) -> DMatrix<Complex64> {
    let (s0, s1) = maps.lift(scale);
    ((s0 + s1) * Complex64::new(0.5, 0.0) + maps.source_block())
        * Complex64::new(CERTIFICATE_BUDGET * dt, 0.0)
}

/// Largest λ and a C with Z₀ + C·N − λ·M ⪰ 0: C = 4C₀ for the smallest power of two C₀
/// making Z₀ + C₀N definite, λ the matching maximum; returns (λ/2, 2C).
fn certify_pencil(
    z0: &DMatrix<Complex64>,
    n: &DMatrix<Complex64>,
    m: &DMatrix<Complex64>,
) -> Option<(f64, f64)> {
    let definite = |j: i32| cholesky_pd(&(z0 + n * Complex64::new(2f64.powi(j), 0.0))).is_some();
    let (mut lo, mut hi) = (-30i32, 60i32);
    if !definite(hi) {
        return None;
    }
    if definite(lo) {
        hi = lo;
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if definite(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let c = 4.0 * 2f64.powi(hi);
    let zc = hermitian_part(&(z0 + n * Complex64::new(c, 0.0)));
    let ev = generalized_eigenvalues(m, &zc)?;
    let top = ev[ev.len() - 1];
    if !(top > 0.0) {
        return None;
    }
    Some((0.5 / top, 2.0 * c))
}

/// Discrete free-energy inequality: F(y₁) − F(y₀) + λ dt avg(Mac) ≤ C dt (avg ‖{I−P}y‖² + ‖ν^{-1/2}h‖²).
fn certify_free_energy(maps: &StepMaps, forms: &EnergyForms, dt: f64) -> Option<(f64, f64)> {
    let (f0, f1) = maps.lift(&forms.free);
    let (q0, q1) = maps.lift(&forms.micro);
    let (m0, m1) = maps.lift(&forms.dissipated_macro);
    let half_dt = Complex64::new(0.5 * dt, 0.0);
    let id = DMatrix::<Complex64>::identity(forms.free.nrows(), forms.free.ncols());
    let z0 = hermitian_part(&(f0 - f1)) + budget(maps, &id, dt);
    let n = (q0 + q1) * half_dt + maps.source_block() * Complex64::new(dt, 0.0);
    let m = (m0 + m1) * half_dt;
    certify_pencil(&z0, &n, &m)
}

/// Discrete L² inequality: E₀(y₁) − E₀(y₀) + λ dt avg‖ν^{1/2}{I−P}y‖² ≤ C dt ‖ν^{-1/2}h‖².
///
/// λ is half the largest value admissible without source; C is twice the Schur
/// complement bound for that λ.
fn certify_l2_energy(maps: &StepMaps, forms: &EnergyForms, dt: f64) -> Option<(f64, f64)> {
    let (b0, b1) = maps.lift(&forms.base);
    let (d0, d1) = maps.lift(&forms.micro_nu);
    let z0 = hermitian_part(&(b0 - b1)) + budget(maps, &forms.base, dt);
    let m = (d0 + d1) * Complex64::new(0.5 * dt, 0.0);
    let ny = maps.s.nrows();
    let nz = maps.w.ncols();
    let yy = |x: &DMatrix<Complex64>| x.view((0, 0), (ny, ny)).into_owned();
    let ev = generalized_eigenvalues(&yy(&m), &yy(&z0))?;
    let top = ev[ev.len() - 1];
    if !(top > 0.0) {
        return None;
    }
    let lambda = 0.5 / top;
    let z = &z0 - &m * Complex64::new(lambda, 0.0);
    let zyy = cholesky_pd(&yy(&z))?;
    let zyz = z.view((0, ny), (ny, nz)).into_owned();
    let zzz = z.view((ny, ny), (nz, nz)).into_owned();
    let schur = hermitian_part(&(zyz.adjoint() * zyy.solve(&zyz) - zzz));
    let ev = generalized_eigenvalues(&schur, &(&maps.nz * Complex64::new(dt, 0.0)))?;
    Some((lambda, 2.0 * ev[ev.len() - 1].max(0.0)))
}

/// Smallest C with E(Sy+Wz) − (1−λ dt r)E(y) ≤ C dt ‖ν^{-1/2}Uz‖² for all y, z.
fn certify_source(maps: &StepMaps, g: &DMatrix<Complex64>, dt: f64, shrink: f64) -> Option<f64> {
    let q = hermitian_part(&(g * Complex64::new(shrink, 0.0) - maps.s.adjoint() * g * &maps.s));
    let qinv = cholesky_pd(&q)?.inverse();
    let inner = g + g * &maps.s * qinv * maps.s.adjoint() * g;
    let lhs = hermitian_part(&(maps.w.adjoint() * inner * &maps.w));
    let ev = generalized_eigenvalues(&lhs, &(&maps.nz * Complex64::new(dt, 0.0)))?;
    Some(ev[ev.len() - 1].max(0.0))
}

struct CalibrationMode {
    op: ModeOperator,
    dt: f64,
    maps: StepMaps,
    base_drop: DMatrix<Complex64>,
}

/// Best (κ₁, κ₂, θ, floor) outside `excluded`. Candidates that cannot beat the current
/// best are rejected by a definiteness test before any eigenvalue computation.
fn search_candidates(
    modes: &[CalibrationMode],
    thetas: &[f64],
    config: &CalibrationConfig,
    excluded: &[(f64, f64, f64)],
) -> Result<Option<(f64, f64, f64, f64)>> {
    let mut order: Vec<usize> = (0..modes.len()).collect();
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for j1 in config.kappa1_exponents.0..=config.kappa1_exponents.1 {
        let kappa1 = 2f64.powi(j1);
        for &theta in thetas {
            let per_mode: Vec<(EnergyForms, DMatrix<Complex64>)> = modes
                .iter()
                .map(|m| {
                    let f = energy_forms(&m.op, kappa1, theta)?;
                    let drop = &f.free - m.maps.s.adjoint() * &f.free * &m.maps.s;
                    Ok((f, drop))
                })
                .collect::<Result<_>>()?;
            for j2 in config.kappa2_exponents.0..=config.kappa2_exponents.1 {
                let kappa2 = 2f64.powi(-j2);
                if excluded.contains(&(kappa1, kappa2, theta)) {
                    continue;
                }
                let k2 = Complex64::new(kappa2, 0.0);
                let target = best.map_or(0.0, |b| b.3);
                let pencil = |i: usize| {
                    let m = &modes[i];
                    let (f, drop) = &per_mode[i];
                    let g = f.total(kappa2);
                    let d = hermitian_part(&(&m.base_drop + drop * k2));
                    (g, d, m.dt * m.op.rate_factor())
                };
                let beats = order.iter().position(|&i| {
                    let (g, d, scale) = pencil(i);
                    cholesky_pd(&(d - &g * Complex64::new(target * scale, 0.0))).is_none()
                });
                if let Some(pos) = beats {
                    let i = order.remove(pos);
                    order.insert(0, i);
                    continue;
                }
                let mut floor = f64::INFINITY;
                for i in 0..modes.len() {
                    let (g, d, scale) = pencil(i);
                    match generalized_eigenvalues(&d, &g) {
                        Some(ev) => floor = floor.min(ev[0] / scale),
                        None => floor = f64::NEG_INFINITY,
                    }
                }
                if floor > target {
                    best = Some((kappa1, kappa2, theta, floor));
                }
            }
        }
    }
    Ok(best)
}

/// Worst-case source constant of the combined inequality over the modes.
fn combined_source_constant(
    modes: &[CalibrationMode],
    kappa1: f64,
    kappa2: f64,
    theta: f64,
    lambda: f64,
) -> Option<f64> {
    let mut c = 0.0f64;
    for m in modes {
        let forms = energy_forms(&m.op, kappa1, theta).ok()?;
        let shrink = 1.0 - lambda * m.dt * m.op.rate_factor();
        c = c.max(certify_source(&m.maps, &forms.total(kappa2), m.dt, shrink)?);
    }
    Some(c)
}

/// Uniform inequality constants over the modes, or None if any mode fails.
fn uniform_bound(
    modes: &[CalibrationMode],
    kappa1: f64,
    theta: f64,
    certify: fn(&StepMaps, &EnergyForms, f64) -> Option<(f64, f64)>,
) -> Option<InequalityConstants> {
    let mut c = InequalityConstants {
        lambda: f64::INFINITY,
        constant: 0.0,
    };
    for m in modes {
        let forms = energy_forms(&m.op, kappa1, theta).ok()?;
        let (l, k) = certify(&m.maps, &forms, m.dt)?;
        c.lambda = c.lambda.min(l);
        c.constant = c.constant.max(k);
    }
    Some(c)
}

/// Certified search over κ₁ ∈ {2^j}, κ₂ ∈ {2^{-j}}.
///
/// For each candidate the discrete inequality E(S y) ≤ (1 − λ dt r_k) E(y) is
/// certified densely for the RK4 propagator S at each sampled k; the candidate
/// with the largest floor is kept and λ is set to half of it. The source
/// constant, the discrete inequality constants and the equivalence constants follow,
/// and `trajectories` random states per k are evolved and audited.
pub fn calibrate_functional(
    backend: &Arc<CollisionBackend>,
    k_samples: &[Vec<f64>],
    trajectories: usize,
    config: &CalibrationConfig,
) -> Result<EnergyFunctionalParams> {
    if k_samples.is_empty() {
        return Err(invalid("k_samples", "empty"));
    }
    if !(config.dt_fraction > 0.0 && config.dt_fraction <= 1.0) {
        return Err(invalid(
            "dt_fraction",
            format!("{} not in (0, 1]", config.dt_fraction),
        ));
    }
    let grid = backend.grid();
    check_guard(grid.len(), DENSE_NODE_GUARD)?;
    let u = micro_basis(grid).map(|x| Complex64::new(x, 0.0));
    let modes: Vec<CalibrationMode> = k_samples
        .iter()
        .map(|k| {
            let op = assemble_mode_operator(k, backend.clone())?;
            if !op.has_field() {
                return Err(invalid("k_samples", "k = 0 is excluded in whole space"));
            }
            let dt = config.dt_fraction * op.stability_bound();
            let maps = StepMaps::new(&op.dense_generator()?, dt, &u, backend.nu());
            let base = energy_forms(&op, 1.0, 0.0)?.base;
            let base_drop = &base - maps.s.adjoint() * &base * &maps.s;
            Ok(CalibrationMode {
                op,
                dt,
                maps,
                base_drop,
            })
        })
        .collect::<Result<_>>()?;
    let thetas: Vec<f64> = if grid.dim() == 1 {
        (config.theta_exponents.0..=config.theta_exponents.1)
            .map(|j| 2f64.powi(-j))
            .collect()
    } else {
        vec![0.0]
    };
    let mut excluded: Vec<(f64, f64, f64)> = Vec::new();
    let (kappa1, kappa2, theta, lambda, source_constant) = loop {
        let (kappa1, kappa2, theta, floor) = search_candidates(&modes, &thetas, config, &excluded)?
            .ok_or_else(|| {
                LabError::Calibration("no (κ₁, κ₂) in the search grid certifies λ > 0".into())
            })?;
        let lambda = 0.5 * floor;
        match combined_source_constant(&modes, kappa1, kappa2, theta, lambda) {
            Some(c) => break (kappa1, kappa2, theta, lambda, c),
            None if excluded.len() < 16 => excluded.push((kappa1, kappa2, theta)),
            None => {
                return Err(LabError::Calibration(
                    "source constant not certifiable for any admissible candidate".into(),
                ))
            }
        }
    };
    let free_energy_bound = uniform_bound(&modes, kappa1, theta, certify_free_energy);
    let l2_bound = uniform_bound(&modes, kappa1, theta, certify_l2_energy);
    let (lambda_lower, lambda_upper) = equivalence(backend, k_samples, kappa1, kappa2, theta)?;
    let params = EnergyFunctionalParams {
        kappa1,
        kappa2,
        theta,
        lambda,
        source_constant,
        lambda_lower,
        lambda_upper,
        free_energy_bound,
        l2_bound,
        dt_fraction: config.dt_fraction,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sw = sqrt_weights(grid);
    for m in &modes {
        for _ in 0..trajectories {
            let u0: Vec<Complex64> = (0..grid.len())
                .map(|i| {
                    let re: f64 = StandardNormal.sample(&mut rng);
                    let im: f64 = StandardNormal.sample(&mut rng);
                    Complex64::new(re, im) / sw[i]
                })
                .collect();
            let s0 = ModeState::new(u0, m.op.k(), 0.0, grid)?;
            let traj = evolve(&m.op, s0, m.dt, config.steps, None)?;
            let rep = lyapunov_audit(&m.op, &traj, &params)?;
            if !rep.passed(AUDIT_TOLERANCE) {
                return Err(LabError::Calibration(format!(
                    "sampled trajectory violates the certified inequalities at k = {:?} \
                     (margins {:e}, {:?}, {:?})",
                    m.op.k(),
                    rep.worst_combined,
                    rep.worst_free_energy,
                    rep.worst_l2_energy
                )));
            }
        }
    }
    Ok(params)
}

/// Complex eigenvalues of the dense generator, sorted by ascending real part.
pub fn spectrum(op: &ModeOperator) -> Result<Vec<Complex64>> {
    complex_eigenvalues(op.dense_generator()?)
}

fn complex_eigenvalues(a: DMatrix<Complex64>) -> Result<Vec<Complex64>> {
    let n = a.nrows();
    let ev = a
        .try_schur(1e-14, 1000 * n.max(1))
        .and_then(|s| s.eigenvalues())
        .ok_or_else(|| LabError::Unsupported("Schur form did not converge".into()))?;
    let mut v: Vec<Complex64> = ev.iter().copied().collect();
    v.sort_by(|x, y| x.re.partial_cmp(&y.re).unwrap());
    Ok(v)
}

struct StepQuantities {
    energy: f64,
    base: f64,
    free: f64,
    mac: f64,
    micro: f64,
    micro_nu: f64,
    norm: f64,
}

fn step_quantities(
    grid: &VelocityGrid,
    nu: &[f64],
    s: &ModeState,
    params: &EnergyFunctionalParams,
) -> Result<StepQuantities> {
    let ksq = s.k_sq();
    let rate = ksq / (1.0 + ksq);
    let m = grid.macro_unchecked(&s.u);
    let rho = m.density();
    let norm = grid.norm_sq(&s.u);
    let base = norm + rho.norm_sqr() / ksq;
    let free = free_energy(s, params, grid)?;
    let micro = grid.project_unchecked(&s.u, Projection::IMinusP);
    let bsq: f64 = m.b.iter().map(|x| x.norm_sqr()).sum();
    Ok(StepQuantities {
        energy: base + params.kappa2 * free,
        base,
        free,
        mac: rate * (bsq + m.c.norm_sqr()) + rho.norm_sqr(),
        micro: grid.norm_sq(&micro),
        micro_nu: crate::velocity_space::weighted_norm_with(grid, nu, &micro, 1.0).powi(2),
        norm,
    })
}

/// Per-step check of the combined inequality (discrete form) and of the two
/// component inequalities (one-sided differences, trapezoid-averaged right sides).
pub fn lyapunov_audit(
    op: &ModeOperator,
    trajectory: &ModeTrajectory,
    params: &EnergyFunctionalParams,
) -> Result<LyapunovReport> {
    if !op.has_field() {
        return Err(invalid("k", "audit needs k ≠ 0"));
    }
    if trajectory.states.len() != trajectory.source_norms.len() + 1 {
        return Err(invalid("trajectory", "expected one source norm per step"));
    }
    let grid = op.grid();
    let nu = op.backend().nu();
    let dt = trajectory.dt;
    let r = op.rate_factor();
    let q: Vec<StepQuantities> = trajectory
        .states
        .iter()
        .map(|s| step_quantities(grid, nu, s, params))
        .collect::<Result<_>>()?;
    let steps = trajectory.source_norms.len();
    let mut combined = Vec::with_capacity(steps);
    let mut free_energy = Vec::with_capacity(steps);
    let mut l2_energy = Vec::with_capacity(steps);
    let mut violations = Vec::new();
    let margin = |num: f64, scale: f64| num / scale.max(f64::MIN_POSITIVE);
    for i in 0..steps {
        let (p, n) = (&q[i], &q[i + 1]);
        let s = trajectory.source_norms[i];
        let rhs = (1.0 - params.lambda * dt * r) * p.energy + params.source_constant * dt * s;
        let mc = margin(
            rhs - n.energy,
            p.energy.abs() + params.source_constant * dt * s,
        );
        let avg = |f: fn(&StepQuantities) -> f64| 0.5 * (f(p) + f(n));
        let mf = params.free_energy_bound.map(|c| {
            let lhs = (n.free - p.free) / dt + c.lambda * avg(|x| x.mac);
            let rhs = c.constant * (avg(|x| x.micro) + s);
            margin(rhs - lhs, avg(|x| x.norm) + s)
        });
        let mu = params.l2_bound.map(|c| {
            let lhs = (n.base - p.base) / dt + c.lambda * avg(|x| x.micro_nu);
            margin(c.constant * s - lhs, avg(|x| x.base) + s)
        });
        combined.push(mc);
        free_energy.extend(mf);
        l2_energy.extend(mu);
        for (ineq, m) in [
            (AuditedInequality::Combined, Some(mc)),
            (AuditedInequality::FreeEnergy, mf),
            (AuditedInequality::L2Energy, mu),
        ] {
            let Some(m) = m else { continue };
            if m < -AUDIT_TOLERANCE {
                violations.push(AuditViolation {
                    step: i,
                    inequality: ineq,
                    margin: m,
                });
            }
        }
    }
    let worst = |v: &[f64]| v.iter().cloned().reduce(f64::min);
    let worst_combined = worst(&combined).unwrap_or(0.0);
    let worst_free_energy = worst(&free_energy);
    let worst_l2_energy = worst(&l2_energy);
    Ok(LyapunovReport {
        steps,
        dt,
        combined,
        free_energy,
        l2_energy,
        worst_combined,
        worst_free_energy,
        worst_l2_energy,
        violations,
    })
}
