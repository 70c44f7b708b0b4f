//! Nonlinear perturbation dynamics on the one-dimensional torus x ∈ [0, 2π) with
//! velocities in R^d: pseudo-spectral streaming, Poisson coupling and Vlasov force,
//! energy functionals along trajectories and structural audits.
//!
//! Spatial nodes x_j = 2πj/N_x with N_x odd; coefficients û_k = N_x^{-1} Σ_j u(x_j) e^{−ikx_j},
//! |k| ≤ (N_x−1)/2, so that ∫|f|² dx = 2π Σ_k |f̂_k|². Quadratic functionals are
//! Hermitian forms per mode in weighted velocity coordinates y = w^{1/2} û.

use crate::collision_ops::CollisionBackend;
use crate::decay_experiments::{fit_decay, BackendSpec, DataSpec, FitModel, FitResult};
use crate::dense::{
    cholesky_pd, generalized_eigenvalues, hermitian_part, micro_basis, micro_projector,
    sqrt_weights,
};
use crate::error::{invalid, LabError, Result};
use crate::mode_dynamics::assemble_mode_operator;
use crate::scalar::Complex64;
use crate::velocity_space::{Projection, VelocityGrid};
use nalgebra::{DMatrix, DVector};
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Largest supported derivative order N of the functionals.
pub const MAX_DERIVATIVE_ORDER: usize = 2;

/// FFT pair on N_x equispaced nodes of [0, 2π).
#[derive(Clone)]
pub struct Spectral {
    nx: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Spectral {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Spectral").field("nx", &self.nx).finish()
    }
}

impl Spectral {
    pub fn new(nx: usize) -> Result<Self> {
        if nx == 0 {
            return Err(invalid("nx", "must be positive"));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            nx,
            fwd: planner.plan_fft_forward(nx),
            inv: planner.plan_fft_inverse(nx),
        })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    /// Wavenumber of coefficient j; the Nyquist index of even N_x maps to +N_x/2.
    pub fn wavenumber(&self, j: usize) -> f64 {
        if j <= self.nx / 2 {
            j as f64
        } else {
            j as f64 - self.nx as f64
        }
    }

    fn is_nyquist(&self, j: usize) -> bool {
        self.nx % 2 == 0 && j == self.nx / 2
    }

    pub fn forward(&self, f: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = f.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.fwd.process(&mut buf);
        let s = 1.0 / self.nx as f64;
        buf.iter_mut().for_each(|c| *c *= s);
        buf
    }

    pub fn inverse(&self, c: &[Complex64]) -> Vec<f64> {
        let mut buf = c.to_vec();
        self.inv.process(&mut buf);
        buf.iter().map(|z| z.re).collect()
    }

    /// Spectral ∂_x^order; odd derivatives drop the Nyquist coefficient.
    pub fn derivative(&self, f: &[f64], order: u32) -> Vec<f64> {
        let mut c = self.forward(f);
        for (j, z) in c.iter_mut().enumerate() {
            if order % 2 == 1 && self.is_nyquist(j) {
                *z = Complex64::new(0.0, 0.0);
            } else {
                *z *= (I * self.wavenumber(j)).powu(order);
            }
        }
        self.inverse(&c)
    }
}

/// Mean-zero potential of Δ_xΦ = ρ − ρ̄ on the torus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoissonSolution {
    pub phi: Vec<f64>,
    pub dphi: Vec<f64>,
    pub mean_density: f64,
    /// max_x |Δ_xΦ − (ρ − ρ̄)|.
    pub residual: f64,
}

pub fn solve_poisson(density: &[f64]) -> Result<PoissonSolution> {
    poisson_with(&Spectral::new(density.len())?, density)
}

fn poisson_with(s: &Spectral, density: &[f64]) -> Result<PoissonSolution> {
    if density.len() != s.nx() {
        return Err(invalid("density", "length differs from the spatial grid"));
    }
    let mut c = s.forward(density);
    let mean = c[0].re;
    c[0] = Complex64::new(0.0, 0.0);
    for (j, z) in c.iter_mut().enumerate().skip(1) {
        let k = s.wavenumber(j);
        *z = -*z / (k * k);
    }
    let phi = s.inverse(&c);
    let dphi = s.derivative(&phi, 1);
    let lap = s.derivative(&phi, 2);
    let residual = lap
        .iter()
        .zip(density)
        .map(|(l, r)| (l - (r - mean)).abs())
        .fold(0.0, f64::max);
    Ok(PoissonSolution {
        phi,
        dphi,
        mean_density: mean,
        residual,
    })
}

/// u(t, x_j, ξ_i) stored as u[j·N_v + i], with the derived potential.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonlinearState {
    pub nx: usize,
    pub u: Vec<f64>,
    pub t: f64,
    pub phi: Vec<f64>,
    pub dphi: Vec<f64>,
    pub poisson_residual: f64,
}

impl NonlinearState {
    pub fn slice(&self, j: usize) -> &[f64] {
        let nv = self.u.len() / self.nx;
        &self.u[j * nv..(j + 1) * nv]
    }
}

/// Torus discretization together with the collision backend.
#[derive(Clone, Debug)]
pub struct TorusBench {
    backend: Arc<CollisionBackend>,
    spectral: Spectral,
    xi1: Vec<f64>,
}

impl TorusBench {
    pub fn new(backend: Arc<CollisionBackend>, nx: usize) -> Result<Self> {
        if nx < 3 || nx % 2 == 0 {
            return Err(invalid("nx", format!("{nx} must be odd and at least 3")));
        }
        let xi1 = (0..backend.grid().len())
            .map(|i| backend.grid().node(i)[0])
            .collect();
        Ok(Self {
            spectral: Spectral::new(nx)?,
            backend,
            xi1,
        })
    }

    pub fn nx(&self) -> usize {
        self.spectral.nx
    }

    /// Largest resolved wavenumber (N_x − 1)/2.
    pub fn k_max(&self) -> usize {
        (self.nx() - 1) / 2
    }

    pub fn grid(&self) -> &VelocityGrid {
        self.backend.grid()
    }

    pub fn backend(&self) -> &Arc<CollisionBackend> {
        &self.backend
    }

    pub fn spectral(&self) -> &Spectral {
        &self.spectral
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.nx())
            .map(|j| 2.0 * PI * j as f64 / self.nx() as f64)
            .collect()
    }

    /// 0.5 / (max|ξ₁| k_max + max ν).
    pub fn stability_bound(&self) -> f64 {
        let s = self.xi1.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        0.5 / (s * self.k_max() as f64 + self.backend.max_nu())
    }

    fn nv(&self) -> usize {
        self.grid().len()
    }

    fn check_field(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.nx() * self.nv() {
            return Err(LabError::GridMismatch {
                expected: self.nx() * self.nv(),
                got: u.len(),
            });
        }
        Ok(())
    }

    fn slices<'a>(&self, u: &'a [f64]) -> std::slice::ChunksExact<'a, f64> {
        u.chunks_exact(self.nv())
    }

    pub fn density(&self, u: &[f64]) -> Vec<f64> {
        self.slices(u).map(|s| self.grid().density(s)).collect()
    }

    /// Builds a state and solves for its potential.
    pub fn state(&self, u: Vec<f64>, t: f64) -> Result<NonlinearState> {
        self.check_field(&u)?;
        let p = poisson_with(&self.spectral, &self.density(&u))?;
        Ok(NonlinearState {
            nx: self.nx(),
            u,
            t,
            phi: p.phi,
            dphi: p.dphi,
            poisson_residual: p.residual,
        })
    }

    /// u₀(x, ξ) = amplitude g(x) Πχ(ξ) on the nodes, g periodized and centered at 0.
    pub fn initial_state(&self, spec: &DataSpec) -> Result<NonlinearState> {
        let grid = self.grid();
        let g = spec.spatial_profile()?;
        let mut gx: Vec<f64> = self
            .nodes()
            .iter()
            .map(|&x| g.periodic_value(x))
            .collect::<Result<_>>()?;
        if spec.subtract_mean {
            let mean = gx.iter().sum::<f64>() / gx.len() as f64;
            gx.iter_mut().for_each(|v| *v -= mean);
        }
        let chi0: Vec<f64> = spec
            .velocity_profile()?
            .values(grid)
            .iter()
            .map(|z| z.re)
            .collect();
        let chi = if spec.microscopic {
            grid.project(&chi0, Projection::IMinusP)?
        } else if spec.subtract_p0 {
            let p0 = grid.project(&chi0, Projection::P0)?;
            chi0.iter().zip(&p0).map(|(a, b)| a - b).collect()
        } else {
            chi0
        };
        let u = gx
            .iter()
            .flat_map(|&gv| chi.iter().map(move |&c| spec.amplitude * gv * c))
            .collect();
        self.state(u, 0.0)
    }

    /// ∂_x^order applied to every velocity node.
    pub fn x_derivative(&self, u: &[f64], order: u32) -> Vec<f64> {
        let nv = self.nv();
        let nx = self.nx();
        let mut out = vec![0.0; u.len()];
        let mut line = vec![0.0; nx];
        for i in 0..nv {
            for j in 0..nx {
                line[j] = u[j * nv + i];
            }
            let d = self.spectral.derivative(&line, order);
            for j in 0..nx {
                out[j * nv + i] = d[j];
            }
        }
        out
    }

    fn map_slices(&self, u: &[f64], f: impl Fn(usize, &[f64]) -> Vec<f64>) -> Vec<f64> {
        self.slices(u)
            .enumerate()
            .flat_map(|(j, s)| f(j, s))
            .collect()
    }

    /// ‖f‖²_{L²_{x,ξ}} = (2π/N_x) Σ_j ‖f(x_j)‖²_{L²_ξ}.
    pub fn norm_sq(&self, f: &[f64]) -> f64 {
        let h = 2.0 * PI / self.nx() as f64;
        h * self.slices(f).map(|s| self.grid().norm_sq(s)).sum::<f64>()
    }

    /// Fourier coefficients in weighted coordinates for k = 0..=k_max.
    fn modal(&self, u: &[f64]) -> Vec<DVector<Complex64>> {
        let nv = self.nv();
        let nx = self.nx();
        let sw = sqrt_weights(self.grid());
        let mut out = vec![DVector::zeros(nv); self.k_max() + 1];
        let mut line = vec![0.0; nx];
        for i in 0..nv {
            for j in 0..nx {
                line[j] = u[j * nv + i];
            }
            let c = self.spectral.forward(&line);
            for (k, v) in out.iter_mut().enumerate() {
                v[i] = c[k] * sw[i];
            }
        }
        out
    }
}

/// The seven terms of ∂_t u = −ξ₁∂_x u − ∂_xΦ ∂_{ξ₁}u + ½ξ₁∂_xΦ u + ∂_xΦ ξ₁√M + Lu + Γ(u,u).
#[derive(Clone, Debug, PartialEq)]
pub struct RhsTerms {
    pub streaming: Vec<f64>,
    pub vlasov: Vec<f64>,
    pub heating: Vec<f64>,
    pub field_source: Vec<f64>,
    pub collision: Vec<f64>,
    pub gamma: Vec<f64>,
    /// ∂_x u (shared by the audits).
    pub dx_u: Vec<f64>,
}

impl RhsTerms {
    pub fn total(&self) -> Vec<f64> {
        (0..self.streaming.len())
            .map(|i| {
                self.streaming[i]
                    + self.vlasov[i]
                    + self.heating[i]
                    + self.field_source[i]
                    + self.collision[i]
                    + self.gamma[i]
            })
            .collect()
    }

    /// G = G₁ + G₂.
    pub fn nonlinear(&self) -> Vec<f64> {
        (0..self.gamma.len())
            .map(|i| self.gamma[i] + self.vlasov[i] + self.heating[i])
            .collect()
    }
}

pub fn nonlinear_rhs(bench: &TorusBench, state: &NonlinearState) -> Result<RhsTerms> {
    bench.check_field(&state.u)?;
    let grid = bench.grid();
    let be = &bench.backend;
    let xi1 = &bench.xi1;
    let sm = grid.sqrt_m();
    let dx_u = bench.x_derivative(&state.u, 1);
    let streaming = bench.map_slices(&dx_u, |_, s| {
        s.iter().zip(xi1).map(|(d, x)| -x * d).collect()
    });
    let vlasov = bench.map_slices(&state.u, |j, s| {
        grid.velocity_derivative(s, 0)
            .iter()
            .map(|d| -state.dphi[j] * d)
            .collect()
    });
    let heating = bench.map_slices(&state.u, |j, s| {
        s.iter()
            .zip(xi1)
            .map(|(v, x)| 0.5 * x * state.dphi[j] * v)
            .collect()
    });
    let field_source = (0..state.nx)
        .flat_map(|j| (0..xi1.len()).map(move |i| state.dphi[j] * xi1[i] * sm[i]))
        .collect();
    let collision = bench.map_slices(&state.u, |_, s| be.apply_l_unchecked(s));
    let gamma = bench.map_slices(&state.u, |_, s| be.gamma_unchecked(s, s));
    Ok(RhsTerms {
        streaming,
        vlasov,
        heating,
        field_source,
        collision,
        gamma,
        dx_u,
    })
}

/// G₁ = Γ(u,u), G₂ = −∂_xΦ ∂_{ξ₁}u + ½ξ₁∂_xΦ u and the split G = {I−P}G₁ + {I−P}G₂ + P₁G₂.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSplit {
    pub norm_g1: f64,
    pub norm_g2: f64,
    pub norm_p_g1: f64,
    pub norm_p0_g2: f64,
    pub norm_p1_g2: f64,
    /// ‖G − ({I−P}G₁ + {I−P}G₂ + P₁G₂)‖.
    pub split_error: f64,
}

pub fn source_split(bench: &TorusBench, terms: &RhsTerms) -> SourceSplit {
    let grid = bench.grid();
    let g1 = &terms.gamma;
    let g2: Vec<f64> = terms
        .vlasov
        .iter()
        .zip(&terms.heating)
        .map(|(a, b)| a + b)
        .collect();
    let proj = |f: &[f64], p: Projection| bench.map_slices(f, |_, s| grid.project_unchecked(s, p));
    let p_g1 = proj(g1, Projection::P);
    let p0_g2 = proj(&g2, Projection::P0);
    let p1_g2 = proj(&g2, Projection::P1);
    let q_g1 = proj(g1, Projection::IMinusP);
    let q_g2 = proj(&g2, Projection::IMinusP);
    let err: Vec<f64> = (0..g1.len())
        .map(|i| g1[i] + g2[i] - (q_g1[i] + q_g2[i] + p1_g2[i]))
        .collect();
    SourceSplit {
        norm_g1: bench.norm_sq(g1).sqrt(),
        norm_g2: bench.norm_sq(&g2).sqrt(),
        norm_p_g1: bench.norm_sq(&p_g1).sqrt(),
        norm_p0_g2: bench.norm_sq(&p0_g2).sqrt(),
        norm_p1_g2: bench.norm_sq(&p1_g2).sqrt(),
        split_error: bench.norm_sq(&err).sqrt(),
    }
}

/// Both sides of the evolution equation of {I−P}u.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicroAudit {
    pub lhs_norm: f64,
    pub rhs_norm: f64,
    pub residual: f64,
    /// residual / max(lhs, rhs, ‖∂_t u‖), zero when all vanish.
    pub relative: f64,
}

/// Evaluates ∂_t{I−P}u + ξ₁∂_x{I−P}u + ∂_xΦ∂_{ξ₁}{I−P}u against
/// L{I−P}u + Γ(u,u) + ½ξ₁∂_xΦ{I−P}u − {I−P}T(Pu) + P T({I−P}u),
/// T(v) = ξ₁∂_x v + ∂_xΦ∂_{ξ₁}v − ½ξ₁∂_xΦ v, with ∂_t u taken from the full right side.
pub fn microscopic_rhs_audit(bench: &TorusBench, state: &NonlinearState) -> Result<MicroAudit> {
    let terms = nonlinear_rhs(bench, state)?;
    let grid = bench.grid();
    let xi1 = &bench.xi1;
    let proj = |f: &[f64], p: Projection| bench.map_slices(f, |_, s| grid.project_unchecked(s, p));
    let qu = proj(&state.u, Projection::IMinusP);
    let pu = proj(&state.u, Projection::P);
    let t_op = |v: &[f64]| -> Vec<f64> {
        let dx = bench.x_derivative(v, 1);
        let dv = bench.map_slices(v, |_, s| grid.velocity_derivative(s, 0));
        let nv = xi1.len();
        (0..v.len())
            .map(|n| {
                let (j, i) = (n / nv, n % nv);
                xi1[i] * dx[n] + state.dphi[j] * dv[n] - 0.5 * xi1[i] * state.dphi[j] * v[n]
            })
            .collect()
    };
    let dt_qu = proj(&terms.total(), Projection::IMinusP);
    let t_qu = t_op(&qu);
    let nv = xi1.len();
    let lhs: Vec<f64> = (0..qu.len())
        .map(|n| dt_qu[n] + t_qu[n] + 0.5 * xi1[n % nv] * state.dphi[n / nv] * qu[n])
        .collect();
    let l_qu = bench.map_slices(&qu, |_, s| bench.backend.apply_l_unchecked(s));
    let q_t_pu = proj(&t_op(&pu), Projection::IMinusP);
    let p_t_qu = proj(&t_qu, Projection::P);
    let rhs: Vec<f64> = (0..qu.len())
        .map(|n| {
            l_qu[n] + terms.gamma[n] + 0.5 * xi1[n % nv] * state.dphi[n / nv] * qu[n] - q_t_pu[n]
                + p_t_qu[n]
        })
        .collect();
    let diff: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
    let lhs_norm = bench.norm_sq(&lhs).sqrt();
    let rhs_norm = bench.norm_sq(&rhs).sqrt();
    let residual = bench.norm_sq(&diff).sqrt();
    let scale = lhs_norm
        .max(rhs_norm)
        .max(bench.norm_sq(&terms.total()).sqrt());
    Ok(MicroAudit {
        lhs_norm,
        rhs_norm,
        residual,
        relative: if scale > 0.0 { residual / scale } else { 0.0 },
    })
}

/// Relative residuals max_x|Σ terms| / max_x max_term|term| of the macroscopic balance laws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub mass: f64,
    pub momentum: f64,
    pub energy: f64,
    /// Evolution of the diagonal moments A_jj({I−P}u).
    pub a_diagonal: f64,
    /// Evolution of the off-diagonal moments A_jm({I−P}u), j < m.
    pub a_off_diagonal: f64,
    /// Evolution of the moments B_j({I−P}u).
    pub b_moment: f64,
    /// Combined identity for the momentum gradient; d = 3 only.
    pub momentum_gradient: Option<f64>,
}

impl BalanceReport {
    pub fn worst(&self) -> f64 {
        [
            self.mass,
            self.momentum,
            self.energy,
            self.a_diagonal,
            self.a_off_diagonal,
            self.b_moment,
            self.momentum_gradient.unwrap_or(0.0),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    fn merge(&mut self, other: &BalanceReport) {
        self.mass = self.mass.max(other.mass);
        self.momentum = self.momentum.max(other.momentum);
        self.energy = self.energy.max(other.energy);
        self.a_diagonal = self.a_diagonal.max(other.a_diagonal);
        self.a_off_diagonal = self.a_off_diagonal.max(other.a_off_diagonal);
        self.b_moment = self.b_moment.max(other.b_moment);
        self.momentum_gradient = match (self.momentum_gradient, other.momentum_gradient) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
    }
}

/// max_x|Σ terms| of each identity, divided by the largest term over all identities.
fn identity_residuals(groups: &[Vec<Vec<f64>>]) -> Vec<f64> {
    let scale = groups
        .iter()
        .flatten()
        .flatten()
        .fold(0.0f64, |m, x| m.max(x.abs()));
    groups
        .iter()
        .map(|terms| {
            let worst = (0..terms[0].len())
                .map(|j| terms.iter().map(|t| t[j]).sum::<f64>().abs())
                .fold(0.0, f64::max);
            if scale > 0.0 {
                worst / scale
            } else {
                0.0
            }
        })
        .collect()
}

/// Moment fields over x of a velocity field.
struct MomentFields {
    rho: Vec<f64>,
    a: Vec<f64>,
    b: Vec<Vec<f64>>,
    c: Vec<f64>,
    energy: Vec<f64>,
    /// A_jm and B_j of the field itself.
    hm_a: Vec<Vec<Vec<f64>>>,
    hm_b: Vec<Vec<f64>>,
}

fn moment_fields(bench: &TorusBench, f: &[f64]) -> MomentFields {
    let grid = bench.grid();
    let d = grid.dim();
    let nx = bench.nx();
    let mut m = MomentFields {
        rho: vec![0.0; nx],
        a: vec![0.0; nx],
        b: vec![vec![0.0; nx]; d],
        c: vec![0.0; nx],
        energy: vec![0.0; nx],
        hm_a: vec![vec![vec![0.0; nx]; d]; d],
        hm_b: vec![vec![0.0; nx]; d],
    };
    for (j, s) in bench.slices(f).enumerate() {
        let ms = grid.macro_unchecked(s);
        m.rho[j] = ms.density();
        m.a[j] = ms.a;
        m.c[j] = ms.c;
        for q in 0..d {
            m.b[q][j] = ms.b[q];
        }
        m.energy[j] = (0..s.len())
            .map(|i| s[i] * grid.weights()[i] * grid.sqrt_m()[i] * grid.speed_sq()[i])
            .sum();
        let hm = grid.high_moments_unchecked(s);
        for p in 0..d {
            m.hm_b[p][j] = hm.b[p];
            for q in 0..d {
                m.hm_a[p][q][j] = hm.a[p][q];
            }
        }
    }
    m
}

/// Balance laws for mass, momentum and energy and the high-moment equations,
/// with ∂_t taken from the semi-discrete right side.
pub fn balance_residuals(
    bench: &TorusBench,
    state: &NonlinearState,
    terms: &RhsTerms,
) -> BalanceReport {
    let grid = bench.grid();
    let d = grid.dim();
    let df = d as f64;
    let sp = &bench.spectral;
    let dx = |f: &[f64]| sp.derivative(f, 1);
    let neg = |f: &[f64]| f.iter().map(|x| -x).collect::<Vec<_>>();
    let scale = |f: &[f64], s: f64| f.iter().map(|x| s * x).collect::<Vec<_>>();
    let proj = |f: &[f64], p: Projection| bench.map_slices(f, |_, s| grid.project_unchecked(s, p));
    let rhs = terms.total();
    let mu = moment_fields(bench, &state.u);
    let mdot = moment_fields(bench, &rhs);
    let qu = proj(&state.u, Projection::IMinusP);
    let mq = moment_fields(bench, &qu);
    let mqdot = moment_fields(bench, &proj(&rhs, Projection::IMinusP));
    let xi1 = &bench.xi1;
    let nv = xi1.len();
    let dx_qu = proj(&terms.dx_u, Projection::IMinusP);
    let l_qu = bench.map_slices(&qu, |_, s| bench.backend.apply_l_unchecked(s));
    let g = terms.nonlinear();
    let rg: Vec<f64> = (0..qu.len())
        .map(|n| -xi1[n % nv] * dx_qu[n] + l_qu[n] + g[n])
        .collect();
    let mrg = moment_fields(bench, &rg);
    let dphi = &state.dphi;
    let mut groups: Vec<(usize, Vec<Vec<f64>>)> = vec![(0, vec![mdot.rho.clone(), dx(&mu.b[0])])];
    for q in 0..d {
        let mut flux = mq.hm_a[0][q].clone();
        if q == 0 {
            for j in 0..flux.len() {
                flux[j] += mu.a[j] + (df + 2.0) * mu.c[j];
            }
        }
        let mut t = vec![mdot.b[q].clone(), dx(&flux)];
        if q == 0 {
            t.push(neg(dphi));
            t.push(dphi.iter().zip(&mu.rho).map(|(p, r)| -p * r).collect());
        }
        groups.push((1, t));
    }
    groups.push((
        2,
        vec![
            mdot.energy.clone(),
            scale(&dx(&mu.b[0]), df + 2.0),
            dx(&mq.hm_b[0]),
            dphi.iter()
                .zip(&mu.b[0])
                .map(|(p, b)| -2.0 * p * b)
                .collect(),
        ],
    ));
    for p in 0..d {
        let mut t = vec![
            mqdot.hm_a[p][p].clone(),
            scale(&mdot.c, 2.0),
            neg(&mrg.hm_a[p][p]),
        ];
        if p == 0 {
            t.push(scale(&dx(&mu.b[0]), 2.0));
        }
        groups.push((3, t));
        for q in p + 1..d {
            let mut t = vec![mqdot.hm_a[p][q].clone(), neg(&mrg.hm_a[p][q])];
            if p == 0 {
                t.push(dx(&mu.b[q]));
            }
            groups.push((4, t));
        }
        let mut t = vec![mqdot.hm_b[p].clone(), neg(&mrg.hm_b[p])];
        if p == 0 {
            t.push(scale(&dx(&mu.c), 2.0 * (df + 2.0)));
        }
        groups.push((5, t));
    }
    if d == 3 {
        for m in 0..d {
            let mut t = vec![
                neg(&dx(&mqdot.hm_a[0][m])),
                neg(&sp.derivative(&mu.b[m], 2)),
                dx(&mrg.hm_a[0][m]),
            ];
            if m == 0 {
                t.push(scale(&dx(&mqdot.hm_a[0][0]), -0.5));
                t.push(neg(&sp.derivative(&mu.b[0], 2)));
                let trace: Vec<f64> = (0..bench.nx())
                    .map(|j| mrg.hm_a[1][1][j] + mrg.hm_a[2][2][j])
                    .collect();
                t.push(scale(&dx(&trace), -0.5));
            }
            groups.push((6, t));
        }
    }
    let terms: Vec<Vec<Vec<f64>>> = groups.iter().map(|g| g.1.clone()).collect();
    let res = identity_residuals(&terms);
    let mut worst = [0.0f64; 7];
    for (g, r) in groups.iter().zip(res) {
        worst[g.0] = worst[g.0].max(r);
    }
    BalanceReport {
        mass: worst[0],
        momentum: worst[1],
        energy: worst[2],
        a_diagonal: worst[3],
        a_off_diagonal: worst[4],
        b_moment: worst[5],
        momentum_gradient: (d == 3).then_some(worst[6]),
    }
}

/// Constants of the energy functionals, calibrated on the linearized per-mode generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConstants {
    pub derivative_order: usize,
    pub kappa0: f64,
    pub kappa3: f64,
    pub kappa4: f64,
    pub kappa5: f64,
    /// λ in d/dt E + λD ≤ 0 (half the certified floor).
    pub lambda: f64,
    pub lambda_floor: f64,
    /// Coercivity of L relative to w on N^⊥; λ of the zero-order micro estimate.
    pub lambda_micro: f64,
    /// C in d/dt‖{I−P}u‖² + λ_micro‖w^{1/2}{I−P}u‖² ≤ C‖∂_x Pu‖².
    pub c_micro: f64,
    /// C in d/dt E^h + λD ≤ C‖∂_x Pu‖².
    pub c_high: f64,
    pub lambda_weighted: f64,
    /// C in d/dt E^h_w + λ_w D_w ≤ C‖∂_x Pu‖².
    pub c_weighted: f64,
}

/// Per-mode Hermitian forms (weighted coordinates).
struct ModeForms {
    e: DMatrix<Complex64>,
    d: DMatrix<Complex64>,
    eh: DMatrix<Complex64>,
    ehw: DMatrix<Complex64>,
    dw: DMatrix<Complex64>,
    free: DMatrix<Complex64>,
    micro: DMatrix<Complex64>,
    micro_w: DMatrix<Complex64>,
    grad_p: DMatrix<Complex64>,
    hn: DMatrix<Complex64>,
    hn_w: DMatrix<Complex64>,
}

/// κ-independent pieces of the forms of one mode.
struct FormParts {
    k: f64,
    generator: DMatrix<Complex64>,
    base: DMatrix<Complex64>,
    base_high: DMatrix<Complex64>,
    xi: DMatrix<Complex64>,
    free_a: DMatrix<Complex64>,
    free_b: DMatrix<Complex64>,
    dis: DMatrix<Complex64>,
    weighted: DMatrix<Complex64>,
    weighted_dis: DMatrix<Complex64>,
    micro: DMatrix<Complex64>,
    micro_w: DMatrix<Complex64>,
    grad_p: DMatrix<Complex64>,
    hn: DMatrix<Complex64>,
    hn_w: DMatrix<Complex64>,
}

impl FormParts {
    fn energy(&self, k0: f64, k3: f64, k4: f64) -> DMatrix<Complex64> {
        &self.base + (&self.xi * c(k3)) + self.free(k0) * c(k4)
    }
    fn free(&self, k0: f64) -> DMatrix<Complex64> {
        &self.free_a * c(k0) + &self.free_b
    }
    fn high(&self, k0: f64, k3: f64, k4: f64) -> DMatrix<Complex64> {
        &self.base_high + (&self.xi * c(k3)) + self.free(k0) * c(k4)
    }
    /// −(SA + A*S).
    fn drop(&self, s: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        let sa = s * &self.generator;
        hermitian_part(&(-(&sa + sa.adjoint())))
    }
}

fn c(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

fn cx(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    m.map(c)
}

/// Multi-indices β ∈ N^d with 1 ≤ |β| ≤ n.
fn multi_indices(d: usize, n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = vec![0usize; d];
    fn rec(pos: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if pos == cur.len() {
            if cur.iter().sum::<usize>() > 0 {
                out.push(cur.clone());
            }
            return;
        }
        for v in 0..=left {
            cur[pos] = v;
            rec(pos + 1, left - v, cur, out);
        }
        cur[pos] = 0;
    }
    rec(0, n, &mut cur, &mut out);
    out
}

/// Matrix of a linear velocity map in weighted coordinates.
fn weighted_map(grid: &VelocityGrid, f: impl Fn(&[f64]) -> Vec<f64>) -> DMatrix<f64> {
    let sw = sqrt_weights(grid);
    let n = grid.len();
    let mut m = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for i in 0..n {
        e[i] = 1.0 / sw[i];
        let col = f(&e);
        for r in 0..n {
            m[(r, i)] = col[r] * sw[r];
        }
        e[i] = 0.0;
    }
    m
}

/// Row of a linear velocity functional in weighted coordinates.
fn weighted_row(grid: &VelocityGrid, f: impl Fn(&[f64]) -> f64) -> DMatrix<f64> {
    let sw = sqrt_weights(grid);
    let n = grid.len();
    let mut m = DMatrix::zeros(1, n);
    let mut e = vec![0.0; n];
    for i in 0..n {
        e[i] = 1.0 / sw[i];
        m[(0, i)] = f(&e);
        e[i] = 0.0;
    }
    m
}

fn diag(v: impl Iterator<Item = f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_vec(v.collect()))
}

fn form_parts(bench: &TorusBench, n_deriv: usize) -> Result<Vec<FormParts>> {
    let grid = bench.grid();
    let d = grid.dim();
    let n = grid.len();
    let q = micro_projector(grid);
    let p = DMatrix::<f64>::identity(n, n) - &q;
    let axes: Vec<DMatrix<f64>> = (0..d)
        .map(|a| weighted_map(grid, |u| grid.velocity_derivative(u, a)))
        .collect();
    let betas = multi_indices(d, n_deriv);
    let dq: Vec<(usize, DMatrix<f64>)> = betas
        .iter()
        .map(|b| {
            let mut m = DMatrix::<f64>::identity(n, n);
            for (a, &e) in b.iter().enumerate() {
                for _ in 0..e {
                    m = &axes[a] * m;
                }
            }
            (b.iter().sum(), m)
        })
        .collect();
    let rho = weighted_row(grid, |u| grid.density(u));
    let brow: Vec<DMatrix<f64>> = (0..d)
        .map(|j| weighted_row(grid, |u| grid.macro_unchecked(u).b[j]))
        .collect();
    let crow = weighted_row(grid, |u| grid.macro_unchecked(u).c);
    let a1: Vec<DMatrix<f64>> = (0..d)
        .map(|j| weighted_row(grid, |u| grid.high_moments_unchecked(u).a[0][j]) * &q)
        .collect();
    let b1 = weighted_row(grid, |u| grid.high_moments_unchecked(u).b[0]) * &q;
    let nu = diag(bench.backend.nu().iter().copied());
    let w = diag(grid.weight_fn().iter().copied());
    let w2 = diag(grid.weight_fn().iter().map(|x| x * x));
    let ident = DMatrix::<f64>::identity(n, n);
    let qt = q.transpose();
    let micro = &qt * &q;
    let micro_w = &qt * &w * &q;
    let micro_w2 = &qt * &w2 * &q;
    let micro_nu = &qt * &nu * &q;
    let rr = rho.transpose() * &rho;
    let macro_sq = &rr
        + brow
            .iter()
            .map(|b| b.transpose() * b)
            .fold(DMatrix::zeros(n, n), |a, b| a + b)
        + crow.transpose() * &crow;
    let nf = n_deriv as i32;
    let mut out = Vec::new();
    for kk in 0..=bench.k_max() {
        let k = kk as f64;
        let sum_pow = |lo: i32, hi: i32| (lo..=hi).map(|a| k.powi(2 * a)).sum::<f64>();
        let mx = sum_pow(0, nf);
        let mx1 = sum_pow(1, nf);
        let mfree = sum_pow(0, nf - 1);
        let field = if kk > 0 {
            &rr / (k * k)
        } else {
            DMatrix::zeros(n, n)
        };
        let mut xi = DMatrix::zeros(n, n);
        let mut xiw = DMatrix::zeros(n, n);
        let mut xiw2 = DMatrix::zeros(n, n);
        let mut xinu = DMatrix::zeros(n, n);
        let mut hn = &ident * mx;
        let mut hn_w = &w * mx;
        for (order, m) in &dq {
            let coef = sum_pow(0, nf - *order as i32);
            let mq = m * &q;
            let mqt = mq.transpose();
            xi += &mqt * &mq * coef;
            xiw += &mqt * &w * &mq * coef;
            xiw2 += &mqt * &w2 * &mq * coef;
            xinu += &mqt * &nu * &mq * coef;
            hn += m.transpose() * m * coef;
            hn_w += m.transpose() * &w * m * coef;
        }
        let ik = I * k;
        let cross =
            |f: &DMatrix<f64>, g: &DMatrix<f64>| hermitian_part(&(cx(&f.transpose()) * cx(g) * ik));
        let mut free_a = cross(&a1[0], &brow[0]);
        for j in 0..d {
            free_a += cross(&a1[j], &brow[j]) * c(2.0);
        }
        free_a += cross(&b1, &crow);
        let free_a = free_a * c(mfree);
        let free_b = cross(&rho, &brow[0]) * c(-mfree);
        let mut dis = &micro_nu * mx + &xinu + &macro_sq * (mfree * k * k);
        if kk > 0 {
            dis += &rr;
        }
        let base = (&ident + &field) * mx;
        let base_high = &micro + (&ident + &field) * mx1;
        let weighted = &micro_w + &w * mx1 + &xiw;
        let weighted_dis = &micro_w2 + &w2 * mx1 + &xiw2;
        let mut kv = vec![0.0; d];
        kv[0] = k;
        let generator = assemble_mode_operator(&kv, bench.backend.clone())?.dense_generator()?;
        out.push(FormParts {
            k,
            generator,
            base: cx(&base),
            base_high: cx(&base_high),
            xi: cx(&xi),
            free_a,
            free_b,
            dis: cx(&dis),
            weighted: cx(&weighted),
            weighted_dis: cx(&weighted_dis) + cx(&dis),
            micro: cx(&micro),
            micro_w: cx(&micro_w),
            grad_p: cx(&(p.transpose() * &p * (k * k))),
            hn: cx(&hn),
            hn_w: cx(&hn_w),
        });
    }
    Ok(out)
}

/// Restriction to N^⊥ for the k = 0 mode, where the macroscopic part is stationary.
fn restrict(m: &DMatrix<Complex64>, u: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    hermitian_part(&(u.adjoint() * m * u))
}

/// Smallest generalized eigenvalue of (x, d), restricted to N^⊥ at k = 0.
fn pencil_floor(
    fp: &FormParts,
    x: &DMatrix<Complex64>,
    d: &DMatrix<Complex64>,
    micro: &DMatrix<Complex64>,
) -> Option<f64> {
    let ev = if fp.k == 0.0 {
        generalized_eigenvalues(&restrict(x, micro), &restrict(d, micro))?
    } else {
        generalized_eigenvalues(x, d)?
    };
    ev.first().copied()
}

fn feasible(fp: &FormParts, m: &DMatrix<Complex64>, micro: &DMatrix<Complex64>) -> bool {
    if fp.k == 0.0 {
        cholesky_pd(&restrict(m, micro)).is_some()
    } else {
        cholesky_pd(m).is_some()
    }
}

/// Smallest C with x + C·g ⪰ 0 (x restricted to N^⊥ at k = 0), or None.
fn source_constant(
    fp: &FormParts,
    x: &DMatrix<Complex64>,
    micro: &DMatrix<Complex64>,
) -> Option<f64> {
    let ok = |cst: f64| feasible(fp, &(x + &fp.grad_p * c(cst)), micro);
    if ok(0.0) {
        return Some(0.0);
    }
    let mut hi = 1.0;
    while !ok(hi) {
        hi *= 4.0;
        if hi > 1e14 {
            return None;
        }
    }
    let mut lo = 0.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

/// Search ranges for the functional constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchCalibration {
    pub kappa0: Vec<f64>,
    /// κ₄ = 2^{−j} for j in the range.
    pub kappa4_exponents: (i32, i32),
    /// κ₃ = κ₄ 2^{−j} for j in the range.
    pub kappa3_ratio_exponents: (i32, i32),
    /// κ₅ = 2^j for j in the range.
    pub kappa5_exponents: (i32, i32),
}

impl Default for BenchCalibration {
    fn default() -> Self {
        Self {
            kappa0: vec![1.0, 0.25],
            kappa4_exponents: (1, 10),
            kappa3_ratio_exponents: (1, 8),
            kappa5_exponents: (0, 12),
        }
    }
}

/// Calibrated functionals: constants plus the per-mode forms.
pub struct BenchFunctionals {
    pub constants: BenchConstants,
    forms: Vec<ModeForms>,
}

impl std::fmt::Debug for BenchFunctionals {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BenchFunctionals")
            .field("constants", &self.constants)
            .finish()
    }
}

/// Searches κ₀, κ₄, κ₃ for the largest uniform floor of d/dt E + λD ≤ 0 over the
/// linearized modes, then the micro, high-order and weighted constants.
pub fn calibrate_bench(
    bench: &TorusBench,
    n_deriv: usize,
    cal: &BenchCalibration,
) -> Result<BenchFunctionals> {
    if n_deriv == 0 || n_deriv > MAX_DERIVATIVE_ORDER {
        return Err(invalid(
            "derivative_order",
            format!("{n_deriv} not in 1..={MAX_DERIVATIVE_ORDER}"),
        ));
    }
    let parts = form_parts(bench, n_deriv)?;
    let micro = cx(&micro_basis(bench.grid()));
    let mut order: Vec<usize> = (0..parts.len()).collect();
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for &k0 in &cal.kappa0 {
        for j4 in cal.kappa4_exponents.0..=cal.kappa4_exponents.1 {
            let k4 = 2f64.powi(-j4);
            for j3 in cal.kappa3_ratio_exponents.0..=cal.kappa3_ratio_exponents.1 {
                let k3 = k4 * 2f64.powi(-j3);
                let target = best.map_or(0.0, |b| b.3);
                let blocked = order.iter().position(|&i| {
                    let fp = &parts[i];
                    let s = fp.energy(k0, k3, k4);
                    let x = fp.drop(&s) - &fp.dis * c(target);
                    !(feasible(fp, &x, &micro) && cholesky_pd(&s).is_some())
                });
                if let Some(pos) = blocked {
                    let i = order.remove(pos);
                    order.insert(0, i);
                    continue;
                }
                let mut floor = f64::INFINITY;
                for fp in &parts {
                    let s = fp.energy(k0, k3, k4);
                    floor = floor.min(
                        pencil_floor(fp, &fp.drop(&s), &fp.dis, &micro)
                            .unwrap_or(f64::NEG_INFINITY),
                    );
                }
                if floor > target {
                    best = Some((k0, k3, k4, floor));
                }
            }
        }
    }
    let (k0, k3, k4, floor) = best.ok_or_else(|| {
        LabError::Calibration("no (κ₀, κ₃, κ₄) gives a positive dissipation floor".into())
    })?;
    let lambda = 0.5 * floor;
    let l_w = bench.backend.dense_weighted_l()?;
    let lw = cx(&l_w);
    let wdiag = cx(&diag(bench.grid().weight_fn().iter().copied()));
    let lambda_micro =
        generalized_eigenvalues(&restrict(&(-lw), &micro), &restrict(&wdiag, &micro))
            .and_then(|v| v.first().copied())
            .ok_or_else(|| LabError::Coercivity(f64::NAN))?;
    let mut c_micro = 0.0f64;
    let mut c_high = 0.0f64;
    for fp in &parts {
        let x = fp.drop(&fp.micro) - &fp.micro_w * c(lambda_micro);
        c_micro = c_micro.max(source_constant(fp, &x, &micro).ok_or_else(|| {
            LabError::Calibration(format!(
                "micro estimate has no finite constant at k = {}",
                fp.k
            ))
        })?);
        let x = fp.drop(&fp.high(k0, k3, k4)) - &fp.dis * c(lambda);
        c_high = c_high.max(source_constant(fp, &x, &micro).ok_or_else(|| {
            LabError::Calibration(format!(
                "high-order estimate has no finite constant at k = {}",
                fp.k
            ))
        })?);
    }
    let mut weighted = None;
    'outer: for j5 in cal.kappa5_exponents.0..=cal.kappa5_exponents.1 {
        let k5 = 2f64.powi(j5);
        for jl in 0..=12 {
            let lw_try = lambda * 2f64.powi(-jl);
            let mut cst = 0.0f64;
            let mut ok = true;
            for fp in &parts {
                let s = &fp.weighted + fp.high(k0, k3, k4) * c(k5);
                let x = fp.drop(&s) - &fp.weighted_dis * c(lw_try);
                match source_constant(fp, &x, &micro) {
                    Some(v) => cst = cst.max(v),
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                weighted = Some((k5, lw_try, cst));
                break 'outer;
            }
        }
    }
    let (k5, lambda_weighted, c_weighted) = weighted.ok_or_else(|| {
        LabError::Calibration("no κ₅ gives a finite weighted high-order constant".into())
    })?;
    let forms = parts
        .iter()
        .map(|fp| {
            let eh = fp.high(k0, k3, k4);
            ModeForms {
                e: fp.energy(k0, k3, k4),
                d: fp.dis.clone(),
                ehw: &fp.weighted + &eh * c(k5),
                eh,
                dw: fp.weighted_dis.clone(),
                free: fp.free(k0),
                micro: fp.micro.clone(),
                micro_w: fp.micro_w.clone(),
                grad_p: fp.grad_p.clone(),
                hn: fp.hn.clone(),
                hn_w: fp.hn_w.clone(),
            }
        })
        .collect();
    Ok(BenchFunctionals {
        constants: BenchConstants {
            derivative_order: n_deriv,
            kappa0: k0,
            kappa3: k3,
            kappa4: k4,
            kappa5: k5,
            lambda,
            lambda_floor: floor,
            lambda_micro,
            c_micro,
            c_high,
            lambda_weighted,
            c_weighted,
        },
        forms,
    })
}

/// Functional values and exact time derivatives at one state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionalValues {
    pub energy: f64,
    pub dissipation: f64,
    pub high_energy: f64,
    pub weighted_energy: f64,
    pub weighted_dissipation: f64,
    pub free_energy: f64,
    pub micro_sq: f64,
    pub micro_w_sq: f64,
    pub grad_p_sq: f64,
    pub d_energy: f64,
    pub d_high_energy: f64,
    pub d_weighted_energy: f64,
    pub d_micro_sq: f64,
}

impl BenchFunctionals {
    fn sum(
        &self,
        y: &[DVector<Complex64>],
        pick: impl Fn(&ModeForms) -> &DMatrix<Complex64>,
    ) -> f64 {
        self.forms
            .iter()
            .zip(y)
            .enumerate()
            .map(|(k, (f, v))| {
                let m = if k == 0 { 1.0 } else { 2.0 };
                m * (v.adjoint() * pick(f) * v)[(0, 0)].re
            })
            .sum::<f64>()
            * 2.0
            * PI
    }

    fn rate(
        &self,
        y: &[DVector<Complex64>],
        ydot: &[DVector<Complex64>],
        pick: impl Fn(&ModeForms) -> &DMatrix<Complex64>,
    ) -> f64 {
        self.forms
            .iter()
            .zip(y.iter().zip(ydot))
            .enumerate()
            .map(|(k, (f, (v, vd)))| {
                let m = if k == 0 { 1.0 } else { 2.0 };
                2.0 * m * (v.adjoint() * pick(f) * vd)[(0, 0)].re
            })
            .sum::<f64>()
            * 2.0
            * PI
    }

    /// −2∫|b|²c dx and its time derivative.
    fn cubic(&self, bench: &TorusBench, u: &[f64], udot: &[f64]) -> (f64, f64) {
        let grid = bench.grid();
        let h = 2.0 * PI / bench.nx() as f64;
        let mut v = 0.0;
        let mut dv = 0.0;
        for (s, sd) in bench.slices(u).zip(bench.slices(udot)) {
            let m = grid.macro_unchecked(s);
            let md = grid.macro_unchecked(sd);
            let b2: f64 = m.b.iter().map(|x| x * x).sum();
            let bbd: f64 = m.b.iter().zip(&md.b).map(|(x, y)| x * y).sum();
            v += b2 * m.c;
            dv += 2.0 * bbd * m.c + b2 * md.c;
        }
        (-2.0 * h * v, -2.0 * h * dv)
    }

    pub fn evaluate(
        &self,
        bench: &TorusBench,
        u: &[f64],
        udot: &[f64],
    ) -> Result<FunctionalValues> {
        bench.check_field(u)?;
        bench.check_field(udot)?;
        let y = bench.modal(u);
        let yd = bench.modal(udot);
        let (cubic, d_cubic) = self.cubic(bench, u, udot);
        Ok(FunctionalValues {
            energy: self.sum(&y, |f| &f.e) + cubic,
            dissipation: self.sum(&y, |f| &f.d),
            high_energy: self.sum(&y, |f| &f.eh),
            weighted_energy: self.sum(&y, |f| &f.ehw),
            weighted_dissipation: self.sum(&y, |f| &f.dw),
            free_energy: self.sum(&y, |f| &f.free),
            micro_sq: self.sum(&y, |f| &f.micro),
            micro_w_sq: self.sum(&y, |f| &f.micro_w),
            grad_p_sq: self.sum(&y, |f| &f.grad_p),
            d_energy: self.rate(&y, &yd, |f| &f.e) + d_cubic,
            d_high_energy: self.rate(&y, &yd, |f| &f.eh),
            d_weighted_energy: self.rate(&y, &yd, |f| &f.ehw),
            d_micro_sq: self.rate(&y, &yd, |f| &f.micro),
        })
    }

    /// (‖u‖²_{H^N}, ‖u‖²_{H^N_w}) with mixed (x, ξ) derivatives of total order ≤ N.
    pub fn sobolev_norms(&self, bench: &TorusBench, u: &[f64]) -> (f64, f64) {
        let y = bench.modal(u);
        (self.sum(&y, |f| &f.hn), self.sum(&y, |f| &f.hn_w))
    }
}

/// ‖u‖_{Z₁} = ∫ ‖u(x, ·)‖_{L²_ξ} dx.
pub fn z1_norm(bench: &TorusBench, u: &[f64]) -> f64 {
    let h = 2.0 * PI / bench.nx() as f64;
    h * bench.slices(u).map(|s| bench.grid().norm(s)).sum::<f64>()
}

/// Functionals over time, running suprema and the data constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub times: Vec<f64>,
    pub energy: Vec<f64>,
    pub dissipation: Vec<f64>,
    pub high_energy: Vec<f64>,
    pub weighted_energy: Vec<f64>,
    pub weighted_dissipation: Vec<f64>,
    pub free_energy: Vec<f64>,
    /// sup_{s≤t} (1+s)^{1/2} E(u(s)).
    pub sup_energy_0: Vec<f64>,
    /// sup_{s≤t} (1+s)^{3/2} E(u(s)).
    pub sup_energy_1: Vec<f64>,
    /// sup_{s≤t} (1+s)^{2(3/4−ε)} E^h_w(u(s)).
    pub sup_weighted: Vec<f64>,
    pub epsilon: f64,
    /// ‖u₀‖²_{H^N} + ‖u₀‖²_{Z₁}.
    pub epsilon0: f64,
    /// ε₀ + ‖ν^{1/2}u₀‖².
    pub epsilon0_nu: f64,
    /// ‖u₀‖²_{H^N_w} + ‖u₀‖²_{Z₁}.
    pub epsilon1: f64,
    pub constants: BenchConstants,
}

/// Ledger over a stored history (states in time order).
pub fn energy_ledger(
    bench: &TorusBench,
    functionals: &BenchFunctionals,
    history: &[NonlinearState],
    epsilon: f64,
) -> Result<EnergyLedger> {
    if !(epsilon > 0.0 && epsilon <= 0.75) {
        return Err(invalid("epsilon", format!("{epsilon} not in (0, 3/4]")));
    }
    let first = history.first().ok_or_else(|| invalid("history", "empty"))?;
    let mut led = EnergyLedger {
        times: Vec::new(),
        energy: Vec::new(),
        dissipation: Vec::new(),
        high_energy: Vec::new(),
        weighted_energy: Vec::new(),
        weighted_dissipation: Vec::new(),
        free_energy: Vec::new(),
        sup_energy_0: Vec::new(),
        sup_energy_1: Vec::new(),
        sup_weighted: Vec::new(),
        epsilon,
        epsilon0: 0.0,
        epsilon0_nu: 0.0,
        epsilon1: 0.0,
        constants: functionals.constants.clone(),
    };
    let (hn, hnw) = functionals.sobolev_norms(bench, &first.u);
    let z1 = z1_norm(bench, &first.u);
    let nu_sq = {
        let h = 2.0 * PI / bench.nx() as f64;
        h * bench
            .slices(&first.u)
            .map(|s| bench.backend.nu_weighted_norm(s, 1.0).map(|v| v * v))
            .sum::<Result<f64>>()?
    };
    led.epsilon0 = hn + z1 * z1;
    led.epsilon0_nu = led.epsilon0 + nu_sq;
    led.epsilon1 = hnw + z1 * z1;
    for s in history {
        let rhs = nonlinear_rhs(bench, s)?.total();
        let v = functionals.evaluate(bench, &s.u, &rhs)?;
        push_ledger(&mut led, s.t, &v);
    }
    Ok(led)
}

fn push_ledger(led: &mut EnergyLedger, t: f64, v: &FunctionalValues) {
    let run = |hist: &[f64], x: f64| hist.last().map_or(x, |&p: &f64| p.max(x));
    led.times.push(t);
    led.energy.push(v.energy);
    led.dissipation.push(v.dissipation);
    led.high_energy.push(v.high_energy);
    led.weighted_energy.push(v.weighted_energy);
    led.weighted_dissipation.push(v.weighted_dissipation);
    led.free_energy.push(v.free_energy);
    let s0 = run(&led.sup_energy_0, (1.0 + t).sqrt() * v.energy);
    let s1 = run(&led.sup_energy_1, (1.0 + t).powf(1.5) * v.energy);
    let sw = run(
        &led.sup_weighted,
        (1.0 + t).powf(2.0 * (0.75 - led.epsilon)) * v.weighted_energy,
    );
    led.sup_energy_0.push(s0);
    led.sup_energy_1.push(s1);
    led.sup_weighted.push(sw);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NonlinearConfig {
    pub backend: BackendSpec,
    /// Odd number of spatial nodes.
    pub nx: usize,
    /// Derivative order N of the functionals.
    pub derivative_order: usize,
    pub data: DataSpec,
    pub t_end: f64,
    pub dt_fraction: f64,
    /// Audit every this many steps (and at the final time).
    pub record_every: usize,
    /// ε in the weighted supremum.
    pub epsilon: f64,
    /// Abort when ‖u(t)‖ exceeds this multiple of ‖u₀‖.
    pub blowup_factor: f64,
    pub calibration: BenchCalibration,
}

impl Default for NonlinearConfig {
    /// d = 3 surrogate at order 4, N_x = 9, N = 1, zero-mean Gaussian √M data of amplitude 10⁻³.
    fn default() -> Self {
        let mut data = DataSpec::new("gaussian", "sqrt_maxwellian");
        data.scale = 0.7;
        data.amplitude = 1e-3;
        data.subtract_mean = true;
        Self {
            backend: BackendSpec::surrogate(3, 4),
            nx: 9,
            derivative_order: 1,
            data,
            t_end: 4.0,
            dt_fraction: 1.0,
            record_every: 1,
            epsilon: 0.25,
            blowup_factor: 10.0,
            calibration: BenchCalibration::default(),
        }
    }
}

/// Per-record audit margins, each normalized by E(u(t)).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonlinearMargins {
    /// −(dE/dt + λD)/E.
    pub energy: Vec<f64>,
    /// −(d/dt‖{I−P}u‖² + λ_micro‖w^{1/2}{I−P}u‖² − C_micro‖∂_x Pu‖²)/E.
    pub micro: Vec<f64>,
    /// −(dE^h/dt + λD − C_high‖∂_x Pu‖²)/E.
    pub high: Vec<f64>,
    /// −(dE^h_w/dt + λ_w D_w − C_weighted‖∂_x Pu‖²)/E.
    pub weighted: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonlinearReport {
    pub steps: usize,
    pub dt: f64,
    pub ledger: EnergyLedger,
    pub margins: NonlinearMargins,
    pub worst_energy_margin: f64,
    pub energy_monotone: bool,
    pub max_p_g1: f64,
    pub max_p0_g2: f64,
    pub max_split_error: f64,
    /// max_t |M(t) − M(0)| / ‖u₀‖, M = ∫∫√M u dξ dx.
    pub mass_drift: f64,
    pub balance: BalanceReport,
    pub max_micro_residual: f64,
    pub max_poisson_residual: f64,
    /// Exponential fit of E(t) over the second half of the run.
    pub energy_decay: Option<FitResult>,
    pub passed: bool,
}

/// Tolerance of the structural checks (split, balance, micro equation).
pub const STRUCTURE_TOLERANCE: f64 = 1e-8;
/// Lower bound on the energy-inequality margin.
pub const MARGIN_TOLERANCE: f64 = 1e-6;

fn rk4(bench: &TorusBench, s: &NonlinearState, dt: f64) -> Result<NonlinearState> {
    let f = |st: &NonlinearState| nonlinear_rhs(bench, st).map(|t| t.total());
    let shift = |base: &[f64], k: &[f64], h: f64| {
        base.iter()
            .zip(k)
            .map(|(a, b)| a + h * b)
            .collect::<Vec<_>>()
    };
    let k1 = f(s)?;
    let s2 = bench.state(shift(&s.u, &k1, 0.5 * dt), s.t + 0.5 * dt)?;
    let k2 = f(&s2)?;
    let s3 = bench.state(shift(&s.u, &k2, 0.5 * dt), s.t + 0.5 * dt)?;
    let k3 = f(&s3)?;
    let s4 = bench.state(shift(&s.u, &k3, dt), s.t + dt)?;
    let k4 = f(&s4)?;
    let u = (0..s.u.len())
        .map(|i| s.u[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    bench.state(u, s.t + dt)
}

pub fn run_nonlinear(cfg: &NonlinearConfig) -> Result<NonlinearReport> {
    if !(cfg.t_end > 0.0)
        || !(cfg.dt_fraction > 0.0 && cfg.dt_fraction <= 1.0)
        || cfg.record_every == 0
    {
        return Err(invalid(
            "nonlinear",
            "need t_end > 0, dt_fraction in (0, 1] and record_every ≥ 1",
        ));
    }
    let bench = TorusBench::new(cfg.backend.build()?, cfg.nx)?;
    let functionals = calibrate_bench(&bench, cfg.derivative_order, &cfg.calibration)?;
    let k = &functionals.constants;
    let steps = (cfg.t_end / (cfg.dt_fraction * bench.stability_bound())).ceil() as usize;
    let dt = cfg.t_end / steps as f64;
    let mut state = bench.initial_state(&cfg.data)?;
    let u0_norm = bench.norm_sq(&state.u).sqrt();
    let mass =
        |s: &NonlinearState| 2.0 * PI / s.nx as f64 * bench.density(&s.u).iter().sum::<f64>();
    let m0 = mass(&state);
    let mut history = Vec::new();
    let mut margins = NonlinearMargins {
        energy: Vec::new(),
        micro: Vec::new(),
        high: Vec::new(),
        weighted: Vec::new(),
    };
    let mut balance = BalanceReport {
        mass: 0.0,
        momentum: 0.0,
        energy: 0.0,
        a_diagonal: 0.0,
        a_off_diagonal: 0.0,
        b_moment: 0.0,
        momentum_gradient: None,
    };
    let (mut max_p_g1, mut max_p0_g2, mut max_split, mut drift, mut micro_res, mut poisson) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut values: Vec<FunctionalValues> = Vec::new();
    for n in 0..=steps {
        if n > 0 {
            state = rk4(&bench, &state, dt)?;
            let norm = bench.norm_sq(&state.u).sqrt();
            if !norm.is_finite() || norm > cfg.blowup_factor * u0_norm {
                return Err(LabError::BlowUp {
                    t: state.t,
                    ratio: norm / u0_norm,
                });
            }
        }
        poisson = poisson.max(state.poisson_residual);
        if n % cfg.record_every != 0 && n != steps {
            continue;
        }
        let terms = nonlinear_rhs(&bench, &state)?;
        let rhs = terms.total();
        let v = functionals.evaluate(&bench, &state.u, &rhs)?;
        let scale = if v.energy > 0.0 { v.energy } else { 1.0 };
        let zero = v.energy == 0.0;
        let m = |x: f64| if zero { 0.0 } else { -x / scale };
        margins
            .energy
            .push(m(v.d_energy + k.lambda * v.dissipation));
        margins.micro.push(m(
            v.d_micro_sq + k.lambda_micro * v.micro_w_sq - k.c_micro * v.grad_p_sq
        ));
        margins.high.push(m(
            v.d_high_energy + k.lambda * v.dissipation - k.c_high * v.grad_p_sq
        ));
        margins.weighted.push(m(v.d_weighted_energy
            + k.lambda_weighted * v.weighted_dissipation
            - k.c_weighted * v.grad_p_sq));
        let split = source_split(&bench, &terms);
        let scale_u = u0_norm.max(f64::MIN_POSITIVE);
        max_p_g1 = max_p_g1.max(split.norm_p_g1 / scale_u);
        max_p0_g2 = max_p0_g2.max(split.norm_p0_g2 / scale_u);
        max_split = max_split.max(split.split_error / scale_u);
        balance.merge(&balance_residuals(&bench, &state, &terms));
        micro_res = micro_res.max(microscopic_rhs_audit(&bench, &state)?.relative);
        drift = drift.max((mass(&state) - m0).abs() / scale_u);
        values.push(v);
        history.push(state.clone());
    }
    let ledger = energy_ledger(&bench, &functionals, &history, cfg.epsilon)?;
    let energy_monotone = ledger
        .energy
        .windows(2)
        .all(|w| w[1] <= w[0] + 1e-12 * w[0].abs());
    let worst_energy_margin = margins.energy.iter().copied().fold(f64::INFINITY, f64::min);
    let t_last = *ledger.times.last().unwrap_or(&0.0);
    let energy_decay = fit_decay(
        &ledger.times,
        &ledger.energy,
        (0.5 * t_last, t_last),
        FitModel::Exponential,
    )
    .ok();
    let passed = worst_energy_margin >= -MARGIN_TOLERANCE
        && energy_monotone
        && max_p_g1 <= STRUCTURE_TOLERANCE
        && max_p0_g2 <= STRUCTURE_TOLERANCE
        && balance.worst() <= STRUCTURE_TOLERANCE
        && micro_res <= STRUCTURE_TOLERANCE
        && drift <= STRUCTURE_TOLERANCE;
    Ok(NonlinearReport {
        steps,
        dt,
        ledger,
        margins,
        worst_energy_margin,
        energy_monotone,
        max_p_g1,
        max_p0_g2,
        max_split_error: max_split,
        mass_drift: drift,
        balance,
        max_micro_residual: micro_res,
        max_poisson_residual: poisson,
        energy_decay,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn bench(order: usize, nx: usize) -> TorusBench {
        TorusBench::new(BackendSpec::surrogate(3, order).build().unwrap(), nx).unwrap()
    }

    fn random_state(b: &TorusBench, amp: f64, seed: u64) -> NonlinearState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sm = b.grid().sqrt_m().to_vec();
        let nv = sm.len();
        let u = (0..b.nx() * nv)
            .map(|n| {
                let z: f64 = StandardNormal.sample(&mut rng);
                amp * z * sm[n % nv]
            })
            .collect();
        b.state(u, 0.0).unwrap()
    }

    #[test]
    fn poisson_inverts_trigonometric_densities() {
        let nx = 15;
        let x: Vec<f64> = (0..nx).map(|j| 2.0 * PI * j as f64 / nx as f64).collect();
        let rho: Vec<f64> = x.iter().map(|x| 1.0 + x.cos()).collect();
        let p = solve_poisson(&rho).unwrap();
        assert_relative_eq!(p.mean_density, 1.0, epsilon = 1e-14);
        assert!(p.residual < 1e-12);
        for (j, x) in x.iter().enumerate() {
            assert_relative_eq!(p.phi[j], -x.cos(), epsilon = 1e-13);
            assert_relative_eq!(p.dphi[j], x.sin(), epsilon = 1e-13);
        }
        let rho: Vec<f64> = x.iter().map(|x| (2.0 * x).sin()).collect();
        let p = solve_poisson(&rho).unwrap();
        for (j, x) in x.iter().enumerate() {
            assert_relative_eq!(p.phi[j], -(2.0 * x).sin() / 4.0, epsilon = 1e-13);
        }
        assert!(solve_poisson(&[]).is_err());
    }

    #[test]
    fn spectral_derivative_is_exact_for_resolved_modes() {
        let s = Spectral::new(9).unwrap();
        let x: Vec<f64> = (0..9).map(|j| 2.0 * PI * j as f64 / 9.0).collect();
        let f: Vec<f64> = x.iter().map(|x| (3.0 * x).sin()).collect();
        let d = s.derivative(&f, 1);
        let d2 = s.derivative(&f, 2);
        for j in 0..9 {
            assert_relative_eq!(d[j], 3.0 * (3.0 * x[j]).cos(), epsilon = 1e-12);
            assert_relative_eq!(d2[j], -9.0 * f[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn bench_validates_grid() {
        let be = BackendSpec::surrogate(1, 4).build().unwrap();
        assert!(TorusBench::new(be.clone(), 8).is_err());
        assert!(TorusBench::new(be.clone(), 1).is_err());
        let b = TorusBench::new(be, 5).unwrap();
        assert!(b.state(vec![0.0; 3], 0.0).is_err());
        assert!(calibrate_bench(&b, 0, &BenchCalibration::default()).is_err());
        assert!(calibrate_bench(&b, 3, &BenchCalibration::default()).is_err());
        assert_eq!(multi_indices(3, 2).len(), 9);
        assert_eq!(multi_indices(1, 2).len(), 2);
    }

    #[test]
    fn zero_state_has_zero_rhs() {
        let b = bench(4, 5);
        let s = b.state(vec![0.0; 5 * b.grid().len()], 0.0).unwrap();
        let t = nonlinear_rhs(&b, &s).unwrap();
        assert!(t.total().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn homogeneous_state_has_no_field_terms() {
        let b = bench(4, 5);
        let one = random_state(&b, 0.1, 3);
        let slice = one.slice(0).to_vec();
        let u: Vec<f64> = (0..5).flat_map(|_| slice.clone()).collect();
        let s = b.state(u, 0.0).unwrap();
        assert!(s.dphi.iter().all(|v| v.abs() < 1e-15));
        let t = nonlinear_rhs(&b, &s).unwrap();
        let expect: Vec<f64> = {
            let lu = b.backend().apply_l_unchecked(&slice);
            let g = b.backend().gamma_unchecked(&slice, &slice);
            lu.iter().zip(&g).map(|(a, c)| a + c).collect()
        };
        let total = t.total();
        for j in 0..5 {
            for (i, e) in expect.iter().enumerate() {
                assert_relative_eq!(total[j * slice.len() + i], *e, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn gamma_scales_quadratically() {
        let b = bench(4, 5);
        let s = random_state(&b, 1.0, 4);
        let g1 = b.norm_sq(&nonlinear_rhs(&b, &s).unwrap().gamma).sqrt();
        let small = b
            .state(s.u.iter().map(|v| 1e-3 * v).collect(), 0.0)
            .unwrap();
        let g2 = b.norm_sq(&nonlinear_rhs(&b, &small).unwrap().gamma).sqrt();
        assert_relative_eq!(g2 / g1, 1e-6, max_relative = 1e-10);
    }

    #[test]
    fn structural_identities_hold_on_random_states() {
        let b = bench(4, 5);
        for seed in 0..3 {
            let s = random_state(&b, 1e-2, seed);
            let t = nonlinear_rhs(&b, &s).unwrap();
            let split = source_split(&b, &t);
            assert!(split.norm_p_g1 <= 1e-8 * split.norm_g1.max(1e-300) + 1e-16);
            assert!(split.norm_p0_g2 <= 1e-8 * split.norm_g2);
            assert!(split.split_error <= 1e-12 * (split.norm_g1 + split.norm_g2));
            let bal = balance_residuals(&b, &s, &t);
            assert!(bal.worst() <= 1e-10, "{bal:?}");
            assert!(bal.momentum_gradient.is_some());
            let audit = microscopic_rhs_audit(&b, &s).unwrap();
            assert!(audit.relative <= 1e-8, "{audit:?}");
            let flip = b.state(s.u.iter().map(|v| -v).collect(), 0.0).unwrap();
            let a2 = microscopic_rhs_audit(&b, &flip).unwrap();
            assert!(a2.relative <= 1e-8);
            assert!(a2.lhs_norm > 0.0 && (a2.lhs_norm - audit.lhs_norm).abs() < audit.lhs_norm);
        }
    }

    #[test]
    fn macroscopic_state_has_vanishing_micro_sides() {
        let b = bench(4, 5);
        let nv = b.grid().len();
        let sm = b.grid().sqrt_m().to_vec();
        let u: Vec<f64> = (0..5 * nv)
            .map(|n| 1e-3 * (2.0 * PI * (n / nv) as f64 / 5.0).cos() * sm[n % nv])
            .collect();
        let s = b.state(u, 0.0).unwrap();
        let a = microscopic_rhs_audit(&b, &s).unwrap();
        assert!(a.residual <= 1e-12 * b.norm_sq(&s.u).sqrt());
    }

    #[test]
    fn ledger_is_nonnegative_and_running_sups_increase() {
        let b = bench(4, 5);
        let f = calibrate_bench(&b, 1, &BenchCalibration::default()).unwrap();
        assert!(f.constants.lambda > 0.0);
        let hist: Vec<NonlinearState> = (0..4)
            .map(|i| {
                let mut s = random_state(&b, 1e-3, 10 + i);
                s.t = i as f64;
                s
            })
            .collect();
        let led = energy_ledger(&b, &f, &hist, 0.25).unwrap();
        for i in 0..4 {
            assert!(led.energy[i] > 0.0 && led.dissipation[i] > 0.0);
            assert!(led.weighted_energy[i] > 0.0 && led.weighted_dissipation[i] > 0.0);
        }
        assert!(led.sup_energy_0.windows(2).all(|w| w[1] >= w[0]));
        assert!(led.sup_weighted.windows(2).all(|w| w[1] >= w[0]));
        assert!(led.epsilon1 >= led.epsilon0 && led.epsilon0_nu >= led.epsilon0);
        assert!(energy_ledger(&b, &f, &hist, 0.0).is_err());
        assert!(energy_ledger(&b, &f, &[], 0.25).is_err());
        let zero = vec![b.state(vec![0.0; 5 * b.grid().len()], 0.0).unwrap()];
        let led = energy_ledger(&b, &f, &zero, 0.25).unwrap();
        assert_eq!(led.energy[0], 0.0);
        assert_eq!(led.sup_weighted[0], 0.0);
        assert_eq!(led.epsilon0 + led.epsilon1, 0.0);
    }

    #[test]
    fn functional_rates_match_finite_differences() {
        let b = bench(4, 5);
        let f = calibrate_bench(&b, 1, &BenchCalibration::default()).unwrap();
        let s = random_state(&b, 1e-2, 21);
        let rhs = nonlinear_rhs(&b, &s).unwrap().total();
        let v = f.evaluate(&b, &s.u, &rhs).unwrap();
        let h = 1e-6;
        let at = |sgn: f64| {
            let u: Vec<f64> = s.u.iter().zip(&rhs).map(|(a, r)| a + sgn * h * r).collect();
            f.evaluate(&b, &u, &rhs).unwrap()
        };
        let (p, m) = (at(1.0), at(-1.0));
        assert_relative_eq!(
            v.d_energy,
            (p.energy - m.energy) / (2.0 * h),
            max_relative = 1e-6
        );
        assert_relative_eq!(
            v.d_weighted_energy,
            (p.weighted_energy - m.weighted_energy) / (2.0 * h),
            max_relative = 1e-6
        );
    }

    #[test]
    fn small_data_run_passes_structural_suite() {
        let cfg = NonlinearConfig {
            backend: BackendSpec::surrogate(3, 4),
            nx: 5,
            t_end: 1.0,
            ..NonlinearConfig::default()
        };
        let r = run_nonlinear(&cfg).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.energy_monotone);
        assert!(r.worst_energy_margin >= -MARGIN_TOLERANCE);
        assert!(r.mass_drift <= 1e-12);
        assert_eq!(r.ledger.times.len(), r.steps + 1);
        let mut bad = cfg.clone();
        bad.dt_fraction = 0.0;
        assert!(run_nonlinear(&bad).is_err());
    }
}
