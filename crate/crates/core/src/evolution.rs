//! Klein–Gordon evolution on a fixed metric, weights, and the conserved
//! functionals H, Π, Q plus the radiation energy E₀.
//!
//! Scheme: first-order (φ, π) system, classical RK4 in time, 2nd-order
//! centered stencils in space, fixed-zero boundary behind a cosine-ramp
//! sponge. Functional quadratures use 4th-order gradients and the
//! deterministic reductions from [`crate::reduce`].

use crate::geometry::MetricField;
use crate::grid::{FieldState, GridError, GridSpec};
use crate::ground_state::RadialProfile;
use crate::reduce::{par_sum, par_sum_vec};
use crate::soliton::{boost_matrix, SolitonParams};
use nalgebra::{Matrix3, Matrix4, Vector3};
use num_complex::Complex64;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("CFL violated: dt = {dt} exceeds {limit}")]
    CflViolation { dt: f64, limit: f64 },
    #[error("non-finite field value at step {0}")]
    NonFinite(usize),
    #[error("incompatible weight constants: {0}")]
    IncompatibleConstants(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("bad input: {0}")]
    BadInput(String),
}

// ---------------------------------------------------------------- weights

/// Constants entering the q-template; `eps` is the slow-variation parameter
/// of the metric (q_ε(t,x) = q(ε(x − u₀t))).
#[derive(Debug, Clone, Copy)]
pub struct WeightConstants {
    pub k0: f64,
    pub c0: f64,
    pub delta0: f64,
    pub eps: f64,
}

/// Per-cell decomposition weights.
#[derive(Debug, Clone)]
pub struct Weights {
    pub q: Vec<f64>,
    /// p_ε = √(−g^{00}).
    pub p: Vec<f64>,
    /// d_ε = (−det g)^{1/4}.
    pub d: Vec<f64>,
    /// a₀ = q_ε d_ε.
    pub a0: Vec<f64>,
    /// a₁ = p_ε d_ε.
    pub a1: Vec<f64>,
    /// a = p_ε⁻¹ q_ε.
    pub a: Vec<f64>,
    /// b = p_ε⁻¹ d_ε.
    pub b: Vec<f64>,
    pub rho0: f64,
}

impl Weights {
    /// Minkowski metric with q ≡ 1: every weight is 1.
    pub fn unit(grid: &GridSpec) -> Weights {
        let n = grid.len();
        Weights {
            q: vec![1.0; n],
            p: vec![1.0; n],
            d: vec![1.0; n],
            a0: vec![1.0; n],
            a1: vec![1.0; n],
            a: vec![1.0; n],
            b: vec![1.0; n],
            rho0: 1.0,
        }
    }
}

/// The three-branch template q(x): 1 − 3C₀ρ₀|x|² in the core, the quadratic
/// bridge on (δ₀/2, δ₀), and the plateau ¼K₀⁻³ρ₀⁻¹ outside.
pub fn q_template(r: f64, k0: f64, c0: f64, delta0: f64, rho0: f64) -> f64 {
    let r2 = r * r;
    let d2 = delta0 * delta0;
    if r <= 0.5 * delta0 {
        1.0 - 3.0 * c0 * rho0 * r2
    } else if r < delta0 {
        k0.powi(-3) / rho0 / d2 / 3.0 * (r2 - 0.25 * d2) + (4.0 / (3.0 * d2) - c0 * rho0) * (d2 - r2)
    } else {
        0.25 * k0.powi(-3) / rho0
    }
}

fn check_constants(c: &WeightConstants, rho0: f64) -> Result<(), EvolutionError> {
    let mut bad = Vec::new();
    if c.k0 < 10.0 {
        bad.push(format!("K0 = {} < 10", c.k0));
    }
    let plateau = 0.25 * c.k0.powi(-3) / rho0;
    if plateau > 1.0 - 3.0 * rho0 * c.c0 * c.delta0 * c.delta0 {
        bad.push("1/4 K0^-3 rho0^-1 > 1 - 3 rho0 C0 delta0^2".into());
    }
    if c.c0 * c.delta0 * c.delta0 * rho0 > 0.1 {
        bad.push("C0 delta0^2 rho0 > 1/10".into());
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(EvolutionError::IncompatibleConstants(bad.join("; ")))
    }
}

/// Build the per-cell weights at time t for a soliton drifting with the frame
/// velocity u₀.
pub fn build_weights(
    metric: &(impl MetricField + ?Sized),
    u0: &[f64; 3],
    constants: &WeightConstants,
    grid: &GridSpec,
    t: f64,
) -> Result<Weights, EvolutionError> {
    let speed2 = u0.iter().map(|v| v * v).sum::<f64>();
    if speed2 >= 1.0 {
        return Err(EvolutionError::BadInput("|u0| must be < 1".into()));
    }
    let rho0 = 1.0 / (1.0 - speed2).sqrt();
    check_constants(constants, rho0)?;
    let n = grid.len();
    let cells: Vec<[f64; 3]> = (0..n)
        .into_par_iter()
        .map(|idx| {
            let pos = grid.pos_of(idx);
            let g = metric.g(&[t, pos[0], pos[1], pos[2]]);
            let det = g.determinant();
            let ginv = g.try_inverse().unwrap_or_else(Matrix4::identity);
            let p = (-ginv[(0, 0)]).max(0.0).sqrt();
            let d = (-det).max(0.0).powf(0.25);
            let r = constants.eps
                * ((pos[0] - u0[0] * t).powi(2) + (pos[1] - u0[1] * t).powi(2) + (pos[2] - u0[2] * t).powi(2)).sqrt();
            let q = q_template(r, constants.k0, constants.c0, constants.delta0, rho0);
            [q, p, d]
        })
        .collect();
    let mut w = Weights {
        q: Vec::with_capacity(n),
        p: Vec::with_capacity(n),
        d: Vec::with_capacity(n),
        a0: Vec::with_capacity(n),
        a1: Vec::with_capacity(n),
        a: Vec::with_capacity(n),
        b: Vec::with_capacity(n),
        rho0,
    };
    for [q, p, d] in cells {
        if !(q > 0.0 && p > 0.0 && d > 0.0) {
            return Err(EvolutionError::BadInput(format!("non-positive weight: q={q} p={p} d={d}")));
        }
        w.q.push(q);
        w.p.push(p);
        w.d.push(d);
        w.a0.push(q * d);
        w.a1.push(p * d);
        w.a.push(q / p);
        w.b.push(d / p);
    }
    Ok(w)
}

// -------------------------------------------------------------- coefficients

/// Per-cell PDE coefficients at a fixed time: the inverse metric split and
/// the first-order coefficients c^ν = (−det g)^{−1/2}∂_μ((−det g)^{1/2}g^{μν}).
#[derive(Debug, Clone, Copy)]
pub struct CellCoeffs {
    pub g00: f64,
    pub g0k: [f64; 3],
    /// (xx, yy, zz, xy, xz, yz) of g^{kl}.
    pub gkl: [f64; 6],
    pub c: [f64; 4],
    /// d_ε² = √(−det g), the volume weight.
    pub d2: f64,
}

#[derive(Debug, Clone)]
pub struct Coeffs {
    pub t: f64,
    pub cells: Vec<CellCoeffs>,
}

fn cell_coeffs(metric: &(impl MetricField + ?Sized), x: &[f64; 4]) -> CellCoeffs {
    let g = metric.g(x);
    let ginv = g.try_inverse().unwrap_or_else(Matrix4::identity);
    let dg = metric.dg(x);
    // c^ν = Σ_μ ½ tr(g⁻¹∂_μ g) g^{μν} − (g⁻¹ ∂_μ g g⁻¹)^{μν}
    let mut c = [0.0; 4];
    for mu in 0..4 {
        let gd = ginv * dg[mu];
        let tr = gd.trace();
        let gdg = gd * ginv;
        for nu in 0..4 {
            c[nu] += 0.5 * tr * ginv[(mu, nu)] - gdg[(mu, nu)];
        }
    }
    CellCoeffs {
        g00: ginv[(0, 0)],
        g0k: [ginv[(0, 1)], ginv[(0, 2)], ginv[(0, 3)]],
        gkl: [
            ginv[(1, 1)],
            ginv[(2, 2)],
            ginv[(3, 3)],
            ginv[(1, 2)],
            ginv[(1, 3)],
            ginv[(2, 3)],
        ],
        c,
        d2: (-g.determinant()).max(0.0).sqrt(),
    }
}

impl Coeffs {
    pub fn build(metric: &(impl MetricField + ?Sized), grid: &GridSpec, t: f64) -> Coeffs {
        let cells = (0..grid.len())
            .into_par_iter()
            .map(|idx| {
                let pos = grid.pos_of(idx);
                cell_coeffs(metric, &[t, pos[0], pos[1], pos[2]])
            })
            .collect();
        Coeffs { t, cells }
    }
}

// ------------------------------------------------------------------ stepper

#[derive(Debug, Clone, Copy)]
pub struct KgConfig {
    pub m: f64,
    pub p: f64,
    /// CFL fraction: dt ≤ cfl·h/√(sup|g^{kl}|·K₀).
    pub cfl: f64,
    /// Sponge damping rate.
    pub sponge_sigma: f64,
}

impl KgConfig {
    pub fn new(m: f64, p: f64) -> Self {
        KgConfig { m, p, cfl: 0.9, sponge_sigma: 4.0 }
    }
}

/// |φ|^{p−1}φ with fast paths for the common exponents.
#[inline]
fn nonlin_c(phi: Complex64, p: f64) -> Complex64 {
    let n2 = phi.norm_sqr();
    let fac = if p == 2.0 {
        n2.sqrt()
    } else if p == 3.0 {
        n2
    } else {
        n2.powf(0.5 * (p - 1.0))
    };
    phi * fac
}

struct Rhs<'a> {
    grid: &'a GridSpec,
    coeffs: &'a [CellCoeffs],
    m2: f64,
    p: f64,
}

impl Rhs<'_> {
    /// (φ̇, π̇) at one cell; out-of-box neighbors are zero (fixed boundary).
    #[inline]
    fn eval(&self, phi: &[Complex64], pi: &[Complex64], idx: usize) -> (Complex64, Complex64) {
        let n = self.grid.n;
        let (i, j, k) = self.grid.coords(idx);
        let zero = Complex64::new(0.0, 0.0);
        let at = |f: &[Complex64], ii: isize, jj: isize, kk: isize| -> Complex64 {
            if ii < 0 || jj < 0 || kk < 0 || ii >= n[0] as isize || jj >= n[1] as isize || kk >= n[2] as isize {
                zero
            } else {
                f[(ii as usize * n[1] + jj as usize) * n[2] + kk as usize]
            }
        };
        let (i, j, k) = (i as isize, j as isize, k as isize);
        let h = self.grid.h;
        let ih2 = 1.0 / (2.0 * h);
        let ihh = 1.0 / (h * h);
        let c = &self.coeffs[idx];
        let p0 = phi[idx];

        let px = [at(phi, i - 1, j, k), at(phi, i + 1, j, k)];
        let py = [at(phi, i, j - 1, k), at(phi, i, j + 1, k)];
        let pz = [at(phi, i, j, k - 1), at(phi, i, j, k + 1)];
        let d1 = [(px[1] - px[0]) * ih2, (py[1] - py[0]) * ih2, (pz[1] - pz[0]) * ih2];
        let d2x = (px[1] - p0 * 2.0 + px[0]) * ihh;
        let d2y = (py[1] - p0 * 2.0 + py[0]) * ihh;
        let d2z = (pz[1] - p0 * 2.0 + pz[0]) * ihh;
        let cross = |a: Complex64, b: Complex64, c2: Complex64, d: Complex64| (a - b - c2 + d) * (0.25 * ihh);
        let dxy = cross(at(phi, i + 1, j + 1, k), at(phi, i + 1, j - 1, k), at(phi, i - 1, j + 1, k), at(phi, i - 1, j - 1, k));
        let dxz = cross(at(phi, i + 1, j, k + 1), at(phi, i + 1, j, k - 1), at(phi, i - 1, j, k + 1), at(phi, i - 1, j, k - 1));
        let dyz = cross(at(phi, i, j + 1, k + 1), at(phi, i, j + 1, k - 1), at(phi, i, j - 1, k + 1), at(phi, i, j - 1, k - 1));

        let dpi = [
            (at(pi, i + 1, j, k) - at(pi, i - 1, j, k)) * ih2,
            (at(pi, i, j + 1, k) - at(pi, i, j - 1, k)) * ih2,
            (at(pi, i, j, k + 1) - at(pi, i, j, k - 1)) * ih2,
        ];

        let lap = d2x * c.gkl[0]
            + d2y * c.gkl[1]
            + d2z * c.gkl[2]
            + (dxy * c.gkl[3] + dxz * c.gkl[4] + dyz * c.gkl[5]) * 2.0;
        let mut rhs = -lap + p0 * self.m2 - nonlin_c(p0, self.p);
        for kk in 0..3 {
            rhs -= dpi[kk] * (2.0 * c.g0k[kk]) + d1[kk] * c.c[kk + 1];
        }
        rhs -= pi[idx] * c.c[0];
        (pi[idx], rhs / c.g00)
    }
}

/// CFL bound for this metric/grid pair: cfl·h/√(sup|g^{kl}|·K₀).
pub fn cfl_limit(metric: &(impl MetricField + ?Sized), grid: &GridSpec, cfg: &KgConfig, t: f64) -> f64 {
    let mut sup: f64 = 0.0;
    let step = (grid.len() / 512).max(1);
    let mut idx = 0;
    while idx < grid.len() {
        let pos = grid.pos_of(idx);
        let g = metric.g(&[t, pos[0], pos[1], pos[2]]);
        if let Some(ginv) = g.try_inverse() {
            for k in 1..4 {
                for l in 1..4 {
                    sup = sup.max(ginv[(k, l)].abs());
                }
            }
        }
        idx += step;
    }
    cfg.cfl * grid.h / (sup * metric.k0()).sqrt().max(1e-300)
}

fn axpy(out: &mut [Complex64], x: &[Complex64], a: f64) {
    out.par_iter_mut().zip(x.par_iter()).for_each(|(o, &v)| *o += v * a);
}

/// Cosine-ramp sponge: multiply both fields by exp(−σ dt ramp(depth)).
pub fn apply_sponge(state: &mut FieldState, grid: &GridSpec, sigma: f64, dt: f64) {
    let w = grid.sponge_cells;
    let n = grid.len();
    (0..n)
        .into_par_iter()
        .zip(state.phi.par_iter_mut().zip(state.pi.par_iter_mut()))
        .for_each(|(idx, (phi, pi))| {
            let (i, j, k) = grid.coords(idx);
            let depth = grid.boundary_depth(i, j, k);
            if depth < w {
                let ramp = 0.5 * (1.0 + (std::f64::consts::PI * depth as f64 / w as f64).cos());
                let damp = (-sigma * dt * ramp).exp();
                *phi *= damp;
                *pi *= damp;
            }
        });
}

/// One RK4 step with coefficients frozen at `coeffs` (build them at
/// t + dt/2 for non-static metrics). Advances `state.t` by grid.dt and
/// applies the sponge.
pub fn kg_step_with(
    state: &mut FieldState,
    coeffs: &Coeffs,
    grid: &GridSpec,
    cfg: &KgConfig,
    step_index: usize,
) -> Result<(), EvolutionError> {
    state.check_size(grid)?;
    let rhs = Rhs { grid, coeffs: &coeffs.cells, m2: cfg.m * cfg.m, p: cfg.p };
    let dt = grid.dt;
    let n = grid.len();

    let eval = |phi: &[Complex64], pi: &[Complex64]| -> (Vec<Complex64>, Vec<Complex64>) {
        let out: Vec<(Complex64, Complex64)> = (0..n).into_par_iter().map(|idx| rhs.eval(phi, pi, idx)).collect();
        let mut dphi = Vec::with_capacity(n);
        let mut dpi = Vec::with_capacity(n);
        for (a, b) in out {
            dphi.push(a);
            dpi.push(b);
        }
        (dphi, dpi)
    };

    let k1 = eval(&state.phi, &state.pi);
    let mut yphi = state.phi.clone();
    let mut ypi = state.pi.clone();
    axpy(&mut yphi, &k1.0, 0.5 * dt);
    axpy(&mut ypi, &k1.1, 0.5 * dt);
    let k2 = eval(&yphi, &ypi);
    yphi.copy_from_slice(&state.phi);
    ypi.copy_from_slice(&state.pi);
    axpy(&mut yphi, &k2.0, 0.5 * dt);
    axpy(&mut ypi, &k2.1, 0.5 * dt);
    let k3 = eval(&yphi, &ypi);
    yphi.copy_from_slice(&state.phi);
    ypi.copy_from_slice(&state.pi);
    axpy(&mut yphi, &k3.0, dt);
    axpy(&mut ypi, &k3.1, dt);
    let k4 = eval(&yphi, &ypi);

    let w = dt / 6.0;
    state
        .phi
        .par_iter_mut()
        .zip(state.pi.par_iter_mut())
        .enumerate()
        .for_each(|(idx, (phi, pi))| {
            *phi += (k1.0[idx] + (k2.0[idx] + k3.0[idx]) * 2.0 + k4.0[idx]) * w;
            *pi += (k1.1[idx] + (k2.1[idx] + k3.1[idx]) * 2.0 + k4.1[idx]) * w;
        });
    state.t += dt;
    apply_sponge(state, grid, cfg.sponge_sigma, dt);
    if !state.is_finite() {
        return Err(EvolutionError::NonFinite(step_index));
    }
    Ok(())
}

/// One step building coefficients at the step midpoint (convenience wrapper;
/// use [`Evolver`] to amortize coefficient builds for static metrics).
pub fn kg_step(
    state: &mut FieldState,
    metric: &(impl MetricField + ?Sized),
    grid: &GridSpec,
    cfg: &KgConfig,
) -> Result<(), EvolutionError> {
    let limit = cfl_limit(metric, grid, cfg, state.t);
    if grid.dt > limit {
        return Err(EvolutionError::CflViolation { dt: grid.dt, limit });
    }
    let coeffs = Coeffs::build(metric, grid, state.t + 0.5 * grid.dt);
    kg_step_with(state, &coeffs, grid, cfg, 0)
}

/// Stepper that caches coefficient grids (forever for static metrics, one
/// step at a time otherwise).
pub struct Evolver<'a> {
    pub metric: &'a dyn MetricField,
    pub grid: GridSpec,
    pub cfg: KgConfig,
    coeffs: Coeffs,
    steps: usize,
}

impl<'a> Evolver<'a> {
    pub fn new(metric: &'a dyn MetricField, grid: GridSpec, cfg: KgConfig, t0: f64) -> Result<Self, EvolutionError> {
        let limit = cfl_limit(metric, &grid, &cfg, t0);
        if grid.dt > limit {
            return Err(EvolutionError::CflViolation { dt: grid.dt, limit });
        }
        let coeffs = Coeffs::build(metric, &grid, t0 + 0.5 * grid.dt);
        Ok(Evolver { metric, grid, cfg, coeffs, steps: 0 })
    }

    pub fn coeffs(&self) -> &Coeffs {
        &self.coeffs
    }

    pub fn step(&mut self, state: &mut FieldState) -> Result<(), EvolutionError> {
        if !self.metric.is_static() {
            let mid = state.t + 0.5 * self.grid.dt;
            if (self.coeffs.t - mid).abs() > 1e-12 * (1.0 + mid.abs()) {
                self.coeffs = Coeffs::build(self.metric, &self.grid, mid);
            }
        }
        kg_step_with(state, &self.coeffs, &self.grid, &self.cfg, self.steps)?;
        self.steps += 1;
        Ok(())
    }
}

// -------------------------------------------------------------- functionals

/// 4th-order centered gradient of a complex field (zero outside the box).
#[inline]
fn grad4(f: &[Complex64], grid: &GridSpec, idx: usize) -> [Complex64; 3] {
    let n = grid.n;
    let (i, j, k) = grid.coords(idx);
    let (i, j, k) = (i as isize, j as isize, k as isize);
    let zero = Complex64::new(0.0, 0.0);
    let at = |ii: isize, jj: isize, kk: isize| -> Complex64 {
        if ii < 0 || jj < 0 || kk < 0 || ii >= n[0] as isize || jj >= n[1] as isize || kk >= n[2] as isize {
            zero
        } else {
            f[(ii as usize * n[1] + jj as usize) * n[2] + kk as usize]
        }
    };
    let inv = 1.0 / (12.0 * grid.h);
    let d = |m2: Complex64, m1: Complex64, p1: Complex64, p2: Complex64| (m2 - p2 + (p1 - m1) * 8.0) * inv;
    [
        d(at(i - 2, j, k), at(i - 1, j, k), at(i + 1, j, k), at(i + 2, j, k)),
        d(at(i, j - 2, k), at(i, j - 1, k), at(i, j + 1, k), at(i, j + 2, k)),
        d(at(i, j, k - 2), at(i, j, k - 1), at(i, j, k + 1), at(i, j, k + 2)),
    ]
}

#[inline]
fn re_inner(a: Complex64, b: Complex64) -> f64 {
    a.re * b.re + a.im * b.im
}

/// H = ½∫ <∂^kφ, ∂_kφ> − <∂^tφ, ∂_tφ> + 2𝒱(φ) dσ, dσ = d_ε² dx.
pub fn energy_h(state: &FieldState, coeffs: &Coeffs, grid: &GridSpec, cfg: &KgConfig) -> f64 {
    let m2 = cfg.m * cfg.m;
    let p = cfg.p;
    let vol = grid.cell_volume();
    par_sum(grid.len(), |idx| {
        let c = &coeffs.cells[idx];
        let phi = state.phi[idx];
        let pi = state.pi[idx];
        let d1 = grad4(&state.phi, grid, idx);
        let dt_up = pi * c.g00 + d1[0] * c.g0k[0] + d1[1] * c.g0k[1] + d1[2] * c.g0k[2];
        let upper = [
            pi * c.g0k[0] + d1[0] * c.gkl[0] + d1[1] * c.gkl[3] + d1[2] * c.gkl[4],
            pi * c.g0k[1] + d1[0] * c.gkl[3] + d1[1] * c.gkl[1] + d1[2] * c.gkl[5],
            pi * c.g0k[2] + d1[0] * c.gkl[4] + d1[1] * c.gkl[5] + d1[2] * c.gkl[2],
        ];
        let mut kin = -re_inner(dt_up, pi);
        for k in 0..3 {
            kin += re_inner(upper[k], d1[k]);
        }
        let n2 = phi.norm_sqr();
        let pot = m2 * n2 - 2.0 / (p + 1.0) * n2.powf(0.5 * (p + 1.0));
        0.5 * (kin + pot) * c.d2 * vol
    })
}

/// Π_k = ∫ p_ε⁻¹q_ε <∂^tφ, ∂_kφ> dσ.
pub fn momentum_pi(state: &FieldState, coeffs: &Coeffs, weights: &Weights, grid: &GridSpec) -> [f64; 3] {
    let vol = grid.cell_volume();
    par_sum_vec::<3>(grid.len(), |idx| {
        let c = &coeffs.cells[idx];
        let pi = state.pi[idx];
        let d1 = grad4(&state.phi, grid, idx);
        let dt_up = pi * c.g00 + d1[0] * c.g0k[0] + d1[1] * c.g0k[1] + d1[2] * c.g0k[2];
        let w = weights.a[idx] * c.d2 * vol;
        [w * re_inner(dt_up, d1[0]), w * re_inner(dt_up, d1[1]), w * re_inner(dt_up, d1[2])]
    })
}

/// Q = ∫ a <i∂^tφ, φ> dσ.
pub fn charge_q(state: &FieldState, coeffs: &Coeffs, weights: &Weights, grid: &GridSpec) -> f64 {
    let vol = grid.cell_volume();
    par_sum(grid.len(), |idx| {
        let c = &coeffs.cells[idx];
        let pi = state.pi[idx];
        let d1 = grad4(&state.phi, grid, idx);
        let dt_up = pi * c.g00 + d1[0] * c.g0k[0] + d1[1] * c.g0k[1] + d1[2] * c.g0k[2];
        let i_dt = Complex64::new(-dt_up.im, dt_up.re);
        weights.a[idx] * re_inner(i_dt, state.phi[idx]) * c.d2 * vol
    })
}

/// E₀ = ‖w + ρu·∇_z v − iρωv‖²_{dz} + <v₁, L₊v₁>_{dz} + <v₂, L₋v₂>_{dz}.
///
/// v, w are complex fields on the grid; z = A_u(x − ξ), dz = ρ dx,
/// ∇_z = A_u⁻¹∇_x, and L± = −Δ_z + (m²−ω²) − {p,1}·f_ω^{p−1}(z).
pub fn radiation_energy_e0(
    v: &[Complex64],
    w: &[Complex64],
    params: &SolitonParams,
    profile: &RadialProfile,
    grid: &GridSpec,
) -> f64 {
    let rho = params.rho();
    let u = params.u_vec();
    let omega = params.omega;
    let p = profile.p;
    let kk = profile.kk();
    let a = boost_matrix(&u).expect("|u| < 1");
    let ainv = a.try_inverse().unwrap_or_else(Matrix3::identity);
    let xi = params.xi_vec();
    let vol = grid.cell_volume() * rho; // dz = ρ dx
    par_sum(grid.len(), |idx| {
        let pos = grid.pos_of(idx);
        let z = a * (Vector3::from(pos) - xi);
        let f = profile.sample(z.norm()).0;
        let fp1 = f.abs().powf(p - 1.0);
        let gx = grad4(v, grid, idx);
        // ∇_z v = A⁻¹ ∇_x v componentwise on re/im
        let gz: [Complex64; 3] = std::array::from_fn(|r| {
            gx[0] * ainv[(r, 0)] + gx[1] * ainv[(r, 1)] + gx[2] * ainv[(r, 2)]
        });
        let u_gz = gz[0] * u[0] + gz[1] * u[1] + gz[2] * u[2];
        let vv = v[idx];
        let first = w[idx] + u_gz * rho - Complex64::new(-vv.im, vv.re) * (rho * omega);
        let mut quad = first.norm_sqr();
        // <v₁, L₊v₁> + <v₂, L₋v₂> via the gradient form
        let gz2_re: f64 = gz.iter().map(|g| g.re * g.re).sum();
        let gz2_im: f64 = gz.iter().map(|g| g.im * g.im).sum();
        quad += gz2_re + (kk - p * fp1) * vv.re * vv.re;
        quad += gz2_im + (kk - fp1) * vv.im * vv.im;
        quad * vol
    })
}

/// Discrete Hardy ratio ‖f/|x|‖_{L²} / ‖∇f‖_{L²} for a real field.
pub fn hardy_ratio(f: &[f64], grid: &GridSpec) -> f64 {
    let n = grid.n;
    let inv = 1.0 / (12.0 * grid.h);
    let [num, den] = par_sum_vec::<2>(grid.len(), |idx| {
        let pos = grid.pos_of(idx);
        let r2 = pos[0] * pos[0] + pos[1] * pos[1] + pos[2] * pos[2];
        let (i, j, k) = grid.coords(idx);
        let (i, j, k) = (i as isize, j as isize, k as isize);
        let at = |ii: isize, jj: isize, kk: isize| -> f64 {
            if ii < 0 || jj < 0 || kk < 0 || ii >= n[0] as isize || jj >= n[1] as isize || kk >= n[2] as isize {
                0.0
            } else {
                f[(ii as usize * n[1] + jj as usize) * n[2] + kk as usize]
            }
        };
        let d = |m2: f64, m1: f64, p1: f64, p2: f64| (m2 - p2 + 8.0 * (p1 - m1)) * inv;
        let gx = d(at(i - 2, j, k), at(i - 1, j, k), at(i + 1, j, k), at(i + 2, j, k));
        let gy = d(at(i, j - 2, k), at(i, j - 1, k), at(i, j + 1, k), at(i, j + 2, k));
        let gz = d(at(i, j, k - 2), at(i, j, k - 1), at(i, j, k + 1), at(i, j, k + 2));
        let fv = f[idx];
        [fv * fv / r2.max(1e-12), gx * gx + gy * gy + gz * gz]
    });
    (num / den.max(1e-300)).sqrt()
}

/// The defofH-style first/second order coefficients used by the modulation
/// module: a^{ij} = p_ε⁻¹d_ε g^{ij} − δ^{ij}, a^{0k} = 2p_ε⁻¹d_ε g^{0k},
/// b^ν = (p_εd_ε)⁻¹ ∂_μ(d_ε² g^{μν}) = (d_ε/p_ε)·c^ν.
#[derive(Debug, Clone)]
pub struct WaveCoeffs {
    /// a^{ij} (xx, yy, zz, xy, xz, yz).
    pub a_ij: Vec<[f64; 6]>,
    /// a^{0k}.
    pub a_0k: Vec<[f64; 3]>,
    /// b^ν.
    pub b: Vec<[f64; 4]>,
}

pub fn wave_coefficients(coeffs: &Coeffs, weights: &Weights) -> WaveCoeffs {
    let n = coeffs.cells.len();
    let mut a_ij = Vec::with_capacity(n);
    let mut a_0k = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for idx in 0..n {
        let c = &coeffs.cells[idx];
        let bd = weights.d[idx] / weights.p[idx];
        a_ij.push([
            bd * c.gkl[0] - 1.0,
            bd * c.gkl[1] - 1.0,
            bd * c.gkl[2] - 1.0,
            bd * c.gkl[3],
            bd * c.gkl[4],
            bd * c.gkl[5],
        ]);
        a_0k.push([2.0 * bd * c.g0k[0], 2.0 * bd * c.g0k[1], 2.0 * bd * c.g0k[2]]);
        b.push([bd * c.c[0], bd * c.c[1], bd * c.c[2], bd * c.c[3]]);
    }
    WaveCoeffs { a_ij, a_0k, b }
}
