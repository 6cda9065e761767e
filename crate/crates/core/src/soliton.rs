//! The 8-parameter soliton family, its λ-derivatives, the matrix D, and the
//! curved-point frame decomposition.
//!
//! Coordinates on the parameter manifold are ordered (ω, θ, ξ₁..ξ₃, u₁..u₃)
//! throughout.

use crate::grid::GridSpec;
use crate::ground_state::{stability_window, ProfileFamily};
use crate::reduce;
use nalgebra::{Matrix3, Matrix4, SMatrix, SVector, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolitonError {
    #[error("speed limit: |u| = {0} >= 1")]
    SpeedLimit(f64),
    #[error("frequency omega = {omega} outside (-m, m) with m = {m}")]
    BadFrequency { m: f64, omega: f64 },
    #[error("metric spatial block not positive definite")]
    NotLorentzian,
    #[error("direction not timelike: |u_eff| = {0} >= 1")]
    NotTimelike(f64),
}

/// A point λ = (ω, θ, ξ, u) of the soliton parameter manifold.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SolitonParams {
    pub omega: f64,
    pub theta: f64,
    pub xi: [f64; 3],
    pub u: [f64; 3],
}

impl SolitonParams {
    pub fn at_rest(omega: f64) -> Self {
        SolitonParams { omega, theta: 0.0, xi: [0.0; 3], u: [0.0; 3] }
    }

    #[inline]
    pub fn u_vec(&self) -> Vector3<f64> {
        Vector3::from(self.u)
    }

    #[inline]
    pub fn xi_vec(&self) -> Vector3<f64> {
        Vector3::from(self.xi)
    }

    #[inline]
    pub fn speed(&self) -> f64 {
        self.u_vec().norm()
    }

    /// ρ = (1 − |u|²)^{−1/2}.
    #[inline]
    pub fn rho(&self) -> f64 {
        1.0 / (1.0 - self.u_vec().norm_squared()).sqrt()
    }

    pub fn validate(&self, m: f64) -> Result<(), SolitonError> {
        if self.speed() >= 1.0 {
            return Err(SolitonError::SpeedLimit(self.speed()));
        }
        if self.omega.abs() >= m {
            return Err(SolitonError::BadFrequency { m, omega: self.omega });
        }
        Ok(())
    }

    /// Membership of |ω| in the stability window for (m, p).
    pub fn is_stable(&self, m: f64, p: f64) -> bool {
        match stability_window(m, p) {
            Ok((lo, hi)) => self.omega.abs() > lo && self.omega.abs() < hi,
            Err(_) => false,
        }
    }

    /// As an 8-vector in the (ω, θ, ξ, u) order.
    pub fn to_vector(&self) -> SVector<f64, 8> {
        SVector::<f64, 8>::from_column_slice(&[
            self.omega, self.theta, self.xi[0], self.xi[1], self.xi[2], self.u[0], self.u[1], self.u[2],
        ])
    }

    pub fn from_vector(v: &SVector<f64, 8>) -> Self {
        SolitonParams {
            omega: v[0],
            theta: v[1],
            xi: [v[2], v[3], v[4]],
            u: [v[5], v[6], v[7]],
        }
    }

    /// λ + δ·e_j on the parameter manifold.
    pub fn shifted(&self, j: usize, delta: f64) -> Self {
        let mut v = self.to_vector();
        v[j] += delta;
        Self::from_vector(&v)
    }
}

/// Lorentz contraction matrix A_u = ρP_u + (I − P_u); identity at u=0.
pub fn boost_matrix(u: &Vector3<f64>) -> Result<Matrix3<f64>, SolitonError> {
    let s2 = u.norm_squared();
    if s2 >= 1.0 {
        return Err(SolitonError::SpeedLimit(s2.sqrt()));
    }
    if s2 == 0.0 {
        return Ok(Matrix3::identity());
    }
    let rho = 1.0 / (1.0 - s2).sqrt();
    let proj = u * u.transpose() / s2;
    Ok(Matrix3::identity() + (rho - 1.0) * proj)
}

/// The symmetry flow V(λ) = (0, ω/ρ, u, 0).
pub fn v_of_lambda(params: &SolitonParams) -> SVector<f64, 8> {
    let rho = params.rho();
    let mut v = SVector::<f64, 8>::zeros();
    v[1] = params.omega / rho;
    v[2] = params.u[0];
    v[3] = params.u[1];
    v[4] = params.u[2];
    v
}

/// Finite-difference step scales per λ-component: (m−|ω|, 1, 1/k·1₃, (1−|u|)·1₃).
pub fn fd_scales(m: f64, params: &SolitonParams) -> [f64; 8] {
    let k = (m * m - params.omega * params.omega).sqrt();
    let sw = m - params.omega.abs();
    let su = 1.0 - params.speed();
    [sw, 1.0, 1.0 / k, 1.0 / k, 1.0 / k, su, su, su]
}

const FD_EPS: f64 = 1e-5;

/// Prepared evaluator of (φ_S, ψ_S) at a fixed λ.
#[derive(Debug, Clone)]
pub struct SolitonEval<'a> {
    pub family: &'a ProfileFamily,
    pub params: SolitonParams,
    rho: f64,
    a: Matrix3<f64>,
    k: f64,
    amp: f64,
}

impl<'a> SolitonEval<'a> {
    pub fn new(family: &'a ProfileFamily, params: &SolitonParams) -> Result<Self, SolitonError> {
        params.validate(family.m)?;
        let a = boost_matrix(&params.u_vec())?;
        let k = family.k(params.omega);
        let amp = (k * k).powf(1.0 / (family.p - 1.0));
        Ok(SolitonEval { family, params: *params, rho: params.rho(), a, k, amp })
    }

    /// z = A_u(x − ξ).
    #[inline]
    pub fn z(&self, x: &[f64; 3]) -> Vector3<f64> {
        self.a * (Vector3::from(*x) - self.params.xi_vec())
    }

    /// Phase Θ = θ − ω u·z at x.
    #[inline]
    pub fn theta_at(&self, x: &[f64; 3]) -> f64 {
        let z = self.z(x);
        self.params.theta - self.params.omega * self.params.u_vec().dot(&z)
    }

    /// (f_ω(|z|), f_ω'(|z|)) at x.
    #[inline]
    pub fn profile_at(&self, x: &[f64; 3]) -> (f64, f64) {
        let r = self.z(x).norm();
        let (f, df) = self.family.base.sample(self.k * r);
        (self.amp * f, self.amp * self.k * df)
    }

    /// φ_S = e^{iΘ}f_ω(z); ψ_S = e^{iΘ}(iρωf_ω − ρu·∇_z f_ω).
    pub fn eval(&self, x: &[f64; 3]) -> (Complex64, Complex64) {
        let z = self.z(x);
        let r = z.norm();
        let (fb, dfb) = self.family.base.sample(self.k * r);
        let f = self.amp * fb;
        let df = self.amp * self.k * dfb;
        let uz = self.params.u_vec().dot(&z);
        let phase = self.params.theta - self.params.omega * uz;
        let e = Complex64::from_polar(1.0, phase);
        let advect = if r > 1e-300 { df * uz / r } else { 0.0 };
        let phi = e * f;
        let psi = e * Complex64::new(-self.rho * advect, self.rho * self.params.omega * f);
        (phi, psi)
    }
}

/// Centered-difference stencil for the 8 first λ-derivatives of (φ_S, ψ_S).
pub struct LambdaStencil<'a> {
    pub center: SolitonEval<'a>,
    plus: Vec<SolitonEval<'a>>,
    minus: Vec<SolitonEval<'a>>,
    pub steps: [f64; 8],
}

impl<'a> LambdaStencil<'a> {
    pub fn new(family: &'a ProfileFamily, params: &SolitonParams) -> Result<Self, SolitonError> {
        let scales = fd_scales(family.m, params);
        let mut steps = [0.0; 8];
        let mut plus = Vec::with_capacity(8);
        let mut minus = Vec::with_capacity(8);
        for j in 0..8 {
            steps[j] = FD_EPS * scales[j];
            plus.push(SolitonEval::new(family, &params.shifted(j, steps[j]))?);
            minus.push(SolitonEval::new(family, &params.shifted(j, -steps[j]))?);
        }
        Ok(LambdaStencil { center: SolitonEval::new(family, params)?, plus, minus, steps })
    }

    /// (∂_{λ_j}φ_S, ∂_{λ_j}ψ_S) for j = 0..8 at x.
    pub fn first_derivs(&self, x: &[f64; 3]) -> ([Complex64; 8], [Complex64; 8]) {
        let mut dphi = [Complex64::new(0.0, 0.0); 8];
        let mut dpsi = [Complex64::new(0.0, 0.0); 8];
        for j in 0..8 {
            let (pp, sp) = self.plus[j].eval(x);
            let (pm, sm) = self.minus[j].eval(x);
            let inv = 0.5 / self.steps[j];
            dphi[j] = (pp - pm) * inv;
            dpsi[j] = (sp - sm) * inv;
        }
        (dphi, dpsi)
    }
}

/// Index of the unordered pair (j,k), j < k, in lexicographic order.
#[inline]
fn pair_index(j: usize, k: usize) -> usize {
    debug_assert!(j < k && k < 8);
    j * 8 - j * (j + 1) / 2 + (k - j - 1)
}

/// Nested centered-difference stencil for the 8×8 second λ-derivatives.
pub struct LambdaHessian<'a> {
    pub stencil: LambdaStencil<'a>,
    /// For each pair j<k the four corner evaluators (++, +-, -+, --).
    cross: Vec<[SolitonEval<'a>; 4]>,
}

impl<'a> LambdaHessian<'a> {
    pub fn new(family: &'a ProfileFamily, params: &SolitonParams) -> Result<Self, SolitonError> {
        let stencil = LambdaStencil::new(family, params)?;
        let steps = stencil.steps;
        let mut cross = Vec::with_capacity(28);
        for j in 0..8 {
            for k in (j + 1)..8 {
                let mk = |sj: f64, sk: f64| {
                    SolitonEval::new(family, &params.shifted(j, sj * steps[j]).shifted(k, sk * steps[k]))
                };
                cross.push([mk(1.0, 1.0)?, mk(1.0, -1.0)?, mk(-1.0, 1.0)?, mk(-1.0, -1.0)?]);
            }
        }
        Ok(LambdaHessian { stencil, cross })
    }

    /// Symmetric 8×8 arrays of ∂²_{λ_jλ_k}φ_S and ∂²_{λ_jλ_k}ψ_S at x.
    pub fn second_derivs(&self, x: &[f64; 3]) -> ([[Complex64; 8]; 8], [[Complex64; 8]; 8]) {
        let zero = Complex64::new(0.0, 0.0);
        let mut hphi = [[zero; 8]; 8];
        let mut hpsi = [[zero; 8]; 8];
        let (phic, psic) = self.stencil.center.eval(x);
        let steps = self.stencil.steps;
        for j in 0..8 {
            let (pp, sp) = self.stencil.plus[j].eval(x);
            let (pm, sm) = self.stencil.minus[j].eval(x);
            let inv = 1.0 / (steps[j] * steps[j]);
            hphi[j][j] = (pp - 2.0 * phic + pm) * inv;
            hpsi[j][j] = (sp - 2.0 * psic + sm) * inv;
        }
        for j in 0..8 {
            for k in (j + 1)..8 {
                let c = &self.cross[pair_index(j, k)];
                let inv = 0.25 / (steps[j] * steps[k]);
                let (a0, b0) = c[0].eval(x);
                let (a1, b1) = c[1].eval(x);
                let (a2, b2) = c[2].eval(x);
                let (a3, b3) = c[3].eval(x);
                let dphi = (a0 - a1 - a2 + a3) * inv;
                let dpsi = (b0 - b1 - b2 + b3) * inv;
                hphi[j][k] = dphi;
                hphi[k][j] = dphi;
                hpsi[j][k] = dpsi;
                hpsi[k][j] = dpsi;
            }
        }
        (hphi, hpsi)
    }
}

/// Closed-form D (Lemma-level block values): antisymmetric with
/// D_{ωθ} = D_ω(ω‖f_ω‖²), D_{ωξ} = ρ·u·D_ωB, D_{ξu} = −ρB(I + ρ²uuᵀ).
pub fn assemble_d(params: &SolitonParams, family: &ProfileFamily) -> SMatrix<f64, 8, 8> {
    let rho = params.rho();
    let b = family.norms(params.omega).b;
    let dq = family.charge_slope(params.omega);
    let db = family.b_slope(params.omega);
    let u = params.u;
    let mut d = SMatrix::<f64, 8, 8>::zeros();
    d[(0, 1)] = dq;
    d[(1, 0)] = -dq;
    for k in 0..3 {
        let v = rho * u[k] * db;
        d[(0, 2 + k)] = v;
        d[(2 + k, 0)] = -v;
    }
    for j in 0..3 {
        for k in 0..3 {
            let delta = if j == k { 1.0 } else { 0.0 };
            let v = -rho * b * (delta + rho * rho * u[j] * u[k]);
            d[(2 + j, 5 + k)] = v;
            d[(5 + k, 2 + j)] = -v;
        }
    }
    d
}

/// |det D| = |D_ω(ω‖f_ω‖²)|²·B⁶·ρ¹⁰ in closed form.
pub fn det_d_closed_form(params: &SolitonParams, family: &ProfileFamily) -> f64 {
    let rho = params.rho();
    let b = family.norms(params.omega).b;
    let dq = family.charge_slope(params.omega);
    dq * dq * b.powi(6) * rho.powi(10)
}

/// D assembled by grid quadrature of the finite-difference λ-derivatives:
/// D_{jk} = <∂_jψ_S, ∂_kφ_S> − <∂_jφ_S, ∂_kψ_S> with <a,b> = Re∫a·conj(b)dx.
pub fn assemble_d_quadrature(
    params: &SolitonParams,
    family: &ProfileFamily,
    grid: &GridSpec,
) -> Result<SMatrix<f64, 8, 8>, SolitonError> {
    let stencil = LambdaStencil::new(family, params)?;
    let vol = grid.cell_volume();
    let sums = reduce::par_sum_vec::<64>(grid.len(), |idx| {
        let x = grid.pos_of(idx);
        let (dphi, dpsi) = stencil.first_derivs(&x);
        let mut out = [0.0; 64];
        for j in 0..8 {
            for k in 0..8 {
                out[j * 8 + k] =
                    ((dpsi[j] * dphi[k].conj()).re - (dphi[j] * dpsi[k].conj()).re) * vol;
            }
        }
        out
    });
    let mut d = SMatrix::<f64, 8, 8>::zeros();
    for j in 0..8 {
        for k in 0..8 {
            d[(j, k)] = sums[j * 8 + k];
        }
    }
    Ok(d)
}

/// Discrete sup-norm of Δ_xφ_S − m²φ_S + |φ_S|^{p−1}φ_S − D_λψ_S·V(λ) on the
/// grid interior, with the directional λ-derivative by centered differences
/// along V(λ).
pub fn soliton_identity_residual(
    params: &SolitonParams,
    family: &ProfileFamily,
    grid: &GridSpec,
) -> Result<f64, SolitonError> {
    let center = SolitonEval::new(family, params)?;
    let v = v_of_lambda(params);
    let delta = 1e-5;
    let shift = |s: f64| {
        let vec = params.to_vector() + s * delta * v;
        SolitonEval::new(family, &SolitonParams::from_vector(&vec))
    };
    let plus = shift(1.0)?;
    let minus = shift(-1.0)?;

    let n = grid.len();
    let mut phi = vec![Complex64::new(0.0, 0.0); n];
    let mut dpsi_v = vec![Complex64::new(0.0, 0.0); n];
    for idx in 0..n {
        let x = grid.pos_of(idx);
        phi[idx] = center.eval(&x).0;
        let (_, sp) = plus.eval(&x);
        let (_, sm) = minus.eval(&x);
        dpsi_v[idx] = (sp - sm) / (2.0 * delta);
    }

    let m2 = family.m * family.m;
    let p = family.p;
    let h2 = grid.h * grid.h;
    let [n0, n1, n2] = grid.n;
    let sup = reduce::par_max(n, |idx| {
        let (i, j, k) = grid.coords(idx);
        if i < 1 || j < 1 || k < 1 || i >= n0 - 1 || j >= n1 - 1 || k >= n2 - 1 {
            return 0.0;
        }
        let c = phi[idx];
        let lap = (phi[grid.idx(i - 1, j, k)] + phi[grid.idx(i + 1, j, k)]
            + phi[grid.idx(i, j - 1, k)] + phi[grid.idx(i, j + 1, k)]
            + phi[grid.idx(i, j, k - 1)] + phi[grid.idx(i, j, k + 1)]
            - 6.0 * c)
            / h2;
        let res = lap - m2 * c + c.norm().powf(p - 1.0) * c - dpsi_v[idx];
        res.norm()
    });
    Ok(sup)
}

/// Frame decomposition of a metric value h at a point: h_{kl} = QQᵀ,
/// α = Q⁻¹(h₀₁,h₀₂,h₀₃)ᵀ, a = √(−h₀₀+|α|²), u_eff = a⁻¹(α + Qᵀu_h).
#[derive(Debug, Clone)]
pub struct CurvedFrame {
    pub a: f64,
    pub alpha: Vector3<f64>,
    pub q: Matrix3<f64>,
    pub u_eff: Vector3<f64>,
}

pub fn curved_frame(h: &Matrix4<f64>, u_h: &Vector3<f64>) -> Result<CurvedFrame, SolitonError> {
    let spatial = h.fixed_view::<3, 3>(1, 1).into_owned();
    let chol = nalgebra::Cholesky::new(spatial).ok_or(SolitonError::NotLorentzian)?;
    let q = chol.l();
    let h0 = Vector3::new(h[(0, 1)], h[(0, 2)], h[(0, 3)]);
    let alpha = q
        .clone_owned()
        .try_inverse()
        .ok_or(SolitonError::NotLorentzian)?
        * h0;
    let a2 = -h[(0, 0)] + alpha.norm_squared();
    if a2 <= 0.0 {
        return Err(SolitonError::NotLorentzian);
    }
    let a = a2.sqrt();
    let u_eff = (alpha + q.transpose() * u_h) / a;
    if u_eff.norm() >= 1.0 {
        return Err(SolitonError::NotTimelike(u_eff.norm()));
    }
    Ok(CurvedFrame { a, alpha, q, u_eff })
}

impl CurvedFrame {
    /// Reconstruct the metric block identity
    /// h = [[−a²+|α|², (Qα)ᵀ],[Qα, QQᵀ]]; used by the invariant tests.
    pub fn reconstruct(&self) -> Matrix4<f64> {
        let mut h = Matrix4::zeros();
        h[(0, 0)] = -self.a * self.a + self.alpha.norm_squared();
        let qa = self.q * self.alpha;
        for k in 0..3 {
            h[(0, k + 1)] = qa[k];
            h[(k + 1, 0)] = qa[k];
        }
        let s = self.q * self.q.transpose();
        for j in 0..3 {
            for k in 0..3 {
                h[(j + 1, k + 1)] = s[(j, k)];
            }
        }
        h
    }
}
