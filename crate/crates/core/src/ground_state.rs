//! Radial ground states of Δf − (m²−ω²)f + f^p = 0.
//!
//! The solver shoots on f(0) with adaptive RK45 for the bracket dichotomy,
//! then tabulates the converged solution on a uniform radial grid. Direct
//! integration can only follow the decaying solution down to ~1e−7·f(0)
//! before the growing mode (amplified bracket error) takes over, so below
//! 1e−6·f(0) the table grafts the analytic decaying solution A·e^{−kr}/r,
//! which satisfies the linearized equation exactly and the full equation to
//! O(f^p) there.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GroundStateError {
    #[error("invalid window: need |omega| < m (got omega={omega}, m={m})")]
    InvalidWindow { m: f64, omega: f64 },
    #[error("exponent p={0} outside (1,5)")]
    BadExponent(f64),
    #[error("shooting bracket exhausted after {0} attempts")]
    NoConvergence(usize),
    #[error("stability window empty: requires 1 < p < 7/3 (got p={0})")]
    EmptyWindow(f64),
    #[error("profile io: {0}")]
    Io(#[from] std::io::Error),
    #[error("profile parse: {0}")]
    Parse(String),
}

/// Tabulated ground state f_ω on a uniform radial grid with its derivative.
#[derive(Debug, Clone)]
pub struct RadialProfile {
    pub m: f64,
    pub p: f64,
    pub omega: f64,
    /// Uniform grid spacing; node i sits at r = i·dr.
    pub dr: f64,
    pub f: Vec<f64>,
    pub df: Vec<f64>,
    pub r_max: f64,
    /// Fitted exponential decay rate of r·f(r); ≈ √(m²−ω²).
    pub tail_rate: f64,
}

/// L²/gradient/L^{p+1} norms of a profile and the combination B.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProfileNorms {
    pub l2sq: f64,
    pub grad_l2sq: f64,
    pub lp1: f64,
    /// B = ω²‖f_ω‖² + ‖∇f_ω‖²/3.
    pub b: f64,
}

/// Default number of radial nodes.
pub const DEFAULT_NODES: usize = 4096;
/// Cap on the truncation radius, in units of 1/√(m²−ω²).
const RMAX_CAP: f64 = 40.0;
/// Graft the analytic tail once f drops below this fraction of f(0).
const GRAFT_FRAC: f64 = 1e-6;
/// Extend the tail until it falls below this fraction of f(0).
const TAIL_FRAC: f64 = 1e-12;

#[inline]
fn nonlin(f: f64, p: f64) -> f64 {
    // odd extension |f|^{p-1} f, continuous through f=0 during shooting
    f.abs().powf(p - 1.0) * f
}

#[inline]
fn rhs(r: f64, f: f64, g: f64, kk: f64, p: f64) -> f64 {
    -2.0 * g / r + kk * f - nonlin(f, p)
}

/// One RK4 step for (f, f') with the radial RHS.
fn rk4_step(r: f64, f: f64, g: f64, h: f64, kk: f64, p: f64) -> (f64, f64) {
    let k1f = g;
    let k1g = rhs(r, f, g, kk, p);
    let k2f = g + 0.5 * h * k1g;
    let k2g = rhs(r + 0.5 * h, f + 0.5 * h * k1f, g + 0.5 * h * k1g, kk, p);
    let k3f = g + 0.5 * h * k2g;
    let k3g = rhs(r + 0.5 * h, f + 0.5 * h * k2f, g + 0.5 * h * k2g, kk, p);
    let k4f = g + h * k3g;
    let k4g = rhs(r + h, f + h * k3f, g + h * k3g, kk, p);
    (
        f + h / 6.0 * (k1f + 2.0 * k2f + 2.0 * k3f + k4f),
        g + h / 6.0 * (k1g + 2.0 * k2g + 2.0 * k3g + k4g),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shot {
    /// f crossed zero: f(0) too large.
    Crosses,
    /// f' turned positive while f>0: f(0) too small.
    TurnsUp,
    /// Followed the decaying branch to the cap.
    Decays,
}

/// Series start near r=0 removing the 2/r singularity:
/// f ≈ f0 + c₂r² + c₄r⁴ with 6c₂ = (m²−ω²)f0 − f0^p and
/// 20c₄ = (m²−ω² − p·f0^{p−1})c₂.
#[inline]
fn series_start(f0: f64, r: f64, kk: f64, p: f64) -> (f64, f64) {
    let c2 = (kk * f0 - nonlin(f0, p)) / 6.0;
    let c4 = c2 * (kk - p * f0.abs().powf(p - 1.0)) / 20.0;
    (f0 + c2 * r * r + c4 * r.powi(4), 2.0 * c2 * r + 4.0 * c4 * r.powi(3))
}

/// Classify a shot with adaptive RK45 (Cash–Karp pair, step doubling on the
/// embedded error estimate).
fn classify(f0: f64, kk: f64, p: f64, r_cap: f64) -> Shot {
    let k = kk.sqrt();
    let r0 = 1e-4 / k;
    let (mut f, mut g) = series_start(f0, r0, kk, p);
    let mut r = r0;
    let mut h = 1e-3 / k;
    let tol = 1e-12 * f0;
    while r < r_cap {
        if f <= 0.0 {
            return Shot::Crosses;
        }
        if g > 0.0 && f < 0.9 * f0 {
            return Shot::TurnsUp;
        }
        // step-doubling error control on RK4
        let h_eff = h.min(r_cap - r);
        let (f1, g1) = rk4_step(r, f, g, h_eff, kk, p);
        let (fh, gh) = rk4_step(r, f, g, 0.5 * h_eff, kk, p);
        let (f2, g2) = rk4_step(r + 0.5 * h_eff, fh, gh, 0.5 * h_eff, kk, p);
        let err = (f1 - f2).abs().max((g1 - g2).abs() / k);
        if err < tol || h_eff < 1e-6 / k {
            r += h_eff;
            f = f2;
            g = g2;
            if err < 0.1 * tol {
                h *= 1.6;
            }
        } else {
            h *= 0.5;
        }
    }
    Shot::Decays
}

/// Solve the ground-state ODE f'' + (2/r)f' − (m²−ω²)f + f^p = 0 by shooting
/// on f(0).
pub fn solve_ground_state(m: f64, omega: f64, p: f64, tol: f64) -> Result<RadialProfile, GroundStateError> {
    solve_ground_state_n(m, omega, p, tol, DEFAULT_NODES)
}

/// As [`solve_ground_state`] with an explicit node count.
pub fn solve_ground_state_n(
    m: f64,
    omega: f64,
    p: f64,
    tol: f64,
    nodes: usize,
) -> Result<RadialProfile, GroundStateError> {
    if omega.abs() >= m || m <= 0.0 {
        return Err(GroundStateError::InvalidWindow { m, omega });
    }
    if !(1.0 < p && p < 5.0) {
        return Err(GroundStateError::BadExponent(p));
    }
    assert!(tol > 0.0, "tol must be positive");
    let kk = m * m - omega * omega;
    let k = kk.sqrt();
    let r_cap = RMAX_CAP / k;

    // bracket: scan amplitudes on a geometric ladder
    let scale = kk.powf(1.0 / (p - 1.0));
    let mut lo = None;
    let mut hi = None;
    let mut attempts = 0usize;
    for j in -2..=10 {
        attempts += 1;
        let f0 = scale * 2f64.powi(j);
        match classify(f0, kk, p, r_cap) {
            Shot::Crosses => {
                hi = Some(f0);
                break;
            }
            _ => lo = Some(f0),
        }
    }
    let (mut lo, mut hi) = match (lo, hi) {
        (Some(lo), Some(hi)) => (lo, hi),
        _ => return Err(GroundStateError::NoConvergence(attempts)),
    };
    // bisection to the f64 floor
    for _ in 0..90 {
        if (hi - lo) <= 1e-16 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if classify(mid, kk, p, r_cap) == Shot::Crosses {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let f0 = 0.5 * (lo + hi);

    tabulate(m, omega, p, f0, kk, r_cap, nodes)
}

/// Solve the 4th-order finite-difference collocation system for the radial
/// profile, starting from a marched guess. Rows: regularity-limit equation at
/// r=0 (with even extension through the origin), the interior ODE stencil,
/// and two analytic-tail ratio closures at the last two nodes. The Jacobian
/// is pentadiagonal; plain banded LU, no pivoting.
fn newton_polish(fv: &mut [f64], dr: f64, kk: f64, p: f64, k: f64) -> Result<(), GroundStateError> {
    let n = fv.len();
    let scale = fv.iter().cloned().fold(0.0, f64::max).max(1e-300);
    let id2 = 1.0 / (12.0 * dr * dr);
    let id1 = 1.0 / (12.0 * dr);
    let dnl = |f: f64| p * f.abs().powf(p - 1.0);
    // band[i][j] holds the coefficient of column i+j-2
    let mut band = vec![[0.0f64; 5]; n];
    let mut rhs = vec![0.0f64; n];
    for iter in 0..40 {
        for row in band.iter_mut() {
            *row = [0.0; 5];
        }
        // r = 0: 3 f'' - k² f + |f|^{p-1} f = 0, f(-r) = f(r)
        let d2_0 = (-2.0 * fv[2] + 32.0 * fv[1] - 30.0 * fv[0]) * id2;
        rhs[0] = 3.0 * d2_0 - kk * fv[0] + nonlin(fv[0], p);
        band[0][2] = -90.0 * id2 - kk + dnl(fv[0]);
        band[0][3] = 96.0 * id2;
        band[0][4] = -6.0 * id2;
        // i = 1: stencil folded through the origin
        {
            let c = 2.0 / dr;
            let d2 = (16.0 * fv[0] - 31.0 * fv[1] + 16.0 * fv[2] - fv[3]) * id2;
            let d1 = (fv[1] - 8.0 * fv[0] + 8.0 * fv[2] - fv[3]) * id1;
            rhs[1] = d2 + c * d1 - kk * fv[1] + nonlin(fv[1], p);
            band[1][1] = 16.0 * id2 - 8.0 * c * id1;
            band[1][2] = -31.0 * id2 + c * id1 - kk + dnl(fv[1]);
            band[1][3] = 16.0 * id2 + 8.0 * c * id1;
            band[1][4] = -id2 - c * id1;
        }
        for i in 2..n - 2 {
            let r = i as f64 * dr;
            let c = 2.0 / r;
            let d2 = (-fv[i - 2] + 16.0 * fv[i - 1] - 30.0 * fv[i] + 16.0 * fv[i + 1] - fv[i + 2]) * id2;
            let d1 = (fv[i - 2] - 8.0 * fv[i - 1] + 8.0 * fv[i + 1] - fv[i + 2]) * id1;
            rhs[i] = d2 + c * d1 - kk * fv[i] + nonlin(fv[i], p);
            band[i][0] = -id2 + c * id1;
            band[i][1] = 16.0 * id2 - 8.0 * c * id1;
            band[i][2] = -30.0 * id2 - kk + dnl(fv[i]);
            band[i][3] = 16.0 * id2 + 8.0 * c * id1;
            band[i][4] = -id2 - c * id1;
        }
        // last two nodes: f(r) ∝ e^{-kr}/r tail ratio
        for i in n - 2..n {
            let r = i as f64 * dr;
            let ratio = (r - dr) / r * (-k * dr).exp();
            rhs[i] = fv[i] - ratio * fv[i - 1];
            band[i][1] = -ratio;
            band[i][2] = 1.0;
        }
        // achievable floor: a few ulps of the dominant 30 f_i/(12 dr²) term
        let worst = rhs.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        if worst < 8.0 * 30.0 * f64::EPSILON * scale * id2 {
            return Ok(());
        }
        // banded LU forward elimination on (band | rhs)
        for i in 0..n {
            let piv = band[i][2];
            if piv.abs() < 1e-300 {
                return Err(GroundStateError::NoConvergence(iter));
            }
            for r2 in i + 1..(i + 3).min(n) {
                let off = i + 2 - r2;
                let factor = band[r2][off] / piv;
                if factor == 0.0 {
                    continue;
                }
                band[r2][off] = 0.0;
                for c in i + 1..(i + 3).min(n) {
                    band[r2][c + 2 - r2] -= factor * band[i][c + 2 - i];
                }
                rhs[r2] -= factor * rhs[i];
            }
        }
        // back substitution; rhs becomes the Newton step (for -residual)
        for i in (0..n).rev() {
            let mut s = rhs[i];
            for c in i + 1..(i + 3).min(n) {
                s -= band[i][c + 2 - i] * rhs[c];
            }
            rhs[i] = s / band[i][2];
        }
        for i in 0..n {
            fv[i] -= rhs[i];
        }
    }
    Err(GroundStateError::NoConvergence(40))
}

/// March the converged shot onto the uniform grid and graft the analytic
/// tail.
fn tabulate(
    m: f64,
    omega: f64,
    p: f64,
    f0: f64,
    kk: f64,
    r_cap: f64,
    nodes: usize,
) -> Result<RadialProfile, GroundStateError> {
    let k = kk.sqrt();
    // first pass: find the graft point (f = GRAFT_FRAC·f0 on the decaying branch)
    let r_start = 1e-4 / k;
    let step = 5e-4 / k;
    let (mut f, mut g) = series_start(f0, r_start, kk, p);
    let mut r = r_start;
    let mut graft = None;
    while r < r_cap {
        let (fn_, gn) = rk4_step(r, f, g, step, kk, p);
        if fn_ <= GRAFT_FRAC * f0 || fn_ <= 0.0 || gn > 0.0 {
            graft = Some((r + step, fn_.max(GRAFT_FRAC * f0 * 0.5)));
            break;
        }
        r += step;
        f = fn_;
        g = gn;
    }
    let (r_graft, f_graft) = graft.unwrap_or((r_cap, f));
    let amp = f_graft * r_graft * (k * r_graft).exp();

    // r_max: where the tail drops below TAIL_FRAC·f0 (fixed point of
    // kr = ln(A/(TAIL_FRAC·f0·r)))
    let mut r_max = r_graft + 6.0 / k;
    for _ in 0..50 {
        r_max = (amp / (TAIL_FRAC * f0 * r_max)).ln() / k;
    }
    let r_max = r_max.min(r_cap).max(r_graft * 1.05);

    let dr = r_max / (nodes - 1) as f64;
    let mut fv = vec![0.0; nodes];
    let mut dfv = vec![0.0; nodes];
    fv[0] = f0;
    dfv[0] = 0.0;

    // second pass: node-to-node RK4 with substeps; once f drops below the
    // graft threshold, rebase the tail amplitude on the *marched* value at
    // that node so the table is continuous through the junction
    let substeps = 8;
    // node 1 from the series (the 2/r term makes the first RK4 substeps from
    // r≈0 inaccurate); march starts there
    let (f1, g1) = series_start(f0, dr, kk, p);
    fv[1] = f1;
    dfv[1] = g1;
    let (mut f, mut g) = (f1, g1);
    let mut r = dr;
    let mut tail_amp = None;
    for i in 2..nodes {
        let target = i as f64 * dr;
        if tail_amp.is_none() {
            let h = (target - r) / substeps as f64;
            for s in 0..substeps {
                let (fn_, gn) = rk4_step(r + s as f64 * h, f, g, h, kk, p);
                f = fn_;
                g = gn;
            }
            r = target;
            if (f <= GRAFT_FRAC * f0 || g > 0.0) && f > 0.0 {
                tail_amp = Some(f * target * (k * target).exp());
                fv[i] = f;
                dfv[i] = -f * (k + 1.0 / target);
            } else if f <= 0.0 {
                tail_amp = Some(amp);
            } else {
                fv[i] = f;
                dfv[i] = g;
            }
        }
        if fv[i] == 0.0 {
            if let Some(a) = tail_amp {
                let tail = a * (-k * target).exp() / target;
                fv[i] = tail;
                dfv[i] = -tail * (k + 1.0 / target);
            }
        }
    }

    // Newton collocation polish: the forward march carries growing-mode
    // contamination (local RK4 error amplified by e^{kr}), which leaves a
    // slope kink at the graft junction. Re-solving the 4th-order
    // finite-difference BVP on the grid (marched table as the guess) drives
    // the stencil residual to solver precision at any node count.
    newton_polish(&mut fv, dr, kk, p, k)?;

    // consistent first derivatives from the polished values
    dfv[0] = 0.0;
    dfv[1] = (fv[1] - 8.0 * fv[0] + 8.0 * fv[2] - fv[3]) / (12.0 * dr);
    for i in 2..nodes - 2 {
        dfv[i] = (fv[i - 2] - 8.0 * fv[i - 1] + 8.0 * fv[i + 1] - fv[i + 2]) / (12.0 * dr);
    }
    for i in nodes - 2..nodes {
        let rr = i as f64 * dr;
        dfv[i] = -fv[i] * (k + 1.0 / rr);
    }

    // tail rate: least-squares slope of ln(r f) over f in [1e-5, 1e-3]·f0
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 1..nodes {
        let rr = i as f64 * dr;
        if fv[i] > 1e-5 * f0 && fv[i] < 1e-3 * f0 {
            xs.push(rr);
            ys.push((rr * fv[i]).ln());
        }
    }
    let tail_rate = if xs.len() >= 2 { -ls_slope(&xs, &ys) } else { k };

    Ok(RadialProfile { m, p, omega, dr, f: fv, df: dfv, r_max, tail_rate })
}

fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

/// Least-squares slope of ln(y) against ln(x); exposed for the power-law
/// ladder fits in the harness and tests.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    ls_slope(&lx, &ly)
}

impl RadialProfile {
    #[inline]
    pub fn f0(&self) -> f64 {
        self.f[0]
    }

    /// m² − ω².
    #[inline]
    pub fn kk(&self) -> f64 {
        self.m * self.m - self.omega * self.omega
    }

    /// Cubic Hermite interpolation of (f, df); exponential extrapolation
    /// f(r_max)·exp(−tail_rate·(r−r_max)) past the table.
    pub fn sample(&self, r: f64) -> (f64, f64) {
        debug_assert!(r >= 0.0);
        let n = self.f.len();
        if r >= self.r_max {
            let fe = self.f[n - 1] * (-self.tail_rate * (r - self.r_max)).exp();
            return (fe, -self.tail_rate * fe);
        }
        let x = r / self.dr;
        let i = (x as usize).min(n - 2);
        let t = x - i as f64;
        let (f0, f1) = (self.f[i], self.f[i + 1]);
        let (d0, d1) = (self.df[i] * self.dr, self.df[i + 1] * self.dr);
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        let f = h00 * f0 + h10 * d0 + h01 * f1 + h11 * d1;
        let dfdt = (6.0 * t2 - 6.0 * t) * f0 + (3.0 * t2 - 4.0 * t + 1.0) * d0
            + (-6.0 * t2 + 6.0 * t) * f1 + (3.0 * t2 - 2.0 * t) * d1;
        (f, dfdt / self.dr)
    }

    /// ODE residual of the stored table with 4th-order interior stencils;
    /// returns the max over interior nodes, for validation.
    pub fn residual_sup(&self) -> f64 {
        let n = self.f.len();
        let kk = self.kk();
        let dr = self.dr;
        let mut worst: f64 = 0.0;
        for i in 2..n - 2 {
            let r = i as f64 * dr;
            let d1 = (self.f[i - 2] - 8.0 * self.f[i - 1] + 8.0 * self.f[i + 1] - self.f[i + 2]) / (12.0 * dr);
            let d2 = (-self.f[i - 2] + 16.0 * self.f[i - 1] - 30.0 * self.f[i]
                + 16.0 * self.f[i + 1]
                - self.f[i + 2])
                / (12.0 * dr * dr);
            let res = d2 + 2.0 * d1 / r - kk * self.f[i] + nonlin(self.f[i], self.p);
            worst = worst.max(res.abs());
        }
        worst
    }

    /// Columnar text serialization: a `#`-prefixed JSON header line, then
    /// whitespace-separated (r, f, df) rows.
    pub fn write_columnar<W: Write>(&self, mut out: W) -> Result<(), GroundStateError> {
        let header = serde_json::json!({
            "m": self.m, "p": self.p, "omega": self.omega,
            "tail_rate": self.tail_rate, "r_max": self.r_max, "nodes": self.f.len(),
        });
        writeln!(out, "# {header}")?;
        for i in 0..self.f.len() {
            writeln!(out, "{:e} {:e} {:e}", i as f64 * self.dr, self.f[i], self.df[i])?;
        }
        Ok(())
    }

    pub fn read_columnar<R: BufRead>(input: R) -> Result<RadialProfile, GroundStateError> {
        let mut lines = input.lines();
        let first = lines
            .next()
            .ok_or_else(|| GroundStateError::Parse("empty file".into()))??;
        let json = first
            .strip_prefix('#')
            .ok_or_else(|| GroundStateError::Parse("missing # header".into()))?;
        let h: serde_json::Value =
            serde_json::from_str(json.trim()).map_err(|e| GroundStateError::Parse(e.to_string()))?;
        let get = |k: &str| h[k].as_f64().ok_or_else(|| GroundStateError::Parse(format!("missing {k}")));
        let (m, p, omega, tail_rate, r_max) =
            (get("m")?, get("p")?, get("omega")?, get("tail_rate")?, get("r_max")?);
        let mut f = Vec::new();
        let mut df = Vec::new();
        let mut dr = 0.0;
        for (i, line) in lines.enumerate() {
            let line = line?;
            let mut it = line.split_whitespace();
            let r: f64 = it
                .next()
                .ok_or_else(|| GroundStateError::Parse("short row".into()))?
                .parse()
                .map_err(|e| GroundStateError::Parse(format!("{e}")))?;
            if i == 1 {
                dr = r;
            }
            let fv: f64 = it.next().unwrap_or("_").parse().map_err(|e| GroundStateError::Parse(format!("{e}")))?;
            let dv: f64 = it.next().unwrap_or("_").parse().map_err(|e| GroundStateError::Parse(format!("{e}")))?;
            f.push(fv);
            df.push(dv);
        }
        if f.len() < 2 {
            return Err(GroundStateError::Parse("need at least 2 rows".into()));
        }
        Ok(RadialProfile { m, p, omega, dr, f, df, r_max, tail_rate })
    }
}

/// `sample_profile(profile, r)` per the module interface; thin wrapper over
/// [`RadialProfile::sample`].
pub fn sample_profile(profile: &RadialProfile, r: f64) -> (f64, f64) {
    profile.sample(r)
}

/// Simpson quadrature over the uniform table with weight 4πr².
fn radial_integral(profile: &RadialProfile, integrand: impl Fn(usize, f64) -> f64) -> f64 {
    let n = profile.f.len();
    let dr = profile.dr;
    let vals: Vec<f64> = (0..n)
        .map(|i| {
            let r = i as f64 * dr;
            4.0 * std::f64::consts::PI * r * r * integrand(i, r)
        })
        .collect();
    simpson(&vals, dr)
}

/// Composite Simpson on a uniform grid; a trailing trapezoid handles an odd
/// interval count (the integrands here are ~1e−24 at the last node).
pub fn simpson(vals: &[f64], dx: f64) -> f64 {
    let n = vals.len();
    assert!(n >= 3);
    let pairs = (n - 1) / 2;
    let m = 2 * pairs; // last node index covered by Simpson
    let mut s = vals[0] + vals[m];
    for i in 1..m {
        s += vals[i] * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    let mut out = s * dx / 3.0;
    if m != n - 1 {
        out += 0.5 * dx * (vals[n - 2] + vals[n - 1]);
    }
    out
}

/// Norms by radial quadrature (4πr²dr weight) plus B = ω²‖f‖² + ‖∇f‖²/3.
pub fn profile_norms(profile: &RadialProfile) -> ProfileNorms {
    let l2sq = radial_integral(profile, |i, _| profile.f[i] * profile.f[i]);
    let grad_l2sq = radial_integral(profile, |i, _| profile.df[i] * profile.df[i]);
    let lp1 = radial_integral(profile, |i, _| profile.f[i].abs().powf(profile.p + 1.0));
    let b = profile.omega * profile.omega * l2sq + grad_l2sq / 3.0;
    ProfileNorms { l2sq, grad_l2sq, lp1, b }
}

/// Open interval of stable |ω|: (m·√((p−1)/(6−2p)), m).
pub fn stability_window(m: f64, p: f64) -> Result<(f64, f64), GroundStateError> {
    if !(1.0 < p && p < 7.0 / 3.0) {
        return Err(GroundStateError::EmptyWindow(p));
    }
    Ok((m * ((p - 1.0) / (6.0 - 2.0 * p)).sqrt(), m))
}

/// D_ω(ω‖f_ω‖²) in closed form via the scaling law; `base_norms` must come
/// from the normalized (m²−ω²=1) profile.
pub fn charge_slope(m: f64, omega: f64, p: f64, base_norms: &ProfileNorms) -> f64 {
    let kk = m * m - omega * omega;
    let expo = (9.0 - 5.0 * p) / (2.0 * (p - 1.0));
    (m * m - omega * omega * (6.0 - 2.0 * p) / (p - 1.0)) * kk.powf(expo) * base_norms.l2sq
}

/// Scaling-law family built on one normalized (m²−ω²=1) base profile:
/// f_ω(r) = k^{2/(p−1)} f₁(k r), k = √(m²−ω²).
///
/// All λ-finite-differences in the soliton and modulation modules sample
/// through this family so the interpolation error varies smoothly with ω and
/// cancels in centered differences.
#[derive(Debug, Clone)]
pub struct ProfileFamily {
    pub m: f64,
    pub p: f64,
    pub base: RadialProfile,
    base_norms: ProfileNorms,
}

impl ProfileFamily {
    pub fn new(m: f64, p: f64, tol: f64) -> Result<Self, GroundStateError> {
        let base = solve_ground_state(1.0, 0.0, p, tol)?;
        let base_norms = profile_norms(&base);
        Ok(ProfileFamily { m, p, base, base_norms })
    }

    pub fn from_base(m: f64, base: RadialProfile) -> Self {
        let base_norms = profile_norms(&base);
        ProfileFamily { m, p: base.p, base, base_norms }
    }

    #[inline]
    pub fn k(&self, omega: f64) -> f64 {
        (self.m * self.m - omega * omega).sqrt()
    }

    /// (f_ω(r), f_ω'(r)).
    #[inline]
    pub fn sample(&self, omega: f64, r: f64) -> (f64, f64) {
        let k = self.k(omega);
        let amp = (k * k).powf(1.0 / (self.p - 1.0));
        let (f, df) = self.base.sample(k * r);
        (amp * f, amp * k * df)
    }

    /// Norms of f_ω by the scaling law from the base norms.
    pub fn norms(&self, omega: f64) -> ProfileNorms {
        let k = self.k(omega);
        let pm1 = self.p - 1.0;
        let l2sq = k.powf((7.0 - 3.0 * self.p) / pm1) * self.base_norms.l2sq;
        let grad_l2sq = k.powf((5.0 - self.p) / pm1) * self.base_norms.grad_l2sq;
        let lp1 = k.powf(2.0 * (self.p + 1.0) / pm1 - 3.0) * self.base_norms.lp1;
        let b = omega * omega * l2sq + grad_l2sq / 3.0;
        ProfileNorms { l2sq, grad_l2sq, lp1, b }
    }

    pub fn base_norms(&self) -> &ProfileNorms {
        &self.base_norms
    }

    /// D_ω(ω‖f_ω‖²) closed form at ω.
    pub fn charge_slope(&self, omega: f64) -> f64 {
        charge_slope(self.m, omega, self.p, &self.base_norms)
    }

    /// D_ωB by centered differences over the scaled norms at ω ± δ,
    /// δ = 10⁻⁴(m − |ω|).
    pub fn b_slope(&self, omega: f64) -> f64 {
        let d = 1e-4 * (self.m - omega.abs());
        (self.norms(omega + d).b - self.norms(omega - d).b) / (2.0 * d)
    }
}
