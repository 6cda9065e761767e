//! Metric fields, Christoffel symbols, geodesics, and the Fermi chart.
//!
//! The chart construction runs in four steps: translate the geodesic to the
//! axis, reparameterize time by proper time along it (so the coordinate-time
//! curve is affine and Γ^μ_{00} vanishes on the axis too), solve the
//! coefficient ODEs for the quadratic straightening map, and finish with the
//! constant linear frame map that brings the on-axis metric to Minkowski
//! form.

use nalgebra::{Matrix3, Matrix4, Matrix4x3, Vector3, Vector4};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("metric not invertible at t={0}")]
    SingularMetric(f64),
    #[error("initial velocity is not timelike (g(V,V) = {0})")]
    NotTimelike(f64),
    #[error("trajectory left the metric's validity box at t={0}")]
    LeftDomain(f64),
    #[error("chart map fails the injectivity check down to r0={radius}")]
    NotInjective { radius: f64 },
    #[error("geodesic needs at least two samples")]
    ShortGeodesic,
    #[error("bad input: {0}")]
    BadInput(String),
}

/// Minkowski matrix m₀ = diag(−1, 1, 1, 1).
pub fn m0() -> Matrix4<f64> {
    Matrix4::from_diagonal(&Vector4::new(-1.0, 1.0, 1.0, 1.0))
}

/// A Lorentzian metric g_{μν}(t, x) with signature (−,+,+,+) whose time slices
/// satisfy the uniform bounds: spatial block positive definite and
/// −g^{00} ∈ [K₀⁻¹, K₀].
///
/// Evaluators must be pure and thread-safe.
pub trait MetricField: Sync {
    /// g_{μν} at the spacetime point (t, x¹, x², x³).
    fn g(&self, x: &[f64; 4]) -> Matrix4<f64>;

    /// ∂_α g_{μν}; the default is a 4th-order centered difference with step
    /// [`MetricField::deriv_step`].
    fn dg(&self, x: &[f64; 4]) -> [Matrix4<f64>; 4] {
        let h = self.deriv_step();
        std::array::from_fn(|al| {
            let mut p = *x;
            let at = |p: &mut [f64; 4], d: f64| {
                p[al] = x[al] + d;
                self.g(p)
            };
            (at(&mut p, -2.0 * h) - at(&mut p, 2.0 * h) + 8.0 * (at(&mut p, h) - at(&mut p, -h)))
                / (12.0 * h)
        })
    }

    /// Finite-difference step for the default `dg`, scaled to the metric's
    /// characteristic length.
    fn deriv_step(&self) -> f64 {
        1e-4
    }

    /// Validity box (lower, upper) in (t, x) coordinates.
    fn domain(&self) -> ([f64; 4], [f64; 4]) {
        ([f64::NEG_INFINITY; 4], [f64::INFINITY; 4])
    }

    /// Whether g is independent of t (lets consumers cache coefficients).
    fn is_static(&self) -> bool {
        false
    }

    /// Uniformity constant K₀: −g^{00} ∈ [K₀⁻¹, K₀] over the domain.
    fn k0(&self) -> f64 {
        2.0
    }
}

impl MetricField for Box<dyn MetricField + Send + Sync> {
    fn g(&self, x: &[f64; 4]) -> Matrix4<f64> {
        (**self).g(x)
    }
    fn dg(&self, x: &[f64; 4]) -> [Matrix4<f64>; 4] {
        (**self).dg(x)
    }
    fn deriv_step(&self) -> f64 {
        (**self).deriv_step()
    }
    fn domain(&self) -> ([f64; 4], [f64; 4]) {
        (**self).domain()
    }
    fn is_static(&self) -> bool {
        (**self).is_static()
    }
    fn k0(&self) -> f64 {
        (**self).k0()
    }
}

/// Check the (condfix)-style uniformity bounds at one point.
pub fn check_uniformity(metric: &(impl MetricField + ?Sized), x: &[f64; 4]) -> Result<(), GeometryError> {
    let g = metric.g(x);
    let ginv = g.try_inverse().ok_or(GeometryError::SingularMetric(x[0]))?;
    let k0 = metric.k0();
    let lapse = -ginv[(0, 0)];
    if !(lapse >= 1.0 / k0 && lapse <= k0) {
        return Err(GeometryError::BadInput(format!("-g^00 = {lapse} outside [1/K0, K0]")));
    }
    let spatial = g.fixed_view::<3, 3>(1, 1).into_owned();
    if Matrix3::from(spatial).cholesky().is_none() {
        return Err(GeometryError::BadInput("spatial block not positive definite".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------- catalog

/// Flat spacetime, g = m₀.
pub struct Minkowski;

impl MetricField for Minkowski {
    fn g(&self, _x: &[f64; 4]) -> Matrix4<f64> {
        m0()
    }
    fn dg(&self, _x: &[f64; 4]) -> [Matrix4<f64>; 4] {
        [Matrix4::zeros(); 4]
    }
    fn is_static(&self) -> bool {
        true
    }
    fn k0(&self) -> f64 {
        1.0
    }
}

/// Minkowski pulled back by the shear x → x − v t: constant components
/// g₀₀ = −1 + |v|², g₀ₖ = vₖ, gₖₗ = δₖₗ. Flat (Γ ≡ 0) but the frame carries a
/// drift: the coordinate-rest geodesic moves at speed |v| in the underlying
/// inertial frame.
pub struct BoostedMinkowski {
    pub v: [f64; 3],
}

impl BoostedMinkowski {
    /// Drift along the x¹ axis.
    pub fn along_x(speed: f64) -> Self {
        BoostedMinkowski { v: [speed, 0.0, 0.0] }
    }
}

impl MetricField for BoostedMinkowski {
    fn g(&self, _x: &[f64; 4]) -> Matrix4<f64> {
        let v = Vector3::from(self.v);
        let mut g = m0();
        g[(0, 0)] = -1.0 + v.norm_squared();
        for k in 0..3 {
            g[(0, k + 1)] = v[k];
            g[(k + 1, 0)] = v[k];
        }
        g
    }
    fn dg(&self, _x: &[f64; 4]) -> [Matrix4<f64>; 4] {
        [Matrix4::zeros(); 4]
    }
    fn is_static(&self) -> bool {
        true
    }
    fn k0(&self) -> f64 {
        let s = Vector3::from(self.v).norm_squared();
        (1.0 / (1.0 - s)).max(2.0)
    }
}

/// Smooth compactly supported perturbation of m₀:
/// g = m₀ + amplitude·β(|x−c|/width)·S with β the standard C^∞ bump and S a
/// fixed symmetric shape mixing all components. Time-independent.
pub struct Bump {
    pub amplitude: f64,
    pub width: f64,
    pub center: [f64; 3],
}

fn bump_shape() -> Matrix4<f64> {
    Matrix4::new(
        1.0, 0.3, 0.2, 0.1, //
        0.3, 0.8, 0.1, 0.0, //
        0.2, 0.1, 0.6, 0.05, //
        0.1, 0.0, 0.05, 0.4,
    )
}

impl Bump {
    /// β and its gradient factor: returns (β, dβ/dxᵏ as a vector).
    fn beta(&self, x: &[f64; 4]) -> (f64, [f64; 3]) {
        let d = [x[1] - self.center[0], x[2] - self.center[1], x[3] - self.center[2]];
        let ss = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) / (self.width * self.width);
        if ss >= 1.0 {
            return (0.0, [0.0; 3]);
        }
        let b = (1.0 - 1.0 / (1.0 - ss)).exp();
        let q = 1.0 - ss;
        let fac = -2.0 * b / (q * q * self.width * self.width);
        (b, [fac * d[0], fac * d[1], fac * d[2]])
    }
}

impl MetricField for Bump {
    fn g(&self, x: &[f64; 4]) -> Matrix4<f64> {
        let (b, _) = self.beta(x);
        m0() + bump_shape() * (self.amplitude * b)
    }
    fn dg(&self, x: &[f64; 4]) -> [Matrix4<f64>; 4] {
        let (_, db) = self.beta(x);
        let s = bump_shape();
        [
            Matrix4::zeros(),
            s * (self.amplitude * db[0]),
            s * (self.amplitude * db[1]),
            s * (self.amplitude * db[2]),
        ]
    }
    fn is_static(&self) -> bool {
        true
    }
    fn k0(&self) -> f64 {
        2.0
    }
}

/// Slowly varying version of a base metric: g(t, x) = base(εt, εx).
pub struct Scaled<M> {
    pub base: M,
    pub eps: f64,
}

impl<M: MetricField> MetricField for Scaled<M> {
    fn g(&self, x: &[f64; 4]) -> Matrix4<f64> {
        let y = [self.eps * x[0], self.eps * x[1], self.eps * x[2], self.eps * x[3]];
        self.base.g(&y)
    }
    fn dg(&self, x: &[f64; 4]) -> [Matrix4<f64>; 4] {
        let y = [self.eps * x[0], self.eps * x[1], self.eps * x[2], self.eps * x[3]];
        let d = self.base.dg(&y);
        std::array::from_fn(|al| d[al] * self.eps)
    }
    fn deriv_step(&self) -> f64 {
        self.base.deriv_step() / self.eps
    }
    fn domain(&self) -> ([f64; 4], [f64; 4]) {
        let (lo, hi) = self.base.domain();
        (lo.map(|v| v / self.eps), hi.map(|v| v / self.eps))
    }
    fn is_static(&self) -> bool {
        self.base.is_static()
    }
    fn k0(&self) -> f64 {
        self.base.k0()
    }
}

// ----------------------------------------------------------- christoffel

/// Γ^α_{μν} = ½ g^{αβ}(∂_μ g_{βν} + ∂_ν g_{βμ} − ∂_β g_{μν}), returned as one
/// symmetric 4×4 matrix per upper index α.
pub fn christoffel(
    metric: &(impl MetricField + ?Sized),
    x: &[f64; 4],
) -> Result<[Matrix4<f64>; 4], GeometryError> {
    let g = metric.g(x);
    let ginv = g.try_inverse().ok_or(GeometryError::SingularMetric(x[0]))?;
    let dg = metric.dg(x);
    let mut out = [Matrix4::zeros(); 4];
    for al in 0..4 {
        for mu in 0..4 {
            for nu in mu..4 {
                let mut s = 0.0;
                for be in 0..4 {
                    s += ginv[(al, be)] * (dg[mu][(be, nu)] + dg[nu][(be, mu)] - dg[be][(mu, nu)]);
                }
                out[al][(mu, nu)] = 0.5 * s;
                out[al][(nu, mu)] = 0.5 * s;
            }
        }
    }
    Ok(out)
}

// -------------------------------------------------------------- geodesic

/// One geodesic sample in coordinate time, with enough jet data for quintic
/// Hermite interpolation and for the proper-time reparameterization.
#[derive(Debug, Clone, Copy)]
pub struct GeodesicSample {
    pub t: f64,
    pub x: [f64; 3],
    pub v: [f64; 3],
    pub acc: [f64; 3],
    /// Proper time along the curve, zero at the first sample.
    pub tau: f64,
    /// dτ/dt = √(−g(V,V)), V = (1, v).
    pub lapse: f64,
}

#[derive(Debug, Clone)]
pub struct Geodesic {
    pub samples: Vec<GeodesicSample>,
    pub dt: f64,
}

fn geo_acc(metric: &(impl MetricField + ?Sized), t: f64, x: &[f64; 3], v: &[f64; 3]) -> Result<[f64; 3], GeometryError> {
    let gamma = christoffel(metric, &[t, x[0], x[1], x[2]])?;
    let vv = Vector4::new(1.0, v[0], v[1], v[2]);
    let c0 = (vv.transpose() * gamma[0] * vv)[0];
    let mut a = [0.0; 3];
    for k in 0..3 {
        let ck = (vv.transpose() * gamma[k + 1] * vv)[0];
        a[k] = -(ck - v[k] * c0);
    }
    Ok(a)
}

fn lapse_of(metric: &(impl MetricField + ?Sized), t: f64, x: &[f64; 3], v: &[f64; 3]) -> Result<f64, GeometryError> {
    let g = metric.g(&[t, x[0], x[1], x[2]]);
    let vv = Vector4::new(1.0, v[0], v[1], v[2]);
    let q = (vv.transpose() * g * vv)[0];
    if q >= 0.0 {
        return Err(GeometryError::NotTimelike(q));
    }
    Ok((-q).sqrt())
}

/// Integrate ẍ^k = −(Γ^k_{μν} − ẋ^k Γ^0_{μν}) V^μ V^ν, V = (1, ẋ), by RK4 in
/// coordinate time from x0 = (t₀, position) with initial 4-velocity direction
/// v0 (only the direction matters; v0⁰ must be nonzero). Proper time is
/// co-integrated.
pub fn integrate_geodesic(
    metric: &(impl MetricField + ?Sized),
    x0: &[f64; 4],
    v0: &[f64; 4],
    t_end: f64,
    dt: f64,
) -> Result<Geodesic, GeometryError> {
    if dt <= 0.0 || t_end <= x0[0] {
        return Err(GeometryError::BadInput("need dt > 0 and t_end > t0".into()));
    }
    if v0[0] == 0.0 {
        return Err(GeometryError::BadInput("v0 must have a time component".into()));
    }
    let nsteps = ((t_end - x0[0]) / dt).ceil() as usize;
    let dt = (t_end - x0[0]) / nsteps as f64;
    let (lo, hi) = metric.domain();
    let inside = |t: f64, x: &[f64; 3]| {
        t >= lo[0] && t <= hi[0] && (0..3).all(|k| x[k] >= lo[k + 1] && x[k] <= hi[k + 1])
    };

    let mut t = x0[0];
    let mut x = [x0[1], x0[2], x0[3]];
    let mut v = [v0[1] / v0[0], v0[2] / v0[0], v0[3] / v0[0]];
    let mut tau = 0.0;
    let mut samples = Vec::with_capacity(nsteps + 1);
    for _ in 0..=nsteps {
        if !inside(t, &x) {
            return Err(GeometryError::LeftDomain(t));
        }
        let acc = geo_acc(metric, t, &x, &v)?;
        let lapse = lapse_of(metric, t, &x, &v)?;
        samples.push(GeodesicSample { t, x, v, acc, tau, lapse });

        // RK4 on (x, v, τ)
        let f = |t: f64, x: &[f64; 3], v: &[f64; 3]| -> Result<([f64; 3], [f64; 3], f64), GeometryError> {
            Ok((*v, geo_acc(metric, t, x, v)?, lapse_of(metric, t, x, v)?))
        };
        let add = |x: &[f64; 3], d: &[f64; 3], s: f64| [x[0] + s * d[0], x[1] + s * d[1], x[2] + s * d[2]];
        let k1 = f(t, &x, &v)?;
        let k2 = f(t + 0.5 * dt, &add(&x, &k1.0, 0.5 * dt), &add(&v, &k1.1, 0.5 * dt))?;
        let k3 = f(t + 0.5 * dt, &add(&x, &k2.0, 0.5 * dt), &add(&v, &k2.1, 0.5 * dt))?;
        let k4 = f(t + dt, &add(&x, &k3.0, dt), &add(&v, &k3.1, dt))?;
        for k in 0..3 {
            x[k] += dt / 6.0 * (k1.0[k] + 2.0 * k2.0[k] + 2.0 * k3.0[k] + k4.0[k]);
            v[k] += dt / 6.0 * (k1.1[k] + 2.0 * k2.1[k] + 2.0 * k3.1[k] + k4.1[k]);
        }
        tau += dt / 6.0 * (k1.2 + 2.0 * k2.2 + 2.0 * k3.2 + k4.2);
        t += dt;
    }
    Ok(Geodesic { samples, dt })
}

/// Quintic Hermite basis on [0,1]: value weights for (y0, y1, d0, d1, a0, a1)
/// with derivative steps already scaled by the segment length.
fn quintic(th: f64) -> [f64; 6] {
    let t2 = th * th;
    let t3 = t2 * th;
    let t4 = t3 * th;
    let t5 = t4 * th;
    [
        1.0 - 10.0 * t3 + 15.0 * t4 - 6.0 * t5,
        10.0 * t3 - 15.0 * t4 + 6.0 * t5,
        th - 6.0 * t3 + 8.0 * t4 - 3.0 * t5,
        -4.0 * t3 + 7.0 * t4 - 3.0 * t5,
        0.5 * t2 - 1.5 * t3 + 1.5 * t4 - 0.5 * t5,
        0.5 * t3 - t4 + 0.5 * t5,
    ]
}

fn quintic_d(th: f64) -> [f64; 6] {
    let t2 = th * th;
    let t3 = t2 * th;
    let t4 = t3 * th;
    [
        -30.0 * t2 + 60.0 * t3 - 30.0 * t4,
        30.0 * t2 - 60.0 * t3 + 30.0 * t4,
        1.0 - 18.0 * t2 + 32.0 * t3 - 15.0 * t4,
        -12.0 * t2 + 28.0 * t3 - 15.0 * t4,
        th - 4.5 * t2 + 6.0 * t3 - 2.5 * t4,
        1.5 * t2 - 4.0 * t3 + 2.5 * t4,
    ]
}

impl Geodesic {
    pub fn t_range(&self) -> (f64, f64) {
        (self.samples[0].t, self.samples[self.samples.len() - 1].t)
    }

    fn segment(&self, t: f64) -> (usize, f64) {
        let n = self.samples.len();
        let s = (t - self.samples[0].t) / self.dt;
        let i = (s.floor() as isize).clamp(0, n as isize - 2) as usize;
        (i, s - i as f64)
    }

    /// Quintic Hermite position and velocity at coordinate time t.
    pub fn eval(&self, t: f64) -> ([f64; 3], [f64; 3]) {
        let (i, th) = self.segment(t);
        let (s0, s1) = (&self.samples[i], &self.samples[i + 1]);
        let w = quintic(th);
        let wd = quintic_d(th);
        let h = self.dt;
        let mut x = [0.0; 3];
        let mut v = [0.0; 3];
        for k in 0..3 {
            let vals = [s0.x[k], s1.x[k], h * s0.v[k], h * s1.v[k], h * h * s0.acc[k], h * h * s1.acc[k]];
            x[k] = (0..6).map(|j| w[j] * vals[j]).sum();
            v[k] = (0..6).map(|j| wd[j] * vals[j]).sum::<f64>() / h;
        }
        (x, v)
    }

    /// Proper time τ(t), cubic Hermite on (τ, lapse).
    pub fn tau_of(&self, t: f64) -> f64 {
        let (i, th) = self.segment(t);
        let (s0, s1) = (&self.samples[i], &self.samples[i + 1]);
        cubic_hermite(s0.tau, s1.tau, self.dt * s0.lapse, self.dt * s1.lapse, th).0
    }

    /// Inverse of τ(t) by Newton (τ is strictly increasing).
    pub fn t_of_tau(&self, tau: f64) -> f64 {
        let (t0, t1) = self.t_range();
        let mut t = t0 + (tau - self.samples[0].tau) / self.samples[0].lapse;
        for _ in 0..40 {
            let (i, th) = self.segment(t.clamp(t0, t1));
            let (s0, s1) = (&self.samples[i], &self.samples[i + 1]);
            let (val, dv) = cubic_hermite(s0.tau, s1.tau, self.dt * s0.lapse, self.dt * s1.lapse, th);
            let step = (val - tau) / (dv / self.dt);
            t -= step;
            if step.abs() < 1e-14 * (1.0 + t.abs()) {
                break;
            }
        }
        t
    }
}

/// Cubic Hermite value and d/dθ on [0,1]; derivative inputs pre-scaled by the
/// segment length.
fn cubic_hermite(y0: f64, y1: f64, d0: f64, d1: f64, th: f64) -> (f64, f64) {
    let t2 = th * th;
    let t3 = t2 * th;
    let v = (2.0 * t3 - 3.0 * t2 + 1.0) * y0
        + (-2.0 * t3 + 3.0 * t2) * y1
        + (t3 - 2.0 * t2 + th) * d0
        + (t3 - t2) * d1;
    let d = (6.0 * t2 - 6.0 * th) * y0
        + (-6.0 * t2 + 6.0 * th) * y1
        + (3.0 * t2 - 4.0 * th + 1.0) * d0
        + (3.0 * t2 - 2.0 * th) * d1;
    (v, d)
}

// ------------------------------------------------------------ fermi chart

/// C³ cutoff: 1 on r ≤ r0, 0 on r ≥ 2r0, degree-7 smootherstep between.
/// Returns (χ, dχ/dr).
pub fn cutoff_chi(r: f64, r0: f64) -> (f64, f64) {
    if r <= r0 {
        (1.0, 0.0)
    } else if r >= 2.0 * r0 {
        (0.0, 0.0)
    } else {
        let s = (r - r0) / r0;
        let s3 = s * s * s;
        let s4 = s3 * s;
        let step = 35.0 * s4 - 84.0 * s4 * s + 70.0 * s4 * s * s - 20.0 * s4 * s3;
        let dstep = (140.0 * s3 - 420.0 * s4 + 420.0 * s4 * s - 140.0 * s3 * s3) / r0;
        (1.0 - step, -dstep)
    }
}

/// Geodesic frame tables resampled uniformly in proper time τ.
struct TauFrame {
    tau0: f64,
    dtau: f64,
    /// T(τ) and T'(τ) = 1/lapse.
    tt: Vec<f64>,
    tprime: Vec<f64>,
    /// γ₀(T(τ)) and dγ₀/dτ.
    gam: Vec<[f64; 3]>,
    dgam: Vec<[f64; 3]>,
}

impl TauFrame {
    fn len(&self) -> usize {
        self.tt.len()
    }

    fn segment(&self, tau: f64) -> (usize, f64) {
        let s = (tau - self.tau0) / self.dtau;
        let i = (s.floor() as isize).clamp(0, self.len() as isize - 2) as usize;
        (i, s - i as f64)
    }

    /// (T, T', γ₀, dγ₀/dτ) at τ.
    fn eval(&self, tau: f64) -> (f64, f64, [f64; 3], [f64; 3]) {
        let (i, th) = self.segment(tau);
        let h = self.dtau;
        let (t, dt) = cubic_hermite(self.tt[i], self.tt[i + 1], h * self.tprime[i], h * self.tprime[i + 1], th);
        let mut g = [0.0; 3];
        let mut dg = [0.0; 3];
        for k in 0..3 {
            // derivative of dγ/dτ along the table is not stored; use the
            // secant for the Hermite slopes of dgam (it only enters Jacobians)
            let (v, dv) = cubic_hermite(self.gam[i][k], self.gam[i + 1][k], h * self.dgam[i][k], h * self.dgam[i + 1][k], th);
            g[k] = v;
            dg[k] = dv / h;
        }
        (t, dt / h, g, dg)
    }
}

/// Stage-1+1.5 view: the base metric in translated, proper-time-parameterized
/// coordinates (τ, x̄), x = x̄ + γ₀(T(τ)), t = T(τ).
struct Stage1Metric<'a> {
    base: &'a dyn MetricField,
    frame: &'a TauFrame,
}

impl Stage1Metric<'_> {
    fn jac(&self, tau: f64) -> (Matrix4<f64>, f64, [f64; 3]) {
        let (t, tp, gam, dgam) = self.frame.eval(tau);
        let mut j = Matrix4::identity();
        j[(0, 0)] = tp;
        for k in 0..3 {
            j[(k + 1, 0)] = dgam[k];
        }
        (j, t, gam)
    }
}

impl MetricField for Stage1Metric<'_> {
    fn g(&self, x: &[f64; 4]) -> Matrix4<f64> {
        let (j, t, gam) = self.jac(x[0]);
        let p = [t, x[1] + gam[0], x[2] + gam[1], x[3] + gam[2]];
        j.transpose() * self.base.g(&p) * j
    }
    fn deriv_step(&self) -> f64 {
        self.base.deriv_step().min(1e-4)
    }
}

/// Report from [`verify_chart`].
#[derive(Debug, Clone, Copy)]
pub struct ChartReport {
    /// max |Γ^α_{μν}| along (s, u₀s).
    pub max_gamma: f64,
    /// max |g_{μν} − (m₀)_{μν}| along (s, u₀s).
    pub max_metric_dev: f64,
    /// max of g(X,X), X = ∂_s + u₀·∂_y, over the radius-2r0 tube.
    pub tube_xx_max: f64,
    /// Timelike margin K: g(X,X) ≤ −K on the tube.
    pub margin: f64,
    pub s_range: (f64, f64),
}

/// Fermi chart of Lemma-style construction around a timelike geodesic.
///
/// Chart coordinates are (s, y); the image geodesic is (s, u₀s), the metric
/// equals m₀ and all Christoffel symbols vanish along it (up to the numerical
/// tolerances reported by [`verify_chart`]).
pub struct FermiChart<'a> {
    base: &'a dyn MetricField,
    frame: TauFrame,
    /// a_k^μ(τ): column k = 1..3, row μ = 0..3; plus its τ-derivative.
    a_tab: Vec<Matrix4x3<f64>>,
    adot_tab: Vec<Matrix4x3<f64>>,
    /// b^μ_{kl}(τ), one symmetric 3×3 per μ; plus τ-derivatives.
    b_tab: Vec<[Matrix3<f64>; 4]>,
    bdot_tab: Vec<[Matrix3<f64>; 4]>,
    /// Stage-3 linear map z = B w (w = stage-2 coordinates) and its inverse.
    b_mat: Matrix4<f64>,
    b_inv: Matrix4<f64>,
    pub u0: [f64; 3],
    pub r0: f64,
    pub delta1: f64,
    /// s = sqrt_c · τ on the axis.
    pub sqrt_c: f64,
}

fn interp_mat43(tab: &[Matrix4x3<f64>], dot: &[Matrix4x3<f64>], frame: &TauFrame, tau: f64) -> (Matrix4x3<f64>, Matrix4x3<f64>) {
    let (i, th) = frame.segment(tau);
    let h = frame.dtau;
    let mut v = Matrix4x3::zeros();
    let mut dv = Matrix4x3::zeros();
    for r in 0..4 {
        for c in 0..3 {
            let (a, da) = cubic_hermite(tab[i][(r, c)], tab[i + 1][(r, c)], h * dot[i][(r, c)], h * dot[i + 1][(r, c)], th);
            v[(r, c)] = a;
            dv[(r, c)] = da / h;
        }
    }
    (v, dv)
}

fn interp_b(tab: &[[Matrix3<f64>; 4]], dot: &[[Matrix3<f64>; 4]], frame: &TauFrame, tau: f64) -> ([Matrix3<f64>; 4], [Matrix3<f64>; 4]) {
    let (i, th) = frame.segment(tau);
    let h = frame.dtau;
    let mut v = [Matrix3::zeros(); 4];
    let mut dv = [Matrix3::zeros(); 4];
    for mu in 0..4 {
        for r in 0..3 {
            for c in 0..3 {
                let (a, da) =
                    cubic_hermite(tab[i][mu][(r, c)], tab[i + 1][mu][(r, c)], h * dot[i][mu][(r, c)], h * dot[i + 1][mu][(r, c)], th);
                v[mu][(r, c)] = a;
                dv[mu][(r, c)] = da / h;
            }
        }
    }
    (v, dv)
}

/// Build the Fermi chart around a previously integrated geodesic. r0 is the
/// straightening cutoff radius (halved up to 5 times if the injectivity check
/// fails); delta1 trims the usable time range at both ends.
pub fn build_fermi_chart<'a>(
    metric: &'a (dyn MetricField + 'a),
    geodesic: &Geodesic,
    r0: f64,
    delta1: f64,
) -> Result<FermiChart<'a>, GeometryError> {
    if geodesic.samples.len() < 2 {
        return Err(GeometryError::ShortGeodesic);
    }
    if r0 <= 0.0 || delta1 <= 0.0 {
        return Err(GeometryError::BadInput("need r0, delta1 > 0".into()));
    }

    // resample the frame uniformly in proper time
    let n = geodesic.samples.len().max(16);
    let tau_end = geodesic.samples.last().unwrap().tau;
    let dtau = tau_end / (n - 1) as f64;
    let mut frame = TauFrame { tau0: 0.0, dtau, tt: Vec::with_capacity(n), tprime: Vec::with_capacity(n), gam: Vec::with_capacity(n), dgam: Vec::with_capacity(n) };
    for i in 0..n {
        let tau = i as f64 * dtau;
        let t = geodesic.t_of_tau(tau);
        let (x, v) = geodesic.eval(t);
        let lapse = lapse_of(metric, t, &x, &v)?;
        frame.tt.push(t);
        frame.tprime.push(1.0 / lapse);
        frame.gam.push(x);
        frame.dgam.push([v[0] / lapse, v[1] / lapse, v[2] / lapse]);
    }

    // stage 2: coefficient ODE d a/dτ = C(τ) + a·D(τ) with C^μ_k = Γ̄^μ_{0k}(τ,0),
    // D = spatial block of C; b^μ_{kl} = Γ̄^μ_{kl} + a^μ_j Γ̄^j_{kl}
    let stage1 = Stage1Metric { base: metric, frame: &frame };
    let gammas_at = |tau: f64| -> Result<[Matrix4<f64>; 4], GeometryError> { christoffel(&stage1, &[tau, 0.0, 0.0, 0.0]) };
    let rhs = |a: &Matrix4x3<f64>, gam: &[Matrix4<f64>; 4]| -> Matrix4x3<f64> {
        let mut c = Matrix4x3::zeros();
        let mut d = Matrix3::zeros();
        for mu in 0..4 {
            for k in 0..3 {
                c[(mu, k)] = gam[mu][(0, k + 1)];
            }
        }
        for j in 0..3 {
            for k in 0..3 {
                d[(j, k)] = gam[j + 1][(0, k + 1)];
            }
        }
        c + a * d
    };
    let b_of = |a: &Matrix4x3<f64>, gam: &[Matrix4<f64>; 4]| -> [Matrix3<f64>; 4] {
        std::array::from_fn(|mu| {
            let mut b = gam[mu].fixed_view::<3, 3>(1, 1).into_owned();
            for j in 0..3 {
                b += a[(mu, j)] * gam[j + 1].fixed_view::<3, 3>(1, 1);
            }
            b
        })
    };

    let mut a_tab = Vec::with_capacity(n);
    let mut adot_tab = Vec::with_capacity(n);
    let mut b_tab = Vec::with_capacity(n);
    let mut a = Matrix4x3::zeros();
    // Christoffels at nodes and half nodes for the RK4 sweep
    let mut g_node = gammas_at(0.0)?;
    for i in 0..n {
        let tau = i as f64 * dtau;
        a_tab.push(a);
        adot_tab.push(rhs(&a, &g_node));
        b_tab.push(b_of(&a, &g_node));
        if i + 1 < n {
            let g_half = gammas_at(tau + 0.5 * dtau)?;
            let g_next = gammas_at(tau + dtau)?;
            let k1 = rhs(&a, &g_node);
            let k2 = rhs(&(a + k1 * (0.5 * dtau)), &g_half);
            let k3 = rhs(&(a + k2 * (0.5 * dtau)), &g_half);
            let k4 = rhs(&(a + k3 * dtau), &g_next);
            a += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dtau / 6.0);
            g_node = g_next;
        }
    }
    // ḃ by 4th-order differences on the table
    let bdot_tab: Vec<[Matrix3<f64>; 4]> = (0..n)
        .map(|i| {
            std::array::from_fn(|mu| {
                let at = |j: isize| b_tab[(j.clamp(0, n as isize - 1)) as usize][mu];
                if i >= 2 && i + 2 < n {
                    (at(i as isize - 2) - at(i as isize + 2) + (at(i as isize + 1) - at(i as isize - 1)) * 8.0) / (12.0 * dtau)
                } else if i + 1 < n && i >= 1 {
                    (at(i as isize + 1) - at(i as isize - 1)) / (2.0 * dtau)
                } else if i == 0 {
                    (at(1) - at(0)) / dtau
                } else {
                    (at(i as isize) - at(i as isize - 1)) / dtau
                }
            })
        })
        .collect();

    // stage 3 from h(0,0) in stage-2 coordinates (the stage-2 Jacobian is the
    // identity at the chart origin since a(0) = 0)
    let h00 = stage1.g(&[0.0, 0.0, 0.0, 0.0]);
    let aa = -h00[(0, 0)];
    let alpha = Vector3::new(h00[(0, 1)], h00[(0, 2)], h00[(0, 3)]);
    let p = h00.fixed_view::<3, 3>(1, 1).into_owned();
    let chol = p.cholesky().ok_or_else(|| GeometryError::BadInput("spatial block not positive definite".into()))?;
    let l = chol.l();
    let pinv_alpha = chol.solve(&alpha);
    let c = aa + alpha.dot(&pinv_alpha);
    if c <= 0.0 {
        return Err(GeometryError::NotTimelike(-c));
    }
    let sqrt_c = c.sqrt();
    // with Q = L⁻¹: spatial block Q⁻ᵀ = Lᵀ and w = Q⁻ᵀP⁻¹α = L⁻¹α
    let w = l
        .solve_lower_triangular(&alpha)
        .ok_or(GeometryError::SingularMetric(0.0))?;
    let lt = l.transpose();
    let mut b_mat = Matrix4::zeros();
    b_mat[(0, 0)] = sqrt_c;
    for r in 0..3 {
        b_mat[(r + 1, 0)] = w[r];
        for cidx in 0..3 {
            b_mat[(r + 1, cidx + 1)] = lt[(r, cidx)];
        }
    }
    let b_inv = b_mat.try_inverse().ok_or(GeometryError::SingularMetric(0.0))?;
    let u0v = w / sqrt_c;

    let mut chart = FermiChart {
        base: metric,
        frame,
        a_tab,
        adot_tab,
        b_tab,
        bdot_tab,
        b_mat,
        b_inv,
        u0: [u0v[0], u0v[1], u0v[2]],
        r0,
        delta1,
        sqrt_c,
    };

    // injectivity: sample det of the stage-2 Jacobian over the deformation
    // region; halve r0 (χ only — the coefficient tables do not depend on it)
    for _ in 0..=5 {
        if chart.injective() {
            return Ok(chart);
        }
        chart.r0 *= 0.5;
    }
    Err(GeometryError::NotInjective { radius: chart.r0 })
}

impl FermiChart<'_> {
    /// Usable chart time range [s_lo, s_hi] (delta1 trimmed at the far end).
    pub fn s_range(&self) -> (f64, f64) {
        let tau_end = self.frame.tau0 + self.frame.dtau * (self.frame.len() - 1) as f64;
        (0.0, self.sqrt_c * (tau_end - self.delta1).max(0.0))
    }

    /// Stage-2 forward map w = (τ, x̄) ↦ x̃.
    fn stage2(&self, w: &Vector4<f64>) -> Vector4<f64> {
        let (a, _) = interp_mat43(&self.a_tab, &self.adot_tab, &self.frame, w[0]);
        let (b, _) = interp_b(&self.b_tab, &self.bdot_tab, &self.frame, w[0]);
        let x = Vector3::new(w[1], w[2], w[3]);
        let (chi, _) = cutoff_chi(x.norm(), self.r0);
        let mut out = *w;
        for mu in 0..4 {
            let mut add = 0.0;
            for k in 0..3 {
                add += a[(mu, k)] * x[k];
            }
            add += 0.5 * (x.transpose() * b[mu] * x)[0];
            out[mu] += add * chi;
        }
        out
    }

    /// Analytic Jacobian ∂x̃/∂w of the stage-2 map.
    fn stage2_jac(&self, w: &Vector4<f64>) -> Matrix4<f64> {
        let (a, adot) = interp_mat43(&self.a_tab, &self.adot_tab, &self.frame, w[0]);
        let (b, bdot) = interp_b(&self.b_tab, &self.bdot_tab, &self.frame, w[0]);
        let x = Vector3::new(w[1], w[2], w[3]);
        let r = x.norm();
        let (chi, dchi) = cutoff_chi(r, self.r0);
        let mut j = Matrix4::identity();
        for mu in 0..4 {
            let lin: f64 = (0..3).map(|k| a[(mu, k)] * x[k]).sum();
            let quad = 0.5 * (x.transpose() * b[mu] * x)[0];
            let lin_dot: f64 = (0..3).map(|k| adot[(mu, k)] * x[k]).sum();
            let quad_dot = 0.5 * (x.transpose() * bdot[mu] * x)[0];
            j[(mu, 0)] += (lin_dot + quad_dot) * chi;
            let grad_quad = b[mu] * x;
            for kk in 0..3 {
                let dchi_k = if r > 0.0 { dchi * x[kk] / r } else { 0.0 };
                j[(mu, kk + 1)] += (a[(mu, kk)] + grad_quad[kk]) * chi + (lin + quad) * dchi_k;
            }
        }
        j
    }

    /// Invert the stage-2 map by damped Newton; the map is near-identity on
    /// the chart box.
    fn stage2_inv(&self, target: &Vector4<f64>) -> Vector4<f64> {
        let mut w = *target;
        let mut best = w;
        let mut best_res = f64::INFINITY;
        for _ in 0..60 {
            let res = self.stage2(&w) - target;
            let rn = res.norm();
            if rn < best_res {
                best_res = rn;
                best = w;
            }
            if rn < 1e-13 * (1.0 + target.norm()) {
                return w;
            }
            let j = self.stage2_jac(&w);
            let Some(step) = j.lu().solve(&res) else { break };
            let mut s = 1.0;
            // damp if the residual refuses to drop
            for _ in 0..8 {
                let trial = w - step * s;
                if (self.stage2(&trial) - target).norm() < rn {
                    w = trial;
                    break;
                }
                s *= 0.5;
                if s < 1e-3 {
                    w -= step * s;
                    break;
                }
            }
        }
        best
    }

    /// Chart → original coordinates.
    pub fn inverse_transform(&self, z: &[f64; 4]) -> [f64; 4] {
        let w = self.stage2_inv(&(self.b_inv * Vector4::from(*z)));
        let (t, _, gam, _) = self.frame.eval(w[0]);
        [t, w[1] + gam[0], w[2] + gam[1], w[3] + gam[2]]
    }

    /// Original → chart coordinates.
    pub fn transform(&self, x: &[f64; 4]) -> [f64; 4] {
        // invert T(τ) by Newton
        let mut tau = (x[0] - self.frame.tt[0]) / self.frame.tprime[0].max(1e-12);
        for _ in 0..40 {
            let (t, tp, _, _) = self.frame.eval(tau);
            let step = (t - x[0]) / tp;
            tau -= step;
            if step.abs() < 1e-14 * (1.0 + tau.abs()) {
                break;
            }
        }
        let (_, _, gam, _) = self.frame.eval(tau);
        let w = Vector4::new(tau, x[1] - gam[0], x[2] - gam[1], x[3] - gam[2]);
        let z = self.b_mat * self.stage2(&w);
        [z[0], z[1], z[2], z[3]]
    }

    fn injective(&self) -> bool {
        let n = self.frame.len();
        for i in 0..n {
            let tau = self.frame.tau0 + i as f64 * self.frame.dtau;
            for ix in -3..=3i32 {
                for iy in -3..=3i32 {
                    for iz in -3..=3i32 {
                        let x = Vector3::new(ix as f64, iy as f64, iz as f64) * (self.r0 * 0.7);
                        if x.norm() > 2.2 * self.r0 {
                            continue;
                        }
                        let w = Vector4::new(tau, x[0], x[1], x[2]);
                        let det = self.stage2_jac(&w).determinant();
                        if !(det > 0.2) {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }

    /// Export the coefficient tables as columnar text:
    /// τ, a_k^μ (12 columns, μ-major), b^μ_{kl} (24 columns, upper triangle).
    pub fn write_tables<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# fermi chart tables: tau a[mu][k] b[mu][k<=l]; r0={} u0={:?} sqrt_c={}", self.r0, self.u0, self.sqrt_c)?;
        for i in 0..self.frame.len() {
            let tau = self.frame.tau0 + i as f64 * self.frame.dtau;
            write!(out, "{tau:e}")?;
            for mu in 0..4 {
                for k in 0..3 {
                    write!(out, " {:e}", self.a_tab[i][(mu, k)])?;
                }
            }
            for mu in 0..4 {
                for k in 0..3 {
                    for l in k..3 {
                        write!(out, " {:e}", self.b_tab[i][mu][(k, l)])?;
                    }
                }
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

impl MetricField for FermiChart<'_> {
    fn g(&self, z: &[f64; 4]) -> Matrix4<f64> {
        let w = self.stage2_inv(&(self.b_inv * Vector4::from(*z)));
        let (t, tp, gam, dgam) = self.frame.eval(w[0]);
        let p = [t, w[1] + gam[0], w[2] + gam[1], w[3] + gam[2]];
        // J = ∂x/∂z = J_stage1 · (∂x̃/∂w)⁻¹ · B⁻¹
        let mut j1 = Matrix4::identity();
        j1[(0, 0)] = tp;
        for k in 0..3 {
            j1[(k + 1, 0)] = dgam[k];
        }
        let j2inv = self.stage2_jac(&w).try_inverse().unwrap_or_else(Matrix4::identity);
        let j = j1 * j2inv * self.b_inv;
        j.transpose() * self.base.g(&p) * j
    }

    fn deriv_step(&self) -> f64 {
        1e-3
    }

    fn domain(&self) -> ([f64; 4], [f64; 4]) {
        let (lo, hi) = self.s_range();
        ([lo, f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY], [hi, f64::INFINITY, f64::INFINITY, f64::INFINITY])
    }

    fn k0(&self) -> f64 {
        self.base.k0()
    }
}

/// Sample Γ and g − m₀ along the image geodesic (s, u₀s) and g(X,X) on the
/// radius-2r0 tube around it.
pub fn verify_chart(
    chart: &FermiChart<'_>,
    n_samples: usize,
) -> Result<ChartReport, GeometryError> {
    let (s_lo, s_hi) = chart.s_range();
    // keep FD stencils of the christoffel evaluation inside the table range
    let pad = 4.0 * chart.deriv_step();
    let (a, b) = (s_lo + pad, s_hi - pad);
    let n = n_samples.max(2);
    let mut max_gamma: f64 = 0.0;
    let mut max_dev: f64 = 0.0;
    let mut tube_max = f64::NEG_INFINITY;
    let xx = Vector4::new(1.0, chart.u0[0], chart.u0[1], chart.u0[2]);
    let offsets: [[f64; 3]; 7] = [
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0],
    ];
    for i in 0..n {
        let s = a + (b - a) * i as f64 / (n - 1) as f64;
        let z = [s, chart.u0[0] * s, chart.u0[1] * s, chart.u0[2] * s];
        let gam = christoffel(chart, &z)?;
        for al in 0..4 {
            max_gamma = max_gamma.max(gam[al].abs().max());
        }
        max_dev = max_dev.max((chart.g(&z) - m0()).abs().max());
        for off in &offsets {
            let zt = [z[0], z[1] + 2.0 * chart.r0 * off[0], z[2] + 2.0 * chart.r0 * off[1], z[3] + 2.0 * chart.r0 * off[2]];
            let q = (xx.transpose() * chart.g(&zt) * xx)[0];
            tube_max = tube_max.max(q);
        }
    }
    Ok(ChartReport { max_gamma, max_metric_dev: max_dev, tube_xx_max: tube_max, margin: -tube_max, s_range: (a, b) })
}
