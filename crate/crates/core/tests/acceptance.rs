//! End-to-end acceptance suite. Each criterion prints one pass/fail line;
//! the test fails if any criterion fails.

use std::time::Instant;

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use solwave::evolution::{
    charge_q, energy_h, hardy_ratio, momentum_pi, radiation_energy_e0, Coeffs, Evolver, KgConfig,
    WeightConstants, Weights,
};
use solwave::geometry::{
    build_fermi_chart, integrate_geodesic, verify_chart, Bump, MetricField, Minkowski, Scaled,
};
use solwave::grid::{FieldState, GridSpec};
use solwave::ground_state::{
    loglog_slope, profile_norms, simpson, solve_ground_state, stability_window, ProfileFamily,
    RadialProfile,
};
use solwave::modulation::{
    track, ModulationRecord, ModulationSetup, TrackConfig,
};
use solwave::soliton::{
    assemble_d_quadrature, det_d_closed_form, LambdaStencil, SolitonEval, SolitonParams,
};

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
    seconds: f64,
}

fn run_criterion(name: &'static str, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let t0 = Instant::now();
    let (pass, detail) = f();
    let seconds = t0.elapsed().as_secs_f64();
    let mark = if pass { "pass" } else { "FAIL" };
    println!("criterion {name}: {mark} ({detail}) [{seconds:.1}s]");
    Outcome { name, pass, detail, seconds }
}

fn soliton_state(family: &ProfileFamily, params: &SolitonParams, grid: &GridSpec) -> FieldState {
    let ev = SolitonEval::new(family, params).unwrap();
    let mut st = FieldState::zero(grid);
    let vals: Vec<(Complex64, Complex64)> =
        (0..grid.len()).into_par_iter().map(|idx| ev.eval(&grid.pos_of(idx))).collect();
    for (idx, (phi, psi)) in vals.into_iter().enumerate() {
        st.phi[idx] = phi;
        st.pi[idx] = psi;
    }
    st
}

// 1: Pohozaev identities and tail rate across (p, omega)
fn c1_ground_state() -> (bool, String) {
    let mut pohozaev_max: f64 = 0.0;
    let mut tail_max: f64 = 0.0;
    for &p in &[2.0, 2.2] {
        let (_, hi) = stability_window(1.0, p).unwrap();
        for &frac in &[0.0, 0.3, 0.6, 0.8] {
            let omega = frac * hi;
            let prof = solve_ground_state(1.0, omega, p, 1e-10).unwrap();
            let n = profile_norms(&prof);
            let kk = prof.kk();
            let r1 = 3.0 * (p - 1.0) * kk / (2.0 * n.grad_l2sq);
            let r2 = (5.0 - p) / (2.0 * n.l2sq);
            let r3 = (p + 1.0) * kk / n.lp1;
            let dev =
                (r1 / r2 - 1.0).abs().max((r3 / r2 - 1.0).abs()).max((r1 / r3 - 1.0).abs());
            pohozaev_max = pohozaev_max.max(dev);
            tail_max = tail_max.max((prof.tail_rate - kk.sqrt()).abs() / kk.sqrt());
        }
    }
    (
        pohozaev_max <= 1e-6 && tail_max <= 1e-2,
        format!("pohozaev {pohozaev_max:.2e} (<=1e-6), tail {tail_max:.2e} (<=1e-2)"),
    )
}

// 2: scaling covariance of the profile family
fn c2_scaling() -> (bool, String) {
    let direct = solve_ground_state(1.0, 0.8, 2.0, 1e-10).unwrap();
    let fam = ProfileFamily::new(1.0, 2.0, 1e-10).unwrap();
    let mut sup: f64 = 0.0;
    for i in 0..400 {
        let r = direct.r_max * i as f64 / 400.0;
        sup = sup.max((direct.sample(r).0 - fam.sample(0.8, r).0).abs());
    }
    (sup <= 1e-5, format!("sup {sup:.2e} (<=1e-5)"))
}

// radial quadrature of <f, L-f> and <del_1 f, L+ del_1 f>, normalized
fn kernel_forms(prof: &RadialProfile) -> (f64, f64) {
    let kk = prof.kk();
    let p = prof.p;
    let n = prof.f.len();
    let dr = prof.dr;
    let r = |i: usize| i as f64 * dr;
    // f'' from the ODE; at r=0 use the regular limit f'' = (kk f - f^p)/3
    let fpp: Vec<f64> = (0..n)
        .map(|i| {
            if i == 0 {
                (kk * prof.f[0] - prof.f[0].powf(p)) / 3.0
            } else {
                kk * prof.f[i] - prof.f[i].powf(p) - 2.0 * prof.df[i] / r(i)
            }
        })
        .collect();
    let quad = |g: &dyn Fn(usize) -> f64| {
        let vals: Vec<f64> = (0..n).map(g).collect();
        simpson(&vals, dr)
    };
    let lm = quad(&|i| (prof.df[i].powi(2) + (kk - prof.f[i].powf(p - 1.0)) * prof.f[i].powi(2)) * r(i) * r(i));
    let lm_scale = quad(&|i| (prof.df[i].powi(2) + kk * prof.f[i].powi(2)) * r(i) * r(i));
    // v = f'(r) x1/r: angular reduction leaves three radial integrals
    let lp = quad(&|i| fpp[i].powi(2) * r(i) * r(i))
        + 2.0 * quad(&|i| prof.df[i].powi(2))
        + quad(&|i| (kk - p * prof.f[i].powf(p - 1.0)) * prof.df[i].powi(2) * r(i) * r(i));
    let lp_scale = quad(&|i| (fpp[i].powi(2) + kk * prof.df[i].powi(2)) * r(i) * r(i));
    (lm.abs() / lm_scale, lp.abs() / lp_scale)
}

// 3: kernel directions annihilate L+-/L--, E0 > 0 off the kernel
fn c3_kernel() -> (bool, String) {
    let prof = solve_ground_state(1.0, 0.8, 2.0, 1e-10).unwrap();
    let (lm, lp) = kernel_forms(&prof);

    // random orthogonal-complement sample
    let family = ProfileFamily::new(1.0, 2.0, 1e-10).unwrap();
    let mut params = SolitonParams::at_rest(0.8);
    params.u = [0.2, 0.0, 0.0];
    let grid = GridSpec::centered_cube([0.0; 3], 20.0, 40, 0.1, 8).unwrap();
    let stencil = LambdaStencil::new(&family, &params).unwrap();
    let ev = SolitonEval::new(&family, &params).unwrap();
    let n = grid.len();
    let vol = grid.cell_volume();
    let re_inner = |a: Complex64, b: Complex64| (a.conj() * b).re;

    let mut dirs: Vec<(Vec<Complex64>, Vec<Complex64>)> = Vec::new();
    for j in 0..8 {
        let mut tv = vec![Complex64::new(0.0, 0.0); n];
        let mut tw = vec![Complex64::new(0.0, 0.0); n];
        for idx in 0..n {
            let x = grid.pos_of(idx);
            let phase = Complex64::from_polar(1.0, -ev.theta_at(&x));
            let (dphi, dpsi) = stencil.first_derivs(&x);
            tv[idx] = -phase * dpsi[j];
            tw[idx] = phase * dphi[j];
        }
        dirs.push((tv, tw));
    }
    let dot = |a: &(Vec<Complex64>, Vec<Complex64>), b: &(Vec<Complex64>, Vec<Complex64>)| -> f64 {
        let mut s = 0.0;
        for idx in 0..n {
            s += re_inner(a.0[idx], b.0[idx]) + re_inner(a.1[idx], b.1[idx]);
        }
        s * vol
    };
    let mut ortho: Vec<(Vec<Complex64>, Vec<Complex64>)> = Vec::new();
    for mut d in dirs {
        for o in &ortho {
            let c = dot(&d, o);
            for idx in 0..n {
                d.0[idx] -= o.0[idx] * c;
                d.1[idx] -= o.1[idx] * c;
            }
        }
        let nn = dot(&d, &d).sqrt();
        for idx in 0..n {
            d.0[idx] /= nn;
            d.1[idx] /= nn;
        }
        ortho.push(d);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut min_e0 = f64::INFINITY;
    for _ in 0..8 {
        let mut v = vec![Complex64::new(0.0, 0.0); n];
        let mut w = vec![Complex64::new(0.0, 0.0); n];
        for _ in 0..3 {
            let c = [
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ];
            let s: f64 = rng.gen_range(1.0..3.0);
            let av = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let aw = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            for idx in 0..n {
                let x = grid.pos_of(idx);
                let r2 = (0..3).map(|k| (x[k] - c[k]).powi(2)).sum::<f64>();
                let bump = (-r2 / (s * s)).exp();
                v[idx] += av * bump;
                w[idx] += aw * bump;
            }
        }
        let pair = (v, w);
        let mut vw = pair;
        for o in &ortho {
            let c = dot(&vw, o);
            for idx in 0..n {
                vw.0[idx] -= o.0[idx] * c;
                vw.1[idx] -= o.1[idx] * c;
            }
        }
        let nn = dot(&vw, &vw);
        let e0 = radiation_energy_e0(&vw.0, &vw.1, &params, &prof, &grid);
        min_e0 = min_e0.min(e0 / nn);
    }

    (
        lm <= 1e-6 && lp <= 1e-6 && min_e0 > 0.0,
        format!("<f,L-f> {lm:.2e}, <df,L+df> {lp:.2e} (<=1e-6), min E0/norm {min_e0:.2e} (>0)"),
    )
}

// 4: quadrature D determinant vs the closed form on the stable manifold
fn c4_det_d() -> (bool, String) {
    let family = ProfileFamily::new(1.0, 2.0, 1e-10).unwrap();
    let grid = GridSpec::centered_cube([0.0; 3], 48.0, 96, 0.01, 8).unwrap();
    let points = [
        SolitonParams { omega: 0.8, theta: 0.3, xi: [0.0; 3], u: [0.0; 3] },
        SolitonParams { omega: 0.8, theta: 0.0, xi: [0.0; 3], u: [0.6, 0.0, 0.0] },
        SolitonParams { omega: 0.9, theta: 1.0, xi: [0.0; 3], u: [0.2, -0.1, 0.15] },
        SolitonParams { omega: 0.7, theta: -0.4, xi: [0.0; 3], u: [0.0, 0.4, 0.0] },
        SolitonParams { omega: 0.85, theta: 0.0, xi: [0.0; 3], u: [0.3, 0.3, 0.0] },
    ];
    let mut max_dev: f64 = 0.0;
    for pt in &points {
        let dq = assemble_d_quadrature(pt, &family, &grid).unwrap();
        let closed = det_d_closed_form(pt, &family);
        max_dev = max_dev.max((dq.determinant().abs() / closed - 1.0).abs());
    }
    (max_dev <= 1e-6, format!("max det deviation {max_dev:.2e} (<=1e-6)"))
}

// 5: H, Pi, Q of the boosted soliton on a 96^3 grid
fn c5_functionals() -> (bool, String) {
    let family = ProfileFamily::new(1.0, 2.0, 1e-10).unwrap();
    let norms = family.norms(0.8);
    let grid = GridSpec::centered_cube([0.0; 3], 24.0, 96, 0.1, 8).unwrap();
    let coeffs = Coeffs::build(&Minkowski, &grid, 0.0);
    let weights = Weights::unit(&grid);
    let cfg = KgConfig::new(1.0, 2.0);
    let mut params = SolitonParams::at_rest(0.8);
    params.u = [0.6, 0.0, 0.0];
    let rho = params.rho();
    let st = soliton_state(&family, &params, &grid);
    let h = energy_h(&st, &coeffs, &grid, &cfg);
    let pi = momentum_pi(&st, &coeffs, &weights, &grid);
    let q = charge_q(&st, &coeffs, &weights, &grid);
    let dh = (h / (rho * norms.b) - 1.0).abs();
    let dpi = (pi[0] / (rho * norms.b * 0.6) - 1.0)
        .abs()
        .max(pi[1].abs() / norms.b)
        .max(pi[2].abs() / norms.b);
    let dq = (q / (0.8 * norms.l2sq) - 1.0).abs();
    let dev = dh.max(dpi).max(dq);
    (dev <= 1e-3, format!("H {dh:.2e}, Pi {dpi:.2e}, Q {dq:.2e} (<=1e-3)"))
}

// 6: joint (h, dt) halving: solution error and functional drift orders
fn c6_convergence() -> (bool, String) {
    let family = ProfileFamily::new(1.0, 2.0, 1e-10).unwrap();
    let params = SolitonParams::at_rest(0.8);
    let t_end = 5.0 / 0.8;
    let err = |n: usize| -> f64 {
        let extent = 24.0;
        let h = extent / n as f64;
        let steps = (t_end / (0.4 * h)).ceil() as usize;
        let dt = t_end / steps as f64;
        let grid = GridSpec::centered_cube([0.0; 3], extent, n, dt, 8).unwrap();
        let mut st = soliton_state(&family, &params, &grid);
        let cfg = KgConfig::new(1.0, 2.0);
        let mut ev = Evolver::new(&Minkowski, grid, cfg, 0.0).unwrap();
        for _ in 0..steps {
            ev.step(&mut st).unwrap();
        }
        let mut exact = params;
        exact.theta = params.omega * t_end;
        let ex = soliton_state(&family, &exact, &grid);
        let mut sup: f64 = 0.0;
        for idx in 0..grid.len() {
            let (i, j, k) = grid.coords(idx);
            if grid.boundary_depth(i, j, k) > grid.sponge_cells {
                sup = sup.max((st.phi[idx] - ex.phi[idx]).norm());
            }
        }
        sup
    };
    let order = (err(32) / err(64)).log2();

    let drift = |n: usize| -> (f64, f64) {
        let extent = 24.0;
        let h = extent / n as f64;
        let steps = (t_end / (0.4 * h)).ceil() as usize;
        let dt = t_end / steps as f64;
        let grid = GridSpec::centered_cube([0.0; 3], extent, n, dt, 8).unwrap();
        let coeffs = Coeffs::build(&Minkowski, &grid, 0.0);
        let weights = Weights::unit(&grid);
        let cfg = KgConfig::new(1.0, 2.0);
        let mut st = soliton_state(&family, &params, &grid);
        let h0 = energy_h(&st, &coeffs, &grid, &cfg);
        let q0 = charge_q(&st, &coeffs, &weights, &grid);
        let mut ev = Evolver::new(&Minkowski, grid, cfg, 0.0).unwrap();
        for _ in 0..steps {
            ev.step(&mut st).unwrap();
        }
        (
            (energy_h(&st, &coeffs, &grid, &cfg) - h0).abs() / h0,
            (charge_q(&st, &coeffs, &weights, &grid) - q0).abs() / q0,
        )
    };
    let (h_c, q_c) = drift(48);
    let (h_f, q_f) = drift(96);
    let h_order = (h_c / h_f).log2();
    let q_order = (q_c / q_f).log2();
    (
        order >= 1.8 && h_order >= 1.8 && q_order >= 1.8,
        format!("solution order {order:.2}, H drift order {h_order:.2}, Q drift order {q_order:.2} (>=1.8)"),
    )
}

// 7: Fermi chart flatness along the geodesic and quadratic off-axis growth
fn c7_fermi() -> (bool, String) {
    let metric = Bump { amplitude: 0.01, width: 4.0, center: [0.5, -0.3, 0.2] };
    let geo = integrate_geodesic(&metric, &[0.0, -1.0, 0.0, 0.0], &[1.0, 0.2, 0.05, 0.0], 6.0, 0.05).unwrap();
    let chart = build_fermi_chart(&metric, &geo, 1.5, 0.5).unwrap();
    let rep = verify_chart(&chart, 30).unwrap();
    let s = 0.5 * (rep.s_range.0 + rep.s_range.1);
    let m0 = Minkowski.g(&[0.0; 4]);
    let radii = [0.1, 0.15, 0.2, 0.3, 0.4];
    let devs: Vec<f64> = radii
        .iter()
        .map(|&ry| {
            let z = [s, chart.u0[0] * s + ry, chart.u0[1] * s, chart.u0[2] * s];
            (chart.g(&z) - m0).abs().max()
        })
        .collect();
    let slope = loglog_slope(&radii, &devs);
    (
        rep.max_gamma <= 1e-6 && rep.max_metric_dev <= 1e-6 && (slope - 2.0).abs() <= 0.2,
        format!(
            "max gamma {:.2e}, max dev {:.2e} (<=1e-6), exponent {slope:.2} (2.0+-0.2)",
            rep.max_gamma, rep.max_metric_dev
        ),
    )
}

fn tracked_run(
    setup: &ModulationSetup,
    base: &FieldState,
    params: &SolitonParams,
    grid: &GridSpec,
    tc: &TrackConfig,
    scale: f64,
) -> Result<Vec<ModulationRecord>, String> {
    let mut st = base.clone();
    if scale != 0.0 {
        for idx in 0..grid.len() {
            let x = grid.pos_of(idx);
            let r2 = (x[0] - params.xi[0]).powi(2)
                + (x[1] - params.xi[1]).powi(2)
                + (x[2] - params.xi[2]).powi(2);
            let bump = (-r2 / 9.0).exp();
            st.phi[idx] += scale * bump * Complex64::new(1.0, 0.5);
            st.pi[idx] += scale * bump * Complex64::new(0.3, -0.2);
        }
    }
    track(&st, params, setup, grid, tc).map_err(|e| format!("track failed at scale {scale}: {e}"))
}

// 8: orbital-stability scaling of the perturbation ladder
fn c8_stability() -> (bool, String) {
    let family = ProfileFamily::new(1.0, 2.0, 1e-10).unwrap();
    // omega = 0.9: kh = 0.165 at this resolution; the omega = 0.8 soliton
    // radiates enough scheme error over T = 20/omega to push det(D+D1+D2)
    // against the nondegeneracy margin
    let omega = 0.9;
    let params = SolitonParams::at_rest(omega);
    let extent = 24.0;
    let n = 64;
    let h = extent / n as f64;
    let grid = GridSpec::centered_cube([0.0; 3], extent, n, 0.4 * h, 8).unwrap();
    let base = soliton_state(&family, &params, &grid);
    let setup = ModulationSetup {
        family: &family,
        metric: &Minkowski,
        u0: [0.0; 3],
        constants: WeightConstants { k0: 10.0, c0: 0.05, delta0: 1.0, eps: 0.0 },
        cfg: KgConfig::new(1.0, 2.0),
    };
    let tc = TrackConfig { t_end: 20.0 / omega, cadence: 8, fit_tol: 1e-8 };
    // the discrete soliton radiates at the O(h^2) scheme-error level, far
    // above the continuum scales of the epsilon ladder; difference against
    // the unperturbed run and split odd/even parts in epsilon to isolate the
    // linear and quadratic responses
    let zero = match tracked_run(&setup, &base, &params, &grid, &tc, 0.0) {
        Ok(v) => v,
        Err(e) => return (false, e),
    };
    let ladder = [2e-2, 1e-2, 5e-3];
    let mut s_lin = Vec::new();
    let mut s_quad = Vec::new();
    for &eps in &ladder {
        let plus = match tracked_run(&setup, &base, &params, &grid, &tc, eps) {
            Ok(v) => v,
            Err(e) => return (false, e),
        };
        let minus = match tracked_run(&setup, &base, &params, &grid, &tc, -eps) {
            Ok(v) => v,
            Err(e) => return (false, e),
        };
        let mut sup_lin: f64 = 0.0;
        let mut sup_quad: f64 = 0.0;
        for k in 0..zero.len().min(plus.len()).min(minus.len()) {
            let np = plus[k].v_h1 + plus[k].w_l2;
            let nm = minus[k].v_h1 + minus[k].w_l2;
            sup_lin = sup_lin.max(0.5 * (np - nm).abs() / eps);
            let even = 0.5 * (plus[k].gamma_dot_norm + minus[k].gamma_dot_norm)
                - zero[k].gamma_dot_norm;
            sup_quad = sup_quad.max(even.abs() / (eps * eps));
        }
        s_lin.push(sup_lin);
        s_quad.push(sup_quad);
    }
    let spread = |v: &[f64]| {
        v.iter().cloned().fold(0.0f64, f64::max) / v.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    let (sl, sq) = (spread(&s_lin), spread(&s_quad));
    (
        sl <= 2.0 && sq <= 3.0,
        format!("norm/eps spread {sl:.2} (<=2), gamma_dot/eps^2 spread {sq:.2} (<=3)"),
    )
}

// 9: geodesic tracking on the Fermi chart of a slowly varying bump
fn c9_geodesic() -> (bool, String) {
    let family = ProfileFamily::new(1.0, 2.0, 1e-10).unwrap();
    let extent = 24.0;
    let n = 64;
    let h = extent / n as f64;
    let grid = GridSpec::centered_cube([0.0; 3], extent, n, 0.4 * h, 8).unwrap();
    let kg = KgConfig::new(1.0, 2.0);
    let tc = TrackConfig { t_end: 3.0, cadence: 4, fit_tol: 1e-8 };
    let ladder = [0.2, 0.1, 0.05];
    let mut xi_excess = Vec::new();
    let mut v_excess = Vec::new();
    for &eps in &ladder {
        let metric = Scaled { base: Bump { amplitude: 0.25 * eps * eps, width: 4.0, center: [0.0; 3] }, eps };
        let geo = integrate_geodesic(&metric, &[0.0, -1.0, 0.0, 0.0], &[1.0, 0.2, 0.05, 0.0], tc.t_end + 4.0, 0.05)
            .unwrap();
        let chart = build_fermi_chart(&metric, &geo, 1.5, 0.5).unwrap();
        let u0 = chart.u0;
        let params = SolitonParams { omega: 0.8, theta: 0.0, xi: [0.0; 3], u: u0 };
        let state = soliton_state(&family, &params, &grid);
        let constants = WeightConstants { k0: 10.0, c0: 0.05, delta0: 1.0, eps };
        let setup = ModulationSetup { family: &family, metric: &chart, u0, constants, cfg: kg };
        let records = match track(&state, &params, &setup, &grid, &tc) {
            Ok(r) => r,
            Err(e) => return (false, format!("eps {eps}: {e}")),
        };
        let setup0 = ModulationSetup { family: &family, metric: &Minkowski, u0, constants, cfg: kg };
        let baseline = match track(&state, &params, &setup0, &grid, &tc) {
            Ok(r) => r,
            Err(e) => return (false, format!("eps {eps} baseline: {e}")),
        };
        let mut xi_sup: f64 = 0.0;
        let mut v_sup: f64 = 0.0;
        for k in 0..records.len().min(baseline.len()) {
            xi_sup = xi_sup.max((records[k].xi_drift - baseline[k].xi_drift).abs());
            v_sup = v_sup.max((records[k].v_h1 - baseline[k].v_h1).abs());
        }
        xi_excess.push(xi_sup.max(1e-300));
        v_excess.push(v_sup.max(1e-300));
    }
    let xi_slope = loglog_slope(&ladder, &xi_excess);
    let v_slope = loglog_slope(&ladder, &v_excess);
    (
        xi_slope >= 0.8 && v_slope >= 0.8,
        format!("xi_drift exponent {xi_slope:.2}, v_H1 exponent {v_slope:.2} (>=0.8)"),
    )
}

// 10: discrete Hardy inequality on random smooth compactly supported fields
fn c10_hardy() -> (bool, String) {
    let grid = GridSpec::centered_cube([0.0; 3], 12.0, 48, 0.1, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        // superposition of C^inf bumps inside the box
        let mut centers = Vec::new();
        for _ in 0..3 {
            let c = [
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ];
            let s: f64 = rng.gen_range(1.0..3.0);
            let a: f64 = rng.gen_range(-1.0..1.0);
            centers.push((c, s, a));
        }
        let f: Vec<f64> = (0..grid.len())
            .map(|idx| {
                let x = grid.pos_of(idx);
                centers
                    .iter()
                    .map(|(c, s, a)| {
                        let r2 = (0..3).map(|k| (x[k] - c[k]).powi(2)).sum::<f64>() / (s * s);
                        if r2 < 1.0 {
                            a * (1.0 - 1.0 / (1.0 - r2)).exp()
                        } else {
                            0.0
                        }
                    })
                    .sum()
            })
            .collect();
        worst = worst.max(hardy_ratio(&f, &grid));
    }
    (worst <= 6.0, format!("max ratio {worst:.2} (<=6)"))
}

#[test]
fn acceptance_criteria() {
    let outcomes = vec![
        run_criterion("1 ground-state identities", c1_ground_state),
        run_criterion("2 scaling covariance", c2_scaling),
        run_criterion("3 kernel checks", c3_kernel),
        run_criterion("4 det D closed form", c4_det_d),
        run_criterion("5 soliton functional values", c5_functionals),
        run_criterion("6 scheme convergence", c6_convergence),
        run_criterion("7 fermi chart", c7_fermi),
        run_criterion("8 orbital stability order", c8_stability),
        run_criterion("9 geodesic tracking", c9_geodesic),
        run_criterion("10 hardy inequality", c10_hardy),
    ];
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.pass)
        .map(|o| format!("{} ({}) after {:.1}s", o.name, o.detail, o.seconds))
        .collect();
    assert!(failed.is_empty(), "failed criteria: {}", failed.join("; "));
}
