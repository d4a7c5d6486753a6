//! Minimizers, the eigenpair, monotone iteration, mountain pass and the extremal-λ bracket.
//!
//! Every minimization is preconditioned nonlinear conjugate gradients (Polak-Ribière+) with
//! a backtracking line search. The preconditioner is the p = 2 local operator plus `ε`
//! times the diagonal of the fractional one.

use crate::error::{Error, Result};
use crate::functionals::{dual_norm_of, energy_values, gradient_values, EnergyBreakdown, EnergyMode};
use crate::lattice::{Field, ModelParams};
use crate::operators::{apply_raw, dot, energies_raw, KernelMatrix, LinearizedOperator, Mode, Preconditioner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveKind {
    Minimizer,
    MountainPass,
    Eigenpair,
    /// Limit of a monotone iteration.
    IterateLimit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    IterateLimit,
    Stalled,
    BoundaryStuck,
    MonotonicityBreach,
    Blowup,
    PinchingFailure,
    LevelWindow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub field: Field,
    pub energy: EnergyBreakdown,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub kind: SolveKind,
    pub tolerance: f64,
    pub flags: Vec<Flag>,
}

impl SolveReport {
    pub fn has(&self, flag: Flag) -> bool {
        self.flags.contains(&flag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchPoint {
    pub lambda: f64,
    pub sup_norm: f64,
    pub energy_total: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Outer cap for monotone iteration.
    pub max_outer: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { max_iter: 20_000, max_outer: 2_000 }
    }
}

#[derive(Clone, Copy)]
enum Target<'a> {
    Energy(EnergyMode<'a>),
    /// `(1/p)ρ^p - Σ rhs_i u_i`.
    Source(&'a [f64]),
}

struct Objective<'a> {
    kernel: &'a KernelMatrix,
    params: &'a ModelParams,
    target: Target<'a>,
}

impl<'a> Objective<'a> {
    fn breakdown(&self, x: &[f64]) -> EnergyBreakdown {
        match self.target {
            Target::Energy(mode) => energy_values(x, self.kernel, self.params, mode),
            Target::Source(rhs) => {
                let (loc, nl) = energies_raw(x, self.kernel, self.params);
                let p = self.params.p;
                let src = dot(rhs, x);
                EnergyBreakdown {
                    local_term: loc / p,
                    nonlocal_term: self.params.eps * nl / p,
                    concave_term: src,
                    critical_term: 0.0,
                    total: loc / p + self.params.eps * nl / p - src,
                }
            }
        }
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.breakdown(x).total
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        match self.target {
            Target::Energy(mode) => gradient_values(x, self.kernel, self.params, mode),
            Target::Source(rhs) => {
                let mut g = apply_raw(x, self.kernel, self.params, Mode::Mixed);
                for (gi, r) in g.iter_mut().zip(rhs) {
                    *gi -= r;
                }
                g
            }
        }
    }
}

fn rho_eps(x: &[f64], kernel: &KernelMatrix, params: &ModelParams) -> f64 {
    let (loc, nl) = energies_raw(x, kernel, params);
    (loc + params.eps * nl).powf(1.0 / params.p)
}

fn sup(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn axpy(x: &[f64], a: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(u, v)| u + a * v).collect()
}

struct Descent {
    x: Vec<f64>,
    iterations: usize,
    converged: bool,
    residual: f64,
    stalled: bool,
}

/// Projection onto `{ρ_ε <= radius}` by radial scaling; returns whether it was active.
fn project_ball(x: &mut [f64], radius: f64, kernel: &KernelMatrix, params: &ModelParams) -> bool {
    let r = rho_eps(x, kernel, params);
    if r > radius {
        let c = radius / r;
        x.iter_mut().for_each(|v| *v *= c);
        true
    } else {
        false
    }
}

/// Fixed p = 2 model operator, or the linearization at the current iterate when p ≠ 2.
enum Metric {
    Fixed(Preconditioner),
    Linearized,
}

impl Metric {
    fn for_params(kernel: &KernelMatrix, params: &ModelParams) -> Self {
        if params.p == 2.0 {
            Metric::Fixed(Preconditioner::new(kernel, params.eps))
        } else {
            Metric::Linearized
        }
    }

    fn solve(&self, obj: &Objective, x: &[f64], g: &[f64]) -> Vec<f64> {
        match self {
            Metric::Fixed(pc) => pc.solve(obj.kernel, g),
            Metric::Linearized => {
                if x.iter().all(|v| *v == 0.0) {
                    return Preconditioner::new(obj.kernel, obj.params.eps).solve(obj.kernel, g);
                }
                LinearizedOperator::new(obj.kernel, x, obj.params).solve(g, 1e-3, 300)
            }
        }
    }
}

fn descend(
    obj: &Objective,
    metric: &Metric,
    x0: Vec<f64>,
    tol: f64,
    max_iter: usize,
    ball: Option<f64>,
) -> Descent {
    let kernel = obj.kernel;
    let vol = kernel.cell_volume;
    let mut x = x0;
    if let Some(r) = ball {
        project_ball(&mut x, r, kernel, obj.params);
    }
    let mut e = obj.value(&x);
    let mut g = obj.grad(&x);
    let mut z = metric.solve(obj, &x, &g);
    let mut d: Vec<f64> = z.iter().map(|v| -v).collect();
    let mut alpha_guess = 1.0;
    let mut iterations = 0;
    let mut stalled = false;
    let mut fresh = true;
    loop {
        let res = dual_norm_of(&g, vol);
        if res <= tol {
            return Descent { x, iterations, converged: true, residual: res, stalled };
        }
        if iterations >= max_iter {
            return Descent { x, iterations, converged: false, residual: res, stalled };
        }
        iterations += 1;
        let mut gd = dot(&g, &d);
        if !(gd < 0.0) {
            d = z.iter().map(|v| -v).collect();
            gd = dot(&g, &d);
            fresh = true;
        }
        match line_search(obj, &x, e, &g, &d, gd, alpha_guess, ball) {
            Some((xn, en, gn, alpha, projected)) => {
                let zn = metric.solve(obj, &xn, &gn);
                let denom = dot(&z, &g);
                let mut beta = if denom != 0.0 {
                    (dot(&zn, &gn) - dot(&zn, &g)) / denom
                } else {
                    0.0
                };
                if projected || !beta.is_finite() {
                    beta = 0.0;
                }
                beta = beta.max(0.0);
                d = zn.iter().zip(&d).map(|(a, b)| -a + beta * b).collect();
                x = xn;
                e = en;
                g = gn;
                z = zn;
                alpha_guess = (alpha * 2.0).min(1e8);
                fresh = false;
            }
            None => {
                if fresh {
                    stalled = true;
                    let res = dual_norm_of(&g, vol);
                    return Descent { x, iterations, converged: res <= tol, residual: res, stalled };
                }
                d = z.iter().map(|v| -v).collect();
                alpha_guess = 1.0;
                fresh = true;
            }
        }
    }
}

/// Wolfe-type search that brackets a slope reduction; energy differences at round-off
/// level are ignored so the directional derivative decides near convergence.
#[allow(clippy::too_many_arguments)]
fn line_search(
    obj: &Objective,
    x: &[f64],
    e0: f64,
    g: &[f64],
    d: &[f64],
    gd: f64,
    alpha0: f64,
    ball: Option<f64>,
) -> Option<(Vec<f64>, f64, Vec<f64>, f64, bool)> {
    let b0 = obj.breakdown(x);
    let noise = 1e-12
        * (b0.local_term.abs() + b0.nonlocal_term.abs() + b0.concave_term.abs() + b0.critical_term.abs())
            .max(e0.abs());
    let (mut lo, mut dlo) = (0.0, gd);
    let mut hi: Option<(f64, f64)> = None;
    let mut alpha = alpha0;
    for _ in 0..60 {
        let mut xn = axpy(x, alpha, d);
        let projected = match ball {
            Some(r) => project_ball(&mut xn, r, obj.kernel, obj.params),
            None => false,
        };
        let en = obj.value(&xn);
        if projected {
            let pred: f64 = g.iter().zip(xn.iter().zip(x)).map(|(gi, (a, b))| gi * (a - b)).sum();
            if en.is_finite() && pred < 0.0 && en <= e0 + 1e-4 * pred {
                let gn = obj.grad(&xn);
                return Some((xn, en, gn, alpha, true));
            }
            hi = Some((alpha, f64::INFINITY));
            alpha = 0.5 * (lo + alpha);
            continue;
        }
        if !en.is_finite() || en > e0 + 1e-4 * alpha * gd + noise {
            hi = Some((alpha, f64::INFINITY));
        } else {
            let gn = obj.grad(&xn);
            let dphi = dot(&gn, d);
            if dphi.abs() <= 0.5 * gd.abs() {
                return Some((xn, en, gn, alpha, false));
            }
            if dphi < 0.0 {
                lo = alpha;
                dlo = dphi;
            } else {
                hi = Some((alpha, dphi));
            }
        }
        alpha = match hi {
            None => alpha * 4.0,
            Some((h, dh)) => {
                let w = h - lo;
                let sec = if dh.is_finite() { lo - dlo * w / (dh - dlo) } else { f64::NAN };
                if sec.is_finite() && sec > lo + 0.05 * w && sec < h - 0.05 * w {
                    sec
                } else {
                    lo + 0.5 * w
                }
            }
        };
    }
    None
}

fn report(
    x: Vec<f64>,
    template: &Field,
    energy: EnergyBreakdown,
    residual_norm: f64,
    iterations: usize,
    converged: bool,
    kind: SolveKind,
    tolerance: f64,
    flags: Vec<Flag>,
) -> SolveReport {
    SolveReport { field: template.with_values(x), energy, residual_norm, iterations, converged, kind, tolerance, flags }
}

fn descent_flags(d: &Descent) -> Vec<Flag> {
    let mut f = Vec::new();
    if !d.converged {
        f.push(if d.stalled { Flag::Stalled } else { Flag::IterateLimit });
    }
    f
}

/// Positive field shaped like the p = 2 torsion function of the preconditioner.
pub fn positive_profile(kernel: &KernelMatrix, params: &ModelParams) -> Vec<f64> {
    let pc = Preconditioner::new(kernel, params.eps);
    let ones = vec![kernel.cell_volume; kernel.len()];
    let psi = pc.solve(kernel, &ones);
    let m = sup(&psi);
    psi.iter().map(|v| (v / m).max(1e-12)).collect()
}

/// Minimizer of `(1/p)ρ_ε(u)^p - Σ rhs_i u_i` (`rhs` already volume-weighted).
pub fn solve_inner(rhs: &Field, kernel: &KernelMatrix, params: &ModelParams, tol: f64) -> Result<SolveReport> {
    solve_inner_from(rhs, None, kernel, params, tol, &SolverOptions::default())
}

pub fn solve_inner_from(
    rhs: &Field,
    start: Option<&Field>,
    kernel: &KernelMatrix,
    params: &ModelParams,
    tol: f64,
    opts: &SolverOptions,
) -> Result<SolveReport> {
    kernel.check(rhs)?;
    if !(tol > 0.0) || rhs.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParams("need tol > 0 and a finite right-hand side".into()));
    }
    let x0 = match start {
        Some(s) => {
            s.same_grid(rhs)?;
            s.values.clone()
        }
        None => vec![0.0; rhs.len()],
    };
    let obj = Objective { kernel, params, target: Target::Source(&rhs.values) };
    let metric = Metric::for_params(kernel, params);
    let d = descend(&obj, &metric, x0, tol, opts.max_iter, None);
    let flags = descent_flags(&d);
    Ok(report(
        d.x.clone(),
        rhs,
        obj.breakdown(&d.x),
        d.residual,
        d.iterations,
        d.converged,
        SolveKind::Minimizer,
        tol,
        flags,
    ))
}

/// Positive minimizer of the concave-only functional.
pub fn solve_sublinear(params: &ModelParams, kernel: &KernelMatrix, tol: f64) -> Result<SolveReport> {
    solve_sublinear_from(None, params, kernel, tol, &SolverOptions::default())
}

pub fn solve_sublinear_from(
    start: Option<&Field>,
    params: &ModelParams,
    kernel: &KernelMatrix,
    tol: f64,
    opts: &SolverOptions,
) -> Result<SolveReport> {
    if !(params.lambda > 0.0) {
        return Err(Error::InvalidParams("the sublinear problem needs λ > 0".into()));
    }
    let template = template_field(kernel, start);
    let x0 = match start {
        Some(s) => {
            kernel.check(s)?;
            s.values.clone()
        }
        None => sublinear_start(kernel, params),
    };
    let obj = Objective { kernel, params, target: Target::Energy(EnergyMode::J) };
    let metric = Metric::for_params(kernel, params);
    let d = descend(&obj, &metric, x0, tol, opts.max_iter, None);
    let flags = descent_flags(&d);
    Ok(report(
        d.x.clone(),
        &template,
        obj.breakdown(&d.x),
        d.residual,
        d.iterations,
        d.converged,
        SolveKind::Minimizer,
        tol,
        flags,
    ))
}

/// Best multiple of the torsion profile for the concave-only energy.
fn sublinear_start(kernel: &KernelMatrix, params: &ModelParams) -> Vec<f64> {
    let psi = positive_profile(kernel, params);
    let (p, q) = (params.p, params.q);
    let a = rho_eps(&psi, kernel, params).powf(p);
    let b: f64 = psi.iter().map(|v| v.powf(q)).sum::<f64>() * kernel.cell_volume;
    let t = (params.lambda * b / a).powf(1.0 / (p - q));
    psi.iter().map(|v| t * v).collect()
}

/// Dual norm of the concave source at the best multiple of the torsion profile: the
/// natural residual scale of the small solutions at `params.lambda > 0`.
pub fn source_scale(params: &ModelParams, kernel: &KernelMatrix) -> f64 {
    let x0 = sublinear_start(kernel, params);
    let vol = kernel.cell_volume;
    let src: Vec<f64> = x0.iter().map(|v| vol * params.lambda * v.powf(params.q - 1.0)).collect();
    dual_norm_of(&src, vol)
}

/// Sublinear solve with `tol` relative to the concave source at the starting guess.
pub fn solve_sublinear_relative(params: &ModelParams, kernel: &KernelMatrix, tol: f64) -> Result<SolveReport> {
    if !(params.lambda > 0.0) {
        return Err(Error::InvalidParams("the sublinear problem needs λ > 0".into()));
    }
    let start = kernel.zero_field().with_values(sublinear_start(kernel, params));
    solve_sublinear_from(Some(&start), params, kernel, tol * source_scale(params, kernel), &SolverOptions::default())
}

fn template_field(kernel: &KernelMatrix, start: Option<&Field>) -> Field {
    match start {
        Some(s) => s.with_values(vec![0.0; s.len()]),
        None => kernel.zero_field(),
    }
}

/// `λ_{1,ε}` and its positive eigenvector with `‖e‖_p = 1`.
pub fn principal_eigenpair(params: &ModelParams, kernel: &KernelMatrix, tol: f64) -> Result<(f64, SolveReport)> {
    principal_eigenpair_with(params, kernel, tol, &SolverOptions::default())
}

/// Inverse power iteration: `A(w) = vol φ(u_k)`, then `u_{k+1} = w/‖w‖_p`.
pub fn principal_eigenpair_with(
    params: &ModelParams,
    kernel: &KernelMatrix,
    tol: f64,
    opts: &SolverOptions,
) -> Result<(f64, SolveReport)> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParams("tol must be positive".into()));
    }
    let p = params.p;
    let vol = kernel.cell_volume;
    let lp = |x: &[f64]| (x.iter().map(|v| v.abs().powf(p)).sum::<f64>() * vol).powf(1.0 / p);
    let phi = |t: f64| t.abs().powf(p - 1.0).copysign(t);
    let quotient = |x: &[f64]| {
        let (loc, nl) = energies_raw(x, kernel, params);
        (loc + params.eps * nl) / lp(x).powf(p)
    };
    let template = kernel.zero_field();
    let mut x = positive_profile(kernel, params);
    let n0 = lp(&x);
    x.iter_mut().for_each(|v| *v /= n0);
    let mut rq = quotient(&x);
    let mut res = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    let mut flags = Vec::new();
    let inner_opts = SolverOptions { max_iter: opts.max_iter, ..*opts };
    while iterations < opts.max_outer {
        let a = apply_raw(&x, kernel, params, Mode::Mixed);
        let r: Vec<f64> = a.iter().zip(&x).map(|(ai, xi)| ai - rq * vol * phi(*xi)).collect();
        res = dual_norm_of(&r, vol);
        if res <= tol {
            converged = true;
            break;
        }
        iterations += 1;
        let rhs = template.with_values(x.iter().map(|v| vol * phi(*v)).collect());
        let start = template.with_values(x.iter().map(|v| v * rq.powf(-1.0 / (p - 1.0))).collect());
        let inner_tol = (0.1 * tol / rq.max(1.0)).max(1e-15);
        let w = solve_inner_from(&rhs, Some(&start), kernel, params, inner_tol, &inner_opts)?;
        let nw = lp(&w.field.values);
        x = w.field.values.iter().map(|v| v / nw).collect();
        rq = quotient(&x);
    }
    if !converged {
        flags.push(Flag::IterateLimit);
    }
    if x.iter().sum::<f64>() < 0.0 {
        x.iter_mut().for_each(|v| *v = -*v);
    }
    let (loc, nl) = energies_raw(&x, kernel, params);
    let energy = EnergyBreakdown {
        local_term: loc / p,
        nonlocal_term: params.eps * nl / p,
        concave_term: 0.0,
        critical_term: 0.0,
        total: (loc + params.eps * nl) / p,
    };
    let field = template.with_values(x);
    Ok((rq, SolveReport { field, energy, residual_norm: res, iterations, converged, kind: SolveKind::Eigenpair, tolerance: tol, flags }))
}

/// Unconstrained descent on the full functional from `start`.
pub fn minimize_from(
    start: &Field,
    params: &ModelParams,
    kernel: &KernelMatrix,
    tol: f64,
    opts: &SolverOptions,
) -> Result<SolveReport> {
    kernel.check(start)?;
    if !(tol > 0.0) {
        return Err(Error::InvalidParams("tol must be positive".into()));
    }
    let obj = Objective { kernel, params, target: Target::Energy(EnergyMode::I) };
    let metric = Metric::for_params(kernel, params);
    let d = descend(&obj, &metric, start.values.clone(), tol, opts.max_iter, None);
    let flags = descent_flags(&d);
    Ok(report(
        d.x.clone(),
        start,
        obj.breakdown(&d.x),
        d.residual,
        d.iterations,
        d.converged,
        SolveKind::Minimizer,
        tol,
        flags,
    ))
}

/// Local minimizer of the full functional inside `{ρ_ε < radius}`.
pub fn minimize_in_ball(params: &ModelParams, kernel: &KernelMatrix, radius: f64, tol: f64) -> Result<SolveReport> {
    minimize_in_ball_with(params, kernel, radius, tol, &SolverOptions::default())
}

pub fn minimize_in_ball_with(
    params: &ModelParams,
    kernel: &KernelMatrix,
    radius: f64,
    tol: f64,
    opts: &SolverOptions,
) -> Result<SolveReport> {
    if !(radius > 0.0 && tol > 0.0) {
        return Err(Error::InvalidParams("radius and tol must be positive".into()));
    }
    let inner = radius * (1.0 - 1e-3);
    let psi = positive_profile(kernel, params);
    let (p, q) = (params.p, params.q);
    let a = rho_eps(&psi, kernel, params);
    let t = if params.lambda > 0.0 {
        let b: f64 = psi.iter().map(|v| v.powf(q)).sum::<f64>() * kernel.cell_volume;
        (params.lambda * b / a.powf(p)).powf(1.0 / (p - q)).min(0.5 * inner / a)
    } else {
        0.5 * inner / a
    };
    let x0: Vec<f64> = psi.iter().map(|v| t * v).collect();
    let obj = Objective { kernel, params, target: Target::Energy(EnergyMode::I) };
    let metric = Metric::for_params(kernel, params);
    let d = descend(&obj, &metric, x0, tol, opts.max_iter, Some(inner));
    let mut flags = descent_flags(&d);
    let mut converged = d.converged;
    if rho_eps(&d.x, kernel, params) >= inner * (1.0 - 1e-9) {
        flags.push(Flag::BoundaryStuck);
        converged = false;
    }
    Ok(report(
        d.x.clone(),
        &kernel.zero_field(),
        obj.breakdown(&d.x),
        d.residual,
        d.iterations,
        converged,
        SolveKind::Minimizer,
        tol,
        flags,
    ))
}

/// `u_{n+1}` = inner solve with source `vol f_λ(u_n)`, starting from `sub`.
///
/// `tol` is relative: the loop stops once `sup|u_{n+1} - u_n| <= tol·sup u_{n+1}` and the
/// residual is below `tol` times the norm of the source. The absolute residual threshold
/// is what the report records as its tolerance. Without `upper` the iteration is stopped
/// once the sup-norm exceeds `blowup_cap`.
pub fn monotone_iterate(
    sub: &Field,
    upper: Option<&Field>,
    params: &ModelParams,
    kernel: &KernelMatrix,
    tol: f64,
    max_outer: usize,
) -> Result<SolveReport> {
    monotone_iterate_with(sub, upper, params, kernel, tol, max_outer, None)
}

fn source(u: &[f64], params: &ModelParams, vol: f64) -> Vec<f64> {
    let (q, r, lam) = (params.q, params.r, params.lambda);
    u.iter()
        .map(|&x| {
            let x = x.max(0.0);
            if x == 0.0 {
                0.0
            } else {
                vol * (lam * x.powf(q - 1.0) + x.powf(r - 1.0))
            }
        })
        .collect()
}

pub fn monotone_iterate_with(
    sub: &Field,
    upper: Option<&Field>,
    params: &ModelParams,
    kernel: &KernelMatrix,
    tol: f64,
    max_outer: usize,
    blowup_cap: Option<f64>,
) -> Result<SolveReport> {
    kernel.check(sub)?;
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::InvalidParams("need 0 < tol < 1".into()));
    }
    let unit = sup(&sub.values).max(upper.map(|u| sup(&u.values)).unwrap_or(0.0));
    let slack = 1e-10 * unit;
    if sub.values.iter().any(|v| *v < -slack) {
        return Err(Error::Precondition("subsolution must be nonnegative".into()));
    }
    if let Some(up) = upper {
        sub.same_grid(up)?;
        if sub.values.iter().zip(&up.values).any(|(a, b)| a > &(b + slack)) {
            return Err(Error::Precondition("need sub <= super node-wise".into()));
        }
    }
    let vol = kernel.cell_volume;
    let opts = SolverOptions::default();
    let mut u = sub.clone();
    let mut flags = Vec::new();
    let mut converged = false;
    let mut outer = 0;
    let mut f = source(&u.values, params, vol);
    let mut res_tol = tol * dual_norm_of(&f, vol);
    let mut res = f64::INFINITY;
    while outer < max_outer {
        outer += 1;
        let fnorm = dual_norm_of(&f, vol);
        let rhs = u.with_values(f);
        let next = solve_inner_from(&rhs, Some(&u), kernel, params, 0.3 * tol * fnorm, &opts)?;
        let nv = &next.field.values;
        let breach = nv.iter().zip(&u.values).any(|(a, b)| *a < b - slack)
            || upper.map(|up| nv.iter().zip(&up.values).any(|(a, b)| *a > b + slack)).unwrap_or(false);
        let diff = nv.iter().zip(&u.values).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        u = next.field;
        f = source(&u.values, params, vol);
        let g: Vec<f64> = apply_raw(&u.values, kernel, params, Mode::Mixed).iter().zip(&f).map(|(a, b)| a - b).collect();
        res = dual_norm_of(&g, vol);
        res_tol = tol * dual_norm_of(&f, vol);
        if breach {
            flags.push(Flag::MonotonicityBreach);
            break;
        }
        if diff <= tol * sup(&u.values) && res <= res_tol {
            converged = true;
            break;
        }
        if let Some(cap) = blowup_cap {
            if sup(&u.values) > cap {
                flags.push(Flag::Blowup);
                break;
            }
        }
    }
    if !converged && flags.is_empty() {
        flags.push(Flag::IterateLimit);
    }
    let energy = energy_values(&u.values, kernel, params, EnergyMode::I);
    Ok(SolveReport {
        residual_norm: res,
        field: u,
        energy,
        iterations: outer,
        converged,
        kind: SolveKind::IterateLimit,
        tolerance: res_tol,
        flags,
    })
}

/// Global minimizer of the functional with the nonlinearity clamped to `[lower, upper]`.
pub fn minimize_truncated(
    lower: &Field,
    upper: &Field,
    params: &ModelParams,
    kernel: &KernelMatrix,
    tol: f64,
) -> Result<SolveReport> {
    kernel.check(lower)?;
    lower.same_grid(upper)?;
    if lower.values.iter().zip(&upper.values).any(|(a, b)| !(*a > 0.0 && a <= b)) {
        return Err(Error::Precondition("need 0 < lower <= upper node-wise".into()));
    }
    let mode = EnergyMode::IHat { lower, upper };
    let obj = Objective { kernel, params, target: Target::Energy(mode) };
    let metric = Metric::for_params(kernel, params);
    let d = descend(&obj, &metric, lower.values.clone(), tol, SolverOptions::default().max_iter, None);
    let mut flags = descent_flags(&d);
    let slack = 1e-8 * sup(&upper.values).max(1.0);
    let pinched = d
        .x
        .iter()
        .zip(lower.values.iter().zip(&upper.values))
        .all(|(x, (a, b))| *x >= a - slack && *x <= b + slack);
    if !pinched {
        flags.push(Flag::PinchingFailure);
    }
    let energy = energy_values(&d.x, kernel, params, EnergyMode::I);
    Ok(report(d.x, lower, energy, d.residual, d.iterations, d.converged, SolveKind::Minimizer, tol, flags))
}

/// First `R₀ = 2^k` with `ρ_ε(base + R₀U) > r0` and `I(base + R₀U) < I(base)`.
pub fn choose_top(base: &Field, bump: &Field, params: &ModelParams, kernel: &KernelMatrix, r0: f64) -> Result<(f64, Field)> {
    base.same_grid(bump)?;
    let e_base = energy_values(&base.values, kernel, params, EnergyMode::I).total;
    let mut r = 1.0;
    for _ in 0..60 {
        let top = base.axpy(r, bump);
        let far = rho_eps(&top.values, kernel, params) > r0;
        if far && energy_values(&top.values, kernel, params, EnergyMode::I).total < e_base {
            return Ok((r, top));
        }
        r *= 2.0;
    }
    Err(Error::Precondition("no admissible mountain-pass endpoint".into()))
}

/// Maximum of `I` along `base + t (top - base)` on a uniform `t` grid.
pub fn path_scan(base: &Field, top: &Field, params: &ModelParams, kernel: &KernelMatrix, samples: usize) -> (f64, f64) {
    let mut best = (f64::NEG_INFINITY, 0.0);
    for k in 0..=samples {
        let t = k as f64 / samples as f64;
        let x: Vec<f64> = base.values.iter().zip(&top.values).map(|(a, b)| a + t * (b - a)).collect();
        let e = energy_values(&x, kernel, params, EnergyMode::I).total;
        if e > best.0 {
            best = (e, t);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MountainPassOptions {
    pub max_iter: usize,
    /// Residual below which Newton polishing is attempted (p = 2 only).
    pub polish_below: f64,
}

impl Default for MountainPassOptions {
    fn default() -> Self {
        MountainPassOptions { max_iter: 2000, polish_below: 1e-1 }
    }
}

/// Maximizer of `t ↦ I(base + t w)` for `t > 0`, started from `t0`.
///
/// Returns `(t, I, ∇I)` at the maximizer, or `None` when the ray never turns down.
fn ray_max(obj: &Objective, base: &[f64], w: &[f64], t0: f64) -> Option<(f64, f64, Vec<f64>)> {
    let slope = |t: f64| {
        let x = axpy(base, t, w);
        let g = obj.grad(&x);
        (dot(&g, w), g, x)
    };
    let (mut lo, mut hi) = (None::<(f64, f64)>, None::<(f64, f64)>);
    let mut t = t0;
    for _ in 0..200 {
        let (d, _, _) = slope(t);
        if !d.is_finite() {
            hi = Some((t, f64::NAN));
            t *= 0.5;
            continue;
        }
        if d > 0.0 {
            lo = Some((t, d));
            if hi.is_some() {
                break;
            }
            t *= 1.5;
        } else {
            hi = Some((t, d));
            if lo.is_some() {
                break;
            }
            t /= 1.5;
            if t < 1e-12 * t0 {
                return None;
            }
        }
    }
    let (mut a, mut da) = lo?;
    let (mut b, mut db) = hi?;
    let mut best = None;
    for _ in 0..100 {
        let w_ab = b - a;
        let sec = if db.is_finite() { a - da * w_ab / (db - da) } else { f64::NAN };
        let t = if sec.is_finite() && sec > a + 0.02 * w_ab && sec < b - 0.02 * w_ab { sec } else { a + 0.5 * w_ab };
        let (d, g, x) = slope(t);
        let scale = dot(&g, &g).sqrt() * dot(w, w).sqrt();
        best = Some((t, obj.value(&x), g));
        if d.abs() <= 1e-10 * scale || w_ab <= 1e-13 * b {
            break;
        }
        if d > 0.0 {
            a = t;
            da = d;
        } else {
            b = t;
            db = d;
        }
    }
    best
}

/// Mountain-pass critical point between `base` and `top` by local minimax along rays.
///
/// The direction `w` minimizes `max_t I(base + t w)`; the start is the maximizer of the
/// segment scan with `path_nodes` samples. `level_cap` is the upper end of the admissible
/// window for the returned level.
#[allow(clippy::too_many_arguments)]
pub fn mountain_pass(
    base: &SolveReport,
    top: &Field,
    params: &ModelParams,
    kernel: &KernelMatrix,
    path_nodes: usize,
    tol: f64,
    level_cap: f64,
    opts: &MountainPassOptions,
) -> Result<SolveReport> {
    if path_nodes < 16 {
        return Err(Error::InvalidParams("path_nodes must be at least 16".into()));
    }
    base.field.same_grid(top)?;
    kernel.check(top)?;
    let vol = kernel.cell_volume;
    let obj = Objective { kernel, params, target: Target::Energy(EnergyMode::I) };
    let b = &base.field.values;
    if obj.value(&top.values) >= obj.value(b) {
        return Err(Error::Precondition("top endpoint must have lower energy than the base".into()));
    }
    let pc = Preconditioner::new(kernel, params.eps);
    let pnorm = |w: &[f64]| dot(w, &pc.apply(kernel, w)).sqrt();
    let (_, t_scan) = path_scan(&base.field, top, params, kernel, path_nodes - 1);
    let mut w: Vec<f64> = top.values.iter().zip(b).map(|(x, y)| x - y).collect();
    let nw = pnorm(&w);
    w.iter_mut().for_each(|v| *v /= nw);
    let mut t = (t_scan * nw).max(1e-3 * nw);
    let (mut tc, mut level, mut g) =
        ray_max(&obj, b, &w, t).ok_or_else(|| Error::Precondition("no maximum along the initial ray".into()))?;
    t = tc;
    let mut x = axpy(b, t, &w);
    let mut res = dual_norm_of(&g, vol);
    let mut iterations = 0;
    let mut converged = false;
    let mut alpha = 1.0;
    let mut polish_gate = opts.polish_below;
    while iterations < opts.max_iter {
        if res <= tol {
            converged = true;
            break;
        }
        if params.p == 2.0 && res <= polish_gate {
            if let Some((xn, _)) = newton_polish(&obj, &pc, &x, tol, 30) {
                x = xn;
                converged = true;
                break;
            }
            polish_gate = 0.1 * res;
        }
        iterations += 1;
        let z = pc.solve(kernel, &g);
        let gz = dot(&g, &z);
        let mut accepted = false;
        for _ in 0..40 {
            let mut wn: Vec<f64> = w.iter().zip(&z).map(|(wi, zi)| wi - alpha * zi / t).collect();
            let nn = pnorm(&wn);
            wn.iter_mut().for_each(|v| *v /= nn);
            if let Some((tn, ln, gn)) = ray_max(&obj, b, &wn, t) {
                if ln <= level - 1e-4 * alpha * gz || (ln - level).abs() <= 1e-13 * level.abs().max(1.0) {
                    w = wn;
                    t = tn;
                    tc = tn;
                    level = ln;
                    g = gn;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
        alpha = (alpha * 2.0).min(1e3);
        x = axpy(b, tc, &w);
        res = dual_norm_of(&g, vol);
    }
    let mut flags = Vec::new();
    if !converged {
        flags.push(Flag::IterateLimit);
    }
    let g = obj.grad(&x);
    let energy = energy_values(&x, kernel, params, EnergyMode::I);
    if !(energy.total > 0.0 && energy.total < level_cap) {
        flags.push(Flag::LevelWindow);
    }
    Ok(SolveReport {
        field: base.field.with_values(x),
        energy,
        residual_norm: dual_norm_of(&g, vol),
        iterations,
        converged,
        kind: SolveKind::MountainPass,
        tolerance: tol,
        flags,
    })
}

/// Damped Newton on the residual for p = 2, each step solved by preconditioned MINRES.
fn newton_polish(obj: &Objective, pc: &Preconditioner, x0: &[f64], tol: f64, max_steps: usize) -> Option<(Vec<f64>, f64)> {
    let kernel = obj.kernel;
    let params = obj.params;
    let vol = kernel.cell_volume;
    let (q, r, lam) = (params.q, params.r, params.lambda);
    let mut x = x0.to_vec();
    let mut g = obj.grad(&x);
    let mut res = dual_norm_of(&g, vol);
    for _ in 0..max_steps {
        if res <= tol {
            return Some((x, res));
        }
        let diag: Vec<f64> = x
            .iter()
            .map(|&v| if v > 0.0 { vol * (lam * (q - 1.0) * v.powf(q - 2.0) + (r - 1.0) * v.powf(r - 2.0)) } else { 0.0 })
            .collect();
        let hess = |v: &[f64]| {
            let mut out = apply_raw(v, kernel, params, Mode::Mixed);
            for i in 0..out.len() {
                out[i] -= diag[i] * v[i];
            }
            out
        };
        let rhs: Vec<f64> = g.iter().map(|v| -v).collect();
        let step = minres(&hess, |v| pc.solve(kernel, v), &rhs, 1e-10, 500);
        let mut theta = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let xn = axpy(&x, theta, &step);
            let gn = obj.grad(&xn);
            let rn = dual_norm_of(&gn, vol);
            if rn.is_finite() && rn < (1.0 - 1e-4 * theta) * res {
                x = xn;
                g = gn;
                res = rn;
                improved = true;
                break;
            }
            theta *= 0.5;
        }
        if !improved {
            return None;
        }
    }
    (res <= tol).then_some((x, res))
}

/// Preconditioned MINRES for symmetric (possibly indefinite) systems.
fn minres<A, M>(a: &A, m_inv: M, b: &[f64], rtol: f64, max_iter: usize) -> Vec<f64>
where
    A: Fn(&[f64]) -> Vec<f64>,
    M: Fn(&[f64]) -> Vec<f64>,
{
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r1 = b.to_vec();
    let mut y = m_inv(&r1);
    let beta1 = dot(&r1, &y).sqrt();
    if !(beta1 > 0.0) {
        return x;
    }
    let mut r2 = r1.clone();
    let (mut oldb, mut beta, mut dbar, mut epsln, mut phibar) = (0.0, beta1, 0.0, 0.0, beta1);
    let (mut cs, mut sn) = (-1.0f64, 0.0f64);
    let mut w = vec![0.0; n];
    let mut w2 = vec![0.0; n];
    for itn in 1..=max_iter {
        let s = 1.0 / beta;
        let v: Vec<f64> = y.iter().map(|yi| s * yi).collect();
        y = a(&v);
        if itn >= 2 {
            for i in 0..n {
                y[i] -= (beta / oldb) * r1[i];
            }
        }
        let alfa = dot(&v, &y);
        for i in 0..n {
            y[i] -= (alfa / beta) * r2[i];
        }
        r1 = std::mem::replace(&mut r2, y);
        y = m_inv(&r2);
        oldb = beta;
        beta = dot(&r2, &y).max(0.0).sqrt();
        let oldeps = epsln;
        let delta = cs * dbar + sn * alfa;
        let gbar = sn * dbar - cs * alfa;
        epsln = sn * beta;
        dbar = -cs * beta;
        let gamma = gbar.hypot(beta).max(f64::EPSILON);
        cs = gbar / gamma;
        sn = beta / gamma;
        let phi = cs * phibar;
        phibar *= sn;
        let w1 = std::mem::replace(&mut w2, w);
        w = (0..n).map(|i| (v[i] - oldeps * w1[i] - delta * w2[i]) / gamma).collect();
        for i in 0..n {
            x[i] += phi * w[i];
        }
        if phibar <= rtol * beta1 || beta == 0.0 {
            break;
        }
    }
    x
}

/// Outcome of one solvability probe at fixed λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub lambda: f64,
    pub solvable: bool,
    pub sup_norm: f64,
    pub outer_iterations: usize,
    pub used_supersolution: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSearch {
    pub tol: f64,
    pub max_outer: usize,
    pub blowup_cap: f64,
}

/// Smallest `M·ψ` (ψ the torsion profile, sup ≤ 10³) that is a discrete supersolution above `floor`.
/// `tol` is relative: the torsion shape only needs to be roughly right, since each
/// candidate is checked exactly.
pub fn find_supersolution(floor: &Field, params: &ModelParams, kernel: &KernelMatrix, tol: f64) -> Result<Option<Field>> {
    let vol = kernel.cell_volume;
    let ones = floor.with_values(vec![vol; floor.len()]);
    let start = floor.with_values(positive_profile(kernel, params));
    let torsion = solve_inner_from(&ones, Some(&start), kernel, params, tol * dual_norm_of(&ones.values, vol), &SolverOptions::default())?;
    let psi = torsion.field;
    let a_psi = apply_raw(&psi.values, kernel, params, Mode::Mixed);
    let psi_sup = psi.sup_norm();
    let mut m = 1e-3 / psi_sup;
    while m * psi_sup <= 1e3 {
        let cand = psi.scaled(m);
        let dominates = cand.values.iter().zip(&floor.values).all(|(a, b)| a >= b);
        if dominates {
            let ok = (0..psi.len()).all(|i| {
                let x = cand.values[i].max(0.0);
                let lhs = m.powf(params.p - 1.0) * a_psi[i];
                lhs >= vol * (params.lambda * x.powf(params.q - 1.0) + x.powf(params.r - 1.0))
            });
            if ok {
                return Ok(Some(cand));
            }
        }
        m *= 1.25;
    }
    Ok(None)
}

/// Minimal solution at λ by monotone iteration from the sublinear solution.
pub fn minimal_solution(params: &ModelParams, kernel: &KernelMatrix, search: &LambdaSearch) -> Result<(Probe, SolveReport)> {
    let w = solve_sublinear_relative(params, kernel, 0.3 * search.tol)?;
    let upper = find_supersolution(&w.field, params, kernel, 1e-4)?;
    let rep = monotone_iterate_with(
        &w.field,
        upper.as_ref(),
        params,
        kernel,
        search.tol,
        search.max_outer,
        Some(search.blowup_cap),
    )?;
    let sup_norm = rep.field.sup_norm();
    let probe = Probe {
        lambda: params.lambda,
        solvable: rep.converged && sup_norm < search.blowup_cap,
        sup_norm,
        outer_iterations: rep.iterations,
        used_supersolution: upper.is_some(),
    };
    Ok((probe, rep))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaBracket {
    pub lo: f64,
    pub hi: f64,
    pub probes: Vec<Probe>,
    pub blowup_cap: f64,
}

/// Bisection bracket `[lo, hi]` for the largest λ with a positive solution.
pub fn estimate_lambda(
    params: &ModelParams,
    kernel: &KernelMatrix,
    lambda_sharp: f64,
    lambda_hi: f64,
    tol_lambda: f64,
    tol: f64,
    max_outer: usize,
) -> Result<LambdaBracket> {
    if !(lambda_hi > lambda_sharp && lambda_sharp > 0.0 && tol_lambda > 0.0) {
        return Err(Error::InvalidParams("need 0 < lambda_sharp < lambda_hi and tol_lambda > 0".into()));
    }
    let unbounded = LambdaSearch { tol, max_outer, blowup_cap: f64::INFINITY };
    let (_, base) = minimal_solution(&params.with_lambda(lambda_sharp), kernel, &unbounded)?;
    if !base.converged {
        return Err(Error::Precondition("no minimal solution at lambda_sharp".into()));
    }
    let cap = 1e3 * base.field.sup_norm().max(1.0);
    let search = LambdaSearch { tol, max_outer, blowup_cap: cap };
    let mut probes = Vec::new();
    let (top, _) = minimal_solution(&params.with_lambda(lambda_hi), kernel, &search)?;
    let top_ok = top.solvable;
    probes.push(top);
    if top_ok {
        return Err(Error::Precondition("lambda_hi is still solvable; raise it".into()));
    }
    let (mut lo, mut hi) = (lambda_sharp, lambda_hi);
    while hi - lo > tol_lambda {
        let mid = 0.5 * (lo + hi);
        let (pr, _) = minimal_solution(&params.with_lambda(mid), kernel, &search)?;
        if pr.solvable {
            lo = mid;
        } else {
            hi = mid;
        }
        probes.push(pr);
    }
    Ok(LambdaBracket { lo, hi, probes, blowup_cap: cap })
}

/// `sup ‖u‖_t^t / ρ_ε(u)^t` by preconditioned ascent from seeded positive random fields.
pub fn embedding_ratio(kernel: &KernelMatrix, params: &ModelParams, t: f64, starts: usize, seed: u64, iters: usize) -> f64 {
    let vol = kernel.cell_volume;
    let pc = Preconditioner::new(kernel, params.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ratio = |x: &[f64]| {
        let lt: f64 = x.iter().map(|v| v.abs().powf(t)).sum::<f64>() * vol;
        lt / rho_eps(x, kernel, params).powf(t)
    };
    let mut best = 0.0f64;
    let profile = positive_profile(kernel, params);
    for s in 0..starts {
        let mut x: Vec<f64> = if s == 0 {
            profile.clone()
        } else {
            (0..kernel.len()).map(|_| rng.gen_range(0.0..1.0)).collect()
        };
        let mut val = ratio(&x);
        let mut step = 1.0;
        for _ in 0..iters {
            // gradient of log-ratio at ρ = 1 normalization
            let rho = rho_eps(&x, kernel, params);
            x.iter_mut().for_each(|v| *v /= rho);
            let lt: f64 = x.iter().map(|v| v.abs().powf(t)).sum::<f64>() * vol;
            let a = apply_raw(&x, kernel, params, Mode::Mixed);
            let g: Vec<f64> = x
                .iter()
                .zip(&a)
                .map(|(xi, ai)| t * (vol * xi.abs().powf(t - 1.0).copysign(*xi) / lt - ai))
                .collect();
            let dir = pc.solve(kernel, &g);
            let slope = dot(&g, &dir);
            if !(slope > 1e-300) {
                break;
            }
            let mut accepted = false;
            for _ in 0..40 {
                let xn = axpy(&x, step, &dir);
                let vn = ratio(&xn);
                if vn.is_finite() && vn.ln() >= val.ln() + 1e-4 * step * slope {
                    x = xn;
                    val = vn;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
            step = (step * 2.0).min(1e6);
        }
        best = best.max(val);
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::{energy, residual_dual_norm};
    use crate::lattice::{build_grid, Geometry, Grid};
    use crate::operators::assemble_kernel;

    fn setup(dim: usize, res: usize, p: f64, q: f64, eps: f64, lambda: f64) -> (Grid, ModelParams, KernelMatrix) {
        let g = build_grid(&Geometry::unit_box(dim), res).unwrap();
        let prm = ModelParams::new(3, p, q, 0.5, eps, lambda, None).unwrap();
        let k = assemble_kernel(&g, &prm).unwrap();
        (g, prm, k)
    }

    #[test]
    fn inner_solve_with_zero_source_is_zero() {
        let (g, prm, k) = setup(2, 8, 1.7, 1.3, 0.5, 1.0);
        let rep = solve_inner(&Field::zeros(&g), &k, &prm, 1e-10).unwrap();
        assert!(rep.converged);
        assert!(rep.field.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn inner_solve_matches_tridiagonal_oracle() {
        let g = build_grid(&Geometry::unit_box(1), 40).unwrap();
        let prm = ModelParams::new(3, 2.0, 1.5, 0.5, 0.0, 1.0, None).unwrap();
        let k = assemble_kernel(&g, &prm).unwrap();
        let rhs = Field::constant(&g, k.cell_volume);
        let rep = solve_inner(&rhs, &k, &prm, 1e-11).unwrap();
        assert!(rep.converged);
        // Thomas algorithm on the same three-point stencil
        let n = g.len();
        let h = k.spacing[0];
        let mut diag = vec![2.0 / (h * h); n];
        diag[0] = 3.0 / (h * h);
        diag[n - 1] = 3.0 / (h * h);
        let off = -1.0 / (h * h);
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        c[0] = off / diag[0];
        d[0] = 1.0 / diag[0];
        for i in 1..n {
            let m = diag[i] - off * c[i - 1];
            c[i] = off / m;
            d[i] = (1.0 - off * d[i - 1]) / m;
        }
        let mut u = vec![0.0; n];
        u[n - 1] = d[n - 1];
        for i in (0..n - 1).rev() {
            u[i] = d[i] - c[i] * u[i + 1];
        }
        for i in 0..n {
            assert!((rep.field.values[i] - u[i]).abs() < 1e-9);
            let x = g.node(i)[0];
            assert!((u[i] - x * (1.0 - x) / 2.0).abs() < h * h);
        }
    }

    #[test]
    fn inner_solution_is_positive_for_positive_source() {
        for p in [2.0, 1.6, 2.5] {
            let (g, prm, k) = setup(2, 9, p, 1.2, 0.5, 1.0);
            let rhs = Field::from_fn(&g, |x| k.cell_volume * (1.0 + x[0]));
            let rep = solve_inner(&rhs, &k, &prm, 1e-9).unwrap();
            assert!(rep.converged, "{p}");
            assert!(rep.field.values.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn sublinear_scaling_and_uniqueness() {
        let (g, prm, k) = setup(2, 10, 1.8, 1.3, 0.4, 1.0);
        let a = solve_sublinear(&prm, &k, 1e-10).unwrap();
        let b = solve_sublinear(&prm.with_lambda(2.0), &k, 1e-10).unwrap();
        assert!(a.converged && b.converged);
        assert!(a.energy.total < 0.0);
        let ratio = b.field.sup_norm() / a.field.sup_norm();
        let want = 2f64.powf(1.0 / (1.8 - 1.3));
        assert!((ratio / want - 1.0).abs() < 1e-6, "{ratio} {want}");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let start = Field::from_values(&g, (0..g.len()).map(|_| rng.gen_range(0.1..2.0)).collect()).unwrap();
        let c = solve_sublinear_from(Some(&start), &prm, &k, 1e-10, &SolverOptions::default()).unwrap();
        let gap = c.field.values.iter().zip(&a.field.values).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(gap < 1e-6, "{gap}");
    }

    #[test]
    fn eigenpair_in_one_dimension() {
        let g = build_grid(&Geometry::unit_box(1), 65).unwrap();
        let prm = ModelParams::new(3, 2.0, 1.5, 0.5, 0.0, 1.0, None).unwrap();
        let k = assemble_kernel(&g, &prm).unwrap();
        let (l1, rep) = principal_eigenpair(&prm, &k, 1e-8).unwrap();
        assert!(rep.converged);
        let h = 1.0 / 65.0;
        let exact = 4.0 / (h * h) * (std::f64::consts::PI * h / 2.0).sin().powi(2);
        assert!((l1 - exact).abs() < 1e-8 * exact, "{l1} {exact}");
        assert!(rep.field.values.iter().all(|v| *v > 0.0));
        let (l2, _) = principal_eigenpair(&prm.with_eps(0.2), &k, 1e-8).unwrap();
        let (l3, _) = principal_eigenpair(&prm.with_eps(0.8), &k, 1e-8).unwrap();
        assert!(l1 <= l2 && l2 <= l3);
    }

    #[test]
    fn eigenpair_for_p_not_two() {
        let (_, prm, k) = setup(2, 9, 1.7, 1.3, 0.3, 1.0);
        let (l1, rep) = principal_eigenpair(&prm, &k, 1e-5).unwrap();
        assert!(rep.converged, "{:?}", rep.flags);
        assert!(l1 > 0.0);
        assert!(rep.field.values.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn monotone_fixed_point_and_ordering() {
        let (_, prm, k) = setup(2, 10, 2.0, 1.5, 0.5, 0.5);
        let w = solve_sublinear(&prm, &k, 1e-11).unwrap();
        let z = monotone_iterate(&w.field, None, &prm, &k, 1e-11, 500).unwrap();
        assert!(z.converged, "{:?}", z.flags);
        assert!(z.field.values.iter().zip(&w.field.values).all(|(a, b)| a >= b));
        assert!(z.energy.total < 0.0);
        let again = monotone_iterate(&z.field, Some(&z.field), &prm, &k, 1e-9, 5).unwrap();
        assert!(again.converged);
        assert_eq!(again.iterations, 1);
        let (_, rn) = residual_dual_norm(&z.field, &k, &prm).unwrap();
        assert!(rn < 1e-7, "{rn}");
    }

    #[test]
    fn truncated_minimizer_is_pinched() {
        let (_, prm, k) = setup(2, 10, 2.0, 1.5, 0.5, 0.5);
        let w = solve_sublinear(&prm, &k, 1e-11).unwrap();
        let upper = find_supersolution(&w.field, &prm, &k, 1e-6).unwrap().expect("supersolution");
        let rep = minimize_truncated(&w.field, &upper, &prm, &k, 1e-9).unwrap();
        assert!(rep.converged && !rep.has(Flag::PinchingFailure), "{:?}", rep.flags);
        let (_, rn) = residual_dual_norm(&rep.field, &k, &prm).unwrap();
        assert!(rn <= 2e-9, "{rn}");
        let hat = EnergyMode::IHat { lower: &w.field, upper: &upper };
        let e_low = energy(&w.field, &k, &prm, hat).unwrap().total;
        assert!(energy(&rep.field, &k, &prm, hat).unwrap().total <= e_low);
    }

    #[test]
    fn ball_minimizer_is_interior_and_negative() {
        let (_, prm, k) = setup(2, 10, 2.0, 1.5, 0.5, 0.05);
        let rep = minimize_in_ball(&prm, &k, 0.5, 1e-9).unwrap();
        assert!(rep.converged, "{:?}", rep.flags);
        assert!(rep.energy.total < 0.0);
        let zero = minimize_in_ball(&prm.with_lambda(0.0), &k, 0.5, 1e-9).unwrap();
        assert!(zero.field.sup_norm() < 1e-6, "{}", zero.field.sup_norm());
    }

    #[test]
    fn minres_solves_indefinite_system() {
        let n = 30;
        let diag: Vec<f64> = (0..n).map(|i| i as f64 - 7.5).collect();
        let a = |v: &[f64]| {
            let mut out: Vec<f64> = v.iter().zip(&diag).map(|(x, d)| x * d).collect();
            for i in 0..n - 1 {
                out[i] += 0.3 * v[i + 1];
                out[i + 1] += 0.3 * v[i];
            }
            out
        };
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let x = minres(&a, |v: &[f64]| v.to_vec(), &b, 1e-12, 200);
        let r = a(&x);
        for i in 0..n {
            assert!((r[i] - b[i]).abs() < 1e-9);
        }
    }
}
