//! Energies, residuals, the fibering map, threshold constants and scalar inequalities.

use crate::error::{Error, Result};
use crate::lattice::{Field, ModelParams};
use crate::operators::{apply_raw, energies_raw, KernelMatrix, Mode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub local_term: f64,
    pub nonlocal_term: f64,
    pub concave_term: f64,
    pub critical_term: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    fn new(local_term: f64, nonlocal_term: f64, concave_term: f64, critical_term: f64) -> Self {
        EnergyBreakdown {
            local_term,
            nonlocal_term,
            concave_term,
            critical_term,
            total: local_term + nonlocal_term - concave_term - critical_term,
        }
    }
}

/// Which functional to evaluate.
#[derive(Debug, Clone, Copy)]
pub enum EnergyMode<'a> {
    /// Full functional with positive parts in both powers.
    I,
    /// Concave part only.
    J,
    /// Linearized at `v`: `(1/p)ρ^p - ∫ f_λ(v) u_+`.
    K(&'a Field),
    /// Nonlinearity clamped between two barriers.
    IHat { lower: &'a Field, upper: &'a Field },
}

#[inline]
fn pos_pow(t: f64, e: f64) -> f64 {
    if t > 0.0 {
        t.powf(e)
    } else {
        0.0
    }
}

#[inline]
fn signed_pow(t: f64, e: f64) -> f64 {
    if t == 0.0 {
        0.0
    } else {
        t.abs().powf(e).copysign(t)
    }
}

/// `λ|t|^{q-2}t + |t|^{r-2}t`, optionally with `t` clamped into `[lower_i, upper_i]`.
pub fn f_lambda(t: f64, params: &ModelParams, truncation: Option<(&Field, &Field, usize)>) -> f64 {
    let t = match truncation {
        Some((lo, hi, i)) => t.clamp(lo.values[i], hi.values[i]),
        None => t,
    };
    params.lambda * signed_pow(t, params.q - 1.0) + signed_pow(t, params.r - 1.0)
}

/// Primitive of the clamped power `clamp(t, a, b)^{e-1}` (for `0 <= a <= b`).
fn clamped_primitive(u: f64, a: f64, b: f64, e: f64) -> f64 {
    let fa = pos_pow(a, e - 1.0);
    if u <= a {
        return fa * u;
    }
    let base = fa * a - a.powf(e) / e;
    if u <= b {
        base + u.powf(e) / e
    } else {
        base + b.powf(e) / e + pos_pow(b, e - 1.0) * (u - b)
    }
}

fn check_barriers(u: &Field, lower: &Field, upper: &Field) -> Result<()> {
    u.same_grid(lower)?;
    u.same_grid(upper)?;
    for (a, b) in lower.values.iter().zip(&upper.values) {
        if !(*a >= 0.0 && a <= b) {
            return Err(Error::Precondition("barriers must satisfy 0 <= lower <= upper".into()));
        }
    }
    Ok(())
}

fn check_mode(u: &Field, kernel: &KernelMatrix, mode: &EnergyMode) -> Result<()> {
    kernel.check(u)?;
    match mode {
        EnergyMode::K(v) => {
            u.same_grid(v)?;
            if v.values.iter().any(|x| !(*x > 0.0)) {
                return Err(Error::Precondition("linearization point must be positive".into()));
            }
        }
        EnergyMode::IHat { lower, upper } => check_barriers(u, lower, upper)?,
        _ => {}
    }
    Ok(())
}

pub fn energy(u: &Field, kernel: &KernelMatrix, params: &ModelParams, mode: EnergyMode) -> Result<EnergyBreakdown> {
    check_mode(u, kernel, &mode)?;
    Ok(energy_values(&u.values, kernel, params, mode))
}

/// Unchecked evaluation on raw nodal values.
pub fn energy_values(u: &[f64], kernel: &KernelMatrix, params: &ModelParams, mode: EnergyMode) -> EnergyBreakdown {
    let (p, q, r, lam) = (params.p, params.q, params.r, params.lambda);
    let vol = kernel.cell_volume;
    let (loc, nl) = energies_raw(u, kernel, params);
    let (local_term, nonlocal_term) = (loc / p, params.eps * nl / p);
    let (mut conc, mut crit) = (0.0, 0.0);
    match mode {
        EnergyMode::I => {
            for &x in u {
                conc += pos_pow(x, q);
                crit += pos_pow(x, r);
            }
            conc *= lam / q;
            crit /= r;
        }
        EnergyMode::J => {
            for &x in u {
                conc += pos_pow(x, q);
            }
            conc *= lam / q;
        }
        EnergyMode::K(v) => {
            for (&x, &w) in u.iter().zip(&v.values) {
                let up = x.max(0.0);
                conc += w.powf(q - 1.0) * up;
                crit += w.powf(r - 1.0) * up;
            }
            conc *= lam;
        }
        EnergyMode::IHat { lower, upper } => {
            for i in 0..u.len() {
                let (a, b) = (lower.values[i], upper.values[i]);
                conc += clamped_primitive(u[i], a, b, q);
                crit += clamped_primitive(u[i], a, b, r);
            }
            conc *= lam;
        }
    }
    EnergyBreakdown::new(local_term, nonlocal_term, conc * vol, crit * vol)
}

/// Volume-weighted gradient of the chosen energy.
pub fn gradient_values(u: &[f64], kernel: &KernelMatrix, params: &ModelParams, mode: EnergyMode) -> Vec<f64> {
    let (q, r, lam) = (params.q, params.r, params.lambda);
    let vol = kernel.cell_volume;
    let mut g = apply_raw(u, kernel, params, Mode::Mixed);
    match mode {
        EnergyMode::I => {
            for (gi, &x) in g.iter_mut().zip(u) {
                *gi -= vol * (lam * pos_pow(x, q - 1.0) + pos_pow(x, r - 1.0));
            }
        }
        EnergyMode::J => {
            for (gi, &x) in g.iter_mut().zip(u) {
                *gi -= vol * lam * pos_pow(x, q - 1.0);
            }
        }
        EnergyMode::K(v) => {
            // one-sided derivative of u_+ taken as 1 at u = 0
            for i in 0..u.len() {
                if u[i] >= 0.0 {
                    let w = v.values[i];
                    g[i] -= vol * (lam * w.powf(q - 1.0) + w.powf(r - 1.0));
                }
            }
        }
        EnergyMode::IHat { lower, upper } => {
            for i in 0..u.len() {
                let t = u[i].clamp(lower.values[i], upper.values[i]);
                g[i] -= vol * (lam * pos_pow(t, q - 1.0) + pos_pow(t, r - 1.0));
            }
        }
    }
    g
}

pub fn gradient(u: &Field, kernel: &KernelMatrix, params: &ModelParams, mode: EnergyMode) -> Result<Field> {
    check_mode(u, kernel, &mode)?;
    Ok(u.with_values(gradient_values(&u.values, kernel, params, mode)))
}

/// `sqrt(Σ vol (res_i/vol)^2)` of a volume-weighted residual.
pub fn dual_norm_of(res: &[f64], vol: f64) -> f64 {
    (res.iter().map(|x| (x / vol) * (x / vol)).sum::<f64>() * vol).sqrt()
}

/// Residual of the full equation and its dual-norm proxy.
pub fn residual_dual_norm(u: &Field, kernel: &KernelMatrix, params: &ModelParams) -> Result<(Field, f64)> {
    let res = gradient(u, kernel, params, EnergyMode::I)?;
    let norm = dual_norm_of(&res.values, kernel.cell_volume);
    Ok((res, norm))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticalCount {
    Zero,
    One,
    Two,
}

/// `g(t) = I(t u/ρ_ε(u))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiberingProfile {
    pub samples: Vec<(f64, f64)>,
    /// Local minimum of `g`.
    pub t1: Option<f64>,
    /// Local maximum of `g`.
    pub t2: Option<f64>,
    pub classification: CriticalCount,
    /// Set when the maximum value is not positive.
    pub flagged: bool,
    pub rho: f64,
    p: f64,
    q: f64,
    r: f64,
    concave: f64,
    critical: f64,
}

impl FiberingProfile {
    pub fn g(&self, t: f64) -> f64 {
        t.powf(self.p) / self.p - self.concave / self.q * t.powf(self.q) - self.critical / self.r * t.powf(self.r)
    }

    pub fn dg(&self, t: f64) -> f64 {
        t.powf(self.p - 1.0) - self.concave * t.powf(self.q - 1.0) - self.critical * t.powf(self.r - 1.0)
    }
}

pub fn fibering_profile(u: &Field, kernel: &KernelMatrix, params: &ModelParams) -> Result<FiberingProfile> {
    kernel.check(u)?;
    let (p, q, r) = (params.p, params.q, params.r);
    let (loc, nl) = energies_raw(&u.values, kernel, params);
    let rho_p = loc + params.eps * nl;
    if !(rho_p > 0.0) {
        return Err(Error::ZeroField);
    }
    let rho = rho_p.powf(1.0 / p);
    let vol = kernel.cell_volume;
    let lq: f64 = u.values.iter().map(|&x| pos_pow(x, q)).sum::<f64>() * vol;
    let lr: f64 = u.values.iter().map(|&x| pos_pow(x, r)).sum::<f64>() * vol;
    let mut prof = FiberingProfile {
        samples: Vec::new(),
        t1: None,
        t2: None,
        classification: CriticalCount::Zero,
        flagged: false,
        rho,
        p,
        q,
        r,
        concave: params.lambda * lq / rho.powf(q),
        critical: lr / rho.powf(r),
    };
    const COUNT: usize = 512;
    let (lo, hi) = (1e-4f64.ln(), 1e2f64.ln());
    let ts: Vec<f64> = (0..COUNT)
        .map(|k| (lo + (hi - lo) * k as f64 / (COUNT - 1) as f64).exp())
        .collect();
    prof.samples = ts.iter().map(|&t| (t, prof.g(t))).collect();
    let sign = |v: f64| if v.abs() < 1e-12 { 0 } else if v > 0.0 { 1 } else { -1 };
    let mut crit = Vec::new();
    let mut prev: Option<(f64, i32)> = None;
    for &t in &ts {
        let sg = sign(prof.dg(t));
        if sg == 0 {
            continue;
        }
        if let Some((tp, sp)) = prev {
            if sp != sg {
                let (mut a, mut b) = (tp, t);
                while (b - a) > 1e-10 * b {
                    let m = 0.5 * (a + b);
                    if sign(prof.dg(m)) == sp {
                        a = m;
                    } else {
                        b = m;
                    }
                }
                crit.push((0.5 * (a + b), sp));
            }
        }
        prev = Some((t, sg));
    }
    for &(t, from) in &crit {
        if from < 0 && prof.t1.is_none() {
            prof.t1 = Some(t);
        } else if from > 0 && prof.t2.is_none() {
            prof.t2 = Some(t);
        }
    }
    prof.classification = match crit.len() {
        0 => CriticalCount::Zero,
        1 => CriticalCount::One,
        _ => CriticalCount::Two,
    };
    prof.flagged = prof.t2.map(|t| prof.g(t) <= 0.0).unwrap_or(false);
    Ok(prof)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub lambda_star: f64,
    pub r0: f64,
    pub delta0: f64,
    pub lambda_star_star: f64,
    pub lambda_sharp: f64,
    pub apq_ok: bool,
}

pub fn apq_ok(p: f64, q: f64, dim_n: usize) -> bool {
    let n = dim_n as f64;
    if 2.0 <= p && p < 3.0 {
        1.0 < q && q < p
    } else if p >= 3.0 && n > p {
        let ps = n * p / (n - p);
        ps - 2.0 / (p - 1.0) < q && q < p
    } else {
        false
    }
}

pub fn lambda_star(params: &ModelParams, s0: f64, omega_measure: f64) -> f64 {
    let (p, q, r, n) = (params.p, params.q, params.r, params.n());
    let base = (s0.powf(n / p) / (n * omega_measure)).powf((r - q) / r);
    base * (1.0 / p - 1.0 / r).powf(q / r) / (1.0 / q - 1.0 / p)
}

/// Upper end of the energy window in which compactness is available.
pub fn compactness_level(params: &ModelParams, s0: f64) -> f64 {
    s0.powf(params.n() / params.p) / params.n()
}

pub fn thresholds(params: &ModelParams, s0: f64, omega_measure: f64, c1: f64, c2: f64) -> Result<Thresholds> {
    for (name, v) in [("S0", s0), ("|Ω|", omega_measure), ("C1", c1), ("C2", c2)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidParams(format!("{name} must be positive")));
        }
    }
    let (p, q, r) = (params.p, params.q, params.r);
    if !(q < p && p < r) {
        return Err(Error::InvalidParams("need q < p < r".into()));
    }
    let phi = |rho: f64| rho.powf(p) / p - c1 * rho.powf(r);
    let rho_m = (r * c1).powf(-1.0 / (r - p));
    let peak = rho_m.powf(p) * (1.0 / p - 1.0 / r);
    let delta0 = 0.25 * peak;
    let zero = (p * c1).powf(-1.0 / (r - p));
    let (mut a, mut b) = (rho_m, zero);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if phi(m) >= 2.0 * delta0 {
            a = m;
        } else {
            b = m;
        }
    }
    let r0 = a;
    let ls = lambda_star(params, s0, omega_measure);
    let lss = delta0 / (c2 * r0.powf(q));
    Ok(Thresholds {
        lambda_star: ls,
        r0,
        delta0,
        lambda_star_star: lss,
        lambda_sharp: ls.min(lss),
        apq_ok: apq_ok(p, q, params.dim_n),
    })
}

/// Even power capped by linear growth beyond `T`; returns `(φ, φ')`.
pub fn moser_truncation(t: f64, beta: f64, big_t: f64) -> (f64, f64) {
    let tb = big_t.powf(beta);
    let slope = beta * big_t.powf(beta - 1.0);
    if t <= -big_t {
        (-slope * (t + big_t) + tb, -slope)
    } else if t >= big_t {
        (slope * (t - big_t) + tb, slope)
    } else {
        (t.abs().powf(beta), signed_pow(t, beta - 1.0) * beta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalityCheck {
    pub name: String,
    /// Best constant on the full sample.
    pub constant: f64,
    /// Best constant on the first half.
    pub constant_half: f64,
    pub drift: f64,
    /// Most negative slack for the constant-free inequalities (zero otherwise).
    pub min_slack: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalityReport {
    pub sample_count: usize,
    pub checks: Vec<InequalityCheck>,
}

impl InequalityReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

fn fit_check(name: &str, ratios: &[f64], want_min: bool, min_slack: f64) -> InequalityCheck {
    let best = |xs: &[f64]| {
        if want_min {
            xs.iter().copied().fold(f64::INFINITY, f64::min)
        } else {
            xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        }
    };
    let full = best(ratios);
    let half = best(&ratios[..ratios.len() / 2]);
    let drift = ((full - half) / full).abs();
    let finite = full.is_finite() && full > 0.0;
    InequalityCheck {
        name: name.into(),
        constant: full,
        constant_half: half,
        drift,
        min_slack,
        passed: finite && drift < 0.05 && min_slack >= -1e-9,
    }
}

/// Samples the six scalar and vector inequalities and fits their constants.
pub fn inequality_suite(sample_count: usize, params: &ModelParams, seed: u64) -> Result<InequalityReport> {
    if sample_count < 1000 {
        return Err(Error::InvalidParams("sample_count must be at least 1000".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = params.dim_n.max(1);
    let mut checks = Vec::new();

    // (i) strong monotonicity of ξ ↦ |ξ|^{t-2}ξ, t = p
    let t = params.p;
    let mut ratios = Vec::with_capacity(sample_count);
    for _ in 0..sample_count {
        let xi: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eta: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (nx, ne) = (norm(&xi), norm(&eta));
        let diff2: f64 = xi.iter().zip(&eta).map(|(a, b)| (a - b) * (a - b)).sum();
        let lhs: f64 = (0..dim)
            .map(|k| (nx.powf(t - 2.0) * xi[k] - ne.powf(t - 2.0) * eta[k]) * (xi[k] - eta[k]))
            .sum();
        let rhs = (nx + ne).powf(t - 2.0) * diff2;
        ratios.push(lhs / rhs);
    }
    checks.push(fit_check("monotonicity", &ratios, true, 0.0));

    // (ii) binomial remainder, 1 <= t <= 3, normalized to max(a, b) = 1
    let mut ratios = Vec::with_capacity(sample_count);
    for _ in 0..sample_count {
        let t = rng.gen_range(1.0..=3.0);
        let b = log_uniform(&mut rng, 1e-6, 1.0);
        let lhs = ((1.0 + b).powf(t) - 1.0 - b.powf(t) - t * b * (1.0 + b.powf(t - 2.0))).abs();
        ratios.push(lhs / b.powf(t - 1.0));
    }
    checks.push(fit_check("binomial remainder", &ratios, false, 0.0));

    // (iii) and (iv): constant-free lower bounds, report the ratio to the bound
    for (name, tlo, thi, extra) in [("binomial t>=3", 3.0, 6.0, true), ("binomial t>=2", 2.0, 5.0, false)] {
        let mut ratios = Vec::with_capacity(sample_count);
        let mut slack = f64::INFINITY;
        for k in 0..sample_count {
            let t = rng.gen_range(tlo..=thi);
            let a = if k == 0 { 0.0 } else { log_uniform(&mut rng, 1e-4, 1e4) };
            let lhs = (1.0 + a).powf(t);
            let mut rhs = 1.0 + a.powf(t) + t * a;
            if extra {
                rhs += t * a.powf(t - 1.0);
            }
            ratios.push(lhs / rhs);
            slack = slack.min((lhs - rhs) / lhs);
        }
        checks.push(fit_check(name, &ratios, true, slack));
    }

    // (v) 2 <= t < 3, ζ ∈ [t-1, 2]
    let mut ratios = Vec::with_capacity(sample_count);
    for _ in 0..sample_count {
        let t = rng.gen_range(2.0..3.0);
        let zeta = rng.gen_range(t - 1.0..=2.0);
        let a = log_uniform(&mut rng, 1e-3, 1e3);
        let c = rng.gen_range(0.0..std::f64::consts::TAU).cos();
        let excess = (1.0 + a * a + 2.0 * a * c).max(0.0).powf(0.5 * t) - 1.0 - a.powf(t) - t * a * c;
        ratios.push(excess.max(0.0) / a.powf(zeta));
    }
    checks.push(fit_check("cosine expansion t<3", &ratios, false, 0.0));

    // (vi) t >= 3 with the second power a^{t-1}
    let mut ratios = Vec::with_capacity(sample_count);
    for _ in 0..sample_count {
        let t = rng.gen_range(3.0..5.0);
        let a = log_uniform(&mut rng, 1e-3, 1e3);
        let c = rng.gen_range(0.0..std::f64::consts::TAU).cos();
        let excess = (1.0 + a * a + 2.0 * a * c).max(0.0).powf(0.5 * t) - 1.0 - a.powf(t) - t * a * c;
        ratios.push(excess.max(0.0) / (a * a + a.powf(t - 1.0)));
    }
    checks.push(fit_check("cosine expansion t>=3", &ratios, false, 0.0));

    Ok(InequalityReport { sample_count, checks })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest `β` with `f_λ(βt) <= f_λ'(t)` on a log grid over `(0, M]`.
pub fn find_beta0(lambda: f64, lambda_prime: f64, m: f64, params: &ModelParams) -> Result<f64> {
    if !(lambda > 0.0 && lambda < lambda_prime) {
        return Err(Error::InvalidParams("need 0 < λ < λ'".into()));
    }
    if !(m > 0.0) {
        return Err(Error::InvalidParams("M must be positive".into()));
    }
    let (q, r) = (params.q, params.r);
    let f = |lam: f64, t: f64| lam * t.powf(q - 1.0) + t.powf(r - 1.0);
    const COUNT: usize = 10_000;
    let (lo, hi) = ((m * 1e-8).ln(), m.ln());
    let ts: Vec<f64> = (0..COUNT)
        .map(|k| (lo + (hi - lo) * k as f64 / (COUNT - 1) as f64).exp())
        .collect();
    let ok = |beta: f64| ts.iter().all(|&t| f(lambda, beta * t) <= f(lambda_prime, t));
    let mut b_hi = 2.0;
    while ok(b_hi) {
        b_hi *= 2.0;
    }
    let mut b_lo = 1.0;
    while b_hi - b_lo > 1e-12 {
        let mid = 0.5 * (b_lo + b_hi);
        if ok(mid) {
            b_lo = mid;
        } else {
            b_hi = mid;
        }
    }
    Ok(b_lo)
}
