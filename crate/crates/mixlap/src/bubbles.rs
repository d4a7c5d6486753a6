//! Cut-off Talenti bubbles and the asymptotics of their norms.
//!
//! The lattice field comes from [`talenti_bubble`]. The constants and slope fits work with
//! the radial profile directly: every quantity is a one- or two-dimensional radial integral,
//! which resolves scales far below any Cartesian grid.

use crate::error::{Error, Result};
use crate::lattice::{gamma_fn, sphere_area, Field, Grid, ModelParams};
use crate::operators::KernelMatrix;
use crate::quad;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BubbleParams {
    pub center: Vec<f64>,
    pub alpha: f64,
    pub eps_b: f64,
    pub cutoff_inner: f64,
    #[serde(default = "one")]
    pub normalization: f64,
}

fn one() -> f64 {
    1.0
}

impl BubbleParams {
    pub fn new(center: Vec<f64>, alpha: f64, eps_b: f64, cutoff_inner: f64) -> Result<Self> {
        let bp = BubbleParams { center, alpha, eps_b, cutoff_inner, normalization: 1.0 };
        bp.validate()?;
        Ok(bp)
    }

    pub fn with_eps(&self, eps_b: f64) -> Self {
        BubbleParams { eps_b, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.cutoff_inner > 0.0 && self.normalization > 0.0) {
            return Err(Error::InvalidParams("bubble alpha, radius and normalization must be positive".into()));
        }
        if !(self.eps_b > 0.0 && self.eps_b < self.cutoff_inner.powf(1.0 / self.alpha)) {
            return Err(Error::InvalidParams("eps_b must lie in (0, r^{1/alpha})".into()));
        }
        Ok(())
    }
}

/// `min(1, (p-1)/(2(N-p)), 1/(2p(1-s)))`.
pub fn default_alpha(params: &ModelParams) -> f64 {
    let (n, p, s) = (params.n(), params.p, params.s);
    let mut a = 1.0f64.min((p - 1.0) / (2.0 * (n - p)));
    if s < 1.0 {
        a = a.min(1.0 / (2.0 * p * (1.0 - s)));
    }
    a
}

/// Unit-center bubble with the default exponent, for the full-space constants.
pub fn default_template(params: &ModelParams) -> Result<BubbleParams> {
    BubbleParams::new(vec![0.0; params.dim_n], default_alpha(params), 1e-3, 0.25)
}

pub fn default_ladder(cutoff_inner: f64, alpha: f64) -> Vec<f64> {
    [0.3, 0.2, 0.13, 0.09].iter().map(|m| m * cutoff_inner.powf(1.0 / alpha)).collect()
}

/// Radial profile `U(ρ) = V(ρ) φ(ρ)`.
#[derive(Debug, Clone, Copy)]
pub struct Profile {
    n: f64,
    p: f64,
    eps_b: f64,
    alpha: f64,
    r: f64,
    k: f64,
}

impl Profile {
    pub fn new(bp: &BubbleParams, params: &ModelParams) -> Result<Self> {
        if !(params.n() > params.p) {
            return Err(Error::InvalidParams("bubbles need N > p".into()));
        }
        bp.validate()?;
        Ok(Profile {
            n: params.n(),
            p: params.p,
            eps_b: bp.eps_b,
            alpha: bp.alpha,
            r: bp.cutoff_inner,
            k: bp.normalization,
        })
    }

    fn conj(&self) -> f64 {
        self.p / (self.p - 1.0)
    }

    fn decay(&self) -> f64 {
        (self.n - self.p) / self.p
    }

    /// Radius below which `V` is essentially flat.
    pub fn core(&self) -> f64 {
        self.eps_b.powf(self.alpha)
    }

    pub fn v(&self, rho: f64) -> f64 {
        let (a1, a2) = (self.alpha * self.decay() / (self.p - 1.0), self.alpha * self.conj());
        self.k * self.eps_b.powf(a1) / (self.eps_b.powf(a2) + rho.powf(self.conj())).powf(self.decay())
    }

    pub fn dv(&self, rho: f64) -> f64 {
        if rho == 0.0 {
            return 0.0;
        }
        let (a1, a2) = (self.alpha * self.decay() / (self.p - 1.0), self.alpha * self.conj());
        let pc = self.conj();
        let base = self.eps_b.powf(a2) + rho.powf(pc);
        -self.k * self.eps_b.powf(a1) * self.decay() * base.powf(-self.decay() - 1.0) * pc * rho.powf(pc - 1.0)
    }

    pub fn cutoff(&self, rho: f64) -> f64 {
        let x = ((rho - self.r) / self.r).clamp(0.0, 1.0);
        1.0 - x * x * (3.0 - 2.0 * x)
    }

    pub fn dcutoff(&self, rho: f64) -> f64 {
        let x = (rho - self.r) / self.r;
        if x <= 0.0 || x >= 1.0 {
            0.0
        } else {
            -6.0 * x * (1.0 - x) / self.r
        }
    }

    pub fn u(&self, rho: f64) -> f64 {
        if rho >= 2.0 * self.r {
            0.0
        } else {
            self.v(rho) * self.cutoff(rho)
        }
    }

    pub fn du(&self, rho: f64) -> f64 {
        if rho >= 2.0 * self.r {
            0.0
        } else {
            self.dv(rho) * self.cutoff(rho) + self.v(rho) * self.dcutoff(rho)
        }
    }
}

pub fn talenti_bubble(bp: &BubbleParams, grid: &Grid, params: &ModelParams) -> Result<Field> {
    let prof = Profile::new(bp, params)?;
    if bp.center.len() != grid.dim {
        return Err(Error::InvalidParams("bubble center has the wrong dimension".into()));
    }
    if grid.geometry.boundary_distance(&bp.center) < 2.0 * bp.cutoff_inner {
        return Err(Error::Precondition("the ball of radius 2r around the center leaves the domain".into()));
    }
    Ok(Field::from_fn(grid, |x| {
        let rho = x.iter().zip(&bp.center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        prof.u(rho)
    }))
}

/// `‖∇u‖_p^p / ‖u‖_{p*}^p` from the face-difference gradient.
pub fn sobolev_quotient(u: &Field, kernel: &KernelMatrix, params: &ModelParams) -> Result<f64> {
    kernel.check(u)?;
    let ps = params.p_star();
    let grad = kernel.local_energy(&u.values, params.p);
    let lps: f64 = u.values.iter().map(|x| x.abs().powf(ps)).sum::<f64>() * kernel.cell_volume;
    if lps == 0.0 {
        return Err(Error::ZeroField);
    }
    Ok(grad / lps.powf(params.p / ps))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BubbleConstants {
    #[serde(rename = "K1")]
    pub k1: f64,
    #[serde(rename = "K2")]
    pub k2: f64,
    #[serde(rename = "S0_est")]
    pub s0_est: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticRow {
    pub eps_b: f64,
    pub h: f64,
    pub quantity: String,
    pub value: f64,
    pub fitted_slope: f64,
    pub theory_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub quantity: String,
    pub h: f64,
    pub fitted_slope: f64,
    pub theory_slope: f64,
    /// Whether the theory exponent is a rate (checked) or only a bound.
    pub checked: bool,
}

impl SlopeFit {
    pub fn relative_error(&self) -> f64 {
        ((self.fitted_slope - self.theory_slope) / self.theory_slope).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BubbleStudy {
    pub constants: BubbleConstants,
    /// `(h, S0)` per radial mesh.
    pub s0_by_grid: Vec<(f64, f64)>,
    pub rows: Vec<AsymptoticRow>,
    pub slopes: Vec<SlopeFit>,
}

impl BubbleStudy {
    pub fn csv(&self) -> String {
        let mut out = String::from("eps_b,h,quantity,value,fitted_slope,theory_slope\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:?},{:?},{},{:?},{:?},{:?}\n",
                r.eps_b, r.h, r.quantity, r.value, r.fitted_slope, r.theory_slope
            ));
        }
        out
    }
}

/// Radial cells `[0, c] ∪ [c, r] ∪ [r, 2r]`: uniform, geometric, uniform.
fn radial_cells(core: f64, r: f64, cells: usize) -> Vec<(f64, f64)> {
    let (n0, n2) = ((cells / 4).max(4), (cells / 4).max(4));
    let n1 = cells.saturating_sub(n0 + n2).max(8);
    let mut out = Vec::with_capacity(n0 + n1 + n2);
    for i in 0..n0 {
        out.push((core * i as f64 / n0 as f64, core * (i + 1) as f64 / n0 as f64));
    }
    let ratio = (r / core).ln() / n1 as f64;
    for i in 0..n1 {
        out.push((core * (ratio * i as f64).exp(), core * (ratio * (i + 1) as f64).exp()));
    }
    for i in 0..n2 {
        out.push((r * (1.0 + i as f64 / n2 as f64), r * (1.0 + (i + 1) as f64 / n2 as f64)));
    }
    out
}

fn radial_integral<F: Fn(f64) -> f64>(f: F, cells: &[(f64, f64)], n: f64) -> f64 {
    let area = sphere_area(n as usize);
    cells
        .iter()
        .map(|&(a, b)| quad::integrate(&|t: f64| f(t) * t.powf(n - 1.0), a, b, 4))
        .sum::<f64>()
        * area
}

/// Full-space integral of a radial function with power-law decay, meshed with `cells` panels.
fn full_space_integral<F: Fn(f64) -> f64>(f: F, n: f64, cells: usize) -> f64 {
    let g = |t: f64| f(t) * t.powf(n - 1.0);
    let (lo, hi) = (1e-6f64, 1e6f64);
    let mut acc = quad::integrate(&g, 0.0, lo, 8);
    let ratio = (hi / lo).ln() / cells as f64;
    for i in 0..cells {
        let (a, b) = (lo * (ratio * i as f64).exp(), lo * (ratio * (i + 1) as f64).exp());
        acc += quad::integrate(&g, a, b, 6);
    }
    // power tail g ~ t^e beyond hi
    let e = (g(2.0 * hi) / g(hi)).ln() / 2f64.ln();
    if e < -1.0 {
        acc += g(hi) * hi / (-e - 1.0);
    }
    acc * sphere_area(n as usize)
}

/// Angular kernel `∫_{S^{N-1}} |aσ - b e|^{-(N+sp)} dσ`.
fn angular_kernel(a: f64, b: f64, n: f64, sp: f64) -> f64 {
    let gam = n + sp;
    if n == 3.0 {
        let e = 1.0 + sp;
        return 2.0 * std::f64::consts::PI / (a * b * e) * ((a - b).abs().powf(-e) - (a + b).powf(-e));
    }
    let f = |th: f64| (a * a + b * b - 2.0 * a * b * th.cos()).powf(-0.5 * gam) * th.sin().powf(n - 2.0);
    let first = ((a - b).abs() / a.max(b)).max(1e-12) * 0.25;
    let br = quad::graded_breaks(0.0, std::f64::consts::PI, first);
    sphere_area(n as usize - 1) * quad::integrate_panels(&f, &br, 8)
}

/// `[u]_{s,p}^p` over all of `ℝ^N` for a radial `u` vanishing beyond `support`, by a
/// midpoint double sum on radial cells.
fn radial_gagliardo<U, D>(u: U, du: D, support: f64, cells: &[(f64, f64)], n: f64, p: f64, s: f64) -> f64
where
    U: Fn(f64) -> f64 + Sync,
    D: Fn(f64) -> f64 + Sync,
{
    let sp = s * p;
    let area = sphere_area(n as usize);
    let mids: Vec<f64> = cells.iter().map(|c| 0.5 * (c.0 + c.1)).collect();
    let widths: Vec<f64> = cells.iter().map(|c| c.1 - c.0).collect();
    let us: Vec<f64> = mids.iter().map(|&m| u(m)).collect();
    let c_n = std::f64::consts::PI.powf(0.5 * (n - 1.0)) * gamma_fn(0.5 * (1.0 + sp)) / gamma_fn(0.5 * (n + sp));
    let rows: Vec<f64> = (0..mids.len())
        .into_par_iter()
        .map(|i| {
            let (a, wa) = (mids[i], widths[i]);
            let mut acc = 0.0;
            for j in 0..mids.len() {
                if j == i {
                    continue;
                }
                let b = mids[j];
                let d = (us[i] - us[j]).abs();
                if d == 0.0 {
                    continue;
                }
                acc += d.powf(p) * angular_kernel(a, b, n, sp) * b.powf(n - 1.0) * widths[j];
            }
            acc *= a.powf(n - 1.0) * wa;
            // diagonal cell: |u(a)-u(b)| ≈ |u'(a)||a-b|
            let beta = p - 1.0 - sp;
            acc += a.powf(n - 1.0) * c_n * du(a).abs().powf(p) * 2.0 * wa.powf(beta + 2.0)
                / ((beta + 1.0) * (beta + 2.0));
            // pairs with the second point outside the support, counted twice
            if us[i] != 0.0 {
                let g = |bb: f64| angular_kernel(a, bb, n, sp) * bb.powf(n - 1.0);
                let far = support * 1e3;
                let br = quad::graded_breaks(support, far, (support - a).max(1e-9 * support) * 0.5);
                let ext = quad::integrate_panels(&g, &br, 6) + area * far.powf(-sp) / sp;
                acc += 2.0 * us[i].abs().powf(p) * ext * a.powf(n - 1.0) * wa;
            }
            acc
        })
        .collect();
    area * rows.iter().sum::<f64>()
}

fn profile_gagliardo(prof: &Profile, cells: &[(f64, f64)], s: f64) -> f64 {
    radial_gagliardo(|x| prof.u(x), |x| prof.du(x), 2.0 * prof.r, cells, prof.n, prof.p, s)
}

fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.abs().ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Full-space `(K1, K2)` for the uncut profile at unit scale.
pub fn full_space_constants(bp: &BubbleParams, params: &ModelParams, cells: usize) -> Result<(f64, f64)> {
    let mut unit = bp.clone();
    unit.eps_b = 1.0;
    unit.cutoff_inner = 2.0;
    let prof = Profile::new(&unit, params)?;
    let (n, p, ps) = (params.n(), params.p, params.p_star());
    let k1 = full_space_integral(|t| prof.dv(t).abs().powf(p), n, cells);
    let k2 = full_space_integral(|t| prof.v(t).powf(ps), n, cells);
    Ok((k1, k2))
}

/// Constants and slope fits over a ladder of bubble scales and radial meshes.
///
/// `grid_ladder` holds radial cell counts; the reported `h` is their reciprocal.
pub fn bubble_constants(
    template: &BubbleParams,
    eps_ladder: &[f64],
    grid_ladder: &[usize],
    params: &ModelParams,
) -> Result<BubbleStudy> {
    if eps_ladder.len() < 3 {
        return Err(Error::InvalidParams("need at least three eps_b values".into()));
    }
    if grid_ladder.len() < 2 {
        return Err(Error::InvalidParams("need at least two radial meshes".into()));
    }
    let (n, p, s, ps) = (params.n(), params.p, params.s, params.p_star());
    let alpha = template.alpha;
    let t = params.q;
    let mut grids: Vec<usize> = grid_ladder.to_vec();
    grids.sort_unstable();
    let mut k_by_grid = Vec::new();
    for &g in &grids {
        k_by_grid.push(full_space_constants(template, params, g)?);
    }
    let s0_by_grid: Vec<(f64, f64)> = grids
        .iter()
        .zip(&k_by_grid)
        .map(|(&g, &(k1, k2))| (1.0 / g as f64, k1 / k2.powf(p / ps)))
        .collect();
    let m = k_by_grid.len();
    let richardson = |a: f64, b: f64, c: Option<f64>| match c {
        // observed-order extrapolation over three meshes when the differences contract
        Some(c) if (b - a).abs() > 0.0 && ((c - b) / (b - a)).abs() < 1.0 && ((c - b) / (b - a)) > 0.0 => {
            let ratio = (c - b) / (b - a);
            c + (c - b) * ratio / (1.0 - ratio)
        }
        _ => b,
    };
    let pick = |f: fn(&(f64, f64)) -> f64| {
        if m >= 3 {
            richardson(f(&k_by_grid[m - 3]), f(&k_by_grid[m - 2]), Some(f(&k_by_grid[m - 1])))
        } else {
            f(&k_by_grid[m - 1])
        }
    };
    let k1 = pick(|x| x.0);
    let k2 = pick(|x| x.1);
    let constants = BubbleConstants { k1, k2, s0_est: k1 / k2.powf(p / ps) };

    let theory = [
        ("grad_excess", alpha * (n - p) / (p - 1.0), true),
        ("lpstar_deficit", alpha * n / (p - 1.0), true),
        ("gagliardo", (alpha * (n - p) / (p - 1.0)).min(alpha * p * (1.0 - s)), true),
        ("core_vt", alpha * (n - t * (n - p) / p), true),
        ("ball_vt", alpha * (n - t * (n - p) / p), false),
    ];
    let mut rows = Vec::new();
    let mut slopes = Vec::new();
    for &g in &grids {
        let h = 1.0 / g as f64;
        let mut values: Vec<[f64; 5]> = Vec::new();
        for &e in eps_ladder {
            let bp = template.with_eps(e);
            let prof = Profile::new(&bp, params)?;
            let cells = radial_cells(prof.core(), bp.cutoff_inner, g);
            let grad = radial_integral(|x| prof.du(x).abs().powf(p), &cells, n);
            let lps = radial_integral(|x| prof.u(x).abs().powf(ps), &cells, n);
            let gag = profile_gagliardo(&prof, &cells, s);
            let core_cells: Vec<(f64, f64)> = cells.iter().copied().filter(|c| c.1 <= prof.core() * (1.0 + 1e-12)).collect();
            let core_vt = radial_integral(|x| prof.v(x).powf(t), &core_cells, n);
            let ball_cells: Vec<(f64, f64)> = cells.iter().copied().filter(|c| c.1 <= bp.cutoff_inner * (1.0 + 1e-12)).collect();
            let ball_vt = radial_integral(|x| prof.v(x).powf(t), &ball_cells, n);
            values.push([grad - k1, k2 - lps, gag, core_vt, ball_vt]);
        }
        for (qi, &(name, th, checked)) in theory.iter().enumerate() {
            let ys: Vec<f64> = values.iter().map(|v| v[qi]).collect();
            let slope = fit_slope(eps_ladder, &ys);
            slopes.push(SlopeFit { quantity: name.into(), h, fitted_slope: slope, theory_slope: th, checked });
            for (k, &e) in eps_ladder.iter().enumerate() {
                rows.push(AsymptoticRow {
                    eps_b: e,
                    h,
                    quantity: name.into(),
                    value: ys[k],
                    fitted_slope: slope,
                    theory_slope: th,
                });
            }
        }
    }
    Ok(BubbleStudy { constants, s0_by_grid, rows, slopes })
}
