//! Discrete local and fractional p-Laplacians, their energies, and the nonlocal form.
//!
//! The local part uses face differences: every interior face between cells `i` and `j`
//! along axis `k` carries `|(u_j - u_i)/h_k|^p` over one cell volume, and every face to the
//! exterior carries `|2u_i/h_k|^p` over half a cell volume (the boundary sits on the face).
//!
//! The fractional part stores interaction weights by lattice offset. Because the grid is
//! uniform, `w_ij` depends only on `|m_i - m_j|` componentwise, so the table is the whole
//! symmetric matrix.

use crate::error::{Error, Result};
use crate::lattice::{exterior_tail, ExteriorTail, Field, Grid, ModelParams};
use crate::quad;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// `w_ij = 2 vol / |x_i - x_j|^{N+sp}`.
    Midpoint,
    /// `w_ij = 2 ∫_{C_j} K(y - x_i) ((y - x_i)·d)/|d|^2 dy` with `d = x_j - x_i`:
    /// reproduces the cell integral of the kernel against linear functions.
    #[default]
    Moment,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KernelOptions {
    pub scheme: WeightScheme,
    /// Largest admissible `n^2` for the pair interactions.
    pub pair_budget: usize,
    pub truncation_radius: Option<f64>,
    /// Use the FFT product when `p = 2` (no pair budget applies then).
    pub fft: bool,
}

impl Default for KernelOptions {
    fn default() -> Self {
        KernelOptions { scheme: WeightScheme::Moment, pair_budget: 400_000_000, truncation_radius: None, fft: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Local,
    Nonlocal,
    Mixed,
}

#[derive(Debug, Clone)]
struct Faces {
    /// (i, j, axis) with j the + neighbor of i.
    inner: Vec<(usize, usize, usize)>,
    /// (i, axis) for each face of cell i that touches the exterior.
    boundary: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct KernelMatrix {
    pub tails: ExteriorTail,
    pub dim_n: usize,
    pub s: f64,
    pub p: f64,
    pub scheme: WeightScheme,
    pub cell_volume: f64,
    pub spacing: Vec<f64>,
    dim: usize,
    table: Vec<f64>,
    strides: [usize; 3],
    multi: Vec<[i32; 3]>,
    row_sums: Vec<f64>,
    faces: Faces,
    grid_key: u64,
    conv: Option<Convolver>,
}

/// Product of the weight table with a field by circulant embedding and FFT.
#[derive(Clone)]
struct Convolver {
    dims: [usize; 3],
    spectrum: Vec<f64>,
    positions: Vec<usize>,
    forward: [Arc<dyn Fft<f64>>; 3],
    inverse: [Arc<dyn Fft<f64>>; 3],
}

impl std::fmt::Debug for Convolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Convolver").field("dims", &self.dims).finish()
    }
}

impl Convolver {
    fn new(table: &[f64], ext: [usize; 3], strides: [usize; 3], multi: &[[i32; 3]]) -> Self {
        let dims = [
            if ext[0] > 1 { 2 * ext[0] } else { 1 },
            if ext[1] > 1 { 2 * ext[1] } else { 1 },
            if ext[2] > 1 { 2 * ext[2] } else { 1 },
        ];
        let mut planner = FftPlanner::<f64>::new();
        let forward = [planner.plan_fft_forward(dims[0]), planner.plan_fft_forward(dims[1]), planner.plan_fft_forward(dims[2])];
        let inverse = [planner.plan_fft_inverse(dims[0]), planner.plan_fft_inverse(dims[1]), planner.plan_fft_inverse(dims[2])];
        let total = dims[0] * dims[1] * dims[2];
        let mut buf = vec![Complex64::new(0.0, 0.0); total];
        for a in 0..dims[0] {
            for b in 0..dims[1] {
                for c in 0..dims[2] {
                    let fold = |o: usize, m: usize, e: usize| -> Option<usize> {
                        let d = if o <= m / 2 { o } else { m - o };
                        if m > 1 && d >= e { None } else { Some(d) }
                    };
                    if let (Some(x), Some(y), Some(z)) = (fold(a, dims[0], ext[0]), fold(b, dims[1], ext[1]), fold(c, dims[2], ext[2])) {
                        buf[(a * dims[1] + b) * dims[2] + c].re = table[x * strides[0] + y * strides[1] + z];
                    }
                }
            }
        }
        let mut cv = Convolver {
            dims,
            spectrum: Vec::new(),
            positions: multi
                .iter()
                .map(|m| (m[0] as usize * dims[1] + m[1] as usize) * dims[2] + m[2] as usize)
                .collect(),
            forward,
            inverse,
        };
        cv.transform(&mut buf, true);
        cv.spectrum = buf.iter().map(|z| z.re).collect();
        cv
    }

    fn transform(&self, buf: &mut [Complex64], forward: bool) {
        let plans = if forward { &self.forward } else { &self.inverse };
        let d = self.dims;
        // last axis is contiguous
        if d[2] > 1 {
            plans[2].process(buf);
        }
        let mut line = Vec::new();
        if d[1] > 1 {
            line.resize(d[1], Complex64::new(0.0, 0.0));
            for a in 0..d[0] {
                for c in 0..d[2] {
                    for b in 0..d[1] {
                        line[b] = buf[(a * d[1] + b) * d[2] + c];
                    }
                    plans[1].process(&mut line);
                    for b in 0..d[1] {
                        buf[(a * d[1] + b) * d[2] + c] = line[b];
                    }
                }
            }
        }
        if d[0] > 1 {
            line.resize(d[0], Complex64::new(0.0, 0.0));
            for b in 0..d[1] {
                for c in 0..d[2] {
                    for a in 0..d[0] {
                        line[a] = buf[(a * d[1] + b) * d[2] + c];
                    }
                    plans[0].process(&mut line);
                    for a in 0..d[0] {
                        buf[(a * d[1] + b) * d[2] + c] = line[a];
                    }
                }
            }
        }
    }

    /// `(W u)_i = Σ_j w_ij u_j` over interior nodes.
    fn apply(&self, u: &[f64]) -> Vec<f64> {
        let total = self.dims[0] * self.dims[1] * self.dims[2];
        let mut buf = vec![Complex64::new(0.0, 0.0); total];
        for (k, &pos) in self.positions.iter().enumerate() {
            buf[pos].re = u[k];
        }
        self.transform(&mut buf, true);
        for (z, &s) in buf.iter_mut().zip(&self.spectrum) {
            *z *= s;
        }
        self.transform(&mut buf, false);
        let scale = 1.0 / total as f64;
        self.positions.iter().map(|&pos| buf[pos].re * scale).collect()
    }
}

pub fn assemble_kernel(grid: &Grid, params: &ModelParams) -> Result<KernelMatrix> {
    assemble_kernel_with(grid, params, &KernelOptions::default())
}

pub fn assemble_kernel_with(
    grid: &Grid,
    params: &ModelParams,
    opts: &KernelOptions,
) -> Result<KernelMatrix> {
    let n = grid.len();
    let fast = params.p == 2.0 && opts.fft;
    if !fast && n.saturating_mul(n) > opts.pair_budget {
        return Err(Error::Budget { nodes: n, budget: opts.pair_budget });
    }
    let kexp = params.n() + params.s * params.p;
    if !(kexp > 0.0) {
        return Err(Error::InvalidParams("need N + sp > 0".into()));
    }
    let tails = exterior_tail(grid, params, opts.truncation_radius)?;
    let dim = grid.dim;
    let mut ext = [1usize; 3];
    for k in 0..dim {
        ext[k] = grid.shape[k];
    }
    let strides = [ext[1] * ext[2], ext[2], 1];
    let total = ext[0] * ext[1] * ext[2];
    let table: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|idx| {
            let off = [idx / strides[0], (idx / strides[1]) % ext[1], idx % ext[2]];
            if off == [0, 0, 0] {
                0.0
            } else {
                offset_weight(&off, &grid.spacing, dim, kexp, grid.cell_volume, opts.scheme)
            }
        })
        .collect();
    let multi: Vec<[i32; 3]> = (0..n)
        .map(|i| {
            let m = grid.multi_index(i);
            [m[0] as i32, m[1] as i32, m[2] as i32]
        })
        .collect();
    let mut inner = Vec::new();
    let mut boundary = Vec::new();
    for i in 0..n {
        for k in 0..dim {
            match grid.neighbor(i, k, 1) {
                Some(j) => inner.push((i, j, k)),
                None => boundary.push((i, k)),
            }
            if grid.neighbor(i, k, -1).is_none() {
                boundary.push((i, k));
            }
        }
    }
    let mut km = KernelMatrix {
        tails,
        dim_n: params.dim_n,
        s: params.s,
        p: params.p,
        scheme: opts.scheme,
        cell_volume: grid.cell_volume,
        spacing: grid.spacing.clone(),
        dim,
        table,
        strides,
        multi,
        row_sums: Vec::new(),
        faces: Faces { inner, boundary },
        grid_key: grid.key(),
        conv: None,
    };
    if fast {
        let cv = Convolver::new(&km.table, ext, strides, &km.multi);
        km.row_sums = cv.apply(&vec![1.0; n]);
        km.conv = Some(cv);
    } else {
        km.row_sums = (0..n)
            .into_par_iter()
            .map(|i| (0..n).map(|j| km.weight(i, j)).sum())
            .collect();
    }
    Ok(km)
}

fn offset_weight(off: &[usize; 3], h: &[f64], dim: usize, kexp: f64, vol: f64, scheme: WeightScheme) -> f64 {
    let d: Vec<f64> = (0..dim).map(|k| off[k] as f64 * h[k]).collect();
    let dist2: f64 = d.iter().map(|v| v * v).sum();
    match scheme {
        WeightScheme::Midpoint => 2.0 * vol / dist2.powf(0.5 * kexp),
        WeightScheme::Moment => {
            if dim == 1 {
                let dist = dist2.sqrt();
                let (a, b) = (dist - 0.5 * h[0], dist + 0.5 * h[0]);
                let e = 2.0 - kexp;
                let integral = if e.abs() < 1e-12 {
                    (b / a).ln()
                } else {
                    (b.powf(e) - a.powf(e)) / e
                };
                2.0 * integral / dist
            } else {
                let linf = off[..dim].iter().copied().max().unwrap_or(0);
                let (pieces, pts) = match linf {
                    1 => (2, 8),
                    2..=3 => (1, 6),
                    4..=8 => (1, 3),
                    _ => (1, 2),
                };
                let (gx, gw) = quad::gauss_legendre(pts);
                let mut acc = 0.0;
                // tensor rule over the cell, split into `pieces` per axis
                let per_axis = pieces * pts;
                let count = per_axis.pow(dim as u32);
                for flat in 0..count {
                    let mut rem = flat;
                    let mut y = [0.0f64; 3];
                    let mut w = 1.0;
                    for k in 0..dim {
                        let a = rem % per_axis;
                        rem /= per_axis;
                        let (piece, q) = (a / pts, a % pts);
                        let width = h[k] / pieces as f64;
                        let left = d[k] - 0.5 * h[k] + piece as f64 * width;
                        y[k] = left + 0.5 * width * (1.0 + gx[q]);
                        w *= 0.5 * width * gw[q];
                    }
                    let r2: f64 = y[..dim].iter().map(|v| v * v).sum();
                    let proj: f64 = (0..dim).map(|k| y[k] * d[k]).sum::<f64>() / dist2;
                    acc += w * r2.powf(-0.5 * kexp) * proj;
                }
                2.0 * acc
            }
        }
    }
}

#[inline]
fn signed_pow(t: f64, e: f64) -> f64 {
    // |t|^e sign(t), with the p = 2 case kept exact
    if e == 1.0 {
        t
    } else if t == 0.0 {
        0.0
    } else if e == 0.5 {
        t.abs().sqrt().copysign(t)
    } else {
        t.abs().powf(e).copysign(t)
    }
}

#[inline]
fn abs_pow(t: f64, p: f64) -> f64 {
    if p == 2.0 {
        t * t
    } else if p == 1.5 {
        let a = t.abs();
        a * a.sqrt()
    } else {
        t.abs().powf(p)
    }
}

impl KernelMatrix {
    /// Zero field on the grid the kernel was assembled for.
    pub fn zero_field(&self) -> Field {
        Field::keyed(vec![0.0; self.multi.len()], self.grid_key)
    }

    pub fn len(&self) -> usize {
        self.multi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.multi.is_empty()
    }

    #[inline]
    fn offset_index(&self, i: usize, j: usize) -> usize {
        let (a, b) = (&self.multi[i], &self.multi[j]);
        (a[0] - b[0]).unsigned_abs() as usize * self.strides[0]
            + (a[1] - b[1]).unsigned_abs() as usize * self.strides[1]
            + (a[2] - b[2]).unsigned_abs() as usize
    }

    /// Interaction weight between interior nodes `i` and `j`.
    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.table[self.offset_index(i, j)]
    }

    pub fn check(&self, u: &Field) -> Result<()> {
        if u.len() != self.len() {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }

    pub fn belongs_to(&self, grid: &Grid) -> bool {
        grid.key() == self.grid_key
    }

    /// Row sums of the weights, used by the diagonal preconditioner.
    pub fn row_sum(&self, i: usize) -> f64 {
        self.row_sums[i]
    }

    fn row_nonlocal(&self, u: &[f64], i: usize, p: f64) -> f64 {
        let ui = u[i];
        let e = p - 1.0;
        let mut acc = 0.0;
        for j in 0..u.len() {
            let w = self.table[self.offset_index(i, j)];
            acc += w * signed_pow(ui - u[j], e);
        }
        acc + 2.0 * self.tails.tail[i] * signed_pow(ui, e)
    }

    /// Volume-weighted fractional p-Laplacian.
    pub fn apply_nonlocal(&self, u: &[f64], p: f64) -> Vec<f64> {
        let vol = self.cell_volume;
        if let (Some(cv), true) = (&self.conv, p == 2.0) {
            let wu = cv.apply(u);
            return (0..u.len())
                .map(|i| vol * ((self.row_sums[i] + 2.0 * self.tails.tail[i]) * u[i] - wu[i]))
                .collect();
        }
        self.apply_nonlocal_dense(u, p)
    }

    /// Pairwise evaluation, independent of the FFT path.
    pub fn apply_nonlocal_dense(&self, u: &[f64], p: f64) -> Vec<f64> {
        let vol = self.cell_volume;
        (0..u.len())
            .into_par_iter()
            .map(|i| vol * self.row_nonlocal(u, i, p))
            .collect()
    }

    /// Volume-weighted face-difference p-Laplacian.
    pub fn apply_local(&self, u: &[f64], p: f64) -> Vec<f64> {
        let vol = self.cell_volume;
        let e = p - 1.0;
        let mut out = vec![0.0; u.len()];
        for &(i, j, k) in &self.faces.inner {
            let h = self.spacing[k];
            let f = vol * signed_pow((u[j] - u[i]) / h, e) / h;
            out[j] += f;
            out[i] -= f;
        }
        for &(i, k) in &self.faces.boundary {
            let h = self.spacing[k];
            out[i] += vol * signed_pow(2.0 * u[i] / h, e) / h;
        }
        out
    }

    /// `‖∇u‖_p^p` from face differences.
    pub fn local_energy(&self, u: &[f64], p: f64) -> f64 {
        let vol = self.cell_volume;
        let mut acc = 0.0;
        for &(i, j, k) in &self.faces.inner {
            acc += vol * abs_pow((u[j] - u[i]) / self.spacing[k], p);
        }
        for &(i, k) in &self.faces.boundary {
            acc += 0.5 * vol * abs_pow(2.0 * u[i] / self.spacing[k], p);
        }
        acc
    }

    /// `[u]_{s,p}^p`.
    pub fn nonlocal_energy(&self, u: &[f64], p: f64) -> f64 {
        if let (Some(cv), true) = (&self.conv, p == 2.0) {
            let wu = cv.apply(u);
            let acc: f64 = (0..u.len())
                .map(|i| (self.row_sums[i] + 2.0 * self.tails.tail[i]) * u[i] * u[i] - u[i] * wu[i])
                .sum();
            return self.cell_volume * acc;
        }
        self.nonlocal_energy_dense(u, p)
    }

    pub fn nonlocal_energy_dense(&self, u: &[f64], p: f64) -> f64 {
        let vol = self.cell_volume;
        let rows: Vec<f64> = (0..u.len())
            .into_par_iter()
            .map(|i| {
                let ui = u[i];
                let mut acc = 0.0;
                for j in 0..u.len() {
                    acc += self.table[self.offset_index(i, j)] * abs_pow(ui - u[j], p);
                }
                0.5 * acc + 2.0 * self.tails.tail[i] * abs_pow(ui, p)
            })
            .collect();
        vol * rows.iter().sum::<f64>()
    }

    /// Matrix-free p = 2 local operator (the preconditioner's main part).
    pub fn apply_laplacian(&self, u: &[f64]) -> Vec<f64> {
        self.apply_local(u, 2.0)
    }

    /// Diagonal of the p = 2 local operator.
    pub fn laplacian_diagonal(&self) -> Vec<f64> {
        let vol = self.cell_volume;
        let mut diag = vec![0.0; self.len()];
        for &(i, j, k) in &self.faces.inner {
            let c = vol / (self.spacing[k] * self.spacing[k]);
            diag[i] += c;
            diag[j] += c;
        }
        for &(i, k) in &self.faces.boundary {
            diag[i] += 2.0 * vol / (self.spacing[k] * self.spacing[k]);
        }
        diag
    }
}

pub fn apply_operator(u: &Field, kernel: &KernelMatrix, params: &ModelParams, mode: Mode) -> Result<Field> {
    kernel.check(u)?;
    if !(params.p > 1.0) {
        return Err(Error::InvalidParams("p must exceed 1".into()));
    }
    Ok(u.with_values(apply_raw(&u.values, kernel, params, mode)))
}

pub fn apply_raw(u: &[f64], kernel: &KernelMatrix, params: &ModelParams, mode: Mode) -> Vec<f64> {
    let p = params.p;
    match mode {
        Mode::Local => kernel.apply_local(u, p),
        Mode::Nonlocal => kernel.apply_nonlocal(u, p),
        Mode::Mixed => {
            let mut out = kernel.apply_local(u, p);
            if params.eps != 0.0 {
                let nl = kernel.apply_nonlocal(u, p);
                for (o, v) in out.iter_mut().zip(nl) {
                    *o += params.eps * v;
                }
            }
            out
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormSet {
    pub grad_p: f64,
    pub gagliardo: f64,
    pub rho_eps: f64,
}

impl NormSet {
    pub fn rho_pow(&self, p: f64) -> f64 {
        self.rho_eps.powf(p)
    }
}

/// Raw p-th powers `(‖∇u‖_p^p, [u]_{s,p}^p)`.
pub fn energies_raw(u: &[f64], kernel: &KernelMatrix, params: &ModelParams) -> (f64, f64) {
    let loc = kernel.local_energy(u, params.p);
    let nl = if params.eps != 0.0 { kernel.nonlocal_energy(u, params.p) } else { 0.0 };
    (loc, nl)
}

pub fn norms(u: &Field, kernel: &KernelMatrix, params: &ModelParams) -> Result<NormSet> {
    kernel.check(u)?;
    let p = params.p;
    let loc = kernel.local_energy(&u.values, p);
    let nl = kernel.nonlocal_energy(&u.values, p);
    Ok(NormSet {
        grad_p: loc.powf(1.0 / p),
        gagliardo: nl.powf(1.0 / p),
        rho_eps: (loc + params.eps * nl).powf(1.0 / p),
    })
}

/// Discrete `𝒜(u, v)` with `v = 0` outside the domain.
pub fn form_a(u: &Field, v: &Field, kernel: &KernelMatrix, params: &ModelParams) -> Result<f64> {
    kernel.check(u)?;
    u.same_grid(v)?;
    let p = params.p;
    let e = p - 1.0;
    let (uu, vv) = (&u.values, &v.values);
    let vol = kernel.cell_volume;
    let rows: Vec<f64> = (0..uu.len())
        .into_par_iter()
        .map(|i| {
            let mut acc = 0.0;
            for j in 0..uu.len() {
                acc += kernel.weight(i, j) * signed_pow(uu[i] - uu[j], e) * (vv[i] - vv[j]);
            }
            0.5 * acc + 2.0 * kernel.tails.tail[i] * signed_pow(uu[i], e) * vv[i]
        })
        .collect();
    Ok(vol * rows.iter().sum::<f64>())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Symmetric positive definite p = 2 model operator: local Laplacian plus `ε` times the
/// diagonal of the fractional one.
#[derive(Debug, Clone)]
pub struct Preconditioner {
    diag: Vec<f64>,
    eps_diag: Vec<f64>,
    tridiagonal: bool,
}

impl Preconditioner {
    pub fn new(kernel: &KernelMatrix, eps: f64) -> Self {
        let vol = kernel.cell_volume;
        let eps_diag: Vec<f64> = (0..kernel.len())
            .map(|i| eps * vol * (kernel.row_sum(i) + 2.0 * kernel.tails.tail[i]))
            .collect();
        Preconditioner {
            diag: kernel.laplacian_diagonal(),
            eps_diag,
            tridiagonal: kernel.dim == 1,
        }
    }

    /// `P x`.
    pub fn apply(&self, kernel: &KernelMatrix, x: &[f64]) -> Vec<f64> {
        let mut y = kernel.apply_laplacian(x);
        for i in 0..y.len() {
            y[i] += self.eps_diag[i] * x[i];
        }
        y
    }

    /// Solves `P z = r`.
    pub fn solve(&self, kernel: &KernelMatrix, r: &[f64]) -> Vec<f64> {
        let n = r.len();
        if self.tridiagonal {
            // nodes are ordered along the axis; off-diagonals are -vol/h^2
            let h = kernel.spacing[0];
            let off = -kernel.cell_volume / (h * h);
            let a: Vec<f64> = (0..n).map(|i| self.diag[i] + self.eps_diag[i]).collect();
            let mut c = vec![0.0; n];
            let mut d = vec![0.0; n];
            c[0] = off / a[0];
            d[0] = r[0] / a[0];
            for i in 1..n {
                let m = a[i] - off * c[i - 1];
                c[i] = off / m;
                d[i] = (r[i] - off * d[i - 1]) / m;
            }
            let mut z = vec![0.0; n];
            z[n - 1] = d[n - 1];
            for i in (0..n - 1).rev() {
                z[i] = d[i] - c[i] * z[i + 1];
            }
            return z;
        }
        // Jacobi-preconditioned conjugate gradients
        let inv: Vec<f64> = (0..n).map(|i| 1.0 / (self.diag[i] + self.eps_diag[i])).collect();
        let mut x = vec![0.0; n];
        let mut res = r.to_vec();
        let mut z: Vec<f64> = res.iter().zip(&inv).map(|(a, b)| a * b).collect();
        let mut dir = z.clone();
        let mut rz = dot(&res, &z);
        let r0 = dot(r, r).sqrt();
        if r0 == 0.0 {
            return x;
        }
        for _ in 0..(4 * n).max(50) {
            let ad = self.apply(kernel, &dir);
            let alpha = rz / dot(&dir, &ad);
            for i in 0..n {
                x[i] += alpha * dir[i];
                res[i] -= alpha * ad[i];
            }
            if dot(&res, &res).sqrt() <= 1e-10 * r0 {
                break;
            }
            for i in 0..n {
                z[i] = res[i] * inv[i];
            }
            let rz_new = dot(&res, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                dir[i] = z[i] + beta * dir[i];
            }
        }
        x
    }
}

/// Second variation of `(1/p)ρ_ε^p` at `u`, with `|d|^{p-2}` floored at a fraction of the
/// largest difference. Serves as a variable preconditioner when `p ≠ 2`.
#[derive(Debug, Clone)]
pub struct LinearizedOperator {
    faces: Vec<(usize, usize, f64)>,
    diag: Vec<f64>,
    /// Dense nonlocal coefficients, row-major; absent when too large.
    pairs: Option<Vec<f64>>,
}

const DENSE_LINEARIZED_LIMIT: usize = 4096;

impl LinearizedOperator {
    pub fn new(kernel: &KernelMatrix, u: &[f64], params: &ModelParams) -> Self {
        Self::with_floor(kernel, u, params, 1e-3)
    }

    /// `floor` is the fraction of the largest difference below which weights are frozen.
    pub fn with_floor(kernel: &KernelMatrix, u: &[f64], params: &ModelParams, floor: f64) -> Self {
        let n = u.len();
        let vol = kernel.cell_volume;
        let (p, eps) = (params.p, params.eps);
        let c = p - 1.0;
        let dmax = kernel
            .faces
            .inner
            .iter()
            .map(|&(i, j, k)| ((u[j] - u[i]) / kernel.spacing[k]).abs())
            .chain(kernel.faces.boundary.iter().map(|&(i, k)| (2.0 * u[i] / kernel.spacing[k]).abs()))
            .fold(0.0f64, f64::max);
        let umax = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let floor_loc = (floor * dmax).max(f64::MIN_POSITIVE.sqrt());
        let floor_nl = (floor * umax).max(f64::MIN_POSITIVE.sqrt());
        let wt = |d: f64, floor: f64| {
            let a = d.abs().max(floor);
            if p == 1.5 {
                c / a.sqrt()
            } else {
                c * a.powf(p - 2.0)
            }
        };
        let mut diag = vec![0.0; n];
        let mut faces = Vec::with_capacity(kernel.faces.inner.len());
        for &(i, j, k) in &kernel.faces.inner {
            let h = kernel.spacing[k];
            let a = vol * wt((u[j] - u[i]) / h, floor_loc) / (h * h);
            faces.push((i, j, a));
            diag[i] += a;
            diag[j] += a;
        }
        for &(i, k) in &kernel.faces.boundary {
            let h = kernel.spacing[k];
            diag[i] += vol * wt(2.0 * u[i] / h, floor_loc) * 2.0 / (h * h);
        }
        let mut pairs = None;
        if eps > 0.0 {
            let ev = eps * vol;
            for i in 0..n {
                diag[i] += ev * 2.0 * kernel.tails.tail[i] * wt(u[i], floor_nl);
            }
            if n <= DENSE_LINEARIZED_LIMIT {
                let mut m = vec![0.0; n * n];
                m.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
                    for j in 0..n {
                        if j != i {
                            row[j] = ev * kernel.weight(i, j) * wt(u[i] - u[j], floor_nl);
                        }
                    }
                });
                for i in 0..n {
                    diag[i] += m[i * n..(i + 1) * n].iter().sum::<f64>();
                }
                pairs = Some(m);
            } else {
                for i in 0..n {
                    let row: f64 = (0..n).filter(|&j| j != i).map(|j| kernel.weight(i, j) * wt(u[i] - u[j], floor_nl)).sum();
                    diag[i] += ev * row;
                }
            }
        }
        LinearizedOperator { faces, diag, pairs }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let n = v.len();
        let mut y: Vec<f64> = self.diag.iter().zip(v).map(|(d, x)| d * x).collect();
        for &(i, j, a) in &self.faces {
            y[i] -= a * v[j];
            y[j] -= a * v[i];
        }
        if let Some(m) = &self.pairs {
            let off: Vec<f64> = m.par_chunks(n).map(|row| dot(row, v)).collect();
            for i in 0..n {
                y[i] -= off[i];
            }
        }
        y
    }

    /// Jacobi-preconditioned CG to relative residual `rtol`.
    pub fn solve(&self, r: &[f64], rtol: f64, max_iter: usize) -> Vec<f64> {
        let n = r.len();
        let inv: Vec<f64> = self.diag.iter().map(|d| 1.0 / d).collect();
        let mut x = vec![0.0; n];
        let mut res = r.to_vec();
        let r0 = dot(r, r).sqrt();
        if r0 == 0.0 {
            return x;
        }
        let mut z: Vec<f64> = res.iter().zip(&inv).map(|(a, b)| a * b).collect();
        let mut dir = z.clone();
        let mut rz = dot(&res, &z);
        for _ in 0..max_iter {
            let ad = self.apply(&dir);
            let alpha = rz / dot(&dir, &ad);
            for i in 0..n {
                x[i] += alpha * dir[i];
                res[i] -= alpha * ad[i];
            }
            if dot(&res, &res).sqrt() <= rtol * r0 {
                break;
            }
            for i in 0..n {
                z[i] = res[i] * inv[i];
            }
            let rz_new = dot(&res, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                dir[i] = z[i] + beta * dir[i];
            }
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_grid, Geometry};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(dim: usize, res: usize, p: f64, s: f64) -> (Grid, ModelParams, KernelMatrix) {
        let g = build_grid(&Geometry::unit_box(dim), res).unwrap();
        let n = if dim == 1 { 1 } else { dim };
        let prm = ModelParams::new(n, p, 1.0 + 0.5 * (p - 1.0), s, 0.5, 1.0, Some(p + 1.0)).unwrap();
        let k = assemble_kernel(&g, &prm).unwrap();
        (g, prm, k)
    }

    fn random_field(g: &Grid, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field::from_values(g, (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linearized_operator_is_the_jacobian() {
        for p in [1.5, 2.0, 2.7] {
            let (g, prm, k) = setup(2, 6, p, 0.4);
            let u = random_field(&g, 11).values;
            let v = random_field(&g, 12).values;
            let lin = LinearizedOperator::with_floor(&k, &u, &prm, 0.0);
            let jv = lin.apply(&v);
            let t = 1e-6;
            let up: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + t * b).collect();
            let um: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a - t * b).collect();
            let (ap, am) = (apply_raw(&up, &k, &prm, Mode::Mixed), apply_raw(&um, &k, &prm, Mode::Mixed));
            for i in 0..u.len() {
                let fd = (ap[i] - am[i]) / (2.0 * t);
                assert!((fd - jv[i]).abs() < 1e-5 * (1.0 + fd.abs()), "{p} {i} {fd} {}", jv[i]);
            }
            let x = lin.solve(&v, 1e-12, 500);
            let back = lin.apply(&x);
            for i in 0..v.len() {
                assert!((back[i] - v[i]).abs() < 1e-9 * (1.0 + v[i].abs()));
            }
        }
    }

    #[test]
    fn midpoint_adjacent_weight_is_two_over_h() {
        let g = build_grid(&Geometry::unit_box(1), 4).unwrap();
        let prm = ModelParams::new(1, 2.0, 1.5, 0.5, 1.0, 1.0, Some(3.0)).unwrap();
        let opts = KernelOptions { scheme: WeightScheme::Midpoint, ..Default::default() };
        let k = assemble_kernel_with(&g, &prm, &opts).unwrap();
        let h = 0.25;
        assert!((k.weight(1, 2) - 2.0 / h).abs() < 1e-12);
        assert_eq!(k.weight(2, 2), 0.0);
    }

    #[test]
    fn moment_weight_closed_form_matches_quadrature() {
        // 1-D closed form against direct Gauss integration of the defining integral
        let (kexp, h) = (1.0 + 0.7 * 2.0, 0.1);
        for m in 1..5usize {
            let dist = m as f64 * h;
            let f = |y: f64| y.powf(-kexp) * y / dist;
            let want = 2.0 * quad::integrate_panels(&f, &quad::graded_breaks(dist - 0.5 * h, dist + 0.5 * h, 0.01 * h), 20);
            let got = offset_weight(&[m, 0, 0], &[h], 1, kexp, h, WeightScheme::Moment);
            assert!((got - want).abs() < 1e-10 * want, "{got} {want}");
        }
    }

    #[test]
    fn weights_symmetric_and_positive() {
        for dim in 1..=3 {
            let (g, _, k) = setup(dim, 6, 2.0, 0.6);
            for i in 0..g.len() {
                for j in 0..g.len() {
                    assert_eq!(k.weight(i, j), k.weight(j, i));
                    if i != j {
                        assert!(k.weight(i, j) > 0.0);
                    } else {
                        assert_eq!(k.weight(i, i), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn multi_d_moment_weights_approach_midpoint_far_away() {
        let (_, prm, _) = setup(2, 6, 2.0, 0.5);
        let h = [0.1, 0.1];
        let kexp = prm.n() + 1.0;
        let far = offset_weight(&[12, 7, 0], &h, 2, kexp, 0.01, WeightScheme::Moment);
        let mid = offset_weight(&[12, 7, 0], &h, 2, kexp, 0.01, WeightScheme::Midpoint);
        assert!((far - mid).abs() / mid < 1e-2);
    }

    #[test]
    fn fft_product_matches_pairwise_sums() {
        for (dim, geo) in [(1, Geometry::unit_box(1)), (2, Geometry::unit_box(2)), (2, Geometry::ball(2, 0.5)), (3, Geometry::unit_box(3))] {
            let g = build_grid(&geo, 7).unwrap();
            let prm = ModelParams::new(dim.max(2), 2.0, 1.5, 0.4, 0.5, 1.0, Some(3.0)).unwrap();
            let k = assemble_kernel(&g, &prm).unwrap();
            assert!(k.conv.is_some());
            let u = random_field(&g, 21);
            let a = k.apply_nonlocal(&u.values, 2.0);
            let b = k.apply_nonlocal_dense(&u.values, 2.0);
            for i in 0..g.len() {
                assert!((a[i] - b[i]).abs() < 1e-11 * (1.0 + b[i].abs()), "{dim}: {} {}", a[i], b[i]);
                let direct: f64 = (0..g.len()).map(|j| k.weight(i, j)).sum();
                assert!((k.row_sum(i) - direct).abs() < 1e-11 * direct);
            }
            let (ea, eb) = (k.nonlocal_energy(&u.values, 2.0), k.nonlocal_energy_dense(&u.values, 2.0));
            assert!((ea - eb).abs() < 1e-11 * eb);
        }
    }

    #[test]
    fn budget_guard_rejects_large_grids() {
        let g = build_grid(&Geometry::unit_box(2), 20).unwrap();
        let prm = ModelParams::new(2, 1.5, 1.2, 0.5, 0.5, 1.0, None).unwrap();
        let opts = KernelOptions { pair_budget: 1000, ..Default::default() };
        let fast = ModelParams::new(2, 2.0, 1.2, 0.5, 0.5, 1.0, Some(3.0)).unwrap();
        assert!(assemble_kernel_with(&g, &fast, &opts).is_ok());
        assert!(matches!(assemble_kernel_with(&g, &prm, &opts), Err(Error::Budget { .. })));
    }

    #[test]
    fn zero_maps_to_zero() {
        let (g, prm, k) = setup(2, 7, 1.6, 0.4);
        let z = Field::zeros(&g);
        for mode in [Mode::Local, Mode::Nonlocal, Mode::Mixed] {
            assert!(apply_operator(&z, &k, &prm, mode).unwrap().values.iter().all(|v| *v == 0.0));
        }
        let ns = norms(&z, &k, &prm).unwrap();
        assert_eq!((ns.grad_p, ns.gagliardo, ns.rho_eps), (0.0, 0.0, 0.0));
    }

    #[test]
    fn constant_field_only_feels_the_tail() {
        let (g, prm, k) = setup(2, 7, 1.6, 0.4);
        let c = Field::constant(&g, 0.7);
        let out = apply_operator(&c, &k, &prm, Mode::Nonlocal).unwrap();
        for i in 0..g.len() {
            let want = k.cell_volume * 2.0 * k.tails.tail[i] * 0.7f64.powf(0.6);
            assert!((out.values[i] - want).abs() < 1e-12 * want);
        }
    }

    #[test]
    fn linear_at_p_two() {
        let (g, prm, k) = setup(2, 8, 2.0, 0.5);
        let (u, v) = (random_field(&g, 1), random_field(&g, 2));
        let sum = u.axpy(1.0, &v);
        let a = apply_operator(&sum, &k, &prm, Mode::Nonlocal).unwrap();
        let b = apply_operator(&u, &k, &prm, Mode::Nonlocal).unwrap();
        let c = apply_operator(&v, &k, &prm, Mode::Nonlocal).unwrap();
        for i in 0..g.len() {
            assert!((a.values[i] - b.values[i] - c.values[i]).abs() < 1e-10 * (1.0 + a.values[i].abs()));
        }
    }

    #[test]
    fn weak_form_consistency() {
        for (dim, p) in [(1, 1.5), (2, 2.0), (2, 2.7), (3, 1.8)] {
            let (g, prm, k) = setup(dim, 6, p, 0.45);
            let (u, v) = (random_field(&g, 3), random_field(&g, 4));
            let a = apply_operator(&u, &k, &prm, Mode::Nonlocal).unwrap();
            let lhs = dot(&a.values, &v.values);
            let rhs = form_a(&u, &v, &k, &prm).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{lhs} {rhs}");
            let uu = form_a(&u, &u, &k, &prm).unwrap();
            let gp = norms(&u, &k, &prm).unwrap().gagliardo.powf(p);
            assert!((uu - gp).abs() <= 1e-10 * gp);
            assert_eq!(form_a(&u, &Field::zeros(&g), &k, &prm).unwrap(), 0.0);
        }
    }

    #[test]
    fn form_symmetric_at_p_two() {
        let (g, prm, k) = setup(2, 7, 2.0, 0.3);
        let (u, v) = (random_field(&g, 5), random_field(&g, 6));
        let a = form_a(&u, &v, &k, &prm).unwrap();
        let b = form_a(&v, &u, &k, &prm).unwrap();
        assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn operator_is_energy_gradient() {
        for (dim, p) in [(1, 1.4), (2, 2.0), (2, 3.1), (3, 1.7)] {
            let (g, prm, k) = setup(dim, 5, p, 0.55);
            let u = random_field(&g, 7);
            let v = random_field(&g, 8);
            let energy = |w: &Field| {
                let ns = norms(w, &k, &prm).unwrap();
                ns.rho_eps.powf(p) / p
            };
            let t = 1e-6;
            let fd = (energy(&u.axpy(t, &v)) - energy(&u.axpy(-t, &v))) / (2.0 * t);
            let an = dot(&apply_operator(&u, &k, &prm, Mode::Mixed).unwrap().values, &v.values);
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "{dim} {p}: {fd} {an}");
        }
    }

    #[test]
    fn norm_identities() {
        let (g, prm, k) = setup(2, 8, 1.7, 0.5);
        let u = random_field(&g, 9);
        let a = norms(&u, &k, &prm).unwrap();
        let b = norms(&u.scaled(2.0), &k, &prm).unwrap();
        assert!((b.rho_eps - 2.0 * a.rho_eps).abs() < 1e-12 * b.rho_eps);
        let p1 = prm.with_eps(1.0);
        let p2 = prm.with_eps(0.25);
        let n1 = norms(&u, &k, &p1).unwrap();
        let n2 = norms(&u, &k, &p2).unwrap();
        let diff = n1.rho_eps.powf(1.7) - n2.rho_eps.powf(1.7);
        assert!((diff - 0.75 * n1.gagliardo.powf(1.7)).abs() < 1e-10 * diff);
    }

    #[test]
    fn laplacian_is_exact_for_quadratics_inside() {
        let (g, _, k) = setup(1, 20, 2.0, 0.5);
        let u = Field::from_fn(&g, |x| x[0] * (1.0 - x[0]));
        let out = k.apply_laplacian(&u.values);
        for i in 1..g.len() - 1 {
            assert!((out[i] / k.cell_volume - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn discrete_comparison_pairing() {
        for p in [1.5, 2.0, 2.6] {
            let (g, prm, k) = setup(2, 7, p, 0.5);
            let v = random_field(&g, 11);
            let d = random_field(&g, 12);
            // u <= v node-wise
            let u = v.with_values(v.values.iter().zip(&d.values).map(|(a, b)| a - b.abs() * 0.5 - 0.01 * (b > &0.5) as i32 as f64).collect());
            let au = apply_operator(&u, &k, &prm, Mode::Mixed).unwrap();
            let av = apply_operator(&v, &k, &prm, Mode::Mixed).unwrap();
            let pos: Vec<f64> = u.values.iter().zip(&v.values).map(|(a, b)| (a - b).max(0.0)).collect();
            let s: f64 = (0..g.len()).map(|i| (au.values[i] - av.values[i]) * pos[i]).sum();
            assert_eq!(s, 0.0);
            // with a crossing, the pairing is strictly positive
            let w = v.axpy(-1.0, &v).axpy(1.0, &d);
            let aw = apply_operator(&w, &k, &prm, Mode::Mixed).unwrap();
            let pos: Vec<f64> = w.values.iter().zip(&v.values).map(|(a, b)| (a - b).max(0.0)).collect();
            let s: f64 = (0..g.len()).map(|i| (aw.values[i] - av.values[i]) * pos[i]).sum();
            assert!(s > 0.0);
        }
    }

    #[test]
    fn preconditioner_solves_its_system() {
        for dim in [1, 2, 3] {
            let (g, _, k) = setup(dim, 7, 2.0, 0.5);
            let pc = Preconditioner::new(&k, 0.3);
            let r = random_field(&g, 13).values;
            let z = pc.solve(&k, &r);
            let back = pc.apply(&k, &z);
            for i in 0..r.len() {
                assert!((back[i] - r[i]).abs() < 1e-8 * (1.0 + r[i].abs()));
            }
        }
    }

    #[test]
    fn self_convergence_of_seminorm() {
        let f = |x: &[f64]| (std::f64::consts::PI * x[0]).sin() * (std::f64::consts::PI * x[1]).sin();
        let mut vals = Vec::new();
        for res in [16, 32] {
            let (g, prm, k) = setup(2, res, 2.0, 0.5);
            let u = Field::from_fn(&g, f);
            vals.push(norms(&u, &k, &prm).unwrap().gagliardo.powi(2));
        }
        assert!((vals[1] - vals[0]).abs() / vals[1] < 0.05, "{vals:?}");
    }
}
