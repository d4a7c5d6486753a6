//! Model parameters, masked uniform grids, fields and exterior tail integrals.

use crate::error::{Error, Result};
use crate::quad;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::hash::{Hash, Hasher};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams")]
pub struct ModelParams {
    pub dim_n: usize,
    pub p: f64,
    pub q: f64,
    pub s: f64,
    pub eps: f64,
    pub lambda: f64,
    pub r: f64,
}

#[derive(Deserialize)]
struct RawParams {
    dim_n: usize,
    p: f64,
    q: f64,
    s: f64,
    eps: f64,
    lambda: f64,
    #[serde(default)]
    r: Option<f64>,
}

impl TryFrom<RawParams> for ModelParams {
    type Error = Error;
    fn try_from(raw: RawParams) -> Result<Self> {
        ModelParams::new(raw.dim_n, raw.p, raw.q, raw.s, raw.eps, raw.lambda, raw.r)
    }
}

impl ModelParams {
    /// `r = None` selects the critical exponent `Np/(N-p)`.
    ///
    /// `eps = 0` is accepted as the purely local limit.
    pub fn new(
        dim_n: usize,
        p: f64,
        q: f64,
        s: f64,
        eps: f64,
        lambda: f64,
        r: Option<f64>,
    ) -> Result<Self> {
        let bad = |m: &str| Err(Error::InvalidParams(m.to_string()));
        if dim_n == 0 {
            return bad("dimension must be positive");
        }
        if !(p > 1.0) {
            return bad("p must exceed 1");
        }
        if !(q > 1.0 && q < p) {
            return bad("need 1 < q < p");
        }
        if !(s > 0.0 && s < 1.0) {
            return bad("need 0 < s < 1");
        }
        if !(eps >= 0.0 && eps <= 1.0) {
            return bad("need 0 <= eps <= 1");
        }
        if !lambda.is_finite() {
            return bad("lambda must be finite");
        }
        let r = match r {
            Some(r) => r,
            None => {
                if (dim_n as f64) <= p {
                    return bad("critical exponent needs N > p");
                }
                critical_exponent(dim_n, p)
            }
        };
        if !(r > p) || !r.is_finite() {
            return bad("need r > p");
        }
        Ok(ModelParams { dim_n, p, q, s, eps, lambda, r })
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        ModelParams { lambda, ..*self }
    }

    pub fn with_eps(&self, eps: f64) -> Self {
        ModelParams { eps, ..*self }
    }

    /// `Np/(N-p)`, infinite when `N <= p`.
    pub fn p_star(&self) -> f64 {
        if (self.dim_n as f64) > self.p {
            critical_exponent(self.dim_n, self.p)
        } else {
            f64::INFINITY
        }
    }

    pub fn n(&self) -> f64 {
        self.dim_n as f64
    }
}

pub fn critical_exponent(n: usize, p: f64) -> f64 {
    let n = n as f64;
    n * p / (n - p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Geometry {
    /// Axis-aligned box `[origin, origin + size]`.
    Box {
        size: Vec<f64>,
        #[serde(default)]
        origin: Vec<f64>,
    },
    /// Ball of radius `size` in dimension `dim`.
    Ball {
        size: f64,
        dim: usize,
        #[serde(default)]
        center: Vec<f64>,
    },
}

impl Geometry {
    pub fn unit_box(dim: usize) -> Self {
        Geometry::Box { size: vec![1.0; dim], origin: vec![0.0; dim] }
    }

    pub fn ball(dim: usize, radius: f64) -> Self {
        Geometry::Ball { size: radius, dim, center: vec![0.0; dim] }
    }

    pub fn translated(&self, shift: &[f64]) -> Self {
        match self {
            Geometry::Box { size, .. } => {
                let o = self.lower_corner();
                Geometry::Box {
                    size: size.clone(),
                    origin: o.iter().zip(shift).map(|(a, b)| a + b).collect(),
                }
            }
            Geometry::Ball { size, dim, .. } => {
                let c = self.center();
                Geometry::Ball {
                    size: *size,
                    dim: *dim,
                    center: c.iter().zip(shift).map(|(a, b)| a + b).collect(),
                }
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Geometry::Box { size, .. } => size.len(),
            Geometry::Ball { dim, .. } => *dim,
        }
    }

    fn lower_corner(&self) -> Vec<f64> {
        match self {
            Geometry::Box { size, origin } => {
                if origin.is_empty() {
                    vec![0.0; size.len()]
                } else {
                    origin.clone()
                }
            }
            Geometry::Ball { size, .. } => self.center().iter().map(|c| c - size).collect(),
        }
    }

    pub fn center(&self) -> Vec<f64> {
        match self {
            Geometry::Box { size, .. } => {
                let o = self.lower_corner();
                o.iter().zip(size).map(|(a, l)| a + 0.5 * l).collect()
            }
            Geometry::Ball { dim, center, .. } => {
                if center.is_empty() {
                    vec![0.0; *dim]
                } else {
                    center.clone()
                }
            }
        }
    }

    pub fn diameter(&self) -> f64 {
        match self {
            Geometry::Box { size, .. } => size.iter().map(|l| l * l).sum::<f64>().sqrt(),
            Geometry::Ball { size, .. } => 2.0 * size,
        }
    }

    pub fn measure(&self) -> f64 {
        match self {
            Geometry::Box { size, .. } => size.iter().product(),
            Geometry::Ball { size, dim, .. } => unit_ball_volume(*dim) * size.powi(*dim as i32),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Geometry::Box { size, .. } => {
                let o = self.lower_corner();
                (0..size.len()).all(|k| x[k] > o[k] && x[k] < o[k] + size[k])
            }
            Geometry::Ball { size, .. } => {
                let c = self.center();
                dist(x, &c) < *size
            }
        }
    }

    /// Distance from an interior point to the boundary.
    pub fn boundary_distance(&self, x: &[f64]) -> f64 {
        match self {
            Geometry::Box { size, .. } => {
                let o = self.lower_corner();
                (0..size.len())
                    .map(|k| (x[k] - o[k]).min(o[k] + size[k] - x[k]))
                    .fold(f64::INFINITY, f64::min)
            }
            Geometry::Ball { size, .. } => size - dist(x, &self.center()),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Geometry::Box { size, origin } => {
                if size.is_empty() || size.len() > 3 {
                    return Err(Error::InvalidGeometry("box dimension must be 1, 2 or 3".into()));
                }
                if size.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
                    return Err(Error::InvalidGeometry("box sides must be positive".into()));
                }
                if !origin.is_empty() && origin.len() != size.len() {
                    return Err(Error::InvalidGeometry("origin dimension mismatch".into()));
                }
            }
            Geometry::Ball { size, dim, center } => {
                if *dim == 0 || *dim > 3 {
                    return Err(Error::InvalidGeometry("ball dimension must be 1, 2 or 3".into()));
                }
                if !(*size > 0.0) || !size.is_finite() {
                    return Err(Error::InvalidGeometry("ball radius must be positive".into()));
                }
                if !center.is_empty() && center.len() != *dim {
                    return Err(Error::InvalidGeometry("center dimension mismatch".into()));
                }
            }
        }
        Ok(())
    }
}

pub fn unit_ball_volume(d: usize) -> f64 {
    match d {
        1 => 2.0,
        2 => PI,
        3 => 4.0 * PI / 3.0,
        _ => PI.powf(d as f64 / 2.0) / gamma_fn(d as f64 / 2.0 + 1.0),
    }
}

/// Surface measure of the unit sphere in R^d.
pub fn sphere_area(d: usize) -> f64 {
    match d {
        1 => 2.0,
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        _ => 2.0 * PI.powf(d as f64 / 2.0) / gamma_fn(d as f64 / 2.0),
    }
}

/// Lanczos approximation, adequate to ~1e-13 for positive arguments.
pub fn gamma_fn(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return PI / ((PI * x).sin() * gamma_fn(1.0 - x));
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    (2.0 * PI).sqrt() * t.powf(x + 0.5) * (-t).exp() * a
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Cell-centered lattice over the bounding box of the geometry, with an interior mask.
#[derive(Debug, Clone)]
pub struct Grid {
    pub dim: usize,
    pub geometry: Geometry,
    pub resolution: usize,
    pub shape: Vec<usize>,
    pub spacing: Vec<f64>,
    /// Center of lattice cell zero.
    pub origin: Vec<f64>,
    pub cell_volume: f64,
    pub interior_mask: Vec<bool>,
    interior: Vec<usize>,
    lattice_to_interior: Vec<usize>,
    multi: Vec<[usize; 3]>,
    key: u64,
}

pub const OUTSIDE: usize = usize::MAX;

pub fn build_grid(geometry: &Geometry, resolution: usize) -> Result<Grid> {
    geometry.validate()?;
    if resolution < 3 {
        return Err(Error::InvalidGeometry("resolution must be at least 3".into()));
    }
    let dim = geometry.dim();
    let (spacing, lower): (Vec<f64>, Vec<f64>) = match geometry {
        Geometry::Box { size, .. } => (
            size.iter().map(|l| l / resolution as f64).collect(),
            geometry.lower_corner(),
        ),
        Geometry::Ball { size, .. } => {
            (vec![2.0 * size / resolution as f64; dim], geometry.lower_corner())
        }
    };
    let shape = vec![resolution; dim];
    let origin: Vec<f64> = lower.iter().zip(&spacing).map(|(a, h)| a + 0.5 * h).collect();
    let total: usize = shape.iter().product();
    let mut interior_mask = vec![false; total];
    let mut interior = Vec::new();
    let mut lattice_to_interior = vec![OUTSIDE; total];
    let mut multi = Vec::new();
    let mut x = vec![0.0; dim];
    for lat in 0..total {
        let m = unravel(lat, &shape);
        for k in 0..dim {
            x[k] = origin[k] + m[k] as f64 * spacing[k];
        }
        let inside = match geometry {
            Geometry::Box { .. } => true,
            Geometry::Ball { .. } => geometry.contains(&x),
        };
        if inside {
            interior_mask[lat] = true;
            lattice_to_interior[lat] = interior.len();
            interior.push(lat);
            multi.push(m);
        }
    }
    if interior.is_empty() {
        return Err(Error::InvalidGeometry("no interior nodes".into()));
    }
    let cell_volume = spacing.iter().product();
    let mut hasher = std::collections::hash_map::DefaultHasher::new();
    dim.hash(&mut hasher);
    shape.hash(&mut hasher);
    for v in spacing.iter().chain(origin.iter()) {
        v.to_bits().hash(&mut hasher);
    }
    interior.hash(&mut hasher);
    Ok(Grid {
        dim,
        geometry: geometry.clone(),
        resolution,
        shape,
        spacing,
        origin,
        cell_volume,
        interior_mask,
        interior,
        lattice_to_interior,
        multi,
        key: hasher.finish(),
    })
}

fn unravel(mut lat: usize, shape: &[usize]) -> [usize; 3] {
    let mut m = [0usize; 3];
    for k in (0..shape.len()).rev() {
        m[k] = lat % shape[k];
        lat /= shape[k];
    }
    m
}

impl Grid {
    pub fn len(&self) -> usize {
        self.interior.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interior.is_empty()
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Lattice multi-index of interior node `i`.
    pub fn multi_index(&self, i: usize) -> [usize; 3] {
        self.multi[i]
    }

    /// Coordinates of interior node `i`.
    pub fn node(&self, i: usize) -> Vec<f64> {
        let m = self.multi[i];
        (0..self.dim).map(|k| self.origin[k] + m[k] as f64 * self.spacing[k]).collect()
    }

    /// Coordinates of every lattice cell center, interior or not.
    pub fn lattice_nodes(&self) -> Vec<Vec<f64>> {
        let total: usize = self.shape.iter().product();
        (0..total)
            .map(|lat| {
                let m = unravel(lat, &self.shape);
                (0..self.dim).map(|k| self.origin[k] + m[k] as f64 * self.spacing[k]).collect()
            })
            .collect()
    }

    /// Interior index of the neighbor of `i` one step along `axis` in direction `dir`.
    pub fn neighbor(&self, i: usize, axis: usize, dir: isize) -> Option<usize> {
        let m = self.multi[i];
        let c = m[axis] as isize + dir;
        if c < 0 || c >= self.shape[axis] as isize {
            return None;
        }
        let mut mm = m;
        mm[axis] = c as usize;
        let j = self.lattice_to_interior[self.ravel(&mm)];
        (j != OUTSIDE).then_some(j)
    }

    /// Interior index at a lattice multi-index, if any.
    pub fn interior_at(&self, m: &[isize]) -> Option<usize> {
        let mut mm = [0usize; 3];
        for k in 0..self.dim {
            if m[k] < 0 || m[k] >= self.shape[k] as isize {
                return None;
            }
            mm[k] = m[k] as usize;
        }
        let j = self.lattice_to_interior[self.ravel(&mm)];
        (j != OUTSIDE).then_some(j)
    }

    fn ravel(&self, m: &[usize; 3]) -> usize {
        let mut lat = 0;
        for k in 0..self.dim {
            lat = lat * self.shape[k] + m[k];
        }
        lat
    }

    pub fn interior_measure(&self) -> f64 {
        self.cell_volume * self.len() as f64
    }
}

/// Nodal values on interior nodes; zero everywhere else.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub values: Vec<f64>,
    grid_key: u64,
}

impl Field {
    pub(crate) fn keyed(values: Vec<f64>, grid_key: u64) -> Self {
        Field { values, grid_key }
    }

    pub fn zeros(grid: &Grid) -> Self {
        Field { values: vec![0.0; grid.len()], grid_key: grid.key() }
    }

    pub fn constant(grid: &Grid, c: f64) -> Self {
        Field { values: vec![c; grid.len()], grid_key: grid.key() }
    }

    pub fn from_values(grid: &Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch);
        }
        Ok(Field { values, grid_key: grid.key() })
    }

    pub fn from_fn<F: Fn(&[f64]) -> f64>(grid: &Grid, f: F) -> Self {
        let values = (0..grid.len()).map(|i| f(&grid.node(i))).collect();
        Field { values, grid_key: grid.key() }
    }

    /// Same grid, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        Field { values, grid_key: self.grid_key }
    }

    pub fn check(&self, grid: &Grid) -> Result<()> {
        if self.grid_key != grid.key() || self.values.len() != grid.len() {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }

    pub fn same_grid(&self, other: &Field) -> Result<()> {
        if self.grid_key != other.grid_key || self.values.len() != other.values.len() {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, c: f64) -> Self {
        self.with_values(self.values.iter().map(|v| c * v).collect())
    }

    pub fn axpy(&self, a: f64, other: &Field) -> Self {
        self.with_values(self.values.iter().zip(&other.values).map(|(x, y)| x + a * y).collect())
    }

    pub fn positive_part(&self) -> Self {
        self.with_values(self.values.iter().map(|v| v.max(0.0)).collect())
    }
}

pub fn lt_norm(u: &Field, grid: &Grid, t: f64) -> Result<f64> {
    u.check(grid)?;
    if !(t > 0.0) {
        return Err(Error::InvalidParams("norm exponent must be positive".into()));
    }
    let sum: f64 = u.values.iter().map(|v| v.abs().powf(t)).sum();
    Ok((sum * grid.cell_volume).powf(1.0 / t))
}

/// Per-node integral of `|x_i - y|^{-(N+sp)}` over the complement of the domain.
#[derive(Debug, Clone)]
pub struct ExteriorTail {
    pub tail: Vec<f64>,
    /// Part of each tail over the complement inside `B(x_i, truncation_radius)`.
    pub annulus: Vec<f64>,
    /// Contribution beyond `truncation_radius`, identical for every node.
    pub far: f64,
    pub truncation_radius: f64,
}

/// Exterior tails by exact ray integration in the radial variable.
///
/// With `g = N + sp - d`, `T(x) = (1/g) ∫_{S^{d-1}} ρ(θ)^{-g} dθ` where `ρ` is the
/// distance from `x` to the boundary along `θ`. The angular integral is done with
/// composite Gauss rules on pieces where `ρ` is smooth.
pub fn exterior_tail(
    grid: &Grid,
    params: &ModelParams,
    truncation_radius: Option<f64>,
) -> Result<ExteriorTail> {
    let sp = params.s * params.p;
    if !(sp > 0.0) {
        return Err(Error::InvalidParams("need sp > 0".into()));
    }
    let d = grid.dim;
    let g = params.n() + sp - d as f64;
    if !(g > 0.0) {
        return Err(Error::InvalidParams("need N + sp > grid dimension".into()));
    }
    let diam = grid.geometry.diameter();
    let rt = truncation_radius.unwrap_or(2.0 * diam);
    if !(rt >= diam) {
        return Err(Error::InvalidParams("truncation radius must cover the domain".into()));
    }
    let far = sphere_area(d) * rt.powf(-g) / g;
    let tail: Vec<f64> = (0..grid.len())
        .map(|i| ray_tail(&grid.geometry, &grid.node(i), g))
        .collect();
    let annulus = tail.iter().map(|t| t - far).collect();
    Ok(ExteriorTail { tail, annulus, far, truncation_radius: rt })
}

/// `(1/g) ∫_{S^{d-1}} ρ^{-g}` for a point inside the geometry.
pub fn ray_tail(geometry: &Geometry, x: &[f64], g: f64) -> f64 {
    match geometry {
        Geometry::Box { size, .. } => {
            let lo = geometry.lower_corner();
            let hi: Vec<f64> = lo.iter().zip(size).map(|(a, l)| a + l).collect();
            box_tail(x, &lo, &hi, g)
        }
        Geometry::Ball { size, dim, .. } => {
            let c = geometry.center();
            ball_tail(dist(x, &c), *size, *dim, g)
        }
    }
}

fn box_tail(x: &[f64], lo: &[f64], hi: &[f64], g: f64) -> f64 {
    let d = x.len();
    match d {
        1 => ((x[0] - lo[0]).powf(-g) + (hi[0] - x[0]).powf(-g)) / g,
        2 => {
            let mut acc = 0.0;
            for k in 0..2 {
                let m = 1 - k;
                for a in [x[k] - lo[k], hi[k] - x[k]] {
                    let ep = hi[m] - x[m];
                    let em = x[m] - lo[m];
                    let f = |phi: f64| phi.cos().powf(g);
                    let s = quad::integrate(&f, -(em / a).atan(), 0.0, 24)
                        + quad::integrate(&f, 0.0, (ep / a).atan(), 24);
                    acc += a.powf(-g) * s;
                }
            }
            acc / g
        }
        _ => {
            let mut acc = 0.0;
            for k in 0..3 {
                let (m1, m2) = ((k + 1) % 3, (k + 2) % 3);
                for a in [x[k] - lo[k], hi[k] - x[k]] {
                    let e = [hi[m1] - x[m1], x[m1] - lo[m1], hi[m2] - x[m2], x[m2] - lo[m2]];
                    // each edge of the face rectangle with its perpendicular distance from the
                    // foot point and the two half-widths along it
                    let edges = [(e[0], e[2], e[3]), (e[1], e[2], e[3]), (e[2], e[0], e[1]), (e[3], e[0], e[1])];
                    for (dist_e, wp, wm) in edges {
                        let f = |psi: f64| {
                            let rr = dist_e / psi.cos();
                            a / (g + 1.0)
                                * (a.powf(-(g + 1.0)) - (a * a + rr * rr).powf(-(g + 1.0) / 2.0))
                        };
                        let hi_ang = (wp / dist_e).atan();
                        let lo_ang = -(wm / dist_e).atan();
                        acc += panels_around_zero(&f, lo_ang, hi_ang, a / dist_e);
                    }
                }
            }
            acc / g
        }
    }
}

/// Integrates on `[lo, hi]` (with `lo <= 0 <= hi`), grading panels away from zero when the
/// integrand varies on the angular scale `scale`.
fn panels_around_zero<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64, scale: f64) -> f64 {
    let first = scale.clamp(1e-6, 0.25);
    let right = quad::graded_breaks(0.0, hi, first);
    let left: Vec<f64> = quad::graded_breaks(0.0, -lo, first).iter().map(|v| -v).rev().collect();
    quad::integrate_panels(f, &left, 16) + quad::integrate_panels(f, &right, 16)
}

fn ball_tail(m: f64, radius: f64, dim: usize, g: f64) -> f64 {
    let delta = radius - m;
    match dim {
        1 => (delta.powf(-g) + (radius + m).powf(-g)) / g,
        2 => {
            let rho = |phi: f64| {
                let sn = phi.sin();
                -m * phi.cos() + (radius * radius - m * m * sn * sn).sqrt()
            };
            let f = |phi: f64| rho(phi).powf(-g);
            let first = (delta / radius).sqrt().max(1e-7) * 0.25;
            let br = quad::graded_breaks(0.0, PI, first);
            2.0 * quad::integrate_panels(&f, &br, 16) / g
        }
        _ => {
            // v = 1 - cos(angle to x - c)
            let rho = |v: f64| {
                let mu = 1.0 - v;
                -m * mu + (m * m * mu * mu + radius * radius - m * m).max(0.0).sqrt()
            };
            let f = |v: f64| rho(v).powf(-g);
            let first = (delta / radius).max(1e-12) * 0.5;
            let br = quad::graded_breaks(0.0, 2.0, first);
            2.0 * PI * quad::integrate_panels(&f, &br, 16) / g
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n: usize, s: f64, p: f64) -> ModelParams {
        ModelParams::new(n, p, 1.0 + 0.5 * (p - 1.0), s, 0.5, 1.0, Some(p + 1.0)).unwrap()
    }

    #[test]
    fn unit_interval_five_nodes() {
        let g = build_grid(&Geometry::unit_box(1), 5).unwrap();
        assert_eq!(g.len(), 5);
        assert!((g.cell_volume - 0.2).abs() < 1e-15);
        assert!((g.interior_measure() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn unit_square_sixteen_nodes() {
        let g = build_grid(&Geometry::unit_box(2), 4).unwrap();
        assert_eq!(g.len(), 16);
        assert!((g.cell_volume - 1.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn coarse_disk_area_within_fifteen_percent() {
        let g = build_grid(&Geometry::ball(2, 1.0), 9).unwrap();
        let fine = build_grid(&Geometry::ball(2, 1.0), 801).unwrap();
        assert!((fine.interior_measure() - PI).abs() / PI < 2e-3);
        assert!((g.interior_measure() - PI).abs() / PI < 0.15, "{}", g.interior_measure());
    }

    #[test]
    fn interior_nodes_strictly_inside() {
        for geo in [Geometry::unit_box(3), Geometry::ball(3, 0.7), Geometry::ball(2, 1.3)] {
            let g = build_grid(&geo, 10).unwrap();
            for i in 0..g.len() {
                assert!(geo.contains(&g.node(i)));
            }
        }
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(build_grid(&Geometry::unit_box(2), 2).is_err());
        assert!(build_grid(&Geometry::Box { size: vec![1.0, 0.0], origin: vec![] }, 5).is_err());
        assert!(build_grid(&Geometry::ball(2, 0.0), 5).is_err());
    }

    #[test]
    fn params_default_to_critical_exponent() {
        let p = ModelParams::new(3, 2.0, 1.5, 0.5, 0.05, 1.0, None).unwrap();
        assert!((p.r - 6.0).abs() < 1e-15);
        assert!(ModelParams::new(2, 2.0, 1.5, 0.5, 0.05, 1.0, None).is_err());
        assert!(ModelParams::new(3, 2.0, 2.5, 0.5, 0.05, 1.0, None).is_err());
        assert!(ModelParams::new(3, 2.0, 1.5, 1.0, 0.05, 1.0, None).is_err());
        assert!(ModelParams::new(3, 2.0, 1.5, 0.5, 0.05, 1.0, Some(1.9)).is_err());
    }

    #[test]
    fn params_json_roundtrip_fills_r() {
        let p: ModelParams =
            serde_json::from_str(r#"{"dim_n":3,"p":2.0,"q":1.5,"s":0.5,"eps":0.05,"lambda":1.0}"#)
                .unwrap();
        assert_eq!(p.r, 6.0);
        let back: ModelParams = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn lt_norm_examples() {
        let g = build_grid(&Geometry::unit_box(2), 6).unwrap();
        let one = Field::constant(&g, 1.0);
        for t in [1.0, 1.5, 2.0, 6.0] {
            assert!((lt_norm(&one, &g, t).unwrap() - 1.0).abs() < 1e-14);
        }
        assert_eq!(lt_norm(&Field::zeros(&g), &g, 2.0).unwrap(), 0.0);
        let g2 = build_grid(&Geometry::Box { size: vec![1.0], origin: vec![] }, 3).unwrap();
        let u = Field::from_values(&g2, vec![3.0, 4.0, 0.0]).unwrap();
        let want = ((9.0 + 16.0) / 3.0f64).sqrt();
        assert!((lt_norm(&u, &g2, 2.0).unwrap() - want).abs() < 1e-14);
        assert!(lt_norm(&u, &g2, 0.0).is_err());
    }

    #[test]
    fn disk_center_tail_is_two_pi() {
        let geo = Geometry::ball(2, 1.0);
        let prm = params(2, 0.5, 2.0);
        assert!((ray_tail(&geo, &[0.0, 0.0], prm.n() + 1.0 - 2.0) - 2.0 * PI).abs() < 1e-12);
    }

    /// Brute-force oracle: polar integration of the kernel over the exterior with a fine
    /// radial grid per direction, independent of the closed forms used above.
    fn brute_tail(geo: &Geometry, x: &[f64], kexp: f64) -> f64 {
        let d = x.len();
        let big = 200.0;
        let radial = |dir: &[f64]| {
            // first exit distance by bisection on the membership test
            let (mut a, mut b) = (0.0, geo.diameter() * 2.0);
            for _ in 0..80 {
                let m = 0.5 * (a + b);
                let y: Vec<f64> = (0..d).map(|k| x[k] + m * dir[k]).collect();
                if geo.contains(&y) {
                    a = m
                } else {
                    b = m
                }
            }
            let f = |t: f64| t.powf(d as f64 - 1.0 - kexp);
            let br = quad::graded_breaks(a, big, 1e-3);
            quad::integrate_panels(&f, &br, 20) + big.powf(d as f64 - kexp) / (kexp - d as f64)
        };
        match d {
            2 => {
                let n = 4000;
                (0..n)
                    .map(|k| {
                        let th = 2.0 * PI * (k as f64 + 0.5) / n as f64;
                        radial(&[th.cos(), th.sin()])
                    })
                    .sum::<f64>()
                    * 2.0
                    * PI
                    / n as f64
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn disk_tail_matches_brute_force() {
        let geo = Geometry::ball(2, 1.0);
        let prm = params(2, 0.5, 2.0);
        let kexp = prm.n() + prm.s * prm.p;
        for x in [[0.0, 0.0], [0.5, 0.1], [0.0, -0.85]] {
            let got = ray_tail(&geo, &x, kexp - 2.0);
            let want = brute_tail(&geo, &x, kexp);
            assert!((got - want).abs() / want < 1e-2, "{x:?}: {got} vs {want}");
        }
    }

    #[test]
    fn square_tail_matches_brute_force() {
        let geo = Geometry::unit_box(2);
        for (s, p) in [(0.5, 2.0), (0.3, 1.5), (0.8, 2.5)] {
            let prm = params(2, s, p);
            let kexp = prm.n() + s * p;
            for x in [[0.5, 0.5], [0.1, 0.7], [0.03, 0.04]] {
                let got = ray_tail(&geo, &x, kexp - 2.0);
                let want = brute_tail(&geo, &x, kexp);
                assert!((got - want).abs() / want < 2e-3, "{x:?}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn cube_tail_matches_direction_sampling() {
        let geo = Geometry::unit_box(3);
        let kexp: f64 = 3.0 + 0.5 * 2.0;
        let x = [0.3, 0.55, 0.2];
        let got = ray_tail(&geo, &x, kexp - 3.0);
        let (nt, np) = (400, 800);
        let mut acc = 0.0;
        for it in 0..nt {
            let th = PI * (it as f64 + 0.5) / nt as f64;
            for ip in 0..np {
                let ph = 2.0 * PI * (ip as f64 + 0.5) / np as f64;
                let dir = [th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()];
                let mut rho = f64::INFINITY;
                for k in 0..3 {
                    if dir[k] > 0.0 {
                        rho = rho.min((1.0 - x[k]) / dir[k]);
                    } else if dir[k] < 0.0 {
                        rho = rho.min(-x[k] / dir[k]);
                    }
                }
                acc += rho.powf(-(kexp - 3.0)) * th.sin();
            }
        }
        let want = acc * (PI / nt as f64) * (2.0 * PI / np as f64) / (kexp - 3.0);
        assert!((got - want).abs() / want < 2e-3, "{got} vs {want}");
    }

    #[test]
    fn ball3_center_closed_form() {
        let g = 1.7;
        let got = ball_tail(0.0, 2.0, 3, g);
        let want = 4.0 * PI * 2.0f64.powf(-g) / g;
        assert!((got - want).abs() / want < 1e-12);
        // off-center: compare with direction sampling
        let m = 0.9;
        let n = 200000;
        let mut acc = 0.0;
        for k in 0..n {
            let mu = -1.0 + 2.0 * (k as f64 + 0.5) / n as f64;
            let rho = -m * mu + (m * m * mu * mu + 4.0 - m * m).sqrt();
            acc += rho.powf(-g);
        }
        let want = 2.0 * PI * acc * (2.0 / n as f64) / g;
        let got = ball_tail(m, 2.0, 3, g);
        assert!((got - want).abs() / want < 1e-6);
    }

    #[test]
    fn tail_grows_toward_boundary_and_split_is_consistent() {
        let g = build_grid(&Geometry::unit_box(2), 9).unwrap();
        let prm = params(2, 0.5, 2.0);
        let t = exterior_tail(&g, &prm, None).unwrap();
        let center = (0..g.len()).find(|&i| g.node(i) == vec![0.5, 0.5]).unwrap();
        for i in 0..g.len() {
            assert!(t.tail[i] > 0.0);
            if i != center {
                assert!(t.tail[i] > t.tail[center]);
            }
            assert!((t.annulus[i] + t.far - t.tail[i]).abs() < 1e-12 * t.tail[i]);
        }
        let t2 = exterior_tail(&g, &prm, Some(2.0 * t.truncation_radius)).unwrap();
        for i in 0..g.len() {
            assert!((t2.tail[i] - t.tail[i]).abs() <= t.far);
        }
        assert!(exterior_tail(&g, &prm, Some(0.5)).is_err());
    }

    #[test]
    fn tail_translation_invariant() {
        let prm = params(2, 0.4, 2.0);
        for geo in [Geometry::unit_box(2), Geometry::ball(2, 0.8)] {
            let a = build_grid(&geo, 11).unwrap();
            let b = build_grid(&geo.translated(&[3.25, -1.5]), 11).unwrap();
            let ta = exterior_tail(&a, &prm, None).unwrap();
            let tb = exterior_tail(&b, &prm, None).unwrap();
            for i in 0..a.len() {
                assert!((ta.tail[i] - tb.tail[i]).abs() < 1e-10 * ta.tail[i]);
            }
        }
    }

    #[test]
    fn gamma_function_values() {
        assert!((gamma_fn(0.5) - PI.sqrt()).abs() < 1e-12);
        assert!((gamma_fn(5.0) - 24.0).abs() < 1e-10);
        assert!((sphere_area(4) - 2.0 * PI * PI).abs() < 1e-10);
    }
}
