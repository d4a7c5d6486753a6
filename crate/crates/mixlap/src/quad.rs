//! Gauss-Legendre rules and a composite integrator on graded panels.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

type Rule = (Vec<f64>, Vec<f64>);

fn cache() -> &'static Mutex<HashMap<usize, &'static Rule>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, &'static Rule>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Nodes and weights of the `n`-point rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> &'static Rule {
    let mut map = cache().lock().unwrap();
    if let Some(rule) = map.get(&n) {
        return rule;
    }
    let rule: &'static Rule = Box::leak(Box::new(compute_rule(n)));
    map.insert(n, rule);
    rule
}

fn compute_rule(n: usize) -> Rule {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p1 = z;
                p0 = 1.0;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    if n == 1 {
        x[0] = 0.0;
        w[0] = 2.0;
    }
    (x, w)
}

/// Integral of `f` over [a, b] with an `n`-point rule.
pub fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, n: usize) -> f64 {
    let (x, w) = gauss_legendre(n);
    let c = 0.5 * (a + b);
    let r = 0.5 * (b - a);
    let mut acc = 0.0;
    for k in 0..x.len() {
        acc += w[k] * f(c + r * x[k]);
    }
    acc * r
}

/// Composite rule over the panels delimited by `breaks` (ascending).
pub fn integrate_panels<F: Fn(f64) -> f64>(f: &F, breaks: &[f64], n: usize) -> f64 {
    breaks
        .windows(2)
        .map(|ab| integrate(f, ab[0], ab[1], n))
        .sum()
}

/// Breakpoints on [a, b] that double in width starting from `first` next to `a`.
pub fn graded_breaks(a: f64, b: f64, first: f64) -> Vec<f64> {
    let mut out = vec![a];
    let mut w = first.max((b - a) * 1e-14);
    let mut x = a;
    while x + w < b {
        x += w;
        out.push(x);
        w *= 2.0;
    }
    out.push(b);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_integrates_polynomials_exactly() {
        for n in [1usize, 2, 5, 8, 16] {
            let deg = 2 * n - 1;
            let got = integrate(&|x: f64| x.powi(deg as i32 - 1) + 1.0, -1.0, 1.0, n);
            let want = if (deg - 1) % 2 == 0 { 2.0 / deg as f64 } else { 0.0 } + 2.0;
            assert!((got - want).abs() < 1e-13, "n={n}: {got} vs {want}");
        }
    }

    #[test]
    fn weights_sum_to_two() {
        let (_, w) = gauss_legendre(24);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn graded_panels_resolve_endpoint_singularity() {
        let f = |x: f64| x.powf(-0.5);
        let br = graded_breaks(0.0, 1.0, 1e-12);
        let got = integrate_panels(&f, &br, 12);
        assert!((got - 2.0).abs() < 1e-5, "{got}");
    }
}
