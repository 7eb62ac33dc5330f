//! Quadrature on the reference triangle `(0,0),(1,0),(0,1)` and on `[0,1]`.

use crate::error::{invalid, Result};

pub const MAX_DEGREE: usize = 8;

/// A positive-weight quadrature rule.
///
/// Triangle rules store reference coordinates `[x, y]`; edge rules store
/// `[t, 0]` with `t ∈ [0,1]`.
#[derive(Debug, Clone)]
pub struct QuadRule {
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    pub exact_degree: usize,
}

impl QuadRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ([f64; 2], f64)> + '_ {
        self.points.iter().copied().zip(self.weights.iter().copied())
    }
}

/// Gauss–Legendre nodes and weights on `[0,1]`.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Chebyshev-like initial guess for the i-th root on [-1,1].
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = 0.5 * (1.0 - x);
        weights[i] = 1.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

fn check_degree(degree: usize) -> Result<()> {
    if degree == 0 || degree > MAX_DEGREE {
        return Err(invalid(format!("quadrature degree {degree} outside 1..={MAX_DEGREE}")));
    }
    Ok(())
}

/// Triangle rule exact for total degree `≤ degree`.
pub fn tri_rule(degree: usize) -> Result<QuadRule> {
    check_degree(degree)?;
    let rule = match degree {
        1 => QuadRule { points: vec![[1.0 / 3.0, 1.0 / 3.0]], weights: vec![0.5], exact_degree: 1 },
        2 => QuadRule {
            points: vec![[1.0 / 6.0, 1.0 / 6.0], [2.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 2.0 / 3.0]],
            weights: vec![1.0 / 6.0; 3],
            exact_degree: 2,
        },
        _ => {
            // Collapsed (Duffy) tensor Gauss rule; the extra (1-η) factor costs one degree.
            let k = (degree + 3) / 2;
            let (g, w) = gauss_legendre(k);
            let mut points = Vec::with_capacity(k * k);
            let mut weights = Vec::with_capacity(k * k);
            for (&eta, &we) in g.iter().zip(&w) {
                for (&xi, &wx) in g.iter().zip(&w) {
                    points.push([xi * (1.0 - eta), eta]);
                    weights.push(wx * we * (1.0 - eta));
                }
            }
            QuadRule { points, weights, exact_degree: degree }
        }
    };
    Ok(rule)
}

/// Gauss rule on `[0,1]` exact for degree `≤ degree`.
pub fn edge_rule(degree: usize) -> Result<QuadRule> {
    check_degree(degree)?;
    let k = degree / 2 + 1;
    let (g, w) = gauss_legendre(k);
    Ok(QuadRule { points: g.into_iter().map(|t| [t, 0.0]).collect(), weights: w, exact_degree: degree })
}

/// Triangle rule for the requested degree, clamped to the supported range.
pub(crate) fn tri_rule_clamped(degree: usize) -> QuadRule {
    tri_rule(degree.clamp(1, MAX_DEGREE)).expect("clamped degree is valid")
}

pub(crate) fn edge_rule_clamped(degree: usize) -> QuadRule {
    edge_rule(degree.clamp(1, MAX_DEGREE)).expect("clamped degree is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn factorial(n: u32) -> f64 {
        (1..=n).map(f64::from).product()
    }

    /// ∫_T x^m y^n over the reference triangle = m! n! / (m+n+2)!.
    fn tri_monomial(m: u32, n: u32) -> f64 {
        factorial(m) * factorial(n) / factorial(m + n + 2)
    }

    #[test]
    fn centroid_rule() {
        let r = tri_rule(1).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r.weights[0], 0.5);
        assert!((r.points[0][0] - 1.0 / 3.0).abs() < 1e-16);
    }

    #[test]
    fn known_integrals() {
        let r2 = tri_rule(2).unwrap();
        let s: f64 = r2.iter().map(|(p, w)| w * (p[0] + p[1])).sum();
        assert!((s - 1.0 / 3.0).abs() < 1e-15);

        let r5 = tri_rule(5).unwrap();
        let s: f64 = r5.iter().map(|(p, w)| w * p[0].powi(2) * p[1].powi(3)).sum();
        // 2!·3!/7! = 1/420.
        assert!((tri_monomial(2, 3) - 1.0 / 420.0).abs() < 1e-18);
        assert!((s - tri_monomial(2, 3)).abs() < 1e-15);

        let e1 = edge_rule(1).unwrap();
        assert_eq!(e1.len(), 1);
        assert_eq!(e1.weights[0], 1.0);
        assert_eq!(e1.points[0][0], 0.5);
        let e2 = edge_rule(2).unwrap();
        let s: f64 = e2.iter().map(|(p, w)| w * p[0] * p[0]).sum();
        assert!((s - 1.0 / 3.0).abs() < 1e-15);
        let e5 = edge_rule(5).unwrap();
        let s: f64 = e5.iter().map(|(p, w)| w * p[0].powi(5)).sum();
        assert!((s - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn monomial_exactness_sweep() {
        for deg in 1..=MAX_DEGREE {
            let r = tri_rule(deg).unwrap();
            assert!(r.weights.iter().all(|&w| w > 0.0));
            for m in 0..=deg as u32 {
                for n in 0..=(deg as u32 - m) {
                    let q: f64 = r.iter().map(|(p, w)| w * p[0].powi(m as i32) * p[1].powi(n as i32)).sum();
                    let exact = tri_monomial(m, n);
                    assert!(((q - exact) / exact).abs() < 1e-13, "deg {deg} x^{m} y^{n}: {q} vs {exact}");
                }
            }
            let e = edge_rule(deg).unwrap();
            assert!(e.weights.iter().all(|&w| w > 0.0));
            for m in 0..=deg as i32 {
                let q: f64 = e.iter().map(|(p, w)| w * p[0].powi(m)).sum();
                let exact = 1.0 / (m + 1) as f64;
                assert!(((q - exact) / exact).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn out_of_range_degrees() {
        assert!(tri_rule(0).is_err());
        assert!(tri_rule(9).is_err());
        assert!(edge_rule(0).is_err());
        assert!(edge_rule(9).is_err());
    }
}
