//! Linear and rank correlation with approximate two-sided p-values.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub coefficient: f64,
    /// Approximate two-sided p-value.
    pub p_value: f64,
    pub n: usize,
}

fn check_inputs(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!("{} x values vs {} y values", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::Insufficient(format!("correlation needs n >= 3, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::param("correlation inputs must be finite"));
    }
    for (name, v) in [("x", x), ("y", y)] {
        if v.iter().all(|&a| a == v[0]) {
            return Err(Error::Undefined(format!("{name} is constant")));
        }
    }
    Ok(())
}

fn product_moment(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Two-sided p-value of `r` through `t = r sqrt((n-2)/(1-r^2))` on n-2 dof.
fn t_test_p(r: f64, n: usize) -> f64 {
    let dof = (n - 2) as f64;
    if 1.0 - r * r <= 0.0 {
        return 0.0;
    }
    let t = r.abs() * (dof / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, dof).expect("dof >= 1");
    (2.0 * dist.sf(t)).clamp(0.0, 1.0)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<CorrelationResult> {
    check_inputs(x, y)?;
    let r = product_moment(x, y);
    Ok(CorrelationResult {
        coefficient: r,
        p_value: t_test_p(r, x.len()),
        n: x.len(),
    })
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<CorrelationResult> {
    check_inputs(x, y)?;
    let rho = product_moment(&average_ranks(x), &average_ranks(y));
    Ok(CorrelationResult {
        coefficient: rho,
        p_value: t_test_p(rho, x.len()),
        n: x.len(),
    })
}

/// Kendall tau-b. The p-value uses the normal approximation with the
/// untied variance `n(n-1)(2n+5)/18` of the pair-score sum.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<CorrelationResult> {
    check_inputs(x, y)?;
    let n = x.len();
    let (mut s, mut n1, mut n2) = (0i64, 0i64, 0i64);
    let mut pairs = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let dx = (x[i] - x[j]).partial_cmp(&0.0).unwrap() as i64;
            let dy = (y[i] - y[j]).partial_cmp(&0.0).unwrap() as i64;
            s += dx * dy;
            pairs += 1;
            if dx == 0 {
                n1 += 1;
            }
            if dy == 0 {
                n2 += 1;
            }
        }
    }
    let denom = (((pairs - n1) * (pairs - n2)) as f64).sqrt();
    let tau = (s as f64 / denom).clamp(-1.0, 1.0);
    let nf = n as f64;
    let var_s = nf * (nf - 1.0) * (2.0 * nf + 5.0) / 18.0;
    let z = s as f64 / var_s.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Ok(CorrelationResult {
        coefficient: tau,
        p_value: (2.0 * normal.sf(z.abs())).clamp(0.0, 1.0),
        n,
    })
}
