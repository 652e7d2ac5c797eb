//! Closed-form and small-scale reference solutions: least squares, maximum
//! margin separators and the analytic natural-gradient-flow logit curve.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{pinv_with_info, DEFAULT_RTOL};
use crate::logistic::ClassificationDataset;

/// Constraints within this distance of 1 count as active.
pub const ACTIVE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsSolution {
    pub beta: DVector<f64>,
    pub rank: usize,
    /// The design has rank below `min(N, D)`.
    pub rank_deficient: bool,
}

/// `X⁺ y`: the least-squares fit when `N ≥ D`, the minimum-norm interpolant
/// of the labels when `N < D`.
pub fn ols(ds: &ClassificationDataset) -> OlsSolution {
    let p = pinv_with_info(ds.x(), DEFAULT_RTOL);
    OlsSolution {
        beta: &p.matrix * ds.y(),
        rank: p.rank,
        rank_deficient: p.is_rank_deficient(ds.n_samples(), ds.dim()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginSolution {
    pub beta: DVector<f64>,
    /// `min_n y_n x_nᵀβ / ‖β‖_p` for the norm that was minimized.
    pub margin: f64,
    /// Indices whose constraint `y_n x_nᵀβ ≥ 1` is tight.
    pub active_set: Vec<usize>,
}

fn solution(ds: &ClassificationDataset, beta: DVector<f64>, p: f64) -> MarginSolution {
    let u = ds.signed_design() * &beta;
    let active_set = u
        .iter()
        .enumerate()
        .filter(|(_, &v)| (v - 1.0).abs() <= ACTIVE_TOL)
        .map(|(i, _)| i)
        .collect();
    let margin = u.min() / lp_norm(beta.as_slice(), p);
    MarginSolution {
        beta,
        margin,
        active_set,
    }
}

/// `(Σ |v_i|^p)^{1/p}`; for `p < 1` this is only a quasi-norm.
pub fn lp_norm(v: &[f64], p: f64) -> f64 {
    if p == 2.0 {
        return v.iter().map(|x| x * x).sum::<f64>().sqrt();
    }
    if p == 1.0 {
        return v.iter().map(|x| x.abs()).sum();
    }
    v.iter().map(|x| x.abs().powf(p)).sum::<f64>().powf(1.0 / p)
}

#[derive(Debug, Clone, Copy)]
pub struct HildrethOptions {
    pub max_sweeps: usize,
    pub violation_tol: f64,
    pub gap_tol: f64,
}

impl Default for HildrethOptions {
    fn default() -> Self {
        HildrethOptions {
            max_sweeps: 200_000,
            violation_tol: 1e-10,
            gap_tol: 1e-12,
        }
    }
}

/// `argmin ‖β‖₂ s.t. y_n x_nᵀβ ≥ 1`.
pub fn max_margin_l2(ds: &ClassificationDataset) -> Result<MarginSolution> {
    max_margin_l2_with(ds, &HildrethOptions::default())
}

/// Dual coordinate ascent on `max Σα − ½‖X̃ᵀα‖²` over `α ≥ 0`, which is
/// Hildreth's cyclic projection onto the constraint halfspaces.
///
/// Stops once the largest constraint violation and the duality gap
/// `Σ α_n (x̃_nᵀβ − 1)` are both below tolerance. If the data are not
/// separable the dual is unbounded and the sweep budget runs out.
pub fn max_margin_l2_with(ds: &ClassificationDataset, opts: &HildrethOptions) -> Result<MarginSolution> {
    let xt = ds.signed_design();
    let (n, d) = xt.shape();
    let row_sq: Vec<f64> = xt.row_iter().map(|r| r.norm_squared()).collect();
    let mut alpha = vec![0.0; n];
    let mut beta = DVector::<f64>::zeros(d);
    for _ in 0..opts.max_sweeps {
        for i in 0..n {
            let margin = xt.row(i).dot(&beta.transpose());
            let next = (alpha[i] + (1.0 - margin) / row_sq[i]).max(0.0);
            let delta = next - alpha[i];
            if delta != 0.0 {
                beta.axpy(delta, &xt.row(i).transpose(), 1.0);
                alpha[i] = next;
            }
        }
        let u = &xt * &beta;
        let violation = u.iter().map(|v| (1.0 - v).max(0.0)).fold(0.0, f64::max);
        let gap: f64 = alpha.iter().zip(u.iter()).map(|(a, v)| a * (v - 1.0)).sum();
        let scale = beta.norm_squared().max(1.0);
        if violation <= opts.violation_tol && gap.abs() <= opts.gap_tol * scale {
            return Ok(solution(ds, beta, 2.0));
        }
        if !beta.iter().all(|v| v.is_finite()) || beta.norm() > 1e12 {
            break;
        }
    }
    Err(Error::Infeasible(format!(
        "no separator found within {} sweeps",
        opts.max_sweeps
    )))
}

/// Number of `k`-subsets of `n` items, saturating.
fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k.min(n));
    (0..k).fold(1u128, |acc, i| {
        acc.saturating_mul((n - i) as u128) / (i as u128 + 1)
    })
}

const MAX_VERTEX_SUBSETS: u128 = 5_000_000;

/// Minimize `‖β‖_p` over `{β : X̃β ≥ 1}` by enumerating the vertices of the
/// arrangement of constraint hyperplanes and coordinate hyperplanes.
///
/// For `p ≤ 1` the objective is concave on each orthant, so an optimum is
/// attained at such a vertex. Ties are broken toward the lexicographically
/// smallest vertex.
pub fn max_margin_lp_vertices(ds: &ClassificationDataset, p: f64) -> Result<MarginSolution> {
    let xt = ds.signed_design();
    let (n, d) = xt.shape();
    let m = n + d;
    if binomial(m, d) > MAX_VERTEX_SUBSETS {
        return Err(Error::Unsupported(format!(
            "vertex enumeration over C({m}, {d}) subsets is too large"
        )));
    }
    // rows 0..n are constraints with right-hand side 1, rows n.. are e_i with 0
    let row = |r: usize| -> (DVector<f64>, f64) {
        if r < n {
            (xt.row(r).transpose(), 1.0)
        } else {
            let mut e = DVector::zeros(d);
            e[r - n] = 1.0;
            (e, 0.0)
        }
    };
    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut idx: Vec<usize> = (0..d).collect();
    loop {
        let mut a = DMatrix::zeros(d, d);
        let mut b = DVector::zeros(d);
        for (k, &r) in idx.iter().enumerate() {
            let (v, rhs) = row(r);
            a.set_row(k, &v.transpose());
            b[k] = rhs;
        }
        if let Some(beta) = a.clone().lu().solve(&b) {
            let consistent = (&a * &beta - &b).amax() <= 1e-9;
            let feasible = (&xt * &beta).iter().all(|&u| u >= 1.0 - 1e-9);
            if consistent && feasible && beta.iter().all(|v| v.is_finite()) {
                let obj = lp_norm(beta.as_slice(), p);
                let better = match &best {
                    None => true,
                    Some((o, bb)) => {
                        let tol = 1e-12 * o.max(1.0);
                        obj < o - tol || ((obj - o).abs() <= tol && lex_less(&beta, bb))
                    }
                };
                if better {
                    best = Some((obj, beta));
                }
            }
        }
        if !next_combination(&mut idx, m) {
            break;
        }
    }
    match best {
        Some((_, beta)) => Ok(solution(ds, beta, p)),
        None => Err(Error::Infeasible("no feasible vertex".into())),
    }
}

fn lex_less(a: &DVector<f64>, b: &DVector<f64>) -> bool {
    for (x, y) in a.iter().zip(b.iter()) {
        if (x - y).abs() > 1e-12 {
            return x < y;
        }
    }
    false
}

fn next_combination(idx: &mut [usize], m: usize) -> bool {
    let k = idx.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if idx[i] < m - k + i {
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// `argmin ‖β‖_p s.t. y_n x_nᵀβ ≥ 1` for `p ∈ (0, 2]`.
///
/// `p = 2` uses [`max_margin_l2`], `p = 1` exact vertex enumeration. For
/// `p < 1` the problem is non-convex and is solved heuristically by a dense
/// search over directions on the sphere refined by coordinate pattern search;
/// only `D ≤ 3` is supported.
pub fn max_margin_lp(ds: &ClassificationDataset, p: f64) -> Result<MarginSolution> {
    if !(p > 0.0 && p <= 2.0) {
        return Err(Error::Domain(format!("p = {p} must lie in (0, 2]")));
    }
    if p == 2.0 {
        return max_margin_l2(ds);
    }
    if p == 1.0 {
        return max_margin_lp_vertices(ds, 1.0);
    }
    let d = ds.dim();
    if d > 3 {
        return Err(Error::Unsupported(format!("p < 1 needs D <= 3, got D = {d}")));
    }
    let xt = ds.signed_design();
    // objective of a direction: ‖u‖_p / min_n x̃_nᵀu, infinite if not separating
    let objective = |u: &DVector<f64>| -> f64 {
        let m = (&xt * u).min();
        if m <= 0.0 {
            f64::INFINITY
        } else {
            lp_norm(u.as_slice(), p) / m
        }
    };
    let (mut angles, mut best) = sphere_search(d, &objective)?;
    // pattern search over the angles with halving steps
    let mut step = match d {
        1 => 0.0,
        2 => std::f64::consts::PI / 2048.0,
        _ => std::f64::consts::PI / 256.0,
    };
    while step > 1e-13 {
        let mut improved = false;
        for k in 0..angles.len() {
            for s in [step, -step] {
                let mut trial = angles.clone();
                trial[k] += s;
                let v = objective(&direction(&trial, d));
                if v < best {
                    best = v;
                    angles = trial;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    let u = direction(&angles, d);
    let m = (&xt * &u).min();
    Ok(solution(ds, u / m, p))
}

fn direction(angles: &[f64], d: usize) -> DVector<f64> {
    match d {
        1 => DVector::from_element(1, angles[0].cos().signum()),
        2 => DVector::from_row_slice(&[angles[0].cos(), angles[0].sin()]),
        _ => {
            let (t, f) = (angles[0], angles[1]);
            DVector::from_row_slice(&[f.sin() * t.cos(), f.sin() * t.sin(), f.cos()])
        }
    }
}

/// Grid over directions; the grid contains the coordinate axes exactly.
fn sphere_search(d: usize, objective: &dyn Fn(&DVector<f64>) -> f64) -> Result<(Vec<f64>, f64)> {
    use std::f64::consts::PI;
    let mut best = (Vec::new(), f64::INFINITY);
    let mut consider = |angles: Vec<f64>| {
        let v = objective(&direction(&angles, d));
        if v < best.1 {
            best = (angles, v);
        }
    };
    match d {
        1 => {
            consider(vec![0.0]);
            consider(vec![PI]);
        }
        2 => {
            let n = 8192;
            for i in 0..n {
                consider(vec![2.0 * PI * i as f64 / n as f64]);
            }
        }
        _ => {
            let (nt, nf) = (512, 256);
            for j in 0..=nf {
                let f = PI * j as f64 / nf as f64;
                for i in 0..nt {
                    consider(vec![2.0 * PI * i as f64 / nt as f64, f]);
                }
            }
        }
    }
    if best.1.is_finite() {
        Ok(best)
    } else {
        Err(Error::Infeasible("no separating direction on the search grid".into()))
    }
}

/// Logit of a single point under natural gradient flow with unit label:
/// `s̃(t) = log(exp(t + c) − 1)`, the solution of `ds̃/dt = 1/φ(s̃)`.
pub fn analytic_ngf_logits(t: f64, c: f64) -> Result<f64> {
    let x = t + c;
    if !(x > 0.0) {
        return Err(Error::Domain(format!("t + c = {x} must be positive")));
    }
    if x > 30.0 {
        // log(e^x − 1) = x + log(1 − e^{−x})
        Ok(x + (-(-x).exp()).ln_1p())
    } else {
        Ok(x.exp_m1().ln())
    }
}

/// Integration constant placing the analytic curve through logit `s0` at `t = 0`.
pub fn ngf_constant(s0: f64) -> f64 {
    // log(1 + e^{s0})
    crate::stable::softplus(s0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(x: &[f64], rows: usize, y: &[f64]) -> ClassificationDataset {
        let cols = x.len() / rows;
        ClassificationDataset::new(DMatrix::from_row_slice(rows, cols, x), DVector::from_row_slice(y)).unwrap()
    }

    #[test]
    fn ols_examples() {
        let a = ols(&ds(&[1.0, 0.0, 0.0, 1.0], 2, &[1.0, -1.0]));
        assert!((a.beta - DVector::from_row_slice(&[1.0, -1.0])).amax() < 1e-14);
        let b = ols(&ds(&[1.0, 1.0], 1, &[1.0]));
        assert!((b.beta - DVector::from_row_slice(&[0.5, 0.5])).amax() < 1e-14);
        assert!(!b.rank_deficient);
        let c = ols(&ds(&[1.0, 1.0, 2.0, 2.0], 2, &[1.0, 1.0]));
        assert!(c.rank_deficient);
    }

    #[test]
    fn l2_single_constraint_is_projection() {
        let s = max_margin_l2(&ds(&[2.0, -3.0], 1, &[1.0])).unwrap();
        assert!((s.beta - DVector::from_row_slice(&[2.0 / 13.0, -3.0 / 13.0])).amax() < 1e-9);
        assert_eq!(s.active_set, vec![0]);
    }

    #[test]
    fn l2_symmetric_examples() {
        let s = max_margin_l2(&ds(&[1.0, 0.0, 0.0, 1.0], 2, &[1.0, 1.0])).unwrap();
        assert!((s.beta - DVector::from_row_slice(&[1.0, 1.0])).amax() < 1e-9);
        let s = max_margin_l2(&ds(&[1.0, 0.0, -1.0, 0.0], 2, &[1.0, -1.0])).unwrap();
        assert!((s.beta - DVector::from_row_slice(&[1.0, 0.0])).amax() < 1e-9);
    }

    #[test]
    fn l2_detects_non_separable() {
        let data = ds(&[1.0, 1.0], 2, &[1.0, -1.0]);
        let opts = HildrethOptions {
            max_sweeps: 2000,
            ..Default::default()
        };
        assert!(matches!(max_margin_l2_with(&data, &opts), Err(Error::Infeasible(_))));
    }

    #[test]
    fn l1_tie_break_and_sparsity() {
        let s = max_margin_lp(&ds(&[1.0, 0.0, 0.0, 1.0], 2, &[1.0, 1.0]), 1.0).unwrap();
        assert!((s.beta - DVector::from_row_slice(&[1.0, 1.0])).amax() < 1e-12);
        // one coordinate carries most of the signal
        let data = ds(&[3.0, 0.5, 2.5, -0.4, -3.0, 0.2], 3, &[1.0, 1.0, -1.0]);
        let s = max_margin_lp(&data, 1.0).unwrap();
        assert_eq!(s.beta.iter().filter(|v| v.abs() > 1e-12).count(), 1);
    }

    #[test]
    fn lp_rejects_high_dimension() {
        let data = ds(&[1.0, 0.0, 0.0, 0.0], 1, &[1.0]);
        assert!(matches!(max_margin_lp(&data, 0.5), Err(Error::Unsupported(_))));
    }

    #[test]
    fn lp_grid_matches_vertex_enumeration() {
        let data = ds(
            &[1.0, 2.0, 2.0, -1.0, 1.5, 1.5, -1.0, -2.0, -2.0, 1.0, -1.2, -2.0],
            6,
            &[1.0, 1.0, 1.0, -1.0, -1.0, -1.0],
        );
        let grid = max_margin_lp(&data, 0.5).unwrap();
        let exact = max_margin_lp_vertices(&data, 0.5).unwrap();
        assert!((lp_norm(grid.beta.as_slice(), 0.5) - lp_norm(exact.beta.as_slice(), 0.5)).abs() < 1e-8);
    }

    #[test]
    fn analytic_logits() {
        assert!(analytic_ngf_logits(2f64.ln(), 0.0).unwrap().abs() < 1e-15);
        assert!((analytic_ngf_logits(50.0, 0.0).unwrap() - (50.0 - (-50f64).exp())).abs() < 1e-12);
        assert!(matches!(analytic_ngf_logits(-1.0, 0.5), Err(Error::Domain(_))));
        let c = ngf_constant(0.3);
        assert!((analytic_ngf_logits(0.0, c).unwrap() - 0.3).abs() < 1e-14);
        let lag = |t: f64| analytic_ngf_logits(t, 0.0).unwrap() - t;
        assert!(lag(40.0).abs() < lag(10.0).abs());
        assert!(lag(40.0).abs() < 1e-15);
    }
}
