//! Entropy, predictive-uncertainty decomposition, KL divergences and
//! Dirichlet utilities. Natural logarithms throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{digamma, ln_gamma, ln_multi_beta};

pub const SIMPLEX_TOL: f64 = 1e-9;
pub const KL_FLOOR: f64 = 1e-12;

pub fn check_simplex(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::input("empty probability vector"));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::input(
            "probabilities must be finite and non-negative",
        ));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::input(format!("probabilities sum to {s}")));
    }
    Ok(())
}

fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|v| **v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

/// −Σ p ln p with 0·ln 0 = 0.
pub fn shannon_entropy(p: &[f64]) -> Result<f64> {
    check_simplex(p)?;
    Ok(entropy_unchecked(p).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub total: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
}

fn ensemble_mean(ensemble: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = ensemble
        .first()
        .ok_or_else(|| Error::input("empty ensemble"))?;
    let k = first.len();
    let mut mean = vec![0.0; k];
    for p in ensemble {
        if p.len() != k {
            return Err(Error::input("ensemble members differ in length"));
        }
        check_simplex(p)?;
        mean.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|v| *v /= ensemble.len() as f64);
    Ok(mean)
}

/// total = H(mean), aleatoric = mean H(member), epistemic = total − aleatoric.
pub fn decompose_predictive(ensemble: &[Vec<f64>]) -> Result<Decomposition> {
    let mean = ensemble_mean(ensemble)?;
    let total = entropy_unchecked(&mean);
    let aleatoric =
        ensemble.iter().map(|p| entropy_unchecked(p)).sum::<f64>() / ensemble.len() as f64;
    Ok(Decomposition {
        total,
        aleatoric,
        epistemic: total - aleatoric,
    })
}

/// Σ p ln(p / max(q, 1e-12)).
pub fn kl_categorical(p: &[f64], q: &[f64]) -> Result<f64> {
    check_simplex(p)?;
    check_simplex(q)?;
    if p.len() != q.len() {
        return Err(Error::input("distributions differ in length"));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a.ln() - b.max(KL_FLOOR).ln()))
        .sum::<f64>()
        .max(0.0))
}

/// Mean over members of KL(p_m ∥ p̄), which equals the mutual information
/// H(p̄) − mean H(p_m).
pub fn expected_kl(ensemble: &[Vec<f64>]) -> Result<f64> {
    let mean = ensemble_mean(ensemble)?;
    let mut total = 0.0;
    for p in ensemble {
        total += p
            .iter()
            .zip(&mean)
            .filter(|(a, _)| **a > 0.0)
            .map(|(a, b)| a * (a.ln() - b.ln()))
            .sum::<f64>();
    }
    Ok((total / ensemble.len() as f64).max(0.0))
}

fn check_alpha(alpha: &[f64]) -> Result<()> {
    if alpha.is_empty() || alpha.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
        return Err(Error::param(
            "Dirichlet concentrations must be positive and finite",
        ));
    }
    Ok(())
}

/// ln Dir(μ | α). A zero coordinate with α_k ≠ 1 returns −∞ as a boundary sentinel.
pub fn dirichlet_logpdf(mu: &[f64], alpha: &[f64]) -> Result<f64> {
    check_alpha(alpha)?;
    check_simplex(mu)?;
    if mu.len() != alpha.len() {
        return Err(Error::input("mu and alpha differ in length"));
    }
    let mut s = -ln_multi_beta(alpha);
    for (m, a) in mu.iter().zip(alpha) {
        if *m == 0.0 {
            if *a != 1.0 {
                return Ok(f64::NEG_INFINITY);
            }
            continue;
        }
        s += (a - 1.0) * m.ln();
    }
    Ok(s)
}

/// Differential entropy ln B(α) + (α₀ − K)ψ(α₀) − Σ(α_k − 1)ψ(α_k).
pub fn dirichlet_diff_entropy(alpha: &[f64]) -> Result<f64> {
    check_alpha(alpha)?;
    let a0: f64 = alpha.iter().sum();
    let k = alpha.len() as f64;
    Ok(ln_multi_beta(alpha) + (a0 - k) * digamma(a0)
        - alpha.iter().map(|a| (a - 1.0) * digamma(*a)).sum::<f64>())
}

/// KL(Dir(α_p) ∥ Dir(α_q)) in closed form.
pub fn dirichlet_kl(ap: &[f64], aq: &[f64]) -> Result<f64> {
    check_alpha(ap)?;
    check_alpha(aq)?;
    if ap.len() != aq.len() {
        return Err(Error::input("concentration vectors differ in length"));
    }
    let p0: f64 = ap.iter().sum();
    let q0: f64 = aq.iter().sum();
    let mut kl = ln_gamma(p0) - ln_gamma(q0);
    let dp0 = digamma(p0);
    for (a, b) in ap.iter().zip(aq) {
        kl += ln_gamma(*b) - ln_gamma(*a) + (a - b) * (digamma(*a) - dp0);
    }
    Ok(kl.max(0.0))
}
