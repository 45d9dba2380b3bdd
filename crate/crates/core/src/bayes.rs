//! Quadratic discriminant classifiers: maximum-likelihood QDA and the
//! Bayesian variant with a Normal-inverse-Wishart prior meta-learned across
//! tasks.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::differentiate;
use crate::error::{Error, Result};
use crate::special::ln_gamma;

pub const JITTER: f64 = 1e-8;
pub const MIN_EIGEN: f64 = 1e-10;

/// Cholesky factorization with a single 1e-8·I retry.
pub fn cholesky_jittered(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if let Some(c) = m.clone().cholesky() {
        return Some(c);
    }
    let d = m.nrows();
    (m + DMatrix::identity(d, d) * JITTER).cholesky()
}

fn check_finite(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::input("non-finite feature"))
    }
}

/// NIW hyperparameters (η, λ, Ψ, ν).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NiwJson", into = "NiwJson")]
pub struct NiwParams {
    pub eta: DVector<f64>,
    pub lambda: f64,
    pub psi: DMatrix<f64>,
    pub nu: f64,
}

/// Serialized form; Ψ is stored as its lower Cholesky factor, row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct NiwJson {
    eta: Vec<f64>,
    lambda: f64,
    nu: f64,
    psi_cholesky_lower: Vec<f64>,
    d: usize,
}

impl From<NiwParams> for NiwJson {
    fn from(p: NiwParams) -> Self {
        let d = p.dim();
        let l = cholesky_jittered(&p.psi)
            .map(|c| c.l())
            .unwrap_or_else(|| DMatrix::from_element(d, d, f64::NAN));
        let mut rows = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                rows.push(l[(i, j)]);
            }
        }
        NiwJson {
            eta: p.eta.as_slice().to_vec(),
            lambda: p.lambda,
            nu: p.nu,
            psi_cholesky_lower: rows,
            d,
        }
    }
}

impl TryFrom<NiwJson> for NiwParams {
    type Error = Error;

    fn try_from(j: NiwJson) -> Result<Self> {
        let d = j.d;
        if j.eta.len() != d || j.psi_cholesky_lower.len() != d * d {
            return Err(Error::InvalidPrior(
                "dimension mismatch in prior JSON".into(),
            ));
        }
        let l = DMatrix::from_row_slice(d, d, &j.psi_cholesky_lower);
        let p = NiwParams {
            eta: DVector::from_vec(j.eta),
            lambda: j.lambda,
            psi: &l * l.transpose(),
            nu: j.nu,
        };
        p.validate()?;
        Ok(p)
    }
}

impl NiwParams {
    /// η = 0, λ = 1, Ψ = I, ν = d.
    pub fn standard(d: usize) -> Self {
        Self {
            eta: DVector::zeros(d),
            lambda: 1.0,
            psi: DMatrix::identity(d, d),
            nu: d as f64,
        }
    }

    pub fn dim(&self) -> usize {
        self.eta.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidPrior(format!(
                "lambda = {} must be > 0",
                self.lambda
            )));
        }
        if !(self.nu > d as f64 - 1.0) {
            return Err(Error::InvalidPrior(format!(
                "nu = {} must exceed d - 1 = {}",
                self.nu,
                d - 1
            )));
        }
        if self.psi.nrows() != d || self.psi.ncols() != d {
            return Err(Error::InvalidPrior("psi shape mismatch".into()));
        }
        if self
            .eta
            .iter()
            .chain(self.psi.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidPrior("non-finite prior entries".into()));
        }
        if cholesky_jittered(&self.psi).is_none() {
            return Err(Error::InvalidPrior("psi is not positive definite".into()));
        }
        Ok(())
    }
}

/// Multivariate Student-t (location, scale matrix, degrees of freedom).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentT {
    pub loc: DVector<f64>,
    pub scale: DMatrix<f64>,
    pub dof: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianClass {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub prior_weight: f64,
}

fn mean_and_scatter(data: &[Vec<f64>], d: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = data.len() as f64;
    let mut mean = DVector::zeros(d);
    for x in data {
        if x.len() != d {
            return Err(Error::input(format!(
                "feature of size {} expected {d}",
                x.len()
            )));
        }
        check_finite(x)?;
        mean += DVector::from_column_slice(x);
    }
    mean /= n;
    let mut s = DMatrix::zeros(d, d);
    for x in data {
        let c = DVector::from_column_slice(x) - &mean;
        s += &c * c.transpose();
    }
    Ok((mean, s))
}

/// Maximum-likelihood class Gaussians; priors are class frequencies.
pub fn qda_fit_mle(per_class: &[Vec<Vec<f64>>]) -> Result<Vec<GaussianClass>> {
    let total: usize = per_class.iter().map(Vec::len).sum();
    let d = per_class
        .iter()
        .find_map(|c| c.first().map(Vec::len))
        .ok_or_else(|| Error::InsufficientData("no samples".into()))?;
    let mut out = Vec::with_capacity(per_class.len());
    for (k, data) in per_class.iter().enumerate() {
        if data.len() < 2 {
            return Err(Error::SingularCovariance(format!(
                "class {k} has {} sample(s); at least 2 needed",
                data.len()
            )));
        }
        let (mu, s) = mean_and_scatter(data, d)?;
        let sigma = s / data.len() as f64;
        let min_eig = sigma.clone().symmetric_eigen().eigenvalues.min();
        if min_eig < MIN_EIGEN || cholesky_jittered(&sigma).is_none() {
            return Err(Error::SingularCovariance(format!(
                "class {k}: minimum eigenvalue {min_eig:.3e} with {} samples in d = {d}",
                data.len()
            )));
        }
        out.push(GaussianClass {
            mu,
            sigma,
            prior_weight: data.len() as f64 / total as f64,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QdaVariant {
    /// −½ Mahalanobis + ln π.
    #[default]
    Verbatim,
    /// Adds −½ ln|Σ|.
    Textbook,
}

/// Discriminant scores of each class for `x`.
pub fn qda_scores(x: &[f64], classes: &[GaussianClass], variant: QdaVariant) -> Result<Vec<f64>> {
    check_finite(x)?;
    let xv = DVector::from_column_slice(x);
    classes
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let ch = cholesky_jittered(&c.sigma)
                .ok_or_else(|| Error::SingularCovariance(format!("class {k} covariance")))?;
            let diff = &xv - &c.mu;
            let maha = diff.dot(&ch.solve(&diff));
            let mut s = -0.5 * maha + c.prior_weight.ln();
            if variant == QdaVariant::Textbook {
                s -= ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            }
            Ok(s)
        })
        .collect()
}

pub fn qda_decide(x: &[f64], classes: &[GaussianClass], variant: QdaVariant) -> Result<usize> {
    let s = qda_scores(x, classes, variant)?;
    Ok(crate::ssl::argmax(&s))
}

/// Linear discriminant with a pooled covariance shrunk toward its scaled
/// identity: Σ = (1 − γ)S + γ (tr S / d) I. Returns class posteriors for each
/// query under equal class priors.
pub fn lda_predict(
    support: &[Vec<Vec<f64>>],
    query: &[Vec<f64>],
    shrinkage: f64,
) -> Result<Vec<Vec<f64>>> {
    if !(0.0..=1.0).contains(&shrinkage) {
        return Err(Error::param("shrinkage must lie in [0, 1]"));
    }
    let d = support
        .iter()
        .find_map(|c| c.first().map(Vec::len))
        .ok_or_else(|| Error::InsufficientData("no support samples".into()))?;
    let mut pooled = DMatrix::zeros(d, d);
    let mut means = Vec::with_capacity(support.len());
    let mut n = 0;
    for (k, data) in support.iter().enumerate() {
        if data.is_empty() {
            return Err(Error::MissingClass(format!("class {k} has no support")));
        }
        let (mu, s) = mean_and_scatter(data, d)?;
        pooled += s;
        n += data.len();
        means.push(mu);
    }
    let sigma = pooled / n.max(1) as f64;
    let ridge = (sigma.trace() / d as f64).max(MIN_EIGEN);
    let sigma = sigma * (1.0 - shrinkage) + DMatrix::identity(d, d) * (shrinkage * ridge);
    let ch = cholesky_jittered(&sigma)
        .ok_or_else(|| Error::SingularCovariance("pooled covariance".into()))?;
    query
        .iter()
        .map(|x| {
            check_finite(x)?;
            let xv = DVector::from_column_slice(x);
            let scores: Vec<f64> = means
                .iter()
                .map(|mu| {
                    let diff = &xv - mu;
                    -0.5 * diff.dot(&ch.solve(&diff))
                })
                .collect();
            normalize_log(&scores)
        })
        .collect()
}

/// Conjugate NIW posterior given observations of one class.
pub fn niw_update(prior: &NiwParams, data: &[Vec<f64>]) -> Result<NiwParams> {
    if data.is_empty() {
        return Ok(prior.clone());
    }
    let d = prior.dim();
    let n = data.len() as f64;
    let (xbar, s) = mean_and_scatter(data, d)?;
    let lam = prior.lambda;
    let diff = &xbar - &prior.eta;
    Ok(NiwParams {
        eta: (&prior.eta * lam + &xbar * n) / (lam + n),
        lambda: lam + n,
        psi: &prior.psi + s + (&diff * diff.transpose()) * (lam * n / (lam + n)),
        nu: prior.nu + n,
    })
}

pub fn posterior_predictive(p: &NiwParams) -> Result<StudentT> {
    let d = p.dim() as f64;
    let dof = p.nu - d + 1.0;
    if !(dof > 0.0) {
        return Err(Error::InvalidDof(format!("nu - d + 1 = {dof}")));
    }
    let c = (p.lambda + 1.0) / (p.lambda * dof);
    Ok(StudentT {
        loc: p.eta.clone(),
        scale: &p.psi * c,
        dof,
    })
}

pub fn t_logpdf(x: &[f64], t: &StudentT) -> Result<f64> {
    check_finite(x)?;
    let d = t.loc.len();
    if x.len() != d {
        return Err(Error::input(format!(
            "point of size {} expected {d}",
            x.len()
        )));
    }
    let ch = cholesky_jittered(&t.scale)
        .ok_or_else(|| Error::SingularScale("scale matrix Cholesky failed".into()))?;
    let diff = DVector::from_column_slice(x) - &t.loc;
    let q = diff.dot(&ch.solve(&diff));
    let logdet = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let (nu, df) = (t.dof, d as f64);
    Ok(ln_gamma((nu + df) / 2.0)
        - ln_gamma(nu / 2.0)
        - 0.5 * df * (nu * std::f64::consts::PI).ln()
        - 0.5 * logdet
        - 0.5 * (nu + df) * (q / nu).ln_1p())
}

/// Normalizes log-densities into probabilities.
pub fn normalize_log(logs: &[f64]) -> Result<Vec<f64>> {
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::NumericalFailure(
            "all class densities underflow".into(),
        ));
    }
    let e: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// P(y = k | x) ∝ T_k(x).
pub fn class_posterior(x: &[f64], per_class: &[StudentT]) -> Result<Vec<f64>> {
    if per_class.is_empty() {
        return Err(Error::MissingClass("no classes".into()));
    }
    let logs: Vec<f64> = per_class
        .iter()
        .map(|t| t_logpdf(x, t))
        .collect::<Result<_>>()?;
    normalize_log(&logs)
}

/// Bayesian QDA conditioned on one support set.
#[derive(Debug, Clone)]
pub struct BayesQda {
    pub classes: Vec<StudentT>,
}

impl BayesQda {
    pub fn fit(phi: &NiwParams, support: &[Vec<Vec<f64>>]) -> Result<Self> {
        phi.validate()?;
        let classes = support
            .iter()
            .map(|data| posterior_predictive(&niw_update(phi, data)?))
            .collect::<Result<_>>()?;
        Ok(Self { classes })
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        class_posterior(x, &self.classes)
    }
}

/// Σ over query points of log T(x | conditioned predictive) for each class.
///
/// Each class's predictive is formed from `support[k]`; `query[k]` is scored.
pub fn log_likelihood(
    phi: &NiwParams,
    support: &[Vec<Vec<f64>>],
    query: &[Vec<Vec<f64>>],
) -> Result<f64> {
    phi.validate()?;
    let mut total = 0.0;
    for (s, q) in support.iter().zip(query) {
        let t = posterior_predictive(&niw_update(phi, s)?)?;
        for x in q {
            total += t_logpdf(x, &t)?;
        }
    }
    Ok(total)
}

/// One episode of features for prior fitting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureTask {
    pub support: Vec<Vec<Vec<f64>>>,
    pub query: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorFitConfig {
    pub lr: f64,
    pub tasks: usize,
}

impl Default for PriorFitConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            tasks: 500,
        }
    }
}

/// Unconstrained coordinates of a prior: η, a, b, then the raw d×d factor.
///
/// λ = softplus(a), ν = d − 1 + softplus(b), Ψ = LLᵀ with L lower triangular
/// and diagonal softplus(raw).
#[derive(Debug, Clone, PartialEq)]
pub struct PriorCoords {
    pub d: usize,
    pub raw: Vec<f64>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl PriorCoords {
    pub fn from_params(p: &NiwParams) -> Result<Self> {
        p.validate()?;
        let d = p.dim();
        let l = cholesky_jittered(&p.psi)
            .ok_or_else(|| Error::InvalidPrior("psi is not positive definite".into()))?
            .l();
        let mut raw = p.eta.as_slice().to_vec();
        raw.push(crate::autodiff::softplus_inv(p.lambda));
        raw.push(crate::autodiff::softplus_inv(p.nu - (d as f64 - 1.0)));
        for i in 0..d {
            for j in 0..d {
                raw.push(match i.cmp(&j) {
                    std::cmp::Ordering::Greater => l[(i, j)],
                    std::cmp::Ordering::Equal => crate::autodiff::softplus_inv(l[(i, i)]),
                    std::cmp::Ordering::Less => 0.0,
                });
            }
        }
        Ok(Self { d, raw })
    }

    pub fn to_params(&self) -> NiwParams {
        let d = self.d;
        let eta = DVector::from_column_slice(&self.raw[..d]);
        let lambda = softplus(self.raw[d]);
        let nu = d as f64 - 1.0 + softplus(self.raw[d + 1]);
        let base = d + 2;
        let l = DMatrix::from_fn(d, d, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => self.raw[base + i * d + j],
            std::cmp::Ordering::Equal => softplus(self.raw[base + i * d + i]),
            std::cmp::Ordering::Less => 0.0,
        });
        NiwParams {
            eta,
            lambda,
            psi: &l * l.transpose(),
            nu,
        }
    }
}

/// Records the constrained prior built from coordinates `p`.
pub(crate) struct PriorVars {
    pub eta: Var,
    pub lambda: Var,
    pub nu: Var,
    pub psi: Var,
}

pub(crate) fn prior_vars(g: &mut Graph, p: Var, d: usize) -> PriorVars {
    let eta = g.slice(p, 0, &[d]);
    let a = g.element(p, d);
    let lambda = g.softplus(a);
    let b = g.element(p, d + 1);
    let sb = g.softplus(b);
    let nu = g.add_const(sb, d as f64 - 1.0);
    let base = d + 2;
    let off: Vec<usize> = (0..d * d)
        .map(|k| if k / d > k % d { base + k } else { usize::MAX })
        .collect();
    let lower = g.gather(p, off, &[d, d]);
    let diag_raw = g.gather(p, (0..d).map(|i| base + i * d + i).collect(), &[d]);
    let diag = g.softplus(diag_raw);
    let place: Vec<usize> = (0..d * d)
        .map(|k| if k / d == k % d { k / d } else { usize::MAX })
        .collect();
    let diag_m = g.gather(diag, place, &[d, d]);
    let l = g.add(lower, diag_m);
    let psi = g.gram(l);
    PriorVars {
        eta,
        lambda,
        nu,
        psi,
    }
}

/// Negative summed query log-density of a task under the prior coordinates `p`.
pub(crate) fn task_nll_graph(g: &mut Graph, p: Var, d: usize, task: &FeatureTask) -> Result<Var> {
    let pv = prior_vars(g, p, d);
    let df = d as f64;
    let mut terms = Vec::new();
    for (s, q) in task.support.iter().zip(&task.query) {
        if q.is_empty() {
            continue;
        }
        let n = s.len() as f64;
        let (lam_k, nu_k, eta_k, psi_k) = if s.is_empty() {
            (pv.lambda, pv.nu, pv.eta, pv.psi)
        } else {
            let (xbar, scatter) = mean_and_scatter(s, d)?;
            let xb = g.constant(xbar.as_slice(), &[d]);
            let mut srow = Vec::with_capacity(d * d);
            for i in 0..d {
                for j in 0..d {
                    srow.push(scatter[(i, j)]);
                }
            }
            let sc = g.constant(&srow, &[d, d]);
            let lam_k = g.add_const(pv.lambda, n);
            let nu_k = g.add_const(pv.nu, n);
            let le = g.mul(pv.lambda, pv.eta);
            let nx = g.mul_const(xb, n);
            let num = g.add(le, nx);
            let eta_k = g.div(num, lam_k);
            let diff = g.sub(xb, pv.eta);
            let o = g.outer(diff, diff);
            let ln = g.mul_const(pv.lambda, n);
            let coef = g.div(ln, lam_k);
            let shrink = g.mul(o, coef);
            let ps = g.add(pv.psi, sc);
            let psi_k = g.add(ps, shrink);
            (lam_k, nu_k, eta_k, psi_k)
        };
        let dof = g.add_const(nu_k, 1.0 - df);
        let lp1 = g.add_const(lam_k, 1.0);
        let ld = g.mul(lam_k, dof);
        let c = g.div(lp1, ld);
        let scale = g.mul(psi_k, c);
        let logdet = g.logdet_spd(scale);
        let half_nd = {
            let t = g.add_const(dof, df);
            g.mul_const(t, 0.5)
        };
        let half_n = g.mul_const(dof, 0.5);
        let lg1 = g.lgamma(half_nd);
        let lg2 = g.lgamma(half_n);
        let npi = g.mul_const(dof, std::f64::consts::PI);
        let lnpi = g.ln(npi);
        let norm_c = {
            let a = g.sub(lg1, lg2);
            let b = g.mul_const(lnpi, 0.5 * df);
            let c2 = g.mul_const(logdet, 0.5);
            let t = g.sub(a, b);
            g.sub(t, c2)
        };
        for x in q {
            check_finite(x)?;
            let xv = g.constant(x, &[d]);
            let diff = g.sub(xv, eta_k);
            let quad = g.inv_quad(scale, diff);
            let r = g.div(quad, dof);
            let r1 = g.add_const(r, 1.0);
            let lr = g.ln(r1);
            let tail = g.mul(half_nd, lr);
            let lp = g.sub(norm_c, tail);
            terms.push(lp);
        }
    }
    if terms.is_empty() {
        return Err(Error::InsufficientData("task has no query points".into()));
    }
    let total = g.sum_all(&terms);
    Ok(g.neg(total))
}

/// Negative summed query log-density; the objective minimized by the prior fit.
pub fn task_nll(phi: &NiwParams, task: &FeatureTask) -> Result<f64> {
    let coords = PriorCoords::from_params(phi)?;
    let mut g = Graph::new();
    let p = g.constant(&coords.raw, &[coords.raw.len()]);
    let v = task_nll_graph(&mut g, p, coords.d, task)?;
    Ok(g.scalar(v))
}

/// Graph form over raw coordinates, for gradient checks.
pub fn task_nll_of_coords(g: &mut Graph, p: Var, d: usize, task: &FeatureTask) -> Result<Var> {
    task_nll_graph(g, p, d, task)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorFit {
    pub phi: NiwParams,
    /// Loss on each task before its update.
    pub curve: Vec<f64>,
}

/// Gradient descent on the episodic query negative log-likelihood.
pub fn meta_fit_prior<'a, I>(tasks: I, phi0: &NiwParams, cfg: &PriorFitConfig) -> Result<PriorFit>
where
    I: IntoIterator<Item = &'a FeatureTask>,
{
    let mut coords = PriorCoords::from_params(phi0)?;
    let d = coords.d;
    let mut curve = Vec::new();
    for (i, task) in tasks.into_iter().take(cfg.tasks).enumerate() {
        let step = differentiate(&[&coords.raw], |g, p| {
            Ok((task_nll_graph(g, p[0], d, task)?, ()))
        });
        let step = match step {
            Ok(s) => s,
            Err(Error::NumericalFailure(msg)) => {
                let last = serde_json::to_string(&coords.to_params()).unwrap_or_default();
                return Err(Error::TrainingFailure(format!(
                    "prior fit diverged at task {i}: {msg}; last good prior {last}"
                )));
            }
            Err(e) => return Err(e),
        };
        curve.push(step.loss);
        for (w, gv) in coords.raw.iter_mut().zip(&step.grads[0]) {
            *w -= cfg.lr * gv;
        }
    }
    let phi = coords.to_params();
    phi.validate()?;
    Ok(PriorFit { phi, curve })
}
