//! Dirichlet-prior-network sample filter: training losses, domain-aware
//! prior updates, OOD scoring and two-stage sample rejection.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::bayes::{prior_vars, task_nll_graph, FeatureTask, NiwParams, PriorCoords, PriorFit};
use crate::calibration::PredictionRecord;
use crate::encoder::{differentiate, load_network, save_network, Adam, LayerSpec, Mode, Network};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::ssl::argmax;
use crate::uncertainty::dirichlet_diff_entropy;

pub const ALPHA_MIN: f64 = 1e-3;
pub const ALPHA_MAX: f64 = 1e4;
pub const PMAX_CAP: f64 = 1.0 - 1e-6;
const VAR_FLOOR: f64 = 1e-6;

/// Network mapping a feature vector to K logits; α = exp(z) clipped to [1e-3, 1e4].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterHead {
    pub net: Network,
}

impl FilterHead {
    pub fn new(net: Network) -> Result<Self> {
        if net.output_shape().len() != 1 || net.output_dim() < 2 {
            return Err(Error::param("filter head must output at least two logits"));
        }
        if net
            .layers
            .iter()
            .any(|l| matches!(l, LayerSpec::BatchNorm { .. }))
        {
            return Err(Error::Unsupported(
                "batch norm inside the filter head".into(),
            ));
        }
        Ok(Self { net })
    }

    /// Two-layer perceptron over `input`-dimensional features.
    pub fn mlp(input: usize, hidden: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        let layers = vec![
            LayerSpec::Affine {
                inp: input,
                out: hidden,
            },
            LayerSpec::Relu,
            LayerSpec::Affine {
                inp: hidden,
                out: k,
            },
        ];
        Self::new(Network::new(layers, vec![input], rng)?)
    }

    pub fn classes(&self) -> usize {
        self.net.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_len()
    }

    fn check_rows(&self, rows: &[Vec<f64>]) -> Result<()> {
        let d = self.input_dim();
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::input(format!(
                "feature of length {} for a head of input {d}",
                r.len()
            )));
        }
        Ok(())
    }

    /// Clipped logits `[n, K]` recorded on `g`.
    pub fn logits_graph(&self, g: &mut Graph, p: Var, rows: &[Vec<f64>]) -> Result<Var> {
        self.check_rows(rows)?;
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let x = g.constant(&flat, &[rows.len(), self.input_dim()]);
        let z = self.net.forward(g, p, x, Mode::Eval).out;
        Ok(g.clamp(z, ALPHA_MIN.ln(), ALPHA_MAX.ln()))
    }

    pub fn alphas(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        self.check_rows(rows)?;
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Ok(self
            .net
            .infer(&flat)?
            .into_iter()
            .map(|z| {
                z.into_iter()
                    .map(|v| v.exp().clamp(ALPHA_MIN, ALPHA_MAX))
                    .collect()
            })
            .collect())
    }

    pub fn save(&self, path: &Path, seed: u64, step: u64) -> Result<()> {
        save_network(path, &self.net, "filter", seed, step)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (net, header) = load_network(path)?;
        if header.kind != "filter" {
            return Err(Error::input(format!(
                "checkpoint holds a {} network",
                header.kind
            )));
        }
        Self::new(net)
    }
}

/// α_k = alpha_in + 1 for the true class, 1 elsewhere.
pub fn target_alpha(class: usize, alpha_in: f64, k: usize) -> Result<Vec<f64>> {
    if class >= k {
        return Err(Error::InvalidClass(format!(
            "class {class} with {k} classes"
        )));
    }
    if !(alpha_in >= 0.0) {
        return Err(Error::param("alpha_in must be non-negative"));
    }
    let mut a = vec![1.0; k];
    a[class] += alpha_in;
    Ok(a)
}

/// Row sums of `[n, k]` as `[n, 1]`.
fn row_sums(g: &mut Graph, x: Var, k: usize) -> Var {
    let ones = g.constant(&vec![1.0; k], &[1, k]);
    let zero = g.constant(&[0.0], &[1]);
    g.affine(x, ones, zero)
}

/// Spreads a per-row `[n, 1]` value across `[n, k]`.
fn broadcast_rows(g: &mut Graph, v: Var, n: usize, k: usize) -> Var {
    let idx = (0..n * k).map(|i| i / k).collect();
    g.gather(v, idx, &[n, k])
}

/// Sum over rows of KL(Dir(α_i) ∥ Dir(t_i)).
fn dirichlet_kl_rows(g: &mut Graph, alpha: Var, targets: &[Vec<f64>]) -> Var {
    let n = targets.len();
    let k = targets[0].len();
    let a0 = row_sums(g, alpha, k);
    let lg_a0 = g.lgamma(a0);
    let lg_a = g.lgamma(alpha);
    let s_lg_a0 = g.sum(lg_a0);
    let s_lg_a = g.sum(lg_a);
    let const_part: f64 = targets
        .iter()
        .map(|t| {
            let t0: f64 = t.iter().sum();
            t.iter().map(|v| crate::special::ln_gamma(*v)).sum::<f64>()
                - crate::special::ln_gamma(t0)
        })
        .sum();
    let flat: Vec<f64> = targets.iter().flatten().copied().collect();
    let tv = g.constant(&flat, &[n, k]);
    let diff = g.sub(alpha, tv);
    let dg_a = g.digamma(alpha);
    let dg_a0 = g.digamma(a0);
    let dg_b = broadcast_rows(g, dg_a0, n, k);
    let dd = g.sub(dg_a, dg_b);
    let cross = g.mul(diff, dd);
    let cross = g.sum(cross);
    let head = g.sub(s_lg_a0, s_lg_a);
    let kl = g.add(head, cross);
    g.add_const(kl, const_part)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha_in: f64,
    pub omega_out: f64,
    pub omega_cal: f64,
    pub lambda_t: f64,
    pub lambda_out: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_in: 10.0,
            omega_out: 1.0,
            omega_cal: 0.5,
            lambda_t: 0.05,
            lambda_out: 0.05,
        }
    }
}

/// Mean reverse-KL of in-distribution samples to their targets plus
/// ω_out · mean KL of OOD samples to the flat Dirichlet.
pub fn rkl_total_graph(
    g: &mut Graph,
    head: &FilterHead,
    p: Var,
    inb: &[(Vec<f64>, usize)],
    outb: &[Vec<f64>],
    alpha_in: f64,
    omega_out: f64,
) -> Result<Var> {
    if inb.is_empty() {
        return Err(Error::input("empty in-distribution batch"));
    }
    let k = head.classes();
    let rows: Vec<Vec<f64>> = inb.iter().map(|(x, _)| x.clone()).collect();
    let targets = inb
        .iter()
        .map(|(_, c)| target_alpha(*c, alpha_in, k))
        .collect::<Result<Vec<_>>>()?;
    let z = head.logits_graph(g, p, &rows)?;
    let alpha = g.exp(z);
    let kl_in = dirichlet_kl_rows(g, alpha, &targets);
    let mut loss = g.mul_const(kl_in, 1.0 / inb.len() as f64);
    if !outb.is_empty() && omega_out != 0.0 {
        let zo = head.logits_graph(g, p, outb)?;
        let ao = g.exp(zo);
        let kl_out = dirichlet_kl_rows(g, ao, &vec![vec![1.0; k]; outb.len()]);
        let term = g.mul_const(kl_out, omega_out / outb.len() as f64);
        loss = g.add(loss, term);
    }
    Ok(loss)
}

fn eval_with_params<F>(head: &FilterHead, f: F) -> Result<f64>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let p = g.constant(&head.net.params, &[head.net.params.len()]);
    let v = f(&mut g, p)?;
    Ok(g.scalar(v))
}

pub fn rkl_loss(head: &FilterHead, x: &[f64], class: usize, alpha_in: f64) -> Result<f64> {
    let inb = [(x.to_vec(), class)];
    eval_with_params(head, |g, p| {
        rkl_total_graph(g, head, p, &inb, &[], alpha_in, 0.0)
    })
}

pub fn rkl_total(
    head: &FilterHead,
    inb: &[(Vec<f64>, usize)],
    outb: &[Vec<f64>],
    alpha_in: f64,
    omega_out: f64,
) -> Result<f64> {
    eval_with_params(head, |g, p| {
        rkl_total_graph(g, head, p, inb, outb, alpha_in, omega_out)
    })
}

/// Per-sample overconfidence penalty −ln(1 − p_max), p_max capped below 1.
pub fn abce_penalty(p_max: f64) -> f64 {
    -(1.0 - p_max.min(PMAX_CAP)).ln()
}

/// Log-probabilities ln(α_k / α₀) as `[n, k]`.
fn log_probs(g: &mut Graph, z: Var, n: usize, k: usize) -> Var {
    let alpha = g.exp(z);
    let a0 = row_sums(g, alpha, k);
    let la0 = g.ln(a0);
    let lb = broadcast_rows(g, la0, n, k);
    g.sub(z, lb)
}

/// Indices whose predictive entropy is strictly above the batch median.
fn uncertain_rows(logp: &[f64], n: usize, k: usize) -> Vec<usize> {
    let ent: Vec<f64> = (0..n)
        .map(|i| {
            -logp[i * k..(i + 1) * k]
                .iter()
                .map(|l| l.exp() * l)
                .sum::<f64>()
        })
        .collect();
    let mut sorted = ent.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    (0..n).filter(|&i| ent[i] > median).collect()
}

/// Classification term with sigmoid regularizer, uniform-target OOD term and
/// the overconfidence penalty on uncertain in-distribution samples.
pub fn combined_graph(
    g: &mut Graph,
    head: &FilterHead,
    p: Var,
    inb: &[(Vec<f64>, usize)],
    outb: &[Vec<f64>],
    w: &LossWeights,
) -> Result<Var> {
    if inb.is_empty() {
        return Err(Error::input("empty in-distribution batch"));
    }
    let k = head.classes();
    let n = inb.len();
    if let Some((_, c)) = inb.iter().find(|(_, c)| *c >= k) {
        return Err(Error::InvalidClass(format!("class {c} with {k} classes")));
    }
    let rows: Vec<Vec<f64>> = inb.iter().map(|(x, _)| x.clone()).collect();
    let z = head.logits_graph(g, p, &rows)?;
    let logp = log_probs(g, z, n, k);
    let picked = g.gather(
        logp,
        inb.iter()
            .enumerate()
            .map(|(i, (_, c))| i * k + c)
            .collect(),
        &[n],
    );
    let nll = g.mean(picked);
    let nll = g.neg(nll);
    let sig = g.sigmoid(z);
    let sig = g.sum(sig);
    let reg = g.mul_const(sig, w.lambda_t / (k * n) as f64);
    let mut loss = g.sub(nll, reg);

    if !outb.is_empty() && w.omega_out != 0.0 {
        let m = outb.len();
        let zo = head.logits_graph(g, p, outb)?;
        let lpo = log_probs(g, zo, m, k);
        let ce = g.sum(lpo);
        let ce = g.mul_const(ce, -1.0 / (k * m) as f64);
        let so = g.sigmoid(zo);
        let so = g.sum(so);
        let ro = g.mul_const(so, w.lambda_out / (k * m) as f64);
        let l_out = g.sub(ce, ro);
        let term = g.mul_const(l_out, w.omega_out);
        loss = g.add(loss, term);
    }

    if w.omega_cal != 0.0 {
        let lv = g.value(logp).to_vec();
        let flagged = uncertain_rows(&lv, n, k);
        if !flagged.is_empty() {
            let idx: Vec<usize> = flagged
                .iter()
                .map(|&i| i * k + argmax(&lv[i * k..(i + 1) * k]))
                .collect();
            let lmax = g.gather(logp, idx, &[flagged.len()]);
            let pmax = g.exp(lmax);
            let pmax = g.clamp(pmax, 0.0, PMAX_CAP);
            let one_minus = g.neg(pmax);
            let one_minus = g.add_const(one_minus, 1.0);
            let pen = g.ln(one_minus);
            let pen = g.mean(pen);
            let term = g.mul_const(pen, -w.omega_cal);
            loss = g.add(loss, term);
        }
    }
    Ok(loss)
}

pub fn combined_inner_loss(
    head: &FilterHead,
    inb: &[(Vec<f64>, usize)],
    outb: &[Vec<f64>],
    w: &LossWeights,
) -> Result<f64> {
    eval_with_params(head, |g, p| combined_graph(g, head, p, inb, outb, w))
}

/// Full training objective: reverse-KL terms plus the combined loss.
pub fn filter_objective_graph(
    g: &mut Graph,
    head: &FilterHead,
    p: Var,
    inb: &[(Vec<f64>, usize)],
    outb: &[Vec<f64>],
    w: &LossWeights,
) -> Result<Var> {
    let rkl = rkl_total_graph(g, head, p, inb, outb, w.alpha_in, w.omega_out)?;
    let comb = combined_graph(g, head, p, inb, outb, w)?;
    Ok(g.add(rkl, comb))
}

/// One gradient-descent step θ − η∇L on the full objective.
pub fn inner_step(
    head: &FilterHead,
    inb: &[(Vec<f64>, usize)],
    outb: &[Vec<f64>],
    w: &LossWeights,
    lr: f64,
) -> Result<(FilterHead, f64)> {
    let step = differentiate(&[&head.net.params], |g, p| {
        Ok((filter_objective_graph(g, head, p[0], inb, outb, w)?, ()))
    })?;
    let mut next = head.clone();
    for (v, d) in next.net.params.iter_mut().zip(&step.grads[0]) {
        *v -= lr * d;
    }
    Ok((next, step.loss))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterTrainConfig {
    pub weights: LossWeights,
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for FilterTrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            hidden: 32,
            epochs: 60,
            batch: 32,
            lr: 5e-3,
        }
    }
}

/// Mini-batch Adam over shuffled in-distribution and OOD features. Returns the
/// mean objective of each epoch.
pub fn train_filter(
    head: &mut FilterHead,
    ind: &[(Vec<f64>, usize)],
    ood: &[Vec<f64>],
    cfg: &FilterTrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if ind.len() < 2 {
        return Err(Error::InsufficientData(
            "filter training needs at least two samples".into(),
        ));
    }
    let mut rng = rng::stream(seed, "filter-train");
    let mut adam = Adam::new(cfg.lr, head.net.params.len());
    let batch = cfg.batch.max(2);
    let n_batches = ind.len().div_ceil(batch);
    let out_batch = if ood.is_empty() {
        0
    } else {
        ood.len().div_ceil(n_batches)
    };
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..ind.len()).collect();
        order.shuffle(&mut rng);
        let mut oorder: Vec<usize> = (0..ood.len()).collect();
        oorder.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(batch).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let inb: Vec<(Vec<f64>, usize)> = chunk.iter().map(|&i| ind[i].clone()).collect();
            let outb: Vec<Vec<f64>> = oorder
                .iter()
                .skip(b * out_batch)
                .take(out_batch)
                .map(|&i| ood[i].clone())
                .collect();
            let step = differentiate(&[&head.net.params], |g, p| {
                Ok((
                    filter_objective_graph(g, head, p[0], &inb, &outb, &cfg.weights)?,
                    (),
                ))
            })
            .map_err(|e| match e {
                Error::NumericalFailure(m) => {
                    Error::TrainingFailure(format!("filter epoch {epoch}: {m}"))
                }
                other => other,
            })?;
            adam.step(&mut head.net.params, &step.grads[0]);
            total += step.loss;
        }
        curve.push(total / n_batches as f64);
    }
    Ok(curve)
}

/// Concatenated per-dimension mean and standard deviation of support features.
pub fn task_embedding(features: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = features
        .first()
        .ok_or_else(|| Error::input("task has no support features"))?;
    let d = first.len();
    let n = features.len() as f64;
    let mut mean = vec![0.0; d];
    for f in features {
        mean.iter_mut().zip(f).for_each(|(m, v)| *m += v / n);
    }
    let mut std = vec![0.0; d];
    for f in features {
        std.iter_mut()
            .zip(f.iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m).powi(2) / n);
    }
    std.iter_mut().for_each(|s| *s = s.sqrt());
    mean.extend(std);
    Ok(mean)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// δ_T = softmax_T(−‖C_T‖ / T) with C the cosine-similarity matrix and ‖C_T‖
/// the norm of row T.
pub fn task_weights(embeddings: &[Vec<f64>], temperature: f64) -> Result<Vec<f64>> {
    if embeddings.is_empty() {
        return Err(Error::input("no tasks"));
    }
    if !(temperature > 0.0) {
        return Err(Error::param("temperature must be positive"));
    }
    if embeddings.iter().any(|h| h.iter().all(|v| *v == 0.0)) {
        return Err(Error::DegenerateInput("zero-norm task embedding".into()));
    }
    let norms: Vec<f64> = embeddings
        .iter()
        .map(|hi| {
            embeddings
                .iter()
                .map(|hj| cosine(hi, hj).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(softmax_neg_scaled(&norms, temperature))
}

/// softmax(−x / T).
pub fn softmax_neg_scaled(x: &[f64], t: f64) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = x.iter().map(|v| (-(v - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// KL between diagonal Gaussians N(m1, v1) ∥ N(m2, v2).
pub fn diag_gauss_kl(m1: &[f64], v1: &[f64], m2: &[f64], v2: &[f64]) -> f64 {
    m1.iter()
        .zip(v1)
        .zip(m2.iter().zip(v2))
        .map(|((a, va), (b, vb))| 0.5 * ((vb / va).ln() + (va + (a - b).powi(2)) / vb - 1.0))
        .sum()
}

/// KL(N(μ_T, σ_T²) ∥ N(η, diag Ψ / (ν + d + 1))) on the graph: the task's
/// feature distribution against the one implied by the prior's mode.
fn alignment_kl_graph(g: &mut Graph, p: Var, d: usize, emb: &[f64]) -> Var {
    let pv = prior_vars(g, p, d);
    let mu_t = g.constant(&emb[..d], &[d]);
    let var_t: Vec<f64> = emb[d..].iter().map(|s| (s * s).max(VAR_FLOOR)).collect();
    let vt = g.constant(&var_t, &[d]);
    let diag = g.gather(pv.psi, (0..d).map(|i| i * d + i).collect(), &[d]);
    let denom = g.add_const(pv.nu, d as f64 + 1.0);
    let vg = g.div(diag, denom);
    let ratio = g.div(vg, vt);
    let log_ratio = g.ln(ratio);
    let diff = g.sub(mu_t, pv.eta);
    let sq = g.square(diff);
    let num = g.add(vt, sq);
    let quad = g.div(num, vg);
    let t = g.add(log_ratio, quad);
    let t = g.add_const(t, -1.0);
    let s = g.sum(t);
    g.mul_const(s, 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OuterConfig {
    pub lr: f64,
    /// Weight λ of the alignment KL.
    pub lambda_align: f64,
    pub temperature: f64,
    /// Tasks per outer step.
    pub meta_batch: usize,
}

impl Default for OuterConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            lambda_align: 0.1,
            temperature: 1.0,
            meta_batch: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterThresholds {
    pub tau_ood: f64,
    pub tau_c: f64,
}

impl FilterThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau_c) {
            return Err(Error::param("tau_c must lie in [0, 1]"));
        }
        if self.tau_ood.is_nan() {
            return Err(Error::param("tau_ood is NaN"));
        }
        Ok(())
    }
}

/// Drops support and query features the filter rejects. A class whose support
/// would become empty keeps its original support.
pub fn prefilter_task(
    task: &FeatureTask,
    head: &FilterHead,
    th: &FilterThresholds,
) -> Result<FeatureTask> {
    let keep = |rows: &Vec<Vec<f64>>, fallback: bool| -> Result<Vec<Vec<f64>>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let out = filter_dataset(head, rows, th)?;
        let kept: Vec<Vec<f64>> = out.kept.iter().map(|&i| rows[i].clone()).collect();
        Ok(if kept.is_empty() && fallback {
            rows.clone()
        } else {
            kept
        })
    };
    Ok(FeatureTask {
        support: task
            .support
            .iter()
            .map(|s| keep(s, true))
            .collect::<Result<_>>()?,
        query: task
            .query
            .iter()
            .map(|q| keep(q, false))
            .collect::<Result<_>>()?,
    })
}

/// One domain-aware outer update of the prior coordinates over a group of tasks.
/// Returns the weighted objective before the update and the task weights.
pub fn outer_step(
    coords: &mut PriorCoords,
    tasks: &[FeatureTask],
    filter: Option<(&FilterHead, &FilterThresholds)>,
    cfg: &OuterConfig,
) -> Result<(f64, Vec<f64>)> {
    let tasks: Vec<FeatureTask> = match filter {
        Some((head, th)) => tasks
            .iter()
            .map(|t| prefilter_task(t, head, th))
            .collect::<Result<_>>()?,
        None => tasks.to_vec(),
    };
    let tasks: Vec<FeatureTask> = tasks
        .into_iter()
        .filter(|t| t.query.iter().any(|q| !q.is_empty()))
        .collect();
    if tasks.is_empty() {
        return Err(Error::InsufficientData(
            "no task retains query points".into(),
        ));
    }
    let embeddings = tasks
        .iter()
        .map(|t| task_embedding(&t.support.iter().flatten().cloned().collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let delta = task_weights(&embeddings, cfg.temperature)?;
    let d = coords.d;
    let step = differentiate(&[&coords.raw], |g, p| {
        let mut terms = Vec::with_capacity(tasks.len());
        for ((task, emb), w) in tasks.iter().zip(&embeddings).zip(&delta) {
            let mut l = task_nll_graph(g, p[0], d, task)?;
            if cfg.lambda_align != 0.0 {
                let kl = alignment_kl_graph(g, p[0], d, emb);
                let kl = g.mul_const(kl, cfg.lambda_align);
                l = g.add(l, kl);
            }
            terms.push(g.mul_const(l, *w));
        }
        Ok((g.sum_all(&terms), ()))
    })?;
    for (v, gv) in coords.raw.iter_mut().zip(&step.grads[0]) {
        *v -= cfg.lr * gv;
    }
    Ok((step.loss, delta))
}

/// Domain-aware prior fit: outer steps over consecutive groups of tasks.
pub fn domain_aware_fit(
    tasks: &[FeatureTask],
    phi0: &NiwParams,
    filter: Option<(&FilterHead, &FilterThresholds)>,
    cfg: &OuterConfig,
) -> Result<PriorFit> {
    let mut coords = PriorCoords::from_params(phi0)?;
    let mut curve = Vec::new();
    for (i, group) in tasks.chunks(cfg.meta_batch.max(1)).enumerate() {
        match outer_step(&mut coords, group, filter, cfg) {
            Ok((loss, _)) => curve.push(loss),
            Err(Error::NumericalFailure(msg)) => {
                let last = serde_json::to_string(&coords.to_params()).unwrap_or_default();
                return Err(Error::TrainingFailure(format!(
                    "outer step {i} diverged: {msg}; last good prior {last}"
                )));
            }
            Err(Error::InsufficientData(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    let phi = coords.to_params();
    phi.validate()?;
    Ok(PriorFit { phi, curve })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodScore {
    pub diff_entropy: f64,
    pub p_max: f64,
}

pub fn ood_score_alpha(alpha: &[f64]) -> Result<OodScore> {
    let a0: f64 = alpha.iter().sum();
    Ok(OodScore {
        diff_entropy: dirichlet_diff_entropy(alpha)?,
        p_max: alpha.iter().copied().fold(0.0, f64::max) / a0,
    })
}

pub fn ood_score(head: &FilterHead, x: &[f64]) -> Result<OodScore> {
    ood_score_alpha(&head.alphas(&[x.to_vec()])?[0])
}

pub fn ood_scores(head: &FilterHead, rows: &[Vec<f64>]) -> Result<Vec<OodScore>> {
    head.alphas(rows)?
        .iter()
        .map(|a| ood_score_alpha(a))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Keep,
    RejectOod,
    RejectLowConf,
}

impl Decision {
    pub fn as_str(&self) -> &'static str {
        match self {
            Decision::Keep => "keep",
            Decision::RejectOod => "reject_ood",
            Decision::RejectLowConf => "reject_lowconf",
        }
    }
}

/// Keep iff p_max ≥ τ_c.
pub fn reject(p_max: f64, tau_c: f64) -> bool {
    p_max < tau_c
}

pub fn decide(score: &OodScore, th: &FilterThresholds) -> Decision {
    if score.diff_entropy > th.tau_ood {
        Decision::RejectOod
    } else if reject(score.p_max, th.tau_c) {
        Decision::RejectLowConf
    } else {
        Decision::Keep
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: Vec<usize>,
    pub rejected_ood: Vec<usize>,
    pub rejected_lowconf: Vec<usize>,
    pub scores: Vec<OodScore>,
}

impl FilterOutcome {
    pub fn decision(&self, i: usize) -> Decision {
        if self.rejected_ood.contains(&i) {
            Decision::RejectOod
        } else if self.rejected_lowconf.contains(&i) {
            Decision::RejectLowConf
        } else {
            Decision::Keep
        }
    }
}

/// Two-stage filtering: distributional uncertainty first, then confidence.
pub fn filter_dataset(
    head: &FilterHead,
    rows: &[Vec<f64>],
    th: &FilterThresholds,
) -> Result<FilterOutcome> {
    th.validate()?;
    let scores = ood_scores(head, rows)?;
    let mut out = FilterOutcome {
        kept: Vec::new(),
        rejected_ood: Vec::new(),
        rejected_lowconf: Vec::new(),
        scores: Vec::new(),
    };
    for (i, s) in scores.iter().enumerate() {
        match decide(s, th) {
            Decision::Keep => out.kept.push(i),
            Decision::RejectOod => out.rejected_ood.push(i),
            Decision::RejectLowConf => out.rejected_lowconf.push(i),
        }
    }
    out.scores = scores;
    Ok(out)
}

/// The `q` quantile (linear interpolation) of in-distribution differential entropies.
pub fn entropy_threshold(head: &FilterHead, rows: &[Vec<f64>], q: f64) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::InsufficientData(
            "no rows to set the OOD threshold".into(),
        ));
    }
    let mut h: Vec<f64> = ood_scores(head, rows)?
        .iter()
        .map(|s| s.diff_entropy)
        .collect();
    h.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&h, q))
}

pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejectionResult {
    pub tau_c: f64,
    /// None when nothing is kept.
    pub accuracy: Option<f64>,
    pub kept_fraction: f64,
}

/// Accuracy of `predicted` on the samples whose confidence passes τ_c.
pub fn evaluate_rejection(
    predicted: &[usize],
    truth: &[usize],
    p_max: &[f64],
    tau_c: f64,
) -> Result<RejectionResult> {
    if predicted.len() != truth.len() || p_max.len() != truth.len() {
        return Err(Error::input(
            "prediction, truth and confidence lengths differ",
        ));
    }
    let kept: Vec<usize> = (0..truth.len())
        .filter(|&i| !reject(p_max[i], tau_c))
        .collect();
    let n = truth.len().max(1) as f64;
    let accuracy = if kept.is_empty() {
        None
    } else {
        Some(kept.iter().filter(|&&i| predicted[i] == truth[i]).count() as f64 / kept.len() as f64)
    };
    Ok(RejectionResult {
        tau_c,
        accuracy,
        kept_fraction: kept.len() as f64 / n,
    })
}

/// Calibration records of the head's own class predictions (mean of the Dirichlet).
pub fn head_records(
    head: &FilterHead,
    rows: &[(Vec<f64>, usize)],
) -> Result<Vec<PredictionRecord>> {
    let feats: Vec<Vec<f64>> = rows.iter().map(|(x, _)| x.clone()).collect();
    head.alphas(&feats)?
        .iter()
        .zip(rows)
        .map(|(a, (_, c))| {
            let a0: f64 = a.iter().sum();
            let p: Vec<f64> = a.iter().map(|v| v / a0).collect();
            PredictionRecord::from_probs(&p, *c)
        })
        .collect()
}

/// CSV with header `sample_id,diff_entropy,p_max,decision`.
pub fn export_decisions<W: Write>(ids: &[String], out: &FilterOutcome, w: W) -> Result<()> {
    if ids.len() != out.scores.len() {
        return Err(Error::input("one id per scored sample is required"));
    }
    let mut wr = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::input(format!("csv: {e}"));
    wr.write_record(["sample_id", "diff_entropy", "p_max", "decision"])
        .map_err(err)?;
    for (i, (id, s)) in ids.iter().zip(&out.scores).enumerate() {
        wr.write_record([
            id.clone(),
            s.diff_entropy.to_string(),
            s.p_max.to_string(),
            out.decision(i).as_str().to_string(),
        ])
        .map_err(err)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::grad_check;
    use crate::uncertainty::dirichlet_kl;
    use rand::Rng as _;
    use rand_distr::{Distribution, Normal};

    type Toy = (Vec<(Vec<f64>, usize)>, Vec<Vec<f64>>);

    fn toy(seed: u64, n: usize) -> Toy {
        let mut r = rng::from_seed(seed);
        let nd = Normal::new(0.0, 0.5).unwrap();
        let centers = [[3.0, 0.0], [-3.0, 0.0]];
        let inb = (0..n)
            .map(|i| {
                let c = i % 2;
                (
                    vec![
                        centers[c][0] + nd.sample(&mut r),
                        centers[c][1] + nd.sample(&mut r),
                    ],
                    c,
                )
            })
            .collect();
        let outb = (0..n / 2)
            .map(|_| vec![nd.sample(&mut r), 6.0 + nd.sample(&mut r)])
            .collect();
        (inb, outb)
    }

    fn head(seed: u64) -> FilterHead {
        FilterHead::mlp(2, 8, 2, &mut rng::from_seed(seed)).unwrap()
    }

    #[test]
    fn target_alpha_cases() {
        assert_eq!(target_alpha(0, 10.0, 3).unwrap(), vec![11.0, 1.0, 1.0]);
        assert_eq!(target_alpha(2, 0.0, 3).unwrap(), vec![1.0; 3]);
        assert_eq!(target_alpha(1, 4.5, 4).unwrap().iter().sum::<f64>(), 8.5);
        assert!(matches!(
            target_alpha(3, 1.0, 3),
            Err(Error::InvalidClass(_))
        ));
    }

    #[test]
    fn rkl_matches_closed_form() {
        let h = head(1);
        let x = vec![0.4, -1.2];
        let a = h.alphas(std::slice::from_ref(&x)).unwrap().remove(0);
        let want = dirichlet_kl(&a, &target_alpha(1, 10.0, 2).unwrap()).unwrap();
        assert!((rkl_loss(&h, &x, 1, 10.0).unwrap() - want).abs() < 1e-10);
        // a head whose α equals the target exactly
        let mut zero = FilterHead::new(
            Network::zeros(vec![LayerSpec::Affine { inp: 2, out: 2 }], vec![2]).unwrap(),
        )
        .unwrap();
        zero.net.params[4] = 11f64.ln();
        assert!(rkl_loss(&zero, &[0.3, 0.1], 0, 10.0).unwrap().abs() < 1e-10);
        // flat α for the OOD term
        zero.net.params[4] = 0.0;
        assert!(
            rkl_total(&zero, &[(vec![0.0, 0.0], 0)], &[vec![1.0, 1.0]], 0.0, 3.0)
                .unwrap()
                .abs()
                < 1e-10
        );
    }

    #[test]
    fn rkl_total_composes_per_sample_losses() {
        let h = head(2);
        let (inb, outb) = toy(3, 2);
        let a = rkl_loss(&h, &inb[0].0, inb[0].1, 10.0).unwrap();
        let b = rkl_loss(&h, &inb[1].0, inb[1].1, 10.0).unwrap();
        let ao = h.alphas(&outb).unwrap().remove(0);
        let o = dirichlet_kl(&ao, &[1.0, 1.0]).unwrap();
        let total = rkl_total(&h, &inb, &outb, 10.0, 0.7).unwrap();
        assert!((total - (0.5 * (a + b) + 0.7 * o)).abs() < 1e-10);
        assert!((rkl_total(&h, &inb, &outb, 10.0, 0.0).unwrap() - 0.5 * (a + b)).abs() < 1e-10);
        assert!(rkl_total(&h, &[], &outb, 10.0, 1.0).is_err());
    }

    #[test]
    fn combined_reduces_to_classification() {
        let h = head(4);
        let (inb, outb) = toy(5, 6);
        let w = LossWeights {
            omega_out: 0.0,
            omega_cal: 0.0,
            lambda_t: 0.0,
            ..Default::default()
        };
        let rows: Vec<Vec<f64>> = inb.iter().map(|(x, _)| x.clone()).collect();
        let a = h.alphas(&rows).unwrap();
        let nll: f64 = a
            .iter()
            .zip(&inb)
            .map(|(a, (_, c))| -(a[*c] / a.iter().sum::<f64>()).ln())
            .sum::<f64>()
            / inb.len() as f64;
        assert!((combined_inner_loss(&h, &inb, &outb, &w).unwrap() - nll).abs() < 1e-10);
    }

    #[test]
    fn penalty_cases() {
        assert!((abce_penalty(0.5) - 2f64.ln()).abs() < 1e-15);
        assert!(abce_penalty(0.99) > abce_penalty(0.9));
        assert!(abce_penalty(1.0).is_finite());
    }

    #[test]
    fn filter_losses_pass_gradient_checks() {
        let h = head(6);
        let (inb, outb) = toy(7, 6);
        let w = LossWeights::default();
        let e1 = grad_check(
            &h.net.params,
            |g, p| rkl_total_graph(g, &h, p, &inb, &outb, 10.0, 1.0).unwrap(),
            1e-6,
            None,
        );
        let e2 = grad_check(
            &h.net.params,
            |g, p| combined_graph(g, &h, p, &inb, &outb, &w).unwrap(),
            1e-6,
            None,
        );
        assert!(e1 < 1e-3, "rkl {e1}");
        assert!(e2 < 1e-3, "combined {e2}");
    }

    #[test]
    fn inner_step_cases() {
        let h = head(8);
        let (inb, outb) = toy(9, 8);
        let w = LossWeights::default();
        let (same, _) = inner_step(&h, &inb, &outb, &w, 0.0).unwrap();
        assert_eq!(same, h);
        let (next, before) = inner_step(&h, &inb, &outb, &w, 1e-3).unwrap();
        let after = eval_with_params(&next, |g, p| {
            filter_objective_graph(g, &next, p, &inb, &outb, &w)
        })
        .unwrap();
        assert!(after < before);
        let (a1, _) = inner_step(&next, &inb, &outb, &w, 1e-3).unwrap();
        let (b0, _) = inner_step(&h, &inb, &outb, &w, 1e-3).unwrap();
        let (b1, _) = inner_step(&b0, &inb, &outb, &w, 1e-3).unwrap();
        assert_eq!(a1, b1);
    }

    #[test]
    fn training_separates_in_and_out() {
        let mut h = head(10);
        let (inb, outb) = toy(11, 80);
        let cfg = FilterTrainConfig {
            epochs: 80,
            ..Default::default()
        };
        let curve = train_filter(&mut h, &inb, &outb, &cfg, 1).unwrap();
        assert!(curve.last().unwrap() < &curve[0]);
        let (test_in, test_out) = toy(12, 40);
        let rows: Vec<Vec<f64>> = test_in.iter().map(|(x, _)| x.clone()).collect();
        let si = ood_scores(&h, &rows).unwrap();
        let so = ood_scores(&h, &test_out).unwrap();
        let mean = |v: &[OodScore]| v.iter().map(|s| s.diff_entropy).sum::<f64>() / v.len() as f64;
        assert!(mean(&so) > mean(&si));
        let acc = head_records(&h, &test_in)
            .unwrap()
            .iter()
            .filter(|r| r.correct())
            .count();
        assert!(acc as f64 / test_in.len() as f64 > 0.95);
    }

    #[test]
    fn task_weight_cases() {
        let w = task_weights(&vec![vec![1.0, 2.0, 3.0]; 4], 1.0).unwrap();
        assert!(w.iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert!((cosine(&[3.0, -1.0], &[3.0, -1.0]) - 1.0).abs() < 1e-15);
        let d = softmax_neg_scaled(&[1.0, 2.0], 1.0);
        assert!((d[0] - 0.7311).abs() < 1e-4 && (d[1] - 0.2689).abs() < 1e-4);
        assert!(matches!(
            task_weights(&[vec![0.0, 0.0]], 1.0),
            Err(Error::DegenerateInput(_))
        ));
        let w = task_weights(&[vec![1.0, 0.0], vec![1.0, 0.1], vec![0.0, 1.0]], 0.5).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // the odd task out has the smallest similarity row and the largest weight
        assert!(w[2] > w[0] && w[2] > w[1]);
    }

    fn feature_task(seed: u64, d: usize) -> FeatureTask {
        let mut r = rng::from_seed(seed);
        let nd = Normal::new(0.0, 1.0).unwrap();
        let mut pts = |c: f64, n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| {
                    (0..d)
                        .map(|j| if j == 0 { c } else { 0.0 } + nd.sample(&mut r))
                        .collect()
                })
                .collect()
        };
        FeatureTask {
            support: vec![pts(2.0, 2), pts(-2.0, 3)],
            query: vec![pts(2.0, 3), pts(-2.0, 3)],
        }
    }

    #[test]
    fn outer_step_reductions() {
        let phi = NiwParams::standard(2);
        let task = feature_task(1, 2);
        let cfg = OuterConfig {
            lambda_align: 0.0,
            ..Default::default()
        };
        let mut a = PriorCoords::from_params(&phi).unwrap();
        let (loss, delta) = outer_step(&mut a, std::slice::from_ref(&task), None, &cfg).unwrap();
        assert_eq!(delta, vec![1.0]);
        let plain = crate::bayes::meta_fit_prior(
            [&task],
            &phi,
            &crate::bayes::PriorFitConfig {
                lr: cfg.lr,
                tasks: 1,
            },
        )
        .unwrap();
        assert!((loss - plain.curve[0]).abs() < 1e-10);
        let b = PriorCoords::from_params(&plain.phi).unwrap();
        let diff = a
            .raw
            .iter()
            .zip(&b.raw)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-8, "{diff}");
    }

    #[test]
    fn alignment_kl_cases() {
        assert_eq!(
            diag_gauss_kl(&[1.0, 2.0], &[0.5, 2.0], &[1.0, 2.0], &[0.5, 2.0]),
            0.0
        );
        // graph form against the scalar formula
        let phi = NiwParams::standard(2);
        let coords = PriorCoords::from_params(&phi).unwrap();
        let emb = vec![0.5, -0.3, 0.8, 1.1];
        let mut g = Graph::new();
        let p = g.constant(&coords.raw, &[coords.raw.len()]);
        let v = alignment_kl_graph(&mut g, p, 2, &emb);
        let vg = 1.0 / (phi.nu + 3.0);
        let want = diag_gauss_kl(&[0.5, -0.3], &[0.64, 1.21], &[0.0, 0.0], &[vg, vg]);
        assert!((g.scalar(v) - want).abs() < 1e-12);
        // identical distributions give zero
        let same = vec![0.0, 0.0, vg.sqrt(), vg.sqrt()];
        let mut g = Graph::new();
        let p = g.constant(&coords.raw, &[coords.raw.len()]);
        let v = alignment_kl_graph(&mut g, p, 2, &same);
        assert!(g.scalar(v).abs() < 1e-12);
        let e = grad_check(
            &coords.raw,
            |g, p| alignment_kl_graph(g, p, 2, &emb),
            1e-6,
            None,
        );
        assert!(e < 1e-3);
    }

    #[test]
    fn ood_score_cases() {
        let flat = ood_score_alpha(&[1.0; 3]).unwrap();
        let sharp = ood_score_alpha(&[1000.0, 1.0, 1.0]).unwrap();
        assert!((flat.p_max - 1.0 / 3.0).abs() < 1e-15);
        assert!(sharp.diff_entropy < flat.diff_entropy);
        assert!((sharp.p_max - 1000.0 / 1002.0).abs() < 1e-15);
        let scaled = ood_score_alpha(&[4.0, 2.0, 6.0]).unwrap();
        let scaled2 = ood_score_alpha(&[8.0, 4.0, 12.0]).unwrap();
        assert!(scaled2.diff_entropy < scaled.diff_entropy);
    }

    #[test]
    fn reject_cases() {
        assert!(reject(0.85, 0.9));
        assert!(!reject(0.01, 0.0));
        assert!(!reject(0.9, 0.9));
    }

    #[test]
    fn filter_partition_cases() {
        let h = head(13);
        let mut r = rng::from_seed(14);
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|_| vec![r.random_range(-4.0..4.0), r.random_range(-4.0..4.0)])
            .collect();
        let all = filter_dataset(
            &h,
            &rows,
            &FilterThresholds {
                tau_ood: f64::INFINITY,
                tau_c: 0.0,
            },
        )
        .unwrap();
        assert_eq!(all.kept.len(), 30);
        let none = filter_dataset(
            &h,
            &rows,
            &FilterThresholds {
                tau_ood: f64::INFINITY,
                tau_c: 1.0,
            },
        )
        .unwrap();
        assert!(none.kept.is_empty());
        let th = FilterThresholds {
            tau_ood: entropy_threshold(&h, &rows, 0.5).unwrap(),
            tau_c: 0.6,
        };
        let a = filter_dataset(&h, &rows, &th).unwrap();
        assert_eq!(
            a.kept.len() + a.rejected_ood.len() + a.rejected_lowconf.len(),
            30
        );
        let mut seen: Vec<usize> = a
            .kept
            .iter()
            .chain(&a.rejected_ood)
            .chain(&a.rejected_lowconf)
            .copied()
            .collect();
        seen.sort();
        assert_eq!(seen, (0..30).collect::<Vec<_>>());
        assert_eq!(filter_dataset(&h, &rows, &th).unwrap(), a);
        let ids: Vec<String> = (0..30).map(|i| format!("s{i}")).collect();
        let mut buf = Vec::new();
        export_decisions(&ids, &a, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("sample_id,diff_entropy,p_max,decision"));
        assert_eq!(text.lines().count(), 31);
    }

    #[test]
    fn rejection_cases() {
        let pred = [0, 1, 1, 0];
        let truth = [0, 1, 0, 1];
        let conf = [0.95, 0.9, 0.6, 0.5];
        let all = evaluate_rejection(&pred, &truth, &conf, 0.0).unwrap();
        assert_eq!((all.accuracy, all.kept_fraction), (Some(0.5), 1.0));
        let hi = evaluate_rejection(&pred, &truth, &conf, 0.9).unwrap();
        assert_eq!((hi.accuracy, hi.kept_fraction), (Some(1.0), 0.5));
        let none = evaluate_rejection(&pred, &truth, &conf, 0.99).unwrap();
        assert_eq!((none.accuracy, none.kept_fraction), (None, 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let h = head(15);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("filter.ckpt");
        h.save(&path, 15, 3).unwrap();
        assert_eq!(FilterHead::load(&path).unwrap(), h);
    }

    #[test]
    fn prefilter_keeps_support_nonempty() {
        let h = head(16);
        let task = feature_task(2, 2);
        let th = FilterThresholds {
            tau_ood: f64::INFINITY,
            tau_c: 1.0,
        };
        let f = prefilter_task(&task, &h, &th).unwrap();
        assert_eq!(f.support, task.support);
        assert!(f.query.iter().all(|q| q.is_empty()));
    }
}
