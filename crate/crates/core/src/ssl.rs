//! Transductive prototype propagation with the learned metric, contrastive
//! self-supervision and weak/strong consistency training.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::{differentiate, scaled_unit, Adam, FeatureEncoder, Metric, Mode};
use crate::error::{Error, Result};
use crate::perturb::{self, PerturbContext, PerturbSet, PerturbSpec};
use crate::rng;
use crate::signal::Signal;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub class_id: usize,
    pub center: Vec<f64>,
    pub support_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    /// Index of the sample in the caller's collection.
    pub sample: usize,
    pub probs: Vec<f64>,
    pub max_prob: f64,
    pub accepted: bool,
}

impl PseudoLabel {
    pub fn new(sample: usize, probs: Vec<f64>, tau_p: f64) -> Self {
        let max_prob = probs.iter().copied().fold(0.0, f64::max);
        Self {
            sample,
            probs,
            max_prob,
            accepted: max_prob > tau_p,
        }
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-class means, ordered by class id.
pub fn class_prototypes(features: &[(Vec<f64>, usize)]) -> Result<Vec<Prototype>> {
    let mut classes: Vec<usize> = features.iter().map(|(_, c)| *c).collect();
    classes.sort_unstable();
    classes.dedup();
    class_prototypes_for(features, &classes)
}

/// Per-class means for exactly `classes`; a class without samples is an error.
pub fn class_prototypes_for(
    features: &[(Vec<f64>, usize)],
    classes: &[usize],
) -> Result<Vec<Prototype>> {
    if classes.is_empty() {
        return Err(Error::MissingClass("no classes".into()));
    }
    let d = features.first().map_or(0, |(f, _)| f.len());
    let mut out = Vec::with_capacity(classes.len());
    for &c in classes {
        let mut center = vec![0.0; d];
        let mut n = 0;
        for (f, _) in features.iter().filter(|(_, k)| *k == c) {
            if f.len() != d {
                return Err(Error::input("feature dimensions differ"));
            }
            center.iter_mut().zip(f).for_each(|(a, b)| *a += b);
            n += 1;
        }
        if n == 0 {
            return Err(Error::MissingClass(format!("class {c} has no samples")));
        }
        center.iter_mut().for_each(|v| *v /= n as f64);
        out.push(Prototype {
            class_id: c,
            center,
            support_count: n,
        });
    }
    Ok(out)
}

fn softmax_neg(dist: &[f64]) -> Vec<f64> {
    let m = dist.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = dist.iter().map(|d| (-(d - m)).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Modified distances from `x` to each prototype.
pub fn proto_distances(x: &[f64], protos: &[Prototype], metric: &Metric) -> Result<Vec<f64>> {
    if protos.is_empty() {
        return Err(Error::MissingClass("no prototypes".into()));
    }
    let a = scaled_unit(x, metric.scale(x)?)?;
    protos
        .iter()
        .map(|p| {
            let b = scaled_unit(&p.center, metric.scale(&p.center)?)?;
            Ok(crate::encoder::euclid(&a, &b))
        })
        .collect()
}

/// δ̃_c = softmax(−d_φ(u, p_c)) over classes.
pub fn soft_assign(u: &[f64], protos: &[Prototype], metric: &Metric) -> Result<Vec<f64>> {
    Ok(softmax_neg(&proto_distances(u, protos, metric)?))
}

/// P(c | x) over prototypes; identical in form to the soft assignment.
pub fn transductive_predict(x: &[f64], protos: &[Prototype], metric: &Metric) -> Result<Vec<f64>> {
    soft_assign(x, protos, metric)
}

/// Labeled-anchored weighted mean: (Σ labeled + Σ δ̃·u) / (n + Σ δ̃).
pub fn refine_prototypes(
    protos: &[Prototype],
    unlabeled: &[Vec<f64>],
    weights: &[Vec<f64>],
) -> Result<Vec<Prototype>> {
    if unlabeled.len() != weights.len() {
        return Err(Error::input(
            "one weight vector per unlabeled sample expected",
        ));
    }
    let mut out = protos.to_vec();
    for (c, p) in out.iter_mut().enumerate() {
        let n = p.support_count as f64;
        let mut num: Vec<f64> = p.center.iter().map(|v| v * n).collect();
        let mut den = n;
        for (u, w) in unlabeled.iter().zip(weights) {
            if w.len() != protos.len() {
                return Err(Error::input(
                    "weight vector length differs from prototype count",
                ));
            }
            num.iter_mut().zip(u).for_each(|(a, b)| *a += w[c] * b);
            den += w[c];
        }
        p.center = num.into_iter().map(|v| v / den).collect();
    }
    Ok(out)
}

/// Mean pairwise Euclidean distance between prototype centers.
pub fn prototype_spread(protos: &[Prototype]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for i in 0..protos.len() {
        for j in i + 1..protos.len() {
            total += crate::encoder::euclid(&protos[i].center, &protos[j].center);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

pub fn cross_entropy(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| -a * b.max(1e-300).ln())
        .sum()
}

pub fn total_ssl_loss(l_ssl: f64, l_s: f64, lambda_w: f64) -> f64 {
    l_ssl + lambda_w * l_s
}

// ---- graph forms -------------------------------------------------------

/// Rows `x / (‖x‖·E(x))` for each row var; the metric sees all rows as one batch.
pub fn scaled_rows(
    g: &mut Graph,
    metric: &Metric,
    pm: Option<Var>,
    rows: &[Var],
    mode: Mode,
) -> (Vec<Var>, Option<crate::encoder::Forward>) {
    let x = g.stack(rows);
    let (scales, fwd) = metric.scales(g, pm, x, mode);
    let out = rows
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let n = g.norm(r);
            let s = g.element(scales, i);
            let den = g.mul(n, s);
            g.div(r, den)
        })
        .collect();
    (out, fwd)
}

/// `[a.len()][b.len()]` Euclidean distances between already-scaled rows.
pub fn distance_table(g: &mut Graph, a: &[Var], b: &[Var]) -> Vec<Vec<Var>> {
    a.iter()
        .map(|&x| {
            b.iter()
                .map(|&y| {
                    let d = g.sub(x, y);
                    g.norm(d)
                })
                .collect()
        })
        .collect()
}

/// Mean over samples of `d_true + Σ_c exp(−d_c)`; `dist[i][c]` and `targets[i]`.
pub fn metric_loss_graph(g: &mut Graph, dist: &[Vec<Var>], targets: &[usize]) -> Var {
    let terms: Vec<Var> = dist
        .iter()
        .zip(targets)
        .map(|(row, &t)| {
            let all = g.concat(row, &[row.len()]);
            let neg = g.neg(all);
            let e = g.exp(neg);
            let rep = g.sum(e);
            g.add(row[t], rep)
        })
        .collect();
    let s = g.sum_all(&terms);
    g.mul_const(s, 1.0 / terms.len() as f64)
}

/// Mean cross-entropy of softmax(−d) against integer targets.
pub fn proto_ce_graph(g: &mut Graph, dist: &[Vec<Var>], targets: &[usize]) -> Var {
    let terms: Vec<Var> = dist
        .iter()
        .zip(targets)
        .map(|(row, &t)| {
            let all = g.concat(row, &[row.len()]);
            let logits = g.neg(all);
            let lp = g.log_softmax(logits);
            let e = g.element(lp, t);
            g.neg(e)
        })
        .collect();
    let s = g.sum_all(&terms);
    g.mul_const(s, 1.0 / terms.len() as f64)
}

/// Below or at this batch size the small-batch form is used.
pub const SMALL_BATCH: usize = 8;

/// Contrastive loss between anchor views `z` and positive views `zp`.
///
/// For B > 8: −(1/B)Σ cos(z_i, z'_i) + (1/2B)Σ_i log Σ_{j≠i} exp(z_i·z_j/τ),
/// the inner sum running over the pool of all 2B vectors. For B ≤ 8:
/// (1/B)Σ_i [−cos(z_i, z'_i)/τ + log Σ_{j≠i} exp(z_i·z_j/τ)].
pub fn contrastive_graph(g: &mut Graph, z: &[Var], zp: &[Var], tau: f64) -> Result<Var> {
    let b = z.len();
    if b < 2 || zp.len() != b {
        return Err(Error::InsufficientBatch(format!(
            "contrastive loss needs B >= 2 matched pairs, got {b}/{}",
            zp.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::param("temperature must be positive"));
    }
    let pool: Vec<Var> = z.iter().chain(zp).copied().collect();
    let mut cos = Vec::with_capacity(b);
    let mut lse = Vec::with_capacity(b);
    for i in 0..b {
        let dot = g.dot(z[i], zp[i]);
        let na = g.norm(z[i]);
        let nb = g.norm(zp[i]);
        let den = g.mul(na, nb);
        cos.push(g.div(dot, den));
        let sims: Vec<Var> = pool
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, &v)| g.dot(z[i], v))
            .collect();
        let s = g.concat(&sims, &[sims.len()]);
        let s = g.mul_const(s, 1.0 / tau);
        lse.push(g.logsumexp(s));
    }
    let cos_sum = g.sum_all(&cos);
    let lse_sum = g.sum_all(&lse);
    let bf = b as f64;
    Ok(if b > SMALL_BATCH {
        let a = g.mul_const(cos_sum, -1.0 / bf);
        let l = g.mul_const(lse_sum, 1.0 / (2.0 * bf));
        g.add(a, l)
    } else {
        let a = g.mul_const(cos_sum, -1.0 / (tau * bf));
        let l = g.mul_const(lse_sum, 1.0 / bf);
        g.add(a, l)
    })
}

/// Mean of H(p_weak, softmax(−d_strong)) over rows; weak targets are constants.
pub fn consistency_graph(g: &mut Graph, weak: &[Vec<f64>], strong_dist: &[Vec<Var>]) -> Var {
    let terms: Vec<Var> = weak
        .iter()
        .zip(strong_dist)
        .map(|(p, row)| {
            let all = g.concat(row, &[row.len()]);
            let logits = g.neg(all);
            let lq = g.log_softmax(logits);
            let pc = g.constant(p, &[p.len()]);
            let d = g.dot(pc, lq);
            g.neg(d)
        })
        .collect();
    let s = g.sum_all(&terms);
    g.mul_const(s, 1.0 / terms.len() as f64)
}

// ---- numeric wrappers over the graph forms ----------------------------

fn constant_rows(g: &mut Graph, rows: &[Vec<f64>]) -> Vec<Var> {
    rows.iter().map(|r| g.constant(r, &[r.len()])).collect()
}

/// Contrastive loss of plain vectors.
pub fn contrastive_loss(z: &[Vec<f64>], zp: &[Vec<f64>], tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let a = constant_rows(&mut g, z);
    let b = constant_rows(&mut g, zp);
    let l = contrastive_graph(&mut g, &a, &b, tau)?;
    Ok(g.scalar(l))
}

/// Metric loss for labeled features against prototypes (metric in inference mode).
pub fn metric_loss(
    batch: &[(Vec<f64>, usize)],
    protos: &[Prototype],
    metric: &Metric,
) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut targets = Vec::with_capacity(batch.len());
    let mut dist = Vec::with_capacity(batch.len());
    for (x, c) in batch {
        let t = protos
            .iter()
            .position(|p| p.class_id == *c)
            .ok_or_else(|| Error::MissingClass(format!("no prototype for class {c}")))?;
        targets.push(t);
        dist.push(proto_distances(x, protos, metric)?);
    }
    Ok(dist
        .iter()
        .zip(&targets)
        .map(|(d, &t)| d[t] + d.iter().map(|v| (-v).exp()).sum::<f64>())
        .sum::<f64>()
        / batch.len() as f64)
}

/// Pseudo-label of one unlabeled sample from its weakly perturbed view.
pub fn pseudo_label(
    index: usize,
    u: &Signal,
    enc: &FeatureEncoder,
    protos: &[Prototype],
    metric: &Metric,
    weak: &PerturbSpec,
    tau_p: f64,
) -> Result<PseudoLabel> {
    let view = perturb::apply(weak, u, PerturbContext::default())?.unwrap_or_else(|| u.clone());
    let z = enc.encode(&view)?;
    Ok(PseudoLabel::new(
        index,
        transductive_predict(&z, protos, metric)?,
        tau_p,
    ))
}

/// Mean H(weak, strong) over accepted pseudo-labels. The flag is set when none
/// were accepted (the loss is then 0).
pub fn consistency_loss(
    labels: &[PseudoLabel],
    samples: &[Signal],
    enc: &FeatureEncoder,
    strong: &PerturbSpec,
    protos: &[Prototype],
    metric: &Metric,
) -> Result<(f64, bool)> {
    let mut total = 0.0;
    let mut n = 0;
    for pl in labels.iter().filter(|p| p.accepted) {
        let s = samples
            .get(pl.sample)
            .ok_or_else(|| Error::input(format!("sample index {} out of range", pl.sample)))?;
        let view =
            perturb::apply(strong, s, PerturbContext::default())?.unwrap_or_else(|| s.clone());
        let q = transductive_predict(&enc.encode(&view)?, protos, metric)?;
        total += cross_entropy(&pl.probs, &q);
        n += 1;
    }
    if n == 0 {
        return Ok((0.0, true));
    }
    Ok((total / n as f64, false))
}

// ---- training phases ---------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SslConfig {
    pub tau: f64,
    pub tau_p: f64,
    pub lambda_w: f64,
    pub t_meta: usize,
    pub t_sl: usize,
    /// The metric encoder is updated every this many propagation iterations.
    pub metric_interval: usize,
    pub batch: usize,
    pub unlabeled_batch: usize,
    pub shots: usize,
    pub queries: usize,
    pub lr: f64,
    /// Adam step size of the metric encoder, which is updated only every
    /// `metric_interval` iterations.
    pub metric_lr: f64,
    /// Perturbed copies of the labeled set merged into SSL training, as a
    /// fraction of its size.
    pub injection_ratio: f64,
    pub perturbations: PerturbSet,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            tau_p: 0.8,
            lambda_w: 1.0,
            t_meta: 300,
            t_sl: 300,
            metric_interval: 10,
            batch: 16,
            unlabeled_batch: 16,
            shots: 5,
            queries: 5,
            lr: 1e-3,
            metric_lr: 1e-3,
            injection_ratio: 0.5,
            perturbations: PerturbSet::default(),
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::param("tau must be positive"));
        }
        if !(0.0..=1.0).contains(&self.tau_p) {
            return Err(Error::param("tau_p must lie in [0, 1]"));
        }
        if self.batch < 2 {
            return Err(Error::InsufficientBatch(
                "SSL batch must be at least 2".into(),
            ));
        }
        if self.metric_interval == 0 || self.shots == 0 {
            return Err(Error::param("metric_interval and shots must be positive"));
        }
        if !(self.injection_ratio >= 0.0) || !(self.lr > 0.0) || !(self.metric_lr > 0.0) {
            return Err(Error::param(
                "injection_ratio must be >= 0 and learning rates > 0",
            ));
        }
        Ok(())
    }
}

/// One line of the training metrics stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterLog {
    pub phase: String,
    pub iteration: usize,
    pub loss: f64,
    pub components: BTreeMap<String, f64>,
    pub accepted_frac: f64,
}

fn by_class<'a>(labeled: &[&'a Signal]) -> Result<BTreeMap<usize, Vec<&'a Signal>>> {
    let mut map: BTreeMap<usize, Vec<&Signal>> = BTreeMap::new();
    for s in labeled {
        let c = s
            .label
            .ok_or_else(|| Error::input("labeled pool contains an unlabeled sample"))?;
        map.entry(c).or_default().push(s);
    }
    Ok(map)
}

/// Pseudo-label propagation: trains f_θ on episodic prototype classification
/// with refined prototypes, and E_φ on the metric loss every few iterations.
pub fn run_pseudo_label_phase(
    labeled: &[&Signal],
    unlabeled: &[&Signal],
    enc: &mut FeatureEncoder,
    metric: &mut Metric,
    cfg: &SslConfig,
    seed: u64,
) -> Result<Vec<IterLog>> {
    cfg.validate()?;
    let pools = by_class(labeled)?;
    if pools.len() < 2 {
        return Err(Error::InsufficientData(
            "propagation needs at least two labeled classes".into(),
        ));
    }
    let classes: Vec<usize> = pools.keys().copied().collect();
    let mut rng = rng::stream(seed, "ssl/propagation");
    let mut opt_enc = Adam::new(cfg.lr, enc.net.params.len());
    let mut opt_met = metric.params().map(|p| Adam::new(cfg.metric_lr, p.len()));
    let mut logs = Vec::with_capacity(cfg.t_meta);
    for it in 0..cfg.t_meta {
        let n_way = rng.random_range(2..=classes.len());
        let mut way: Vec<usize> = classes.choose_multiple(&mut rng, n_way).copied().collect();
        way.sort_unstable();
        let mut support: Vec<(&Signal, usize)> = Vec::new();
        let mut query: Vec<(&Signal, usize)> = Vec::new();
        for (ci, c) in way.iter().enumerate() {
            let mut pool = pools[c].clone();
            pool.shuffle(&mut rng);
            let k = cfg.shots.min(pool.len().saturating_sub(1)).max(1);
            support.extend(pool[..k].iter().map(|s| (*s, ci)));
            query.extend(pool[k..].iter().take(cfg.queries).map(|s| (*s, ci)));
        }
        if query.is_empty() {
            continue;
        }
        let unl: Vec<&Signal> = unlabeled
            .choose_multiple(&mut rng, cfg.unlabeled_batch.min(unlabeled.len()))
            .copied()
            .collect();
        let update_metric = opt_met.is_some() && it % cfg.metric_interval == 0;
        let met_params: Vec<f64> = metric.params().map(<[f64]>::to_vec).unwrap_or_default();
        let enc_ref = &*enc;
        let metric_ref = &*metric;
        // The encoder descends the prototype cross-entropy; the metric network
        // descends it plus its own loss, whose gradient stays with φ.
        let pass = |metric_pass: bool| {
            let blocks: Vec<&[f64]> = if metric_pass {
                vec![&enc.net.params, &met_params]
            } else {
                vec![&enc.net.params]
            };
            differentiate(&blocks, |g, p| {
                let update_metric = metric_pass;
                let pm = if update_metric { Some(p[1]) } else { None };
                let all: Vec<&Signal> = support
                    .iter()
                    .chain(&query)
                    .map(|(s, _)| *s)
                    .chain(unl.iter().copied())
                    .collect();
                let feats = enc_ref.forward(g, p[0], &all)?;
                let rows: Vec<Var> = (0..all.len()).map(|i| g.row(feats, i)).collect();
                let (ns, nq) = (support.len(), query.len());
                // Plain prototypes from the support rows.
                let mut protos = Vec::with_capacity(way.len());
                let mut counts = Vec::with_capacity(way.len());
                for ci in 0..way.len() {
                    let members: Vec<Var> = (0..ns)
                        .filter(|&i| support[i].1 == ci)
                        .map(|i| rows[i])
                        .collect();
                    let sum = sum_rows(g, &members);
                    protos.push(g.mul_const(sum, 1.0 / members.len() as f64));
                    counts.push(members.len() as f64);
                }
                // Soft weights of unlabeled rows (treated as constants), then refinement.
                let unl_rows = &rows[ns + nq..];
                if !unl_rows.is_empty() {
                    let mut cand: Vec<Var> = unl_rows.to_vec();
                    cand.extend(&protos);
                    let (scaled, _) = scaled_rows(g, metric_ref, None, &cand, Mode::Eval);
                    let (su, sp) = scaled.split_at(unl_rows.len());
                    let dist = distance_table(g, su, sp);
                    let weights: Vec<Vec<f64>> = dist
                        .iter()
                        .map(|row| {
                            softmax_neg(&row.iter().map(|v| g.scalar(*v)).collect::<Vec<_>>())
                        })
                        .collect();
                    for c in 0..protos.len() {
                        let mut num = g.mul_const(protos[c], counts[c]);
                        let mut den = counts[c];
                        for (j, w) in weights.iter().enumerate() {
                            let t = g.mul_const(unl_rows[j], w[c]);
                            num = g.add(num, t);
                            den += w[c];
                        }
                        protos[c] = g.mul_const(num, 1.0 / den);
                    }
                }
                let qrows = &rows[ns..ns + nq];
                let mut cand: Vec<Var> = qrows.to_vec();
                cand.extend(&protos);
                let mode = if update_metric {
                    Mode::Train
                } else {
                    Mode::Eval
                };
                let (scaled, fwd) = scaled_rows(g, metric_ref, pm, &cand, mode);
                let (sq, sp) = scaled.split_at(nq);
                let dist = distance_table(g, sq, sp);
                let targets: Vec<usize> = query.iter().map(|(_, c)| *c).collect();
                let ce = proto_ce_graph(g, &dist, &targets);
                let mut comps = BTreeMap::new();
                comps.insert("proto_ce".to_string(), g.scalar(ce));
                let loss = if update_metric {
                    let ml = metric_loss_graph(g, &dist, &targets);
                    comps.insert("metric".to_string(), g.scalar(ml));
                    g.add(ce, ml)
                } else {
                    ce
                };
                Ok((loss, (comps, fwd)))
            })
            .map_err(|e| e.in_stage("pseudo-label propagation"))
        };
        let step = pass(false)?;
        let metric_step = if update_metric {
            Some(pass(true)?)
        } else {
            None
        };
        opt_enc.step(&mut enc.net.params, &step.grads[0]);
        let mut components = step.extra.0;
        if let Some(ms) = metric_step {
            if let (Metric::Learned(m), Some(opt)) = (&mut *metric, opt_met.as_mut()) {
                opt.step(&mut m.net.params, &ms.grads[1]);
                if let Some(fwd) = &ms.extra.1 {
                    m.net.update_running(&ms.graph, fwd);
                }
            }
            if let Some(v) = ms.extra.0.get("metric") {
                components.insert("metric".to_string(), *v);
            }
        }
        logs.push(IterLog {
            phase: "propagation".into(),
            iteration: it,
            loss: step.loss,
            components,
            accepted_frac: 0.0,
        });
    }
    Ok(logs)
}

fn sum_rows(g: &mut Graph, rows: &[Var]) -> Var {
    let mut acc = rows[0];
    for &r in &rows[1..] {
        acc = g.add(acc, r);
    }
    acc
}

/// Perturbed copies of the labeled set, `ratio·|labeled|` of them, labels kept.
pub fn inject_perturbed(
    labeled: &[&Signal],
    ratio: f64,
    set: &PerturbSet,
    seed: u64,
) -> Result<Vec<Signal>> {
    let n = (ratio * labeled.len() as f64).round() as usize;
    let mut rng = rng::stream(seed, "ssl/injection");
    let family: Vec<PerturbSpec> = set.weak.iter().chain(&set.strong).cloned().collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let s = labeled[rng.random_range(0..labeled.len())];
        let partner = labeled
            .iter()
            .filter(|p| p.label == s.label)
            .collect::<Vec<_>>()
            .choose(&mut rng)
            .map(|p| **p);
        let v = PerturbSet::apply_random(&family, s, partner, &mut rng)?;
        out.push(v.with_source(format!("{}#inj{i}", s.source_id)));
    }
    Ok(out)
}

/// Class-balanced contrastive training with weak/strong consistency on unlabeled data.
///
/// `pool` holds labeled (or pseudo-labeled) samples; `unlabeled` feeds the
/// consistency term. The metric is used frozen.
pub fn run_ssl_phase(
    pool: &[&Signal],
    unlabeled: &[&Signal],
    enc: &mut FeatureEncoder,
    metric: &Metric,
    cfg: &SslConfig,
    seed: u64,
) -> Result<Vec<IterLog>> {
    cfg.validate()?;
    let classes = by_class(pool)?;
    if classes.is_empty() {
        return Err(Error::InsufficientData("empty SSL pool".into()));
    }
    let class_ids: Vec<usize> = classes.keys().copied().collect();
    let mut rng = rng::stream(seed, "ssl/contrastive");
    let mut opt = Adam::new(cfg.lr, enc.net.params.len());
    let weak = &cfg.perturbations.weak;
    let strong = &cfg.perturbations.strong;
    let mut logs = Vec::with_capacity(cfg.t_sl);
    for it in 0..cfg.t_sl {
        // Class-balanced batch: cycle through classes in random order.
        let mut order = class_ids.clone();
        order.shuffle(&mut rng);
        let batch: Vec<&Signal> = (0..cfg.batch)
            .map(|i| *classes[&order[i % order.len()]].choose(&mut rng).unwrap())
            .collect();
        let mut views = Vec::with_capacity(2 * cfg.batch);
        for _ in 0..2 {
            for s in &batch {
                let partner = classes[&s.label.unwrap()].choose(&mut rng).copied();
                views.push(PerturbSet::apply_random(weak, s, partner, &mut rng)?);
            }
        }
        let use_consistency = cfg.lambda_w > 0.0 && cfg.tau_p < 1.0 && !unlabeled.is_empty();
        let unl: Vec<&Signal> = if use_consistency {
            unlabeled
                .choose_multiple(&mut rng, cfg.unlabeled_batch.min(unlabeled.len()))
                .copied()
                .collect()
        } else {
            Vec::new()
        };
        let mut weak_u = Vec::with_capacity(unl.len());
        let mut strong_u = Vec::with_capacity(unl.len());
        for s in &unl {
            weak_u.push(PerturbSet::apply_random(weak, s, None, &mut rng)?);
            strong_u.push(PerturbSet::apply_random(strong, s, None, &mut rng)?);
        }
        let enc_ref = &*enc;
        let step = differentiate(&[&enc.net.params], |g, p| {
            let mut all: Vec<&Signal> = views.iter().collect();
            all.extend(weak_u.iter());
            all.extend(strong_u.iter());
            let feats = enc_ref.forward(g, p[0], &all)?;
            let rows: Vec<Var> = (0..all.len()).map(|i| g.row(feats, i)).collect();
            let b = cfg.batch;
            let l_ssl = contrastive_graph(g, &rows[..b], &rows[b..2 * b], cfg.tau)?;
            let mut comps = BTreeMap::new();
            comps.insert("ssl".to_string(), g.scalar(l_ssl));
            let mut accepted_frac = 0.0;
            let mut loss = l_ssl;
            if !unl.is_empty() {
                // Prototypes from the first view of the labeled batch.
                let mut protos = Vec::new();
                for c in &class_ids {
                    let members: Vec<Var> = (0..b)
                        .filter(|&i| batch[i].label == Some(*c))
                        .map(|i| rows[i])
                        .collect();
                    if !members.is_empty() {
                        let s = sum_rows(g, &members);
                        protos.push(g.mul_const(s, 1.0 / members.len() as f64));
                    }
                }
                let nu = unl.len();
                let wrows = &rows[2 * b..2 * b + nu];
                let srows = &rows[2 * b + nu..2 * b + 2 * nu];
                let mut cand: Vec<Var> = wrows.to_vec();
                cand.extend(srows);
                cand.extend(&protos);
                let (scaled, _) = scaled_rows(g, metric, None, &cand, Mode::Eval);
                let sw = &scaled[..nu];
                let ss = &scaled[nu..2 * nu];
                let sp = &scaled[2 * nu..];
                let dw = distance_table(g, sw, sp);
                let weak_probs: Vec<Vec<f64>> = dw
                    .iter()
                    .map(|row| softmax_neg(&row.iter().map(|v| g.scalar(*v)).collect::<Vec<_>>()))
                    .collect();
                let accepted: Vec<usize> = (0..nu)
                    .filter(|&j| weak_probs[j].iter().copied().fold(0.0, f64::max) > cfg.tau_p)
                    .collect();
                accepted_frac = accepted.len() as f64 / nu as f64;
                if !accepted.is_empty() {
                    let acc_rows: Vec<Var> = accepted.iter().map(|&j| ss[j]).collect();
                    let ds = distance_table(g, &acc_rows, sp);
                    let targets: Vec<Vec<f64>> =
                        accepted.iter().map(|&j| weak_probs[j].clone()).collect();
                    let l_s = consistency_graph(g, &targets, &ds);
                    comps.insert("consistency".to_string(), g.scalar(l_s));
                    let w = g.mul_const(l_s, cfg.lambda_w);
                    loss = g.add(loss, w);
                }
            }
            Ok((loss, (comps, accepted_frac)))
        })
        .map_err(|e| e.in_stage("contrastive training"))?;
        opt.step(&mut enc.net.params, &step.grads[0]);
        logs.push(IterLog {
            phase: "contrastive".into(),
            iteration: it,
            loss: step.loss,
            components: step.extra.0,
            accepted_frac: step.extra.1,
        });
    }
    Ok(logs)
}

/// Labels unlabeled samples with the current encoder and metric against
/// prototypes of `labeled`; returns accepted samples tagged with their class.
pub fn pseudo_label_pool(
    labeled: &[&Signal],
    unlabeled: &[&Signal],
    enc: &FeatureEncoder,
    metric: &Metric,
    tau_p: f64,
) -> Result<Vec<Signal>> {
    let feats = enc.encode_batch(labeled)?;
    let tagged: Vec<(Vec<f64>, usize)> = feats
        .into_iter()
        .zip(labeled)
        .map(|(f, s)| (f, s.label.unwrap_or(0)))
        .collect();
    let protos = class_prototypes(&tagged)?;
    let ufeats = enc.encode_batch(unlabeled)?;
    let mut out = Vec::new();
    for (f, s) in ufeats.iter().zip(unlabeled) {
        let p = transductive_predict(f, &protos, metric)?;
        let pl = PseudoLabel::new(0, p, tau_p);
        if pl.accepted {
            out.push((*s).clone().with_label(protos[pl.argmax()].class_id));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{grad_check, MetricEncoder};

    fn proto(c: usize, center: Vec<f64>) -> Prototype {
        Prototype {
            class_id: c,
            center,
            support_count: 1,
        }
    }

    #[test]
    fn prototypes_are_means() {
        let f = vec![
            (vec![0.0, 0.0], 0),
            (vec![2.0, 2.0], 0),
            (vec![5.0, 1.0], 1),
        ];
        let p = class_prototypes(&f).unwrap();
        assert_eq!(p[0].center, vec![1.0, 1.0]);
        assert_eq!(p[1].center, vec![5.0, 1.0]);
        let mut r = f.clone();
        r.reverse();
        assert_eq!(class_prototypes(&r).unwrap(), p);
        assert!(matches!(
            class_prototypes_for(&f, &[0, 1, 2]),
            Err(Error::MissingClass(_))
        ));
    }

    #[test]
    fn soft_assign_cases() {
        let protos = vec![proto(0, vec![1.0, 0.0]), proto(1, vec![0.0, 1.0])];
        let w = soft_assign(&[1.0, 1.0], &protos, &Metric::Unit).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15);
        let w = softmax_neg(&[0.0, 10.0]);
        let e = (-10f64).exp();
        assert!((w[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((w[1] - 4.5e-5).abs() < 1e-6);
        let shifted = softmax_neg(&[3.0, 13.0]);
        assert!((shifted[0] - w[0]).abs() < 1e-15);
        assert!(matches!(
            soft_assign(&[1.0], &[], &Metric::Unit),
            Err(Error::MissingClass(_))
        ));
    }

    #[test]
    fn refine_cases() {
        let protos = vec![
            Prototype {
                class_id: 0,
                center: vec![0.0, 0.0],
                support_count: 3,
            },
            proto(1, vec![4.0, 4.0]),
        ];
        assert_eq!(refine_prototypes(&protos, &[], &[]).unwrap(), protos);
        let r = refine_prototypes(&protos, &[vec![4.0, 0.0]], &[vec![1.0, 0.0]]).unwrap();
        assert_eq!(r[0].center, vec![1.0, 0.0]);
        assert_eq!(r[1].center, vec![4.0, 4.0]);
    }

    #[test]
    fn transductive_cases() {
        let one = vec![proto(3, vec![1.0, 2.0])];
        assert_eq!(
            transductive_predict(&[0.5, -1.0], &one, &Metric::Unit).unwrap(),
            vec![1.0]
        );
        let two = vec![proto(0, vec![1.0, 0.0]), proto(1, vec![0.0, 1.0])];
        let p = transductive_predict(&[0.9, 0.2], &two, &Metric::Unit).unwrap();
        assert_eq!(argmax(&p), 0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metric_loss_collapse_and_enumeration() {
        let protos = vec![
            proto(0, vec![1.0, 0.0]),
            proto(1, vec![1.0, 0.0]),
            proto(2, vec![2.0, 0.0]),
        ];
        let l = metric_loss(&[(vec![3.0, 0.0], 1)], &protos, &Metric::Unit).unwrap();
        assert!((l - 3.0).abs() < 1e-15);
        // Hand enumeration with unit-normalized vectors.
        let protos = vec![proto(0, vec![1.0, 0.0]), proto(1, vec![0.0, 1.0])];
        let batch = vec![
            (vec![1.0, 0.0], 0),
            (vec![0.0, 2.0], 1),
            (vec![1.0, 1.0], 0),
            (vec![-1.0, 0.0], 1),
        ];
        let s2 = 2f64.sqrt();
        let d_diag = (2.0 - s2).sqrt(); // |(1/√2, 1/√2) − e_k|
        let per = [
            0.0 + 1.0 + (-s2).exp(),
            0.0 + (-s2).exp() + 1.0,
            d_diag + 2.0 * (-d_diag).exp(),
            s2 + (-2.0f64).exp() + (-s2).exp(),
        ];
        let want = per.iter().sum::<f64>() / 4.0;
        let got = metric_loss(&batch, &protos, &Metric::Unit).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn contrastive_cases() {
        let z = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        // B = 2, τ = 0.5, small-batch form: pool {z1, z2, z1', z2'} = {e1, e2, e1, e2}.
        let tau = 0.5;
        let lse = ((0.0f64).exp() + (1.0f64 / tau).exp() + (0.0f64).exp()).ln();
        let want = (-1.0 / tau + lse + -1.0 / tau + lse) / 2.0;
        let got = contrastive_loss(&z, &z, tau).unwrap();
        assert!((got - want).abs() < 1e-9);
        assert!(matches!(
            contrastive_loss(&z[..1], &z[..1], 0.5),
            Err(Error::InsufficientBatch(_))
        ));
        // Large-batch form, τ = 1: alignment term is −1 when views coincide.
        let big: Vec<Vec<f64>> = (0..10)
            .map(|i| vec![(i as f64).cos(), (i as f64).sin()])
            .collect();
        let mut g = Graph::new();
        let a = constant_rows(&mut g, &big);
        let l = contrastive_graph(&mut g, &a, &a, 1.0).unwrap();
        let mut lse_sum = 0.0;
        for i in 0..10 {
            let mut terms = Vec::new();
            for j in 0..20 {
                if j != i {
                    let v = &big[j % 10];
                    terms.push((big[i][0] * v[0] + big[i][1] * v[1]).exp());
                }
            }
            lse_sum += terms.iter().sum::<f64>().ln();
        }
        assert!((g.scalar(l) - (-1.0 + lse_sum / 20.0)).abs() < 1e-12);
    }

    #[test]
    fn alignment_scale_invariance() {
        let z: Vec<Vec<f64>> = (0..10)
            .map(|i| vec![1.0 + i as f64, (i as f64).sin()])
            .collect();
        let zp: Vec<Vec<f64>> = (0..10).map(|i| vec![(i as f64).cos(), 2.0]).collect();
        let align = |a: &[Vec<f64>], b: &[Vec<f64>]| {
            let mut g = Graph::new();
            let mut cs = Vec::new();
            for (x, y) in a.iter().zip(b) {
                let (xv, yv) = (g.constant(x, &[2]), g.constant(y, &[2]));
                let d = g.dot(xv, yv);
                let n = g.norm(xv);
                let m = g.norm(yv);
                let den = g.mul(n, m);
                let q = g.div(d, den);
                cs.push(g.scalar(q));
            }
            cs
        };
        let scaled: Vec<Vec<f64>> = z
            .iter()
            .enumerate()
            .map(|(i, v)| v.iter().map(|x| x * (i + 1) as f64).collect())
            .collect();
        for (a, b) in align(&z, &zp).iter().zip(align(&scaled, &zp)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn consistency_values() {
        assert!((cross_entropy(&[0.9, 0.1], &[0.5, 0.5]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(cross_entropy(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        let p = [0.3, 0.7];
        let h = -(0.3f64 * 0.3f64.ln() + 0.7 * 0.7f64.ln());
        assert!((cross_entropy(&p, &p) - h).abs() < 1e-15);
        assert_eq!(total_ssl_loss(1.0, 0.5, 2.0), 2.0);
        assert_eq!(total_ssl_loss(1.0, 0.5, 0.0), 1.0);
    }

    #[test]
    fn pseudo_label_thresholds() {
        let pl = PseudoLabel::new(0, vec![0.6, 0.4], 0.0);
        assert!(pl.accepted);
        let pl = PseudoLabel::new(0, vec![0.99, 0.01], 1.0);
        assert!(!pl.accepted);
        let p = softmax_neg(&[0.0, 10.0]);
        assert!(PseudoLabel::new(0, p, 0.9).accepted);
    }

    #[test]
    fn graph_losses_pass_gradient_checks() {
        let mut r = rng::from_seed(11);
        let d = 8;
        let m = MetricEncoder::new(d, &mut r).unwrap();
        let metric = Metric::Learned(m.clone());
        let feats: Vec<Vec<f64>> = (0..6)
            .map(|i| {
                (0..d)
                    .map(|k| ((i * 7 + k * 3) as f64 * 0.37).sin() + 0.1)
                    .collect()
            })
            .collect();
        // Metric loss through the metric encoder (batch statistics).
        let err = grad_check(
            &m.net.params,
            |g, p| {
                let rows = constant_rows(g, &feats);
                let (scaled, _) = scaled_rows(g, &metric, Some(p), &rows, Mode::Train);
                let dist = distance_table(g, &scaled[..4], &scaled[4..]);
                metric_loss_graph(g, &dist, &[0, 1, 1, 0])
            },
            1e-6,
            Some((200, 3)),
        );
        assert!(err < 1e-3, "metric loss {err}");
        let flat: Vec<f64> = feats.concat();
        for b in [2usize, 3] {
            let err = grad_check(
                &flat,
                |g, p| {
                    let rows: Vec<Var> = (0..2 * b).map(|i| g.slice(p, i * d, &[d])).collect();
                    contrastive_graph(g, &rows[..b], &rows[b..], 0.5).unwrap()
                },
                1e-6,
                None,
            );
            assert!(err < 1e-3, "contrastive B={b}: {err}");
        }
        let err = grad_check(
            &flat,
            |g, p| {
                let rows: Vec<Var> = (0..6).map(|i| g.slice(p, i * d, &[d])).collect();
                let (scaled, _) = scaled_rows(g, &Metric::Unit, None, &rows, Mode::Eval);
                let dist = distance_table(g, &scaled[..3], &scaled[3..]);
                consistency_graph(
                    g,
                    &[
                        vec![0.7, 0.2, 0.1],
                        vec![0.1, 0.1, 0.8],
                        vec![0.3, 0.3, 0.4],
                    ],
                    &dist,
                )
            },
            1e-6,
            None,
        );
        assert!(err < 1e-3, "consistency {err}");
    }
}
