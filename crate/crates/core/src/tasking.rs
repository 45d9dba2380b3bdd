//! Any-way 1–5-shot episodes, chance-corrected evaluation, the prototype
//! baseline and AUROC.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::encoder::{differentiate, euclid, Adam, FeatureEncoder};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::signal::Signal;
use crate::ssl::{argmax, distance_table, proto_ce_graph};

pub const MAX_SHOTS: usize = 5;
pub const QUERY_SIZE: usize = 50;

/// Indices into a sample pool with their classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    /// Chosen classes, in prediction-column order.
    pub classes: Vec<usize>,
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    pub fn shots(&self) -> Vec<usize> {
        self.classes
            .iter()
            .map(|c| self.support.iter().filter(|(_, k)| k == c).count())
            .collect()
    }

    pub fn support_signals<'a>(&self, pool: &'a [Signal]) -> Vec<(&'a Signal, usize)> {
        self.support.iter().map(|&(i, c)| (&pool[i], c)).collect()
    }

    pub fn query_signals<'a>(&self, pool: &'a [Signal]) -> Vec<&'a Signal> {
        self.query.iter().map(|&(i, _)| &pool[i]).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|&(_, c)| c).collect()
    }
}

/// N uniform in [2, max_n], N distinct classes, K_i uniform in [1, 5] per class,
/// and `query_size` query samples balanced across the classes.
pub fn sample_episode(
    labels: &[usize],
    max_n: usize,
    query_size: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    if max_n < 2 {
        return Err(Error::param("episodes need at least two classes"));
    }
    let n = rng.random_range(2..=max_n);
    let share = query_size.div_ceil(n);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let eligible: Vec<usize> = by_class
        .iter()
        .filter(|(_, v)| v.len() >= MAX_SHOTS + share)
        .map(|(c, _)| *c)
        .collect();
    if eligible.len() < n {
        return Err(Error::InsufficientData(format!(
            "{n}-way episode needs {n} classes with {} samples, {} qualify",
            MAX_SHOTS + share,
            eligible.len()
        )));
    }
    let classes: Vec<usize> = eligible.choose_multiple(rng, n).copied().collect();
    let base = query_size / n;
    let extra = query_size % n;
    let mut support = Vec::new();
    let mut query = Vec::new();
    for (j, &c) in classes.iter().enumerate() {
        let mut idx = by_class[&c].clone();
        idx.shuffle(rng);
        let k = rng.random_range(1..=MAX_SHOTS);
        let q = base + usize::from(j < extra);
        support.extend(idx[..k].iter().map(|&i| (i, c)));
        query.extend(idx[k..k + q].iter().map(|&i| (i, c)));
    }
    Ok(Episode {
        classes,
        support,
        query,
    })
}

/// (acc − 1/N) / (1 − 1/N).
pub fn standardized_accuracy(acc: f64, n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::param("standardized accuracy needs N ≥ 2"));
    }
    let chance = 1.0 / n as f64;
    Ok((acc - chance) / (1.0 - chance))
}

/// A classifier conditioned on an episode's support set.
pub trait EpisodeModel: Sync {
    /// Probabilities per query sample, columns in `classes` order.
    fn predict_proba(
        &self,
        support: &[(&Signal, usize)],
        query: &[&Signal],
        classes: &[usize],
    ) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub n_way: usize,
    pub shots: Vec<usize>,
    pub accuracy: f64,
    pub std_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// None when no tasks ran.
    pub mean_std_acc: Option<f64>,
    pub ci95: f64,
    pub n_tasks: usize,
    pub per_task: Vec<TaskRecord>,
}

impl EvalSummary {
    pub fn from_records(per_task: Vec<TaskRecord>) -> Self {
        let n = per_task.len();
        if n == 0 {
            return Self {
                mean_std_acc: None,
                ci95: 0.0,
                n_tasks: 0,
                per_task,
            };
        }
        let xs: Vec<f64> = per_task.iter().map(|r| r.std_accuracy).collect();
        let (mean, half) = mean_ci95(&xs);
        Self {
            mean_std_acc: Some(mean),
            ci95: half,
            n_tasks: n,
            per_task,
        }
    }
}

/// Mean and normal-approximation 95% half-width (sample standard deviation).
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// Samples `n_tasks` episodes from per-task seed streams and maps `f` over
/// them in parallel; output order follows the task index.
pub fn run_episodes<T, F>(
    labels: &[usize],
    max_n: usize,
    n_tasks: usize,
    query_size: usize,
    seed: u64,
    f: F,
) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &Episode) -> Result<T> + Sync,
{
    (0..n_tasks)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::indexed_stream(seed, "episode", t as u64);
            let ep = sample_episode(labels, max_n, query_size, &mut r)?;
            f(t, &ep)
        })
        .collect()
}

pub fn task_record(ep: &Episode, predicted: &[usize]) -> Result<TaskRecord> {
    let truth = ep.query_labels();
    let correct = predicted.iter().zip(&truth).filter(|(p, t)| p == t).count();
    let acc = correct as f64 / truth.len().max(1) as f64;
    Ok(TaskRecord {
        n_way: ep.n_way(),
        shots: ep.shots(),
        accuracy: acc,
        std_accuracy: standardized_accuracy(acc, ep.n_way())?,
    })
}

pub fn labels_of(pool: &[Signal]) -> Result<Vec<usize>> {
    pool.iter()
        .map(|s| {
            s.label
                .ok_or_else(|| Error::input(format!("sample {} is unlabeled", s.source_id)))
        })
        .collect()
}

pub fn evaluate<M: EpisodeModel + ?Sized>(
    model: &M,
    pool: &[Signal],
    max_n: usize,
    n_tasks: usize,
    seed: u64,
) -> Result<EvalSummary> {
    let labels = labels_of(pool)?;
    let records = run_episodes(&labels, max_n, n_tasks, QUERY_SIZE, seed, |_, ep| {
        let probs = model.predict_proba(
            &ep.support_signals(pool),
            &ep.query_signals(pool),
            &ep.classes,
        )?;
        let pred: Vec<usize> = probs.iter().map(|p| ep.classes[argmax(p)]).collect();
        task_record(ep, &pred)
    })?;
    Ok(EvalSummary::from_records(records))
}

/// Nearest class mean under plain Euclidean distance; probabilities are softmax(−d).
pub fn protonet_predict(
    support: &[(Vec<f64>, usize)],
    query: &[Vec<f64>],
    classes: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let protos = classes
        .iter()
        .map(|c| {
            let members: Vec<&Vec<f64>> = support
                .iter()
                .filter(|(_, k)| k == c)
                .map(|(f, _)| f)
                .collect();
            let first = members
                .first()
                .ok_or_else(|| Error::MissingClass(format!("class {c} has no support")))?;
            let mut m = vec![0.0; first.len()];
            for f in &members {
                m.iter_mut()
                    .zip(f.iter())
                    .for_each(|(a, b)| *a += b / members.len() as f64);
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(query
        .iter()
        .map(|q| {
            let d: Vec<f64> = protos.iter().map(|p| euclid(q, p)).collect();
            let m = d.iter().copied().fold(f64::INFINITY, f64::min);
            let e: Vec<f64> = d.iter().map(|v| (-(v - m)).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect())
}

/// Prototype baseline on a fixed encoder.
pub struct ProtoNet<'a> {
    pub encoder: &'a FeatureEncoder,
}

impl EpisodeModel for ProtoNet<'_> {
    fn predict_proba(
        &self,
        support: &[(&Signal, usize)],
        query: &[&Signal],
        classes: &[usize],
    ) -> Result<Vec<Vec<f64>>> {
        let sig: Vec<&Signal> = support.iter().map(|(s, _)| *s).collect();
        let feats = self.encoder.encode_batch(&sig)?;
        let sup: Vec<(Vec<f64>, usize)> = feats
            .into_iter()
            .zip(support.iter().map(|(_, c)| *c))
            .collect();
        let q = self.encoder.encode_batch(query)?;
        protonet_predict(&sup, &q, classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtoTrainConfig {
    pub iterations: usize,
    pub shots: usize,
    pub queries: usize,
    pub lr: f64,
}

impl Default for ProtoTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 600,
            shots: 5,
            queries: 5,
            lr: 1e-3,
        }
    }
}

/// Episodic prototype training with plain Euclidean distances on labeled data.
/// Returns the loss of each iteration.
pub fn train_protonet(
    labeled: &[&Signal],
    enc: &mut FeatureEncoder,
    cfg: &ProtoTrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut pools: BTreeMap<usize, Vec<&Signal>> = BTreeMap::new();
    for s in labeled {
        let c = s
            .label
            .ok_or_else(|| Error::input("labeled pool contains an unlabeled sample"))?;
        pools.entry(c).or_default().push(s);
    }
    if pools.len() < 2 {
        return Err(Error::InsufficientData(
            "prototype training needs two labeled classes".into(),
        ));
    }
    let classes: Vec<usize> = pools.keys().copied().collect();
    let mut r = rng::stream(seed, "protonet/train");
    let mut opt = Adam::new(cfg.lr, enc.net.params.len());
    let mut curve = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let n_way = r.random_range(2..=classes.len());
        let mut way: Vec<usize> = classes.choose_multiple(&mut r, n_way).copied().collect();
        way.sort_unstable();
        let mut support = Vec::new();
        let mut query = Vec::new();
        for (ci, c) in way.iter().enumerate() {
            let mut pool = pools[c].clone();
            pool.shuffle(&mut r);
            let k = cfg.shots.min(pool.len().saturating_sub(1)).max(1);
            support.extend(pool[..k].iter().map(|s| (*s, ci)));
            query.extend(pool[k..].iter().take(cfg.queries).map(|s| (*s, ci)));
        }
        if query.is_empty() {
            continue;
        }
        let enc_ref = &*enc;
        let step = differentiate(&[&enc.net.params], |g, p| {
            let all: Vec<&Signal> = support.iter().chain(&query).map(|(s, _)| *s).collect();
            let feats = enc_ref.forward(g, p[0], &all)?;
            let rows: Vec<Var> = (0..all.len()).map(|i| g.row(feats, i)).collect();
            let ns = support.len();
            let protos: Vec<Var> = (0..way.len())
                .map(|ci| {
                    let members: Vec<Var> = (0..ns)
                        .filter(|&i| support[i].1 == ci)
                        .map(|i| rows[i])
                        .collect();
                    let mut acc = members[0];
                    for &m in &members[1..] {
                        acc = g.add(acc, m);
                    }
                    g.mul_const(acc, 1.0 / members.len() as f64)
                })
                .collect();
            let dist = distance_table(g, &rows[ns..], &protos);
            let targets: Vec<usize> = query.iter().map(|(_, c)| *c).collect();
            Ok((proto_ce_graph(g, &dist, &targets), ()))
        })?;
        opt.step(&mut enc.net.params, &step.grads[0]);
        curve.push(step.loss);
    }
    Ok(curve)
}

/// Rank-based AUROC with midranks for ties; positives are the anomalies.
pub fn auroc(scores: &[(f64, bool)]) -> Result<f64> {
    let pos = scores.iter().filter(|s| s.1).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs both positives and negatives".into(),
        ));
    }
    if scores.iter().any(|s| s.0.is_nan()) {
        return Err(Error::input("NaN score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].0.total_cmp(&scores[b].0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].0 == scores[order[i]].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| scores[k].1).count() as f64 * mid;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn labels(k: usize, per: usize) -> Vec<usize> {
        (0..k * per).map(|i| i / per).collect()
    }

    #[test]
    fn episode_shape() {
        let lab = labels(5, 40);
        let mut r = rng::from_seed(1);
        for _ in 0..200 {
            let ep = sample_episode(&lab, 5, QUERY_SIZE, &mut r).unwrap();
            let n = ep.n_way();
            assert!((2..=5).contains(&n));
            assert_eq!(ep.query.len(), 50);
            let mut used: Vec<usize> = ep.support.iter().chain(&ep.query).map(|x| x.0).collect();
            let total = used.len();
            used.sort();
            used.dedup();
            assert_eq!(used.len(), total);
            for c in &ep.classes {
                let q = ep.query.iter().filter(|x| x.1 == *c).count();
                assert!(q == 50 / n || q == 50 / n + 1);
            }
            assert!(ep.shots().iter().all(|k| (1..=5).contains(k)));
            assert!(ep
                .support
                .iter()
                .chain(&ep.query)
                .all(|&(i, c)| lab[i] == c));
        }
        let ep = sample_episode(&lab, 2, QUERY_SIZE, &mut r).unwrap();
        assert_eq!(ep.n_way(), 2);
        assert!(matches!(
            sample_episode(&labels(3, 10), 3, QUERY_SIZE, &mut r),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn shot_counts_are_uniform() {
        let lab = labels(2, 40);
        let mut r = rng::from_seed(2);
        let mut hist = [0usize; 5];
        for _ in 0..10_000 {
            let ep = sample_episode(&lab, 2, QUERY_SIZE, &mut r).unwrap();
            hist[ep.shots()[0] - 1] += 1;
        }
        let e = 10_000.0 / 5.0;
        let chi2: f64 = hist.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
        // 99th percentile of χ² with 4 degrees of freedom
        assert!(chi2 < 13.277, "{chi2}");
    }

    #[test]
    fn standardized_cases() {
        assert_eq!(standardized_accuracy(1.0, 7).unwrap(), 1.0);
        assert!(standardized_accuracy(0.25, 4).unwrap().abs() < 1e-15);
        assert!((standardized_accuracy(0.625, 4).unwrap() - 0.5).abs() < 1e-15);
        assert!(standardized_accuracy(0.1, 4).unwrap() < 0.0);
        assert!(standardized_accuracy(0.5, 1).is_err());
    }

    struct Oracle;
    impl EpisodeModel for Oracle {
        fn predict_proba(
            &self,
            _: &[(&Signal, usize)],
            q: &[&Signal],
            classes: &[usize],
        ) -> Result<Vec<Vec<f64>>> {
            Ok(q.iter()
                .map(|s| {
                    classes
                        .iter()
                        .map(|c| f64::from(Some(*c) == s.label))
                        .collect()
                })
                .collect())
        }
    }

    struct Coin;
    impl EpisodeModel for Coin {
        fn predict_proba(
            &self,
            _: &[(&Signal, usize)],
            q: &[&Signal],
            classes: &[usize],
        ) -> Result<Vec<Vec<f64>>> {
            Ok(q.iter()
                .map(|s| {
                    // a hash of the sample id stands in for a random draw
                    let h = s
                        .source_id
                        .bytes()
                        .fold(7u64, |a, b| a.wrapping_mul(31).wrapping_add(u64::from(b)));
                    let mut r = rng::from_seed(h);
                    let pick = r.random_range(0..classes.len());
                    (0..classes.len()).map(|j| f64::from(j == pick)).collect()
                })
                .collect())
        }
    }

    fn pool(k: usize, per: usize) -> Vec<Signal> {
        (0..k * per)
            .map(|i| {
                Signal::mono(vec![i as f64; 32])
                    .unwrap()
                    .with_label(i / per)
                    .with_source(format!("p{i}"))
            })
            .collect()
    }

    #[test]
    fn evaluation_cases() {
        let p = pool(4, 40);
        let s = evaluate(&Oracle, &p, 4, 100, 9).unwrap();
        assert_eq!(s.mean_std_acc, Some(1.0));
        assert_eq!(s.ci95, 0.0);
        assert_eq!(s.per_task.len(), 100);
        let c = evaluate(&Coin, &p, 4, 100, 9).unwrap();
        assert!(c.mean_std_acc.unwrap().abs() <= 0.1, "{:?}", c.mean_std_acc);
        assert_eq!(evaluate(&Coin, &p, 4, 100, 9).unwrap(), c);
        let e = evaluate(&Oracle, &p, 4, 0, 9).unwrap();
        assert_eq!((e.mean_std_acc, e.n_tasks), (None, 0));
    }

    #[test]
    fn protonet_cases() {
        let sup = vec![(vec![0.0, 0.0], 3), (vec![5.0, 5.0], 7)];
        let p = protonet_predict(&sup, &[vec![5.0, 5.0]], &[3, 7]).unwrap();
        assert_eq!(argmax(&p[0]), 1);
        let rev: Vec<_> = sup.iter().rev().cloned().collect();
        assert_eq!(
            protonet_predict(&rev, &[vec![1.0, 2.0]], &[3, 7]).unwrap(),
            protonet_predict(&sup, &[vec![1.0, 2.0]], &[3, 7]).unwrap()
        );
        assert!(matches!(
            protonet_predict(&sup, &[vec![0.0, 0.0]], &[3, 9]),
            Err(Error::MissingClass(_))
        ));
    }

    #[test]
    fn protonet_separable_clusters() {
        let mut r = rng::from_seed(4);
        let nd = Normal::new(0.0, 1.0).unwrap();
        let centers: Vec<Vec<f64>> = (0..4)
            .map(|c| (0..8).map(|j| if j == c { 10.0 } else { 0.0 }).collect())
            .collect();
        let feats: Vec<(Vec<f64>, usize)> = (0..160)
            .map(|i| {
                let c = i / 40;
                (
                    centers[c].iter().map(|m| m + nd.sample(&mut r)).collect(),
                    c,
                )
            })
            .collect();
        let lab: Vec<usize> = feats.iter().map(|f| f.1).collect();
        let recs = run_episodes(&lab, 4, 50, QUERY_SIZE, 3, |_, ep| {
            let sup: Vec<_> = ep
                .support
                .iter()
                .map(|&(i, c)| (feats[i].0.clone(), c))
                .collect();
            let q: Vec<_> = ep.query.iter().map(|&(i, _)| feats[i].0.clone()).collect();
            let pred: Vec<usize> = protonet_predict(&sup, &q, &ep.classes)?
                .iter()
                .map(|p| ep.classes[argmax(p)])
                .collect();
            task_record(ep, &pred)
        })
        .unwrap();
        let s = EvalSummary::from_records(recs);
        assert!(s.mean_std_acc.unwrap() > 0.9);
    }

    fn auroc_pairs(scores: &[(f64, bool)]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for a in scores.iter().filter(|s| s.1) {
            for b in scores.iter().filter(|s| !s.1) {
                den += 1.0;
                num += if a.0 > b.0 {
                    1.0
                } else if a.0 == b.0 {
                    0.5
                } else {
                    0.0
                };
            }
        }
        num / den
    }

    #[test]
    fn auroc_cases() {
        assert_eq!(
            auroc(&[(0.1, false), (0.2, false), (0.8, true), (0.9, true)]).unwrap(),
            1.0
        );
        assert_eq!(
            auroc(&[(0.5, false), (0.5, true), (0.5, false)]).unwrap(),
            0.5
        );
        assert!(matches!(
            auroc(&[(0.5, true)]),
            Err(Error::UndefinedMetric(_))
        ));
        let mut r = rng::from_seed(5);
        let pts: Vec<(f64, bool)> = (0..200)
            .map(|_| {
                let pos = r.random::<f64>() < 0.4;
                let s = (r.random::<f64>() * 10.0).round() / 10.0 + if pos { 0.3 } else { 0.0 };
                (s, pos)
            })
            .collect();
        assert!((auroc(&pts).unwrap() - auroc_pairs(&pts)).abs() < 1e-9);
    }
}
