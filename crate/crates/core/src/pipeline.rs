//! End-to-end run: data, semi-supervised encoder training, filter, prior fit
//! and filtered evaluation, checkpointed under one run directory.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bayes::{
    lda_predict, meta_fit_prior, normalize_log, qda_fit_mle, qda_scores, BayesQda, FeatureTask,
    NiwParams, PriorFitConfig, QdaVariant,
};
use crate::calibration::{
    abce, bin_reliability, class_confidence, ece, reliability_export, AbceConfig, PredictionRecord,
};
use crate::datagen::{self, default_unlabeled_counts, DatasetFile, DatasetManifest};
use crate::encoder::{load_network, save_network, FeatureEncoder, Metric, MetricEncoder};
use crate::error::{Error, Result};
use crate::filter::{
    domain_aware_fit, entropy_threshold, evaluate_rejection, export_decisions, filter_dataset,
    head_records, ood_scores, prefilter_task, train_filter, FilterHead, FilterThresholds,
    FilterTrainConfig, OuterConfig, RejectionResult,
};
use crate::perturb::PerturbSet;
use crate::rng::{self, derive_seed, fnv1a};
use crate::signal::Signal;
use crate::ssl::{
    argmax, class_prototypes, inject_perturbed, prototype_spread, pseudo_label_pool,
    run_pseudo_label_phase, run_ssl_phase, IterLog, SslConfig,
};
use crate::tasking::{
    auroc, labels_of, protonet_predict, run_episodes, task_record, train_protonet, EvalSummary,
    ProtoTrainConfig, MAX_SHOTS, QUERY_SIZE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Data,
    Propagation,
    Ssl,
    Baseline,
    Filter,
    Prior,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Data,
        Stage::Propagation,
        Stage::Ssl,
        Stage::Baseline,
        Stage::Filter,
        Stage::Prior,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Propagation => "propagation",
            Stage::Ssl => "ssl",
            Stage::Baseline => "baseline",
            Stage::Filter => "filter",
            Stage::Prior => "prior",
            Stage::Evaluate => "evaluate",
        }
    }
}

// ---- configuration -----------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub labeled_per_class: usize,
    /// Unlabeled samples per in-distribution class; empty means 100, 20, 20, ….
    pub unlabeled_counts: Vec<usize>,
    pub train_conditions: Vec<usize>,
    pub test_conditions: Vec<usize>,
    /// Classes withheld from training and used as OOD at test time.
    pub ood_classes: Vec<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            labeled_per_class: 10,
            unlabeled_counts: Vec::new(),
            train_conditions: vec![1, 2],
            test_conditions: vec![0],
            ood_classes: vec![4],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricMode {
    #[default]
    Learned,
    /// E ≡ 1 throughout.
    Unit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    /// Posterior-predictive QDA under the fitted NIW prior.
    #[default]
    BayesQda,
    /// Maximum-likelihood QDA without a prior.
    MleQda,
    /// Shrinkage LDA.
    Lda,
    /// Nearest prototype on the trained features.
    Prototype,
}

impl ClassifierKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierKind::BayesQda => "bayes_qda",
            ClassifierKind::MleQda => "mle_qda",
            ClassifierKind::Lda => "lda",
            ClassifierKind::Prototype => "prototype",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorInit {
    /// Moments of the training features (see [`empirical_prior`]).
    #[default]
    Empirical,
    /// η = 0, λ = 1, Ψ = I, ν = d.
    Standard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorStageConfig {
    pub init: PriorInit,
    /// Meta-training tasks; zero keeps the initial prior.
    pub tasks: usize,
    pub query_per_class: usize,
    /// Task-weighted outer loop with alignment; plain episodic fit otherwise.
    pub domain_aware: bool,
    /// Drop samples the filter rejects before each outer step.
    pub use_filter: bool,
    pub outer: OuterConfig,
    /// Step size of the plain fit.
    pub lr: f64,
    /// Shift every task, and the evaluation episodes, so the mean of the
    /// support class means sits at the origin.
    pub center_tasks: bool,
}

impl Default for PriorStageConfig {
    fn default() -> Self {
        Self {
            init: PriorInit::Empirical,
            tasks: 500,
            query_per_class: 5,
            domain_aware: false,
            use_filter: true,
            outer: OuterConfig::default(),
            lr: 1e-2,
            center_tasks: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub enabled: bool,
    /// Defaults to the encoder's budget t_meta + t_sl.
    pub iterations: Option<usize>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            iterations: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Largest way; defaults to the number of in-distribution classes.
    pub max_n: Option<usize>,
    pub n_tasks: usize,
    pub query_size: usize,
    pub ood_quantile: f64,
    pub tau_c: f64,
    pub tau_c_sweep: Vec<f64>,
    pub calibration: AbceConfig,
    pub lda_shrinkage: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_n: None,
            n_tasks: 100,
            query_size: QUERY_SIZE,
            ood_quantile: 0.95,
            tau_c: 0.8,
            tau_c_sweep: vec![0.7, 0.8, 0.9],
            calibration: AbceConfig::default(),
            lda_shrinkage: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Generated when no dataset path is given; defaults to the synthetic set.
    #[serde(default)]
    pub manifest: Option<DatasetManifest>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default)]
    pub metric: MetricMode,
    #[serde(default)]
    pub classifier: ClassifierKind,
    #[serde(default)]
    pub ssl: SslConfig,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default)]
    pub filter: FilterTrainConfig,
    #[serde(default)]
    pub prior: PriorStageConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_feature_dim() -> usize {
    16
}

impl RunConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            dataset: None,
            manifest: None,
            out_dir: default_out_dir(),
            split: SplitConfig::default(),
            feature_dim: default_feature_dim(),
            metric: MetricMode::default(),
            classifier: ClassifierKind::default(),
            ssl: SslConfig::default(),
            baseline: BaselineConfig::default(),
            filter: FilterTrainConfig::default(),
            prior: PriorStageConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 {
            return Err(Error::param("feature_dim must be at least 2"));
        }
        self.ssl.validate()?;
        if let Some(p) = &self.dataset {
            if !p.exists() {
                return Err(Error::input(format!(
                    "dataset {} does not exist",
                    p.display()
                )));
            }
        }
        if let Some(m) = &self.manifest {
            m.validate()?;
        }
        if self.split.train_conditions.is_empty() || self.split.test_conditions.is_empty() {
            return Err(Error::param("train and test conditions must be non-empty"));
        }
        let e = &self.eval;
        if !(e.ood_quantile > 0.0 && e.ood_quantile < 1.0) {
            return Err(Error::param("ood_quantile must lie in (0, 1)"));
        }
        if e.tau_c_sweep
            .iter()
            .chain([&e.tau_c])
            .any(|t| !(0.0..=1.0).contains(t))
        {
            return Err(Error::param("confidence thresholds must lie in [0, 1]"));
        }
        if e.query_size == 0 {
            return Err(Error::param("query_size must be positive"));
        }
        if self.prior.query_per_class == 0 {
            return Err(Error::param("prior query_per_class must be positive"));
        }
        Ok(())
    }

    fn baseline_train(&self) -> ProtoTrainConfig {
        ProtoTrainConfig {
            iterations: self
                .baseline
                .iterations
                .unwrap_or(self.ssl.t_meta + self.ssl.t_sl),
            shots: self.ssl.shots,
            queries: self.ssl.queries,
            lr: self.ssl.lr,
        }
    }

    /// Fingerprint of everything a stage's artifacts depend on.
    pub fn fingerprint(&self, stage: Stage) -> String {
        let own = match stage {
            Stage::Data => serde_json::json!([self.seed, self.dataset, self.manifest, self.split]),
            Stage::Propagation | Stage::Ssl => {
                serde_json::json!([self.feature_dim, self.metric, self.ssl])
            }
            Stage::Baseline => {
                serde_json::json!([self.feature_dim, self.baseline, self.baseline_train()])
            }
            Stage::Filter => serde_json::json!([self.filter, self.eval.ood_quantile]),
            Stage::Prior => serde_json::json!([self.prior]),
            Stage::Evaluate => serde_json::json!([self.classifier, self.eval]),
        };
        let parent = match stage {
            Stage::Data => String::new(),
            Stage::Propagation | Stage::Baseline => self.fingerprint(Stage::Data),
            Stage::Ssl => self.fingerprint(Stage::Propagation),
            Stage::Filter => self.fingerprint(Stage::Ssl),
            Stage::Prior => self.fingerprint(Stage::Filter),
            Stage::Evaluate => format!(
                "{}{}",
                self.fingerprint(Stage::Prior),
                self.fingerprint(Stage::Baseline)
            ),
        };
        format!(
            "{:016x}",
            fnv1a(&format!("{}|{}|{}", stage.name(), parent, own))
        )
    }
}

// ---- stage products ----------------------------------------------------

/// The run's view of the dataset. In-distribution labels are remapped to
/// 0..K in class order; OOD samples keep their original class position.
#[derive(Debug, Clone)]
pub struct Data {
    pub file: DatasetFile,
    pub classes: Vec<usize>,
    pub ood_classes: Vec<usize>,
    pub labeled: Vec<Signal>,
    /// Labels stripped.
    pub unlabeled: Vec<Signal>,
    /// Hidden labels of `unlabeled`, kept only for reporting.
    pub unlabeled_truth: Vec<usize>,
    pub test: Vec<Signal>,
    pub ood: Vec<Signal>,
}

impl Data {
    pub fn class_names(&self) -> Vec<String> {
        self.classes
            .iter()
            .map(|&c| self.file.manifest.classes[c].label.clone())
            .collect()
    }

    pub fn ood_names(&self) -> Vec<String> {
        self.ood_classes
            .iter()
            .map(|&c| self.file.manifest.classes[c].label.clone())
            .collect()
    }
}

/// Holds out OOD classes, then draws labeled and unlabeled sets from the
/// training conditions and keeps the rest of the test conditions for evaluation.
pub fn split_data(file: DatasetFile, cfg: &SplitConfig, seed: u64) -> Result<Data> {
    let n_classes = file.manifest.classes.len();
    let n_conds = file.manifest.conditions.len();
    for &c in &cfg.ood_classes {
        if c >= n_classes {
            return Err(Error::param(format!("OOD class {c} out of range")));
        }
    }
    for &c in cfg.train_conditions.iter().chain(&cfg.test_conditions) {
        if c >= n_conds {
            return Err(Error::param(format!("condition {c} out of range")));
        }
    }
    let classes: Vec<usize> = (0..n_classes)
        .filter(|c| !cfg.ood_classes.contains(c))
        .collect();
    if classes.len() < 2 {
        return Err(Error::InsufficientData(
            "at least two in-distribution classes are required".into(),
        ));
    }
    let unlabeled_counts = if cfg.unlabeled_counts.is_empty() {
        default_unlabeled_counts(classes.len())
    } else {
        cfg.unlabeled_counts.clone()
    };
    if unlabeled_counts.len() != classes.len() {
        return Err(Error::param(format!(
            "unlabeled_counts must list {} in-distribution classes",
            classes.len()
        )));
    }
    let signals = file.signals()?;
    let mut r = rng::stream(seed, "split");
    let mut used = vec![false; signals.len()];
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    let mut unlabeled_truth = Vec::new();
    for (k, &c) in classes.iter().enumerate() {
        let mut idx: Vec<usize> = (0..signals.len())
            .filter(|&i| {
                signals[i].label == Some(c) && cfg.train_conditions.contains(&signals[i].condition)
            })
            .collect();
        let need = cfg.labeled_per_class + unlabeled_counts[k];
        if need > idx.len() {
            return Err(Error::InsufficientData(format!(
                "class {c} has {} training samples, {need} requested",
                idx.len()
            )));
        }
        idx.shuffle(&mut r);
        for (j, &i) in idx[..need].iter().enumerate() {
            used[i] = true;
            let mut s = signals[i].clone();
            if j < cfg.labeled_per_class {
                s.label = Some(k);
                labeled.push(s);
            } else {
                s.label = None;
                unlabeled.push(s);
                unlabeled_truth.push(k);
            }
        }
    }
    let mut test = Vec::new();
    let mut ood = Vec::new();
    for (i, s) in signals.iter().enumerate() {
        if used[i] || !cfg.test_conditions.contains(&s.condition) {
            continue;
        }
        let c = s.label.expect("dataset samples are labeled");
        match classes.iter().position(|&x| x == c) {
            Some(k) => test.push(s.clone().with_label(k)),
            None => ood.push(s.clone()),
        }
    }
    Ok(Data {
        file,
        classes,
        ood_classes: cfg.ood_classes.clone(),
        labeled,
        unlabeled,
        unlabeled_truth,
        test,
        ood,
    })
}

/// Per-dimension standardization fitted on the training pool features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::InsufficientData("no features".into()))?;
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std = var.into_iter().map(|v| v.sqrt().max(1e-8)).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn apply_all(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.apply(r)).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SslSummary {
    pub labeled: usize,
    pub injected: usize,
    pub pseudo_labeled: usize,
    pub pseudo_label_accuracy: Option<f64>,
    /// Mean pairwise distance between labeled class prototypes, in
    /// standardized feature units.
    pub prototype_spread: f64,
    pub standardizer: Standardizer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterSummary {
    pub tau_ood: f64,
    pub curve: Vec<f64>,
    pub negatives: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorSummary {
    pub phi: NiwParams,
    pub curve: Vec<f64>,
}

// ---- metrics -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalBrief {
    pub mean_std_acc: Option<f64>,
    pub ci95: f64,
    pub n_tasks: usize,
}

impl From<&EvalSummary> for EvalBrief {
    fn from(s: &EvalSummary) -> Self {
        Self {
            mean_std_acc: s.mean_std_acc,
            ci95: s.ci95,
            n_tasks: s.n_tasks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterMetrics {
    pub tau_ood: f64,
    pub tau_c: f64,
    pub ece: Option<f64>,
    pub abce: Option<f64>,
    pub test_kept: usize,
    pub test_rejected_ood: usize,
    pub test_rejected_lowconf: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodMetrics {
    pub auroc_diff_entropy: f64,
    pub auroc_p_max: f64,
    pub auroc_joint: f64,
    pub n_in: usize,
    pub n_ood: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorMetrics {
    pub lambda: f64,
    pub nu: f64,
    pub psi_trace: f64,
    pub eta_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SslMetrics {
    pub labeled: usize,
    pub injected: usize,
    pub pseudo_labeled: usize,
    pub pseudo_label_accuracy: Option<f64>,
    pub prototype_spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub seed: u64,
    pub classifier: String,
    pub classes: Vec<String>,
    pub ood_classes: Vec<String>,
    pub eval: EvalBrief,
    pub baseline: Option<EvalBrief>,
    pub gain_over_baseline: Option<f64>,
    pub ece: Option<f64>,
    pub abce: Option<f64>,
    pub bins: usize,
    /// Episodes in which the classifier could not be fit and predicted uniformly.
    pub singular_episodes: usize,
    pub rejection: Vec<RejectionResult>,
    pub filter: FilterMetrics,
    pub ood: Option<OodMetrics>,
    pub ssl: SslMetrics,
    pub prior: PriorMetrics,
}

impl Metrics {
    /// Every number must be finite; absent values are explicit nulls.
    pub fn validate(&self) -> Result<()> {
        let mut xs: Vec<(&str, f64)> = vec![
            ("eval.ci95", self.eval.ci95),
            ("filter.tau_ood", self.filter.tau_ood),
            ("filter.tau_c", self.filter.tau_c),
            ("ssl.prototype_spread", self.ssl.prototype_spread),
            ("prior.lambda", self.prior.lambda),
            ("prior.nu", self.prior.nu),
            ("prior.psi_trace", self.prior.psi_trace),
            ("prior.eta_norm", self.prior.eta_norm),
        ];
        let opts = [
            ("eval.mean_std_acc", self.eval.mean_std_acc),
            ("gain_over_baseline", self.gain_over_baseline),
            ("ece", self.ece),
            ("abce", self.abce),
            ("filter.ece", self.filter.ece),
            ("filter.abce", self.filter.abce),
            ("ssl.pseudo_label_accuracy", self.ssl.pseudo_label_accuracy),
        ];
        xs.extend(opts.iter().filter_map(|(k, v)| v.map(|v| (*k, v))));
        if let Some(b) = &self.baseline {
            xs.push(("baseline.ci95", b.ci95));
            if let Some(m) = b.mean_std_acc {
                xs.push(("baseline.mean_std_acc", m));
            }
        }
        if let Some(o) = &self.ood {
            xs.extend([
                ("ood.auroc_diff_entropy", o.auroc_diff_entropy),
                ("ood.auroc_p_max", o.auroc_p_max),
                ("ood.auroc_joint", o.auroc_joint),
            ]);
        }
        for r in &self.rejection {
            xs.push(("rejection.tau_c", r.tau_c));
            xs.push(("rejection.kept_fraction", r.kept_fraction));
            if let Some(a) = r.accuracy {
                xs.push(("rejection.accuracy", a));
            }
        }
        match xs.iter().find(|(_, v)| !v.is_finite()) {
            Some((k, v)) => Err(Error::NumericalFailure(format!("metric {k} is {v}"))),
            None => Ok(()),
        }
    }
}

// ---- helpers -----------------------------------------------------------

fn refs(v: &[Signal]) -> Vec<&Signal> {
    v.iter().collect()
}

/// Cross-class half splices under a strong perturbation, alternating with
/// white-noise signals of the same shape.
pub fn synthetic_negatives(
    labeled: &[&Signal],
    n: usize,
    set: &PerturbSet,
    seed: u64,
) -> Result<Vec<Signal>> {
    let first = labeled
        .first()
        .ok_or_else(|| Error::InsufficientData("no labeled samples".into()))?;
    let (ch, len, fs) = (first.channels(), first.len(), first.sample_rate);
    let mut r = rng::stream(seed, "negatives");
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let a = labeled[r.random_range(0..labeled.len())];
        let others: Vec<&&Signal> = labeled.iter().filter(|s| s.label != a.label).collect();
        let s = match others.as_slice() {
            [] => None,
            os if i % 2 == 0 => {
                let b = os[r.random_range(0..os.len())];
                let mut v = Vec::with_capacity(ch * len);
                for c in 0..ch {
                    v.extend_from_slice(&a.channel(c)[..len / 2]);
                    v.extend_from_slice(&b.channel(c)[len / 2..]);
                }
                let spliced = Signal::new(v, ch, fs)?;
                Some(PerturbSet::apply_random(
                    &set.strong,
                    &spliced,
                    None,
                    &mut r,
                )?)
            }
            _ => None,
        };
        let s = match s {
            Some(s) => s,
            None => {
                let v: Vec<f64> = (0..ch * len).map(|_| r.sample(StandardNormal)).collect();
                Signal::new(v, ch, fs)?
            }
        };
        out.push(s.with_source(format!("negative#{i}")));
    }
    Ok(out)
}

/// Training tasks for the prior: each drawn from a single training condition
/// when it holds two classes with at least two samples each.
pub fn prior_tasks(
    rows: &[(Vec<f64>, usize, usize)],
    n_tasks: usize,
    query_per_class: usize,
    seed: u64,
) -> Result<Vec<FeatureTask>> {
    let mut by_cond: BTreeMap<usize, BTreeMap<usize, Vec<usize>>> = BTreeMap::new();
    let mut pooled: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, (_, c, cond)) in rows.iter().enumerate() {
        by_cond
            .entry(*cond)
            .or_default()
            .entry(*c)
            .or_default()
            .push(i);
        pooled.entry(*c).or_default().push(i);
    }
    let eligible = |m: &BTreeMap<usize, Vec<usize>>| -> Vec<Vec<usize>> {
        m.values().filter(|v| v.len() >= 2).cloned().collect()
    };
    let domains: Vec<Vec<Vec<usize>>> = by_cond
        .values()
        .map(eligible)
        .filter(|d| d.len() >= 2)
        .collect();
    let domains = if domains.is_empty() {
        let all = eligible(&pooled);
        if all.len() < 2 {
            return Err(Error::InsufficientData(
                "prior tasks need two classes with two samples".into(),
            ));
        }
        vec![all]
    } else {
        domains
    };
    (0..n_tasks)
        .map(|t| {
            let mut r = rng::indexed_stream(seed, "prior-task", t as u64);
            let dom = &domains[r.random_range(0..domains.len())];
            let n_way = r.random_range(2..=dom.len());
            let mut picked: Vec<usize> =
                rand::seq::index::sample(&mut r, dom.len(), n_way).into_vec();
            picked.sort_unstable();
            let mut task = FeatureTask {
                support: Vec::with_capacity(n_way),
                query: Vec::with_capacity(n_way),
            };
            for p in picked {
                let mut members = dom[p].clone();
                members.shuffle(&mut r);
                let k = r.random_range(1..=MAX_SHOTS.min(members.len() - 1));
                let q = query_per_class.min(members.len() - k);
                task.support
                    .push(members[..k].iter().map(|&i| rows[i].0.clone()).collect());
                task.query.push(
                    members[k..k + q]
                        .iter()
                        .map(|&i| rows[i].0.clone())
                        .collect(),
                );
            }
            Ok(task)
        })
        .collect()
}

/// Subtracts the mean of the support class means from support and query.
pub fn center_task(support: &mut [Vec<Vec<f64>>], query: &mut [Vec<f64>]) {
    if let Some(c) = support_center(support) {
        support
            .iter_mut()
            .flatten()
            .chain(query.iter_mut())
            .for_each(|x| shift(x, &c));
    }
}

fn center_feature_task(t: &mut FeatureTask) {
    if let Some(c) = support_center(&t.support) {
        t.support
            .iter_mut()
            .chain(t.query.iter_mut())
            .flatten()
            .for_each(|x| shift(x, &c));
    }
}

fn support_center(support: &[Vec<Vec<f64>>]) -> Option<Vec<f64>> {
    let means: Vec<Vec<f64>> = support
        .iter()
        .filter(|c| !c.is_empty())
        .map(|c| mean_row(c))
        .collect();
    (!means.is_empty()).then(|| mean_row(&means))
}

fn shift(x: &mut [f64], c: &[f64]) {
    x.iter_mut().zip(c).for_each(|(v, m)| *v -= m);
}

fn mean_row(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        m.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    m.iter_mut().for_each(|a| *a /= rows.len() as f64);
    m
}

/// Centres each condition's rows on the mean of its class means.
pub fn center_by_condition(rows: &[(Vec<f64>, usize, usize)]) -> Vec<(Vec<f64>, usize, usize)> {
    let mut groups: BTreeMap<usize, BTreeMap<usize, Vec<Vec<f64>>>> = BTreeMap::new();
    for (x, c, cond) in rows {
        groups
            .entry(*cond)
            .or_default()
            .entry(*c)
            .or_default()
            .push(x.clone());
    }
    let centers: BTreeMap<usize, Vec<f64>> = groups
        .iter()
        .map(|(cond, by_class)| {
            (
                *cond,
                mean_row(&by_class.values().map(|v| mean_row(v)).collect::<Vec<_>>()),
            )
        })
        .collect();
    rows.iter()
        .map(|(x, c, cond)| {
            (
                x.iter().zip(&centers[cond]).map(|(v, m)| v - m).collect(),
                *c,
                *cond,
            )
        })
        .collect()
}

/// Empirical-Bayes NIW prior from labeled rows. η is the mean of class
/// means and λ the ratio of within- to between-class variance. Ψ and ν carry
/// the pooled class-centred scatter as observations: ν = (n − K) + d + 1 and
/// Ψ = (ν − d − 1)·W, so that E[Σ] = W, the pooled within-class covariance.
pub fn empirical_prior(rows: &[(Vec<f64>, usize)]) -> Result<NiwParams> {
    let d = rows
        .first()
        .map(|r| r.0.len())
        .ok_or_else(|| Error::InsufficientData("no features".into()))?;
    let mut groups: BTreeMap<usize, Vec<&Vec<f64>>> = BTreeMap::new();
    for (x, c) in rows {
        groups.entry(*c).or_default().push(x);
    }
    let means: Vec<Vec<f64>> = groups
        .values()
        .map(|g| {
            (0..d)
                .map(|j| g.iter().map(|x| x[j]).sum::<f64>() / g.len() as f64)
                .collect()
        })
        .collect();
    let eta: Vec<f64> = (0..d)
        .map(|j| means.iter().map(|m| m[j]).sum::<f64>() / means.len() as f64)
        .collect();
    let mut within = DMatrix::<f64>::zeros(d, d);
    for (g, m) in groups.values().zip(&means) {
        for x in g {
            let v = nalgebra::DVector::from_iterator(d, x.iter().zip(m).map(|(a, b)| a - b));
            within += &v * v.transpose();
        }
    }
    let dof = rows.len().saturating_sub(groups.len()).max(1) as f64;
    let within = within / dof;
    let ridge = 1e-3 * (within.trace() / d as f64).max(1e-6);
    let within = within + DMatrix::identity(d, d) * ridge;
    let nu = dof + d as f64 + 1.0;
    let psi = &within * (nu - d as f64 - 1.0);
    let between: f64 = means
        .iter()
        .map(|m| {
            m.iter()
                .zip(&eta)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum::<f64>()
        / means.len().saturating_sub(1).max(1) as f64;
    let lambda = if between > 0.0 {
        (within.trace() / between).clamp(1e-3, 1e3)
    } else {
        1.0
    };
    let phi = NiwParams {
        eta: nalgebra::DVector::from_vec(eta),
        lambda,
        psi,
        nu,
    };
    phi.validate()?;
    Ok(phi)
}

/// Midranks scaled to (0, 1].
fn normalized_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = mid / n as f64;
        }
        i = j + 1;
    }
    ranks
}

/// Projection onto the two leading principal components. Each axis is signed
/// so that its largest-magnitude loading is positive.
pub fn pca2(rows: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = rows.len();
    let d = rows
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::InsufficientData("no rows".into()))?;
    if d < 2 {
        return Err(Error::input("PCA needs at least two dimensions"));
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let cov = x.transpose() * &x / (n.max(2) - 1) as f64;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes: Vec<Vec<f64>> = order[..2]
        .iter()
        .map(|&c| {
            let v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let lead = v
                .iter()
                .copied()
                .fold(0.0_f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if lead < 0.0 {
                v.iter().map(|x| -x).collect()
            } else {
                v
            }
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let row = x.row(i);
            let p = |a: &Vec<f64>| row.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
            [p(&axes[0]), p(&axes[1])]
        })
        .collect())
}

fn calibration_of(
    records: &[PredictionRecord],
    k: usize,
    cfg: &AbceConfig,
) -> Result<(
    Option<f64>,
    Option<f64>,
    Option<crate::calibration::ReliabilityBins>,
)> {
    if records.is_empty() {
        return Ok((None, None, None));
    }
    let bins = bin_reliability(records, cfg.bins)?;
    let e = ece(&bins, records.len())?;
    let a = abce(records, &class_confidence(records, k), cfg)?;
    Ok((Some(e), Some(a), Some(bins)))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

fn write_log(path: &Path, logs: &[IterLog]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for l in logs {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct RunState {
    stages: BTreeMap<String, String>,
}

// ---- runner ------------------------------------------------------------

/// Stage runner over one run directory.
pub struct Pipeline {
    pub cfg: RunConfig,
    dir: PathBuf,
    state: RunState,
    data: Option<Data>,
    phase1: Option<(FeatureEncoder, Metric)>,
    encoder: Option<FeatureEncoder>,
    ssl: Option<SslSummary>,
    baseline: Option<Option<FeatureEncoder>>,
    filter: Option<(FilterHead, FilterSummary)>,
    prior: Option<PriorSummary>,
    train_pool: Option<Vec<Signal>>,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let dir = cfg.out_dir.clone();
        fs::create_dir_all(dir.join("checkpoints"))?;
        fs::create_dir_all(dir.join("logs"))?;
        let state_path = dir.join("state.json");
        let state = if state_path.exists() {
            read_json(&state_path).unwrap_or_default()
        } else {
            RunState::default()
        };
        write_json(&dir.join("config.json"), &cfg)?;
        Ok(Self {
            cfg,
            dir,
            state,
            data: None,
            phase1: None,
            encoder: None,
            ssl: None,
            baseline: None,
            filter: None,
            prior: None,
            train_pool: None,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn ckpt(&self, name: &str) -> PathBuf {
        self.dir.join("checkpoints").join(name)
    }

    fn completed(&self, stage: Stage) -> bool {
        self.state.stages.get(stage.name()) == Some(&self.cfg.fingerprint(stage))
    }

    fn mark(&mut self, stage: Stage) -> Result<()> {
        self.state
            .stages
            .insert(stage.name().into(), self.cfg.fingerprint(stage));
        write_json(&self.dir.join("state.json"), &self.state)
    }

    /// Runs every stage up to `target`. Earlier stages whose checkpoints match
    /// the configuration are loaded when `reuse` is set; `target` itself
    /// always runs unless it is also reusable and `reuse_target` is set.
    pub fn execute(
        &mut self,
        target: Stage,
        reuse: bool,
        reuse_target: bool,
    ) -> Result<Option<Metrics>> {
        let mut metrics = None;
        for stage in Stage::ALL.into_iter().filter(|s| *s <= target) {
            let reuse_here = reuse && (stage != target || reuse_target);
            let out = self
                .run_stage(stage, reuse_here)
                .map_err(|e| e.in_stage(stage.name()))?;
            if out.is_some() {
                metrics = out;
            }
        }
        Ok(metrics)
    }

    /// Full run; with `resume`, matching checkpoints are reused.
    pub fn run(&mut self, resume: bool) -> Result<Metrics> {
        self.execute(Stage::Evaluate, resume, false)?
            .ok_or_else(|| Error::ModelNotReady("evaluation produced no metrics".into()))
    }

    fn run_stage(&mut self, stage: Stage, reuse: bool) -> Result<Option<Metrics>> {
        let reusable = reuse && self.completed(stage);
        if reusable {
            match self.load_stage(stage) {
                Ok(()) => {
                    log::info!("stage {}: loaded checkpoint", stage.name());
                    return Ok(None);
                }
                Err(e) => log::warn!(
                    "stage {}: checkpoint unusable ({e}); recomputing",
                    stage.name()
                ),
            }
        }
        log::info!("stage {}: running", stage.name());
        let out = match stage {
            Stage::Data => self.stage_data().map(|_| None),
            Stage::Propagation => self.stage_propagation().map(|_| None),
            Stage::Ssl => self.stage_ssl().map(|_| None),
            Stage::Baseline => self.stage_baseline().map(|_| None),
            Stage::Filter => self.stage_filter().map(|_| None),
            Stage::Prior => self.stage_prior().map(|_| None),
            Stage::Evaluate => self.stage_evaluate().map(Some),
        }?;
        self.mark(stage)?;
        Ok(out)
    }

    fn load_stage(&mut self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Data => {
                let file = match &self.cfg.dataset {
                    Some(p) => datagen::load(p)?,
                    None => datagen::load(&self.dir.join("data.ubmf"))?,
                };
                self.data = Some(split_data(file, &self.cfg.split, self.cfg.seed)?);
            }
            Stage::Propagation => {
                let (net, _) = load_network(&self.ckpt("encoder_phase1.ckpt"))?;
                let metric = match self.cfg.metric {
                    MetricMode::Learned => Metric::Learned(MetricEncoder {
                        net: load_network(&self.ckpt("metric.ckpt"))?.0,
                    }),
                    MetricMode::Unit => Metric::Unit,
                };
                self.phase1 = Some((FeatureEncoder { net }, metric));
            }
            Stage::Ssl => {
                let (net, _) = load_network(&self.ckpt("encoder.ckpt"))?;
                self.encoder = Some(FeatureEncoder { net });
                self.ssl = Some(read_json(&self.ckpt("ssl.json"))?);
            }
            Stage::Baseline => {
                self.baseline = Some(if self.cfg.baseline.enabled {
                    Some(FeatureEncoder {
                        net: load_network(&self.ckpt("protonet.ckpt"))?.0,
                    })
                } else {
                    None
                });
            }
            Stage::Filter => {
                let head = FilterHead::load(&self.ckpt("filter.ckpt"))?;
                self.filter = Some((head, read_json(&self.ckpt("filter.json"))?));
            }
            Stage::Prior => self.prior = Some(read_json(&self.ckpt("prior.json"))?),
            Stage::Evaluate => return Err(Error::Unsupported("evaluation is never reused".into())),
        }
        Ok(())
    }

    fn data(&self) -> Result<&Data> {
        self.data
            .as_ref()
            .ok_or_else(|| Error::ModelNotReady("data stage has not run".into()))
    }

    fn seed(&self, label: &str) -> u64 {
        derive_seed(self.cfg.seed, label)
    }

    fn stage_data(&mut self) -> Result<()> {
        let file = match &self.cfg.dataset {
            Some(p) => datagen::load(p)?,
            None => {
                let manifest =
                    self.cfg.manifest.clone().unwrap_or_else(|| {
                        DatasetManifest::default_synthetic(self.seed("dataset"))
                    });
                let file = datagen::generate(&manifest)?;
                datagen::save(&file, &self.dir.join("data.ubmf"))?;
                file
            }
        };
        self.data = Some(split_data(file, &self.cfg.split, self.cfg.seed)?);
        self.train_pool = None;
        Ok(())
    }

    fn new_encoder(&self, label: &str) -> Result<FeatureEncoder> {
        let d = self.data()?;
        let s = d
            .labeled
            .first()
            .ok_or_else(|| Error::InsufficientData("no labeled samples".into()))?;
        FeatureEncoder::new(
            s.channels(),
            s.len(),
            self.cfg.feature_dim,
            &mut rng::stream(self.cfg.seed, label),
        )
    }

    fn stage_propagation(&mut self) -> Result<()> {
        let mut enc = self.new_encoder("encoder/init")?;
        let mut metric = match self.cfg.metric {
            MetricMode::Learned => Metric::Learned(MetricEncoder::new(
                self.cfg.feature_dim,
                &mut rng::stream(self.cfg.seed, "metric/init"),
            )?),
            MetricMode::Unit => Metric::Unit,
        };
        let d = self.data()?;
        let logs = run_pseudo_label_phase(
            &refs(&d.labeled),
            &refs(&d.unlabeled),
            &mut enc,
            &mut metric,
            &self.cfg.ssl,
            self.seed("propagation"),
        )?;
        write_log(&self.dir.join("logs").join("propagation.jsonl"), &logs)?;
        save_network(
            &self.ckpt("encoder_phase1.ckpt"),
            &enc.net,
            "encoder",
            self.cfg.seed,
            logs.len() as u64,
        )?;
        if let Metric::Learned(m) = &metric {
            save_network(
                &self.ckpt("metric.ckpt"),
                &m.net,
                "metric",
                self.cfg.seed,
                logs.len() as u64,
            )?;
        }
        self.phase1 = Some((enc, metric));
        Ok(())
    }

    fn phase1(&self) -> Result<&(FeatureEncoder, Metric)> {
        self.phase1
            .as_ref()
            .ok_or_else(|| Error::ModelNotReady("propagation stage has not run".into()))
    }

    fn encoder(&self) -> Result<&FeatureEncoder> {
        self.encoder
            .as_ref()
            .ok_or_else(|| Error::ModelNotReady("SSL stage has not run".into()))
    }

    fn injected(&self) -> Result<Vec<Signal>> {
        let d = self.data()?;
        inject_perturbed(
            &refs(&d.labeled),
            self.cfg.ssl.injection_ratio,
            &self.cfg.ssl.perturbations,
            self.seed("injection"),
        )
    }

    fn stage_ssl(&mut self) -> Result<()> {
        let (enc0, metric) = self.phase1()?;
        let d = self.data()?;
        let labeled = refs(&d.labeled);
        let unlabeled = refs(&d.unlabeled);
        let pseudo = pseudo_label_pool(&labeled, &unlabeled, enc0, metric, self.cfg.ssl.tau_p)?;
        let injected = self.injected()?;
        let pool: Vec<&Signal> = labeled
            .iter()
            .copied()
            .chain(&injected)
            .chain(&pseudo)
            .collect();
        let mut enc = enc0.clone();
        let logs = run_ssl_phase(
            &pool,
            &unlabeled,
            &mut enc,
            metric,
            &self.cfg.ssl,
            self.seed("ssl"),
        )?;
        write_log(&self.dir.join("logs").join("ssl.jsonl"), &logs)?;
        save_network(
            &self.ckpt("encoder.ckpt"),
            &enc.net,
            "encoder",
            self.cfg.seed,
            logs.len() as u64,
        )?;

        let final_pseudo =
            pseudo_label_pool(&labeled, &unlabeled, &enc, metric, self.cfg.ssl.tau_p)?;
        let truth: HashMap<&str, usize> = d
            .unlabeled
            .iter()
            .zip(&d.unlabeled_truth)
            .map(|(s, &t)| (s.source_id.as_str(), t))
            .collect();
        let hits = final_pseudo
            .iter()
            .filter(|s| truth.get(s.source_id.as_str()).copied() == s.label)
            .count();
        let pool: Vec<&Signal> = labeled
            .iter()
            .copied()
            .chain(&injected)
            .chain(&final_pseudo)
            .collect();
        let standardizer = Standardizer::fit(&enc.encode_batch(&pool)?)?;
        let lab_feats = standardizer.apply_all(&enc.encode_batch(&labeled)?);
        let tagged: Vec<(Vec<f64>, usize)> = lab_feats
            .into_iter()
            .zip(&d.labeled)
            .map(|(f, s)| (f, s.label.unwrap_or(0)))
            .collect();
        let summary = SslSummary {
            labeled: labeled.len(),
            injected: injected.len(),
            pseudo_labeled: final_pseudo.len(),
            pseudo_label_accuracy: (!final_pseudo.is_empty())
                .then(|| hits as f64 / final_pseudo.len() as f64),
            prototype_spread: prototype_spread(&class_prototypes(&tagged)?),
            standardizer,
        };
        write_json(&self.ckpt("ssl.json"), &summary)?;
        self.encoder = Some(enc);
        self.ssl = Some(summary);
        self.train_pool = None;
        Ok(())
    }

    /// Labeled, injected and final pseudo-labeled samples.
    fn train_pool(&mut self) -> Result<&[Signal]> {
        if self.train_pool.is_none() {
            let enc = self.encoder()?;
            let d = self.data()?;
            let metric = match self.cfg.metric {
                MetricMode::Learned => &self.phase1()?.1,
                MetricMode::Unit => &Metric::Unit,
            };
            let pseudo = pseudo_label_pool(
                &refs(&d.labeled),
                &refs(&d.unlabeled),
                enc,
                metric,
                self.cfg.ssl.tau_p,
            )?;
            let mut pool = d.labeled.clone();
            pool.extend(self.injected()?);
            pool.extend(pseudo);
            self.train_pool = Some(pool);
        }
        Ok(self.train_pool.as_deref().unwrap_or_default())
    }

    fn standardizer(&self) -> Result<&Standardizer> {
        Ok(&self
            .ssl
            .as_ref()
            .ok_or_else(|| Error::ModelNotReady("SSL stage has not run".into()))?
            .standardizer)
    }

    /// Standardized features of the training pool with class and condition.
    fn train_rows(&mut self) -> Result<Vec<(Vec<f64>, usize, usize)>> {
        let pool = self.train_pool()?.to_vec();
        let enc = self.encoder()?;
        let st = self.standardizer()?;
        let feats = enc.encode_batch(&refs(&pool))?;
        Ok(feats
            .iter()
            .zip(&pool)
            .map(|(f, s)| (st.apply(f), s.label.unwrap_or(0), s.condition))
            .collect())
    }

    fn stage_baseline(&mut self) -> Result<()> {
        if !self.cfg.baseline.enabled {
            self.baseline = Some(None);
            return Ok(());
        }
        let mut enc = self.new_encoder("baseline/init")?;
        let curve = train_protonet(
            &refs(&self.data()?.labeled),
            &mut enc,
            &self.cfg.baseline_train(),
            self.seed("baseline"),
        )?;
        save_network(
            &self.ckpt("protonet.ckpt"),
            &enc.net,
            "protonet",
            self.cfg.seed,
            curve.len() as u64,
        )?;
        self.baseline = Some(Some(enc));
        Ok(())
    }

    fn stage_filter(&mut self) -> Result<()> {
        let rows = self.train_rows()?;
        let k = self.data()?.classes.len();
        let ind: Vec<(Vec<f64>, usize)> = rows.iter().map(|(f, c, _)| (f.clone(), *c)).collect();
        let negatives = synthetic_negatives(
            &refs(&self.data()?.labeled),
            ind.len() / 2,
            &self.cfg.ssl.perturbations,
            self.seed("filter/negatives"),
        )?;
        let enc = self.encoder()?;
        let ood = self
            .standardizer()?
            .apply_all(&enc.encode_batch(&refs(&negatives))?);
        let mut head = FilterHead::mlp(
            self.cfg.feature_dim,
            self.cfg.filter.hidden,
            k,
            &mut rng::stream(self.cfg.seed, "filter/init"),
        )?;
        let curve = train_filter(&mut head, &ind, &ood, &self.cfg.filter, self.seed("filter"))?;
        let in_rows: Vec<Vec<f64>> = ind.into_iter().map(|(f, _)| f).collect();
        let tau_ood = entropy_threshold(&head, &in_rows, self.cfg.eval.ood_quantile)?;
        let summary = FilterSummary {
            tau_ood,
            curve,
            negatives: negatives.len(),
        };
        head.save(
            &self.ckpt("filter.ckpt"),
            self.cfg.seed,
            summary.curve.len() as u64,
        )?;
        write_json(&self.ckpt("filter.json"), &summary)?;
        self.filter = Some((head, summary));
        Ok(())
    }

    fn filter(&self) -> Result<&(FilterHead, FilterSummary)> {
        self.filter
            .as_ref()
            .ok_or_else(|| Error::ModelNotReady("filter stage has not run".into()))
    }

    fn thresholds(&self) -> Result<FilterThresholds> {
        let th = FilterThresholds {
            tau_ood: self.filter()?.1.tau_ood,
            tau_c: self.cfg.eval.tau_c,
        };
        th.validate()?;
        Ok(th)
    }

    fn stage_prior(&mut self) -> Result<()> {
        let rows = self.train_rows()?;
        let pc = &self.cfg.prior;
        let mut tasks = prior_tasks(&rows, pc.tasks, pc.query_per_class, self.seed("prior"))?;
        // The filter is fixed while the prior is fitted, so screening every
        // task once up front matches screening inside each outer step; it has
        // to happen before centring, on the features the filter was trained on.
        let screen = pc.domain_aware && pc.use_filter;
        if screen {
            let th = self.thresholds()?;
            let head = &self.filter()?.0;
            tasks = tasks
                .iter()
                .map(|t| prefilter_task(t, head, &th))
                .collect::<Result<_>>()?;
        }
        let rows = if pc.center_tasks {
            tasks.iter_mut().for_each(center_feature_task);
            center_by_condition(&rows)
        } else {
            rows
        };
        let phi0 = match pc.init {
            PriorInit::Standard => NiwParams::standard(self.cfg.feature_dim),
            PriorInit::Empirical => empirical_prior(
                &rows
                    .iter()
                    .map(|(x, c, _)| (x.clone(), *c))
                    .collect::<Vec<_>>(),
            )?,
        };
        let fit = if pc.domain_aware {
            domain_aware_fit(&tasks, &phi0, None, &pc.outer)?
        } else {
            meta_fit_prior(
                &tasks,
                &phi0,
                &PriorFitConfig {
                    lr: pc.lr,
                    tasks: pc.tasks,
                },
            )?
        };
        let summary = PriorSummary {
            phi: fit.phi,
            curve: fit.curve,
        };
        write_json(&self.ckpt("prior.json"), &summary)?;
        self.prior = Some(summary);
        Ok(())
    }

    fn stage_evaluate(&mut self) -> Result<Metrics> {
        let d = self.data()?;
        let cfg = &self.cfg;
        let enc = self.encoder()?;
        let st = self.standardizer()?;
        let (head, _) = self.filter()?;
        let th = self.thresholds()?;
        let phi = &self
            .prior
            .as_ref()
            .ok_or_else(|| Error::ModelNotReady("prior stage has not run".into()))?
            .phi;
        let k = d.classes.len();
        let max_n = cfg.eval.max_n.unwrap_or(k).min(k);
        let labels = labels_of(&d.test)?;
        let test_feats = st.apply_all(&enc.encode_batch(&refs(&d.test))?);
        let ood_feats = st.apply_all(&enc.encode_batch(&refs(&d.ood))?);
        let test_scores = ood_scores(head, &test_feats)?;
        let eval_seed = self.seed("evaluate");

        struct EpisodeOut {
            record: crate::tasking::TaskRecord,
            preds: Vec<PredictionRecord>,
            query: Vec<usize>,
            singular: bool,
        }
        let classifier = cfg.classifier;
        let shrink = cfg.eval.lda_shrinkage;
        let center = cfg.prior.center_tasks;
        let outs = run_episodes(
            &labels,
            max_n,
            cfg.eval.n_tasks,
            cfg.eval.query_size,
            eval_seed,
            |_, ep| {
                let support: Vec<Vec<Vec<f64>>> = ep
                    .classes
                    .iter()
                    .map(|c| {
                        ep.support
                            .iter()
                            .filter(|(_, sc)| sc == c)
                            .map(|(i, _)| test_feats[*i].clone())
                            .collect()
                    })
                    .collect();
                let mut support = support;
                let mut query: Vec<Vec<f64>> = ep
                    .query
                    .iter()
                    .map(|(i, _)| test_feats[*i].clone())
                    .collect();
                if center {
                    center_task(&mut support, &mut query);
                }
                let n = ep.classes.len();
                let mut singular = false;
                let probs: Vec<Vec<f64>> = match classifier {
                    ClassifierKind::BayesQda => {
                        let qda = BayesQda::fit(phi, &support)?;
                        query
                            .iter()
                            .map(|x| qda.predict_proba(x))
                            .collect::<Result<_>>()?
                    }
                    ClassifierKind::MleQda => match qda_fit_mle(&support) {
                        Ok(g) => query
                            .iter()
                            .map(|x| normalize_log(&qda_scores(x, &g, QdaVariant::Verbatim)?))
                            .collect::<Result<_>>()?,
                        Err(Error::SingularCovariance(_)) => {
                            singular = true;
                            vec![vec![1.0 / n as f64; n]; query.len()]
                        }
                        Err(e) => return Err(e),
                    },
                    ClassifierKind::Lda => lda_predict(&support, &query, shrink)?,
                    ClassifierKind::Prototype => {
                        let tagged: Vec<(Vec<f64>, usize)> = ep
                            .support
                            .iter()
                            .map(|(i, c)| (test_feats[*i].clone(), *c))
                            .collect();
                        protonet_predict(&tagged, &query, &ep.classes)?
                    }
                };
                let pred: Vec<usize> = probs.iter().map(|p| ep.classes[argmax(p)]).collect();
                let preds = probs
                    .iter()
                    .zip(&pred)
                    .zip(&ep.query)
                    .map(|((p, &c), (_, t))| PredictionRecord::new(p[argmax(p)], c, *t))
                    .collect::<Result<_>>()?;
                Ok(EpisodeOut {
                    record: task_record(ep, &pred)?,
                    preds,
                    query: ep.query.iter().map(|(i, _)| *i).collect(),
                    singular,
                })
            },
        )?;
        let summary = EvalSummary::from_records(outs.iter().map(|o| o.record.clone()).collect());
        let records: Vec<PredictionRecord> =
            outs.iter().flat_map(|o| o.preds.iter().copied()).collect();
        let (ece_v, abce_v, bins) = calibration_of(&records, k, &cfg.eval.calibration)?;

        let predicted: Vec<usize> = records.iter().map(|r| r.predicted).collect();
        let truth: Vec<usize> = records.iter().map(|r| r.truth).collect();
        let p_max: Vec<f64> = outs
            .iter()
            .flat_map(|o| o.query.iter().map(|&i| test_scores[i].p_max))
            .collect();
        let rejection = cfg
            .eval
            .tau_c_sweep
            .iter()
            .map(|&t| evaluate_rejection(&predicted, &truth, &p_max, t))
            .collect::<Result<Vec<_>>>()?;

        let baseline = match self.baseline.as_ref().and_then(|b| b.as_ref()) {
            Some(benc) => {
                let bfeats = benc.encode_batch(&refs(&d.test))?;
                let recs = run_episodes(
                    &labels,
                    max_n,
                    cfg.eval.n_tasks,
                    cfg.eval.query_size,
                    eval_seed,
                    |_, ep| {
                        let tagged: Vec<(Vec<f64>, usize)> = ep
                            .support
                            .iter()
                            .map(|(i, c)| (bfeats[*i].clone(), *c))
                            .collect();
                        let query: Vec<Vec<f64>> =
                            ep.query.iter().map(|(i, _)| bfeats[*i].clone()).collect();
                        let probs = protonet_predict(&tagged, &query, &ep.classes)?;
                        let pred: Vec<usize> =
                            probs.iter().map(|p| ep.classes[argmax(p)]).collect();
                        task_record(ep, &pred)
                    },
                )?;
                Some(EvalSummary::from_records(recs))
            }
            None => None,
        };

        let tagged_test: Vec<(Vec<f64>, usize)> = test_feats
            .iter()
            .cloned()
            .zip(labels.iter().copied())
            .collect();
        let (f_ece, f_abce, _) =
            calibration_of(&head_records(head, &tagged_test)?, k, &cfg.eval.calibration)?;
        let outcome = filter_dataset(head, &test_feats, &th)?;

        let ood = if d.ood.is_empty() || d.test.is_empty() {
            None
        } else {
            let ood_sc = ood_scores(head, &ood_feats)?;
            let all: Vec<(f64, f64, bool)> = test_scores
                .iter()
                .map(|s| (s.diff_entropy, s.p_max, false))
                .chain(ood_sc.iter().map(|s| (s.diff_entropy, s.p_max, true)))
                .collect();
            let de: Vec<f64> = all.iter().map(|a| a.0).collect();
            let pm: Vec<f64> = all.iter().map(|a| -a.1).collect();
            let (rde, rpm) = (normalized_ranks(&de), normalized_ranks(&pm));
            let score = |f: &dyn Fn(usize) -> f64| -> Result<f64> {
                auroc(&(0..all.len()).map(|i| (f(i), all[i].2)).collect::<Vec<_>>())
            };
            Some(OodMetrics {
                auroc_diff_entropy: score(&|i| de[i])?,
                auroc_p_max: score(&|i| pm[i])?,
                auroc_joint: score(&|i| 0.5 * (rde[i] + rpm[i]))?,
                n_in: d.test.len(),
                n_ood: d.ood.len(),
            })
        };

        let ssl = self
            .ssl
            .as_ref()
            .ok_or_else(|| Error::ModelNotReady("SSL stage has not run".into()))?;
        let metrics = Metrics {
            seed: cfg.seed,
            classifier: cfg.classifier.as_str().into(),
            classes: d.class_names(),
            ood_classes: d.ood_names(),
            eval: EvalBrief::from(&summary),
            baseline: baseline.as_ref().map(EvalBrief::from),
            gain_over_baseline: match (
                summary.mean_std_acc,
                baseline.as_ref().and_then(|b| b.mean_std_acc),
            ) {
                (Some(a), Some(b)) => Some(a - b),
                _ => None,
            },
            ece: ece_v,
            abce: abce_v,
            bins: cfg.eval.calibration.bins,
            singular_episodes: outs.iter().filter(|o| o.singular).count(),
            rejection,
            filter: FilterMetrics {
                tau_ood: th.tau_ood,
                tau_c: th.tau_c,
                ece: f_ece,
                abce: f_abce,
                test_kept: outcome.kept.len(),
                test_rejected_ood: outcome.rejected_ood.len(),
                test_rejected_lowconf: outcome.rejected_lowconf.len(),
            },
            ood,
            ssl: SslMetrics {
                labeled: ssl.labeled,
                injected: ssl.injected,
                pseudo_labeled: ssl.pseudo_labeled,
                pseudo_label_accuracy: ssl.pseudo_label_accuracy,
                prototype_spread: ssl.prototype_spread,
            },
            prior: PriorMetrics {
                lambda: phi.lambda,
                nu: phi.nu,
                psi_trace: phi.psi.trace(),
                eta_norm: phi.eta.norm(),
            },
        };
        metrics.validate()?;

        write_json(&self.dir.join("metrics.json"), &metrics)?;
        if let Some(bins) = &bins {
            reliability_export(bins, fs::File::create(self.dir.join("reliability.csv"))?)?;
        } else {
            fs::write(
                self.dir.join("reliability.csv"),
                "bin_low,bin_high,count,conf,acc\n",
            )?;
        }
        let ids: Vec<String> = d.test.iter().map(|s| s.source_id.clone()).collect();
        export_decisions(
            &ids,
            &outcome,
            fs::File::create(self.dir.join("filter_decisions.csv"))?,
        )?;
        self.write_pca(&test_feats, &ood_feats)?;
        Ok(metrics)
    }

    fn write_pca(&self, test_feats: &[Vec<f64>], ood_feats: &[Vec<f64>]) -> Result<()> {
        let d = self.data()?;
        let mut w = csv::Writer::from_path(self.dir.join("pca_coords.csv")).map_err(csv_err)?;
        w.write_record(["sample_id", "class", "ood", "pc1", "pc2"])
            .map_err(csv_err)?;
        let rows: Vec<Vec<f64>> = test_feats.iter().chain(ood_feats).cloned().collect();
        if rows.len() >= 2 {
            let coords = pca2(&rows)?;
            let names = &d.file.manifest.classes;
            let meta = d
                .test
                .iter()
                .map(|s| {
                    (
                        s,
                        names[d.classes[s.label.unwrap_or(0)]].label.as_str(),
                        false,
                    )
                })
                .chain(
                    d.ood
                        .iter()
                        .map(|s| (s, names[s.label.unwrap_or(0)].label.as_str(), true)),
                );
            for ((s, name, is_ood), c) in meta.zip(&coords) {
                w.write_record([
                    s.source_id.as_str(),
                    name,
                    if is_ood { "1" } else { "0" },
                    &c[0].to_string(),
                    &c[1].to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::input(format!("csv: {e}"))
}

/// Full pipeline in `cfg.out_dir`.
pub fn run_pipeline(cfg: RunConfig, resume: bool) -> Result<Metrics> {
    Pipeline::new(cfg)?.run(resume)
}

/// Human-readable summary of a finished run, read only from its artifacts.
pub fn report(run_dir: &Path) -> Result<String> {
    let path = run_dir.join("metrics.json");
    if !path.exists() {
        return Err(Error::input(format!(
            "{} not found; run the evaluate stage first",
            path.display()
        )));
    }
    let m: Metrics = read_json(&path)?;
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
    let mut out = String::new();
    let mut line = |s: String| {
        out.push_str(&s);
        out.push('\n');
    };
    line(format!(
        "run: {}  seed {}  classifier {}",
        run_dir.display(),
        m.seed,
        m.classifier
    ));
    line(format!(
        "standardized accuracy: {} ± {:.4} over {} tasks",
        fmt(m.eval.mean_std_acc),
        m.eval.ci95,
        m.eval.n_tasks
    ));
    if let Some(b) = &m.baseline {
        line(format!(
            "prototype baseline:    {} ± {:.4} (gain {})",
            fmt(b.mean_std_acc),
            b.ci95,
            fmt(m.gain_over_baseline)
        ));
    }
    line(format!(
        "ECE: {}  aBCE: {}  ({} bins)",
        fmt(m.ece),
        fmt(m.abce),
        m.bins
    ));
    line(format!(
        "filter ECE: {}  aBCE: {}",
        fmt(m.filter.ece),
        fmt(m.filter.abce)
    ));
    match &m.ood {
        Some(o) => line(format!(
            "OOD AUROC: diff-entropy {:.4}  p_max {:.4}  joint {:.4}  ({} in, {} ood)",
            o.auroc_diff_entropy, o.auroc_p_max, o.auroc_joint, o.n_in, o.n_ood
        )),
        None => line("OOD AUROC: n/a (no held-out classes)".into()),
    }
    line("rejection sweep:".into());
    line(format!(
        "  {:>6}  {:>9}  {:>6}",
        "tau_c", "accuracy", "kept"
    ));
    for r in &m.rejection {
        line(format!(
            "  {:>6.2}  {:>9}  {:>6.3}",
            r.tau_c,
            fmt(r.accuracy),
            r.kept_fraction
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_handle_ties() {
        assert_eq!(
            normalized_ranks(&[3.0, 1.0, 3.0, 2.0]),
            vec![3.5 / 4.0, 0.25, 3.5 / 4.0, 0.5]
        );
    }

    #[test]
    fn pca_recovers_dominant_axis() {
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|i| vec![i as f64, 0.01 * (i % 3) as f64, 0.0])
            .collect();
        let c = pca2(&rows).unwrap();
        let first: Vec<f64> = c.iter().map(|p| p[0]).collect();
        for (i, v) in first.iter().enumerate() {
            assert!((v - (i as f64 - 24.5)).abs() < 1e-6);
        }
    }

    #[test]
    fn standardizer_gives_unit_scale() {
        let rows = vec![vec![1.0, 10.0], vec![3.0, 10.0], vec![5.0, 10.0]];
        let s = Standardizer::fit(&rows).unwrap();
        let z = s.apply_all(&rows);
        let var: f64 = z.iter().map(|r| r[0] * r[0]).sum::<f64>() / 3.0;
        assert!((var - 1.0).abs() < 1e-12);
        assert!(z.iter().all(|r| r[1] == 0.0));
    }

    #[test]
    fn fingerprints_cascade() {
        let a = RunConfig::new(1);
        let mut b = a.clone();
        b.eval.n_tasks = 7;
        assert_eq!(a.fingerprint(Stage::Prior), b.fingerprint(Stage::Prior));
        assert_ne!(
            a.fingerprint(Stage::Evaluate),
            b.fingerprint(Stage::Evaluate)
        );
        b.ssl.tau = 0.3;
        assert_ne!(a.fingerprint(Stage::Filter), b.fingerprint(Stage::Filter));
        assert_eq!(a.fingerprint(Stage::Data), b.fingerprint(Stage::Data));
    }

    #[test]
    fn prior_tasks_respect_shot_limits() {
        let rows: Vec<(Vec<f64>, usize, usize)> = (0..60)
            .map(|i| (vec![i as f64, 1.0], i % 3, i % 2))
            .collect();
        let tasks = prior_tasks(&rows, 50, 4, 9).unwrap();
        for t in &tasks {
            assert!(t.support.len() >= 2);
            for (s, q) in t.support.iter().zip(&t.query) {
                assert!((1..=MAX_SHOTS).contains(&s.len()));
                assert!(q.len() <= 4);
            }
        }
    }

    #[test]
    fn report_requires_metrics() {
        let dir = tempfile::tempdir().unwrap();
        assert!(report(dir.path()).is_err());
    }
}
