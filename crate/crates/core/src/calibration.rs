//! Reliability binning, expected calibration error and the adaptive balanced
//! calibration loss.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 10;
pub const DEFAULT_V: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub confidence: f64,
    pub predicted: usize,
    pub truth: usize,
}

impl PredictionRecord {
    pub fn new(confidence: f64, predicted: usize, truth: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::input(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(Self {
            confidence,
            predicted,
            truth,
        })
    }

    /// Record from a probability vector: confidence is the max probability.
    pub fn from_probs(probs: &[f64], truth: usize) -> Result<Self> {
        let predicted = crate::ssl::argmax(probs);
        Self::new(probs[predicted].clamp(0.0, 1.0), predicted, truth)
    }

    pub fn correct(&self) -> bool {
        self.predicted == self.truth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
    pub conf: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub bins: Vec<Bin>,
}

impl ReliabilityBins {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }
}

/// Index of the right-closed bin ((m−1)/M, m/M] holding `p`; 0 lands in the first bin.
pub fn bin_index(p: f64, m: usize) -> usize {
    let idx = (p * m as f64).ceil() as usize;
    idx.clamp(1, m) - 1
}

pub fn bin_reliability(records: &[PredictionRecord], m: usize) -> Result<ReliabilityBins> {
    if m < 1 {
        return Err(Error::param("at least one bin is required"));
    }
    let mut count = vec![0usize; m];
    let mut conf = vec![0.0; m];
    let mut hits = vec![0usize; m];
    for r in records {
        let i = bin_index(r.confidence, m);
        count[i] += 1;
        conf[i] += r.confidence;
        hits[i] += r.correct() as usize;
    }
    let bins = (0..m)
        .map(|i| {
            let n = count[i];
            let (c, a) = if n == 0 {
                (0.0, 0.0)
            } else {
                (conf[i] / n as f64, hits[i] as f64 / n as f64)
            };
            Bin {
                low: i as f64 / m as f64,
                high: (i + 1) as f64 / m as f64,
                count: n,
                conf: c,
                acc: a,
            }
        })
        .collect();
    Ok(ReliabilityBins { bins })
}

/// Σ_m (|b_m| / n) |acc − conf|.
pub fn ece(bins: &ReliabilityBins, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::input("no records"));
    }
    Ok(bins
        .bins
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n as f64 * (b.acc - b.conf).abs())
        .sum())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbceVariant {
    #[default]
    Signed,
    Absolute,
}

/// Mean max-probability over samples of each true class. Classes absent from
/// the records report confidence 1, so they add no penalty.
pub fn class_confidence(records: &[PredictionRecord], k: usize) -> Vec<f64> {
    let mut sum = vec![0.0; k];
    let mut n = vec![0usize; k];
    for r in records.iter().filter(|r| r.truth < k) {
        sum[r.truth] += r.confidence;
        n[r.truth] += 1;
    }
    sum.iter()
        .zip(&n)
        .map(|(s, c)| if *c == 0 { 1.0 } else { s / *c as f64 })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbceConfig {
    pub bins: usize,
    pub v: f64,
    pub batch: usize,
    pub variant: AbceVariant,
}

impl Default for AbceConfig {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            v: DEFAULT_V,
            batch: 16,
            variant: AbceVariant::Signed,
        }
    }
}

/// (|b| / K²) Σ_c (1 − conf(N_c))^v + (1/M) Σ_m (acc(b_m) − conf(b_m)).
/// Empty bins contribute zero to the second sum.
pub fn abce(records: &[PredictionRecord], class_conf: &[f64], cfg: &AbceConfig) -> Result<f64> {
    let k = class_conf.len();
    if k == 0 {
        return Err(Error::input("no classes"));
    }
    let bins = bin_reliability(records, cfg.bins)?;
    let class_term = cfg.batch as f64 / (k * k) as f64
        * class_conf
            .iter()
            .map(|c| (1.0 - c).max(0.0).powf(cfg.v))
            .sum::<f64>();
    let gap = |b: &Bin| match cfg.variant {
        AbceVariant::Signed => b.acc - b.conf,
        AbceVariant::Absolute => (b.acc - b.conf).abs(),
    };
    let bin_term = bins
        .bins
        .iter()
        .filter(|b| b.count > 0)
        .map(gap)
        .sum::<f64>()
        / cfg.bins as f64;
    Ok(class_term + bin_term)
}

pub fn joint_loss(base: f64, abce_val: f64, beta: f64) -> f64 {
    base + beta * abce_val
}

pub fn reliability_export<W: Write>(bins: &ReliabilityBins, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["bin_low", "bin_high", "count", "conf", "acc"])
        .map_err(csv_err)?;
    for b in &bins.bins {
        wr.write_record(&[
            b.low.to_string(),
            b.high.to_string(),
            b.count.to_string(),
            b.conf.to_string(),
            b.acc.to_string(),
        ])
        .map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn reliability_import<R: Read>(r: R) -> Result<ReliabilityBins> {
    let mut rd = csv::Reader::from_reader(r);
    let mut bins = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let f = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::input(format!("bad reliability field {i}")))
        };
        bins.push(Bin {
            low: f(0)?,
            high: f(1)?,
            count: f(2)? as usize,
            conf: f(3)?,
            acc: f(4)?,
        });
    }
    Ok(ReliabilityBins { bins })
}

fn csv_err(e: csv::Error) -> Error {
    Error::input(format!("csv: {e}"))
}
