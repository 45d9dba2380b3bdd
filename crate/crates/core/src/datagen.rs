//! Synthetic bearing-like vibration data and the `.ubmf` dataset file format.
//!
//! Layout: magic "UBMF", format version (u32 LE), manifest length (u32 LE),
//! UTF-8 JSON manifest, then the float32 little-endian sample block ordered
//! class-major, condition-minor, sample, channel, time.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perturb::{apply_with, PerturbContext, PerturbKind, PerturbSpec};
use crate::rng::{self, Rng};
use crate::signal::{Signal, MIN_LEN};

pub const MAGIC: &[u8; 4] = b"UBMF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub id: usize,
    pub label: String,
    /// Impulses per second at unit speed; 0 gives a fault-free signal.
    pub impulse_rate: f64,
    pub resonance: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub id: usize,
    pub speed: f64,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub classes: Vec<ClassSpec>,
    pub conditions: Vec<ConditionSpec>,
    /// `counts[class][condition]`, indexed by position in the lists above.
    pub counts: Vec<Vec<usize>>,
    pub len: usize,
    pub sample_rate: f64,
    #[serde(default = "one")]
    pub channels: usize,
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl DatasetManifest {
    /// Five classes (healthy plus four fault types) under three operating conditions.
    pub fn default_synthetic(seed: u64) -> Self {
        let class = |id: usize, label: &str, rate: f64, res: f64, amp: f64| ClassSpec {
            id,
            label: label.into(),
            impulse_rate: rate,
            resonance: res,
            amplitude: amp,
        };
        let classes = vec![
            class(0, "normal", 0.0, 900.0, 0.0),
            class(1, "inner_race", 97.0, 1400.0, 1.0),
            class(2, "outer_race", 61.0, 1000.0, 1.0),
            class(3, "ball", 131.0, 1700.0, 0.8),
            class(4, "cage", 37.0, 700.0, 1.2),
        ];
        let conditions = vec![
            ConditionSpec {
                id: 0,
                speed: 1.0,
                noise: 0.3,
            },
            ConditionSpec {
                id: 1,
                speed: 1.25,
                noise: 0.4,
            },
            ConditionSpec {
                id: 2,
                speed: 0.8,
                noise: 0.35,
            },
        ];
        Self {
            name: "synthetic-bearing".into(),
            counts: vec![vec![80; conditions.len()]; classes.len()],
            classes,
            conditions,
            len: 512,
            sample_rate: 4096.0,
            channels: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidManifest(m.into()));
        if self.classes.is_empty() || self.conditions.is_empty() {
            return bad("at least one class and one condition are required");
        }
        let mut ids: Vec<usize> = self.classes.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.classes.len() {
            return bad("class ids must be unique");
        }
        if self.len < MIN_LEN || !(self.sample_rate > 0.0) || self.channels == 0 {
            return bad("length, sample rate and channel count must be positive");
        }
        if self.counts.len() != self.classes.len()
            || self.counts.iter().any(|r| r.len() != self.conditions.len())
        {
            return bad("counts must be a classes × conditions table");
        }
        for c in &self.classes {
            if !(c.impulse_rate >= 0.0 && c.resonance >= 0.0 && c.amplitude >= 0.0) {
                return bad("class rates, resonances and amplitudes must be non-negative");
            }
            if c.resonance >= self.sample_rate / 2.0 {
                return bad("resonance must lie below the Nyquist frequency");
            }
        }
        if self
            .conditions
            .iter()
            .any(|c| !(c.speed > 0.0 && c.noise >= 0.0))
        {
            return bad("speeds must be positive and noise non-negative");
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.len
    }

    /// (class position, condition position) of every sample in file order.
    pub fn layout(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.n_samples());
        for (ci, row) in self.counts.iter().enumerate() {
            for (ki, &n) in row.iter().enumerate() {
                out.extend(std::iter::repeat_n((ci, ki), n));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub manifest: DatasetManifest,
    pub data: Vec<f32>,
}

impl DatasetFile {
    /// Wraps user-supplied samples; `data` must follow the file order.
    pub fn from_raw(manifest: DatasetManifest, data: Vec<f32>) -> Result<Self> {
        manifest.validate()?;
        let want = manifest.n_samples() * manifest.sample_len();
        if data.len() != want {
            return Err(Error::InvalidManifest(format!(
                "{} values supplied, manifest implies {want}",
                data.len()
            )));
        }
        Ok(Self { manifest, data })
    }

    pub fn n_samples(&self) -> usize {
        self.manifest.n_samples()
    }

    pub fn sample(&self, i: usize) -> Result<Signal> {
        let m = &self.manifest;
        let (class, cond) = *m
            .layout()
            .get(i)
            .ok_or_else(|| Error::input(format!("sample {i} out of range")))?;
        self.build(i, class, cond)
    }

    fn build(&self, i: usize, class: usize, cond: usize) -> Result<Signal> {
        let m = &self.manifest;
        let per = m.sample_len();
        let values = self.data[i * per..(i + 1) * per]
            .iter()
            .map(|v| f64::from(*v))
            .collect();
        Ok(Signal::new(values, m.channels, m.sample_rate)?
            .with_label(class)
            .with_condition(cond)
            .with_source(format!("{}#{i}", m.name)))
    }

    /// All samples as labeled signals; labels are class positions.
    pub fn signals(&self) -> Result<Vec<Signal>> {
        self.manifest
            .layout()
            .into_iter()
            .enumerate()
            .map(|(i, (c, k))| self.build(i, c, k))
            .collect()
    }
}

/// Zero mean, unit variance; a constant input is a degenerate sample.
pub fn standardize(x: &mut [f64]) -> Result<()> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if !(var > 1e-24) {
        return Err(Error::DegenerateInput(
            "zero-variance sample cannot be standardized".into(),
        ));
    }
    let sd = var.sqrt();
    x.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    Ok(())
}

/// One raw (unstandardized) channel-major waveform.
fn synthesize(
    m: &DatasetManifest,
    class: &ClassSpec,
    cond: &ConditionSpec,
    rng: &mut Rng,
) -> Vec<f64> {
    let n = m.len;
    let fs = m.sample_rate;
    let rate = class.impulse_rate * cond.speed;
    let mut source = vec![0.0; n];
    if rate > 0.0 && class.amplitude > 0.0 {
        let period = fs / rate;
        // damping ratio 0.05 on the resonance, per sample
        let decay = 2.0 * PI * class.resonance.max(1.0) * 0.05 / fs;
        let ring = ((8.0 / decay).ceil() as usize).min(n);
        let omega = 2.0 * PI * class.resonance / fs;
        let mut t = rng.random::<f64>() * period - period;
        while t < n as f64 {
            let gain = class.amplitude * rng.random_range(0.8..1.2);
            let first = t.ceil() as i64;
            for j in 0..ring {
                let idx = first + j as i64;
                if idx < 0 {
                    continue;
                }
                let idx = idx as usize;
                if idx >= n {
                    break;
                }
                let dt = idx as f64 - t;
                source[idx] += gain * (-decay * dt).exp() * (omega * dt).sin();
            }
            t += period;
        }
    }
    let noise = Normal::new(0.0, cond.noise.max(0.0)).ok();
    let mut out = Vec::with_capacity(m.channels * n);
    for c in 0..m.channels {
        let g = 1.0 / (1.0 + 0.3 * c as f64);
        for &s in &source {
            let e = match &noise {
                Some(d) if cond.noise > 0.0 => d.sample(rng),
                _ => 0.0,
            };
            out.push(g * s + e);
        }
    }
    out
}

/// Periodic impulse trains through a decaying resonance plus white noise,
/// standardized per sample and rounded to float32.
pub fn generate(manifest: &DatasetManifest) -> Result<DatasetFile> {
    manifest.validate()?;
    let mut data = Vec::with_capacity(manifest.n_samples() * manifest.sample_len());
    let mut i = 0u64;
    for (ci, row) in manifest.counts.iter().enumerate() {
        for (ki, &count) in row.iter().enumerate() {
            for _ in 0..count {
                let mut r = rng::indexed_stream(manifest.seed, "datagen", i);
                let mut x = synthesize(
                    manifest,
                    &manifest.classes[ci],
                    &manifest.conditions[ki],
                    &mut r,
                );
                for ch in x.chunks_mut(manifest.len) {
                    standardize(ch).map_err(|e| match e {
                        Error::DegenerateInput(m) => Error::DegenerateInput(format!(
                            "class {} condition {}: {m}",
                            manifest.classes[ci].label, manifest.conditions[ki].id
                        )),
                        other => other,
                    })?;
                }
                data.extend(x.into_iter().map(|v| v as f32));
                i += 1;
            }
        }
    }
    DatasetFile::from_raw(manifest.clone(), data)
}

pub fn write_to<W: Write>(file: &DatasetFile, mut w: W) -> Result<()> {
    let json = serde_json::to_vec(&file.manifest)?;
    let len = u32::try_from(json.len())
        .map_err(|_| Error::InvalidManifest("manifest too large".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(file.data.len() * 4);
    for v in &file.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn save(file: &DatasetFile, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_to(file, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn read_from<R: Read>(mut r: R) -> Result<DatasetFile> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse(&bytes)
}

pub fn load(path: &Path) -> Result<DatasetFile> {
    parse(&std::fs::read(path)?)
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

fn parse(bytes: &[u8]) -> Result<DatasetFile> {
    let u32_at = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("four bytes")))
            .ok_or_else(|| format_err(off, "truncated header"))
    };
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(format_err(0, "bad magic"));
    }
    let version = u32_at(4)?;
    if version != FORMAT_VERSION {
        return Err(format_err(
            4,
            format!("unsupported format version {version}"),
        ));
    }
    let mlen = u32_at(8)? as usize;
    let body = 12 + mlen;
    let json = bytes
        .get(12..body)
        .ok_or_else(|| format_err(bytes.len(), "truncated manifest"))?;
    let manifest: DatasetManifest =
        serde_json::from_slice(json).map_err(|e| format_err(12, format!("manifest: {e}")))?;
    manifest
        .validate()
        .map_err(|e| format_err(12, e.to_string()))?;
    let want = manifest.n_samples() * manifest.sample_len() * 4;
    let raw = &bytes[body..];
    if raw.len() != want {
        return Err(format_err(
            body + raw.len().min(want),
            format!(
                "sample block holds {} bytes, manifest implies {want}",
                raw.len()
            ),
        ));
    }
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")))
        .collect();
    Ok(DatasetFile { manifest, data })
}

/// Applies `specs` in order to every sample. Each spec draws from its own
/// seed split per sample; splices pair a sample with the next one of its class.
pub fn perturb_dataset(file: &DatasetFile, specs: &[PerturbSpec]) -> Result<DatasetFile> {
    for spec in specs {
        spec.validate()?;
        if matches!(
            spec.kind,
            PerturbKind::LatentJitter | PerturbKind::LatentInterp
        ) {
            return Err(Error::Unsupported(
                "latent perturbations need a trained autoencoder".into(),
            ));
        }
    }
    let signals = file.signals()?;
    let mut data = Vec::with_capacity(file.data.len());
    for (i, s) in signals.iter().enumerate() {
        let partner = (1..signals.len())
            .map(|o| &signals[(i + o) % signals.len()])
            .find(|p| p.label == s.label);
        let mut cur = s.clone();
        for spec in specs {
            let mut r = rng::indexed_stream(spec.seed, "perturb", i as u64);
            let ctx = PerturbContext {
                partner,
                ..Default::default()
            };
            if let Some(out) = apply_with(spec, &cur, ctx, &mut r)? {
                cur = out;
            }
        }
        data.extend(cur.values().iter().map(|v| *v as f32));
    }
    DatasetFile::from_raw(file.manifest.clone(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub labeled: Vec<Signal>,
    pub unlabeled: Vec<Signal>,
    pub test: Vec<Signal>,
}

/// Per-class labeled and unlabeled subsets; everything else goes to test.
/// Unlabeled samples keep their label for evaluation but callers must not use it.
pub fn make_imbalanced_split(
    file: &DatasetFile,
    labeled_counts: &[usize],
    unlabeled_counts: &[usize],
    rng: &mut Rng,
) -> Result<Split> {
    let k = file.manifest.classes.len();
    if labeled_counts.len() != k || unlabeled_counts.len() != k {
        return Err(Error::input(format!("counts must list {k} classes")));
    }
    let signals = file.signals()?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, s) in signals.iter().enumerate() {
        by_class[s.label.expect("generated samples are labeled")].push(i);
    }
    let mut split = Split {
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        test: Vec::new(),
    };
    for (c, idx) in by_class.iter_mut().enumerate() {
        let need = labeled_counts[c] + unlabeled_counts[c];
        if need > idx.len() {
            return Err(Error::InsufficientData(format!(
                "class {c} has {} samples, {need} requested",
                idx.len()
            )));
        }
        idx.shuffle(rng);
        let (lab, rest) = idx.split_at(labeled_counts[c]);
        let (unl, test) = rest.split_at(unlabeled_counts[c]);
        split
            .labeled
            .extend(lab.iter().map(|&i| signals[i].clone()));
        split
            .unlabeled
            .extend(unl.iter().map(|&i| signals[i].clone()));
        split.test.extend(test.iter().map(|&i| signals[i].clone()));
    }
    Ok(split)
}

/// Default unlabeled imbalance 100:20:20:… (first class dominant).
pub fn default_unlabeled_counts(k: usize) -> Vec<usize> {
    (0..k).map(|c| if c == 0 { 100 } else { 20 }).collect()
}

/// Fundamental period of the signal envelope (squared signal under a moving
/// average of width min_lag / 4): the smallest lag in
/// [min_lag, max_lag] whose autocorrelation reaches 80% of the maximum there,
/// which avoids locking onto period multiples.
pub fn dominant_period(x: &[f64], min_lag: usize, max_lag: usize) -> usize {
    let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
    let w = (min_lag / 4).max(1);
    let e: Vec<f64> = sq
        .windows(w)
        .map(|s| s.iter().sum::<f64>() / w as f64)
        .collect();
    let m = e.iter().sum::<f64>() / e.len() as f64;
    let c: Vec<f64> = e.iter().map(|v| v - m).collect();
    let hi = max_lag.min(e.len() - 1);
    if min_lag > hi {
        return min_lag;
    }
    let ac: Vec<f64> = (min_lag..=hi)
        .map(|l| c.iter().zip(&c[l..]).map(|(p, q)| p * q).sum::<f64>() / (c.len() - l) as f64)
        .collect();
    let best = ac.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // first local peak above the bar
    let bar = 0.8 * best;
    for i in 0..ac.len() {
        let left = i == 0 || ac[i] >= ac[i - 1];
        let right = i + 1 == ac.len() || ac[i] >= ac[i + 1];
        if ac[i] >= bar && left && right {
            return min_lag + i;
        }
    }
    min_lag
}
