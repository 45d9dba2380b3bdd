//! Weak and strong signal perturbations.
//!
//! Weak operators (jitter, uniform scaling, splicing) keep a sample close to
//! the original; strong operators (warps, rotation, slice shuffling, masking,
//! latent-space edits) change it substantially while keeping its class.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::Autoencoder;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::signal::Signal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    Jitter,
    UniformScale,
    Splice,
    MagnitudeWarp,
    TimeWarp,
    Rotate,
    SliceShuffle,
    RandomMask,
    LatentJitter,
    LatentInterp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strength {
    Weak,
    Strong,
}

/// Latent noise at or below this level counts as a weak perturbation.
pub const WEAK_LATENT_SIGMA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub kind: PerturbKind,
    pub strength: Strength,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub seed: u64,
}

impl PerturbSpec {
    pub fn new(kind: PerturbKind, params: &[(&str, f64)], seed: u64) -> Self {
        let params: BTreeMap<String, f64> =
            params.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        let strength = Self::strength_for(kind, &params);
        Self {
            kind,
            strength,
            params,
            seed,
        }
    }

    fn strength_for(kind: PerturbKind, params: &BTreeMap<String, f64>) -> Strength {
        match kind {
            PerturbKind::Jitter | PerturbKind::UniformScale | PerturbKind::Splice => Strength::Weak,
            PerturbKind::LatentJitter
                if params.get("sigma").copied().unwrap_or(0.0) <= WEAK_LATENT_SIGMA =>
            {
                Strength::Weak
            }
            _ => Strength::Strong,
        }
    }

    /// Checks the strength tag against the kind classification.
    pub fn validate(&self) -> Result<()> {
        let expected = Self::strength_for(self.kind, &self.params);
        if expected != self.strength {
            return Err(Error::param(format!(
                "{:?} must be tagged {:?}",
                self.kind, expected
            )));
        }
        Ok(())
    }

    fn get(&self, key: &str, default: f64) -> f64 {
        self.params.get(key).copied().unwrap_or(default)
    }
}

/// Inputs some operators need besides the sample itself.
#[derive(Default, Clone, Copy)]
pub struct PerturbContext<'a> {
    /// Same-label partner for splicing and latent interpolation.
    pub partner: Option<&'a Signal>,
    pub autoencoder: Option<&'a Autoencoder>,
    /// Channel rotation matrix, row-major.
    pub rotation: Option<&'a [f64]>,
}

/// Applies one spec. Returns `None` when a splice finds no similar segment.
pub fn apply(spec: &PerturbSpec, s: &Signal, ctx: PerturbContext<'_>) -> Result<Option<Signal>> {
    spec.validate()?;
    let mut rng = rng::from_seed(spec.seed);
    apply_with(spec, s, ctx, &mut rng)
}

/// Applies one spec drawing from a caller-owned stream (the spec seed is ignored).
pub fn apply_with(
    spec: &PerturbSpec,
    s: &Signal,
    ctx: PerturbContext<'_>,
    rng: &mut Rng,
) -> Result<Option<Signal>> {
    let out = match spec.kind {
        PerturbKind::Jitter => jitter(s, spec.get("sigma", 0.03 * s.std()), rng)?,
        PerturbKind::UniformScale => {
            uniform_scale(s, spec.get("mu", 1.0), spec.get("sigma", 0.1), rng)?
        }
        PerturbKind::Splice => {
            let partner = ctx
                .partner
                .ok_or_else(|| Error::InvalidPairing("splice needs a partner".into()))?;
            let window = spec.get("window", (s.len() / 4) as f64) as usize;
            return Ok(
                splice_resample(s, partner, window, spec.get("tau", 0.8))?.map(|sp| sp.signal)
            );
        }
        PerturbKind::MagnitudeWarp => magnitude_warp(
            s,
            spec.get("n_knots", 4.0) as usize,
            spec.get("sigma", 0.2),
            rng,
        )?,
        PerturbKind::TimeWarp => time_warp(
            s,
            spec.get("n_knots", 4.0) as usize,
            spec.get("sigma", 0.2),
            rng,
        )?,
        PerturbKind::Rotate => {
            let dc = s.channels();
            let owned;
            let r = match ctx.rotation {
                Some(r) => r,
                None => {
                    owned = random_rotation(dc, rng);
                    &owned
                }
            };
            rotate(s, r)?
        }
        PerturbKind::SliceShuffle => slice_shuffle(s, spec.get("n_segments", 4.0) as usize, rng)?,
        PerturbKind::RandomMask => {
            let fill = match spec.get("fill", 0.0) as i64 {
                0 => MaskFill::Zero,
                1 => MaskFill::Gaussian,
                _ => MaskFill::LinearInterp,
            };
            random_mask(s, spec.get("ratio", 0.15), fill, rng)?
        }
        PerturbKind::LatentJitter => {
            let ae = ctx
                .autoencoder
                .ok_or_else(|| Error::ModelNotReady("latent jitter needs an autoencoder".into()))?;
            latent_jitter(ae, s, spec.get("sigma", 0.05), rng)?
        }
        PerturbKind::LatentInterp => {
            let ae = ctx.autoencoder.ok_or_else(|| {
                Error::ModelNotReady("latent interpolation needs an autoencoder".into())
            })?;
            let partner = ctx
                .partner
                .ok_or_else(|| Error::InvalidPairing("interpolation needs a partner".into()))?;
            let lambda = match spec.params.get("lambda") {
                Some(l) => *l,
                None => rng.random::<f64>(),
            };
            latent_interpolate(ae, s, partner, lambda)?
        }
    };
    Ok(Some(out))
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::param(format!("{name} must be finite")))
    }
}

/// Adds i.i.d. N(0, σ²) noise to every value.
pub fn jitter(s: &Signal, sigma: f64, rng: &mut Rng) -> Result<Signal> {
    check_finite("sigma", sigma)?;
    if sigma < 0.0 {
        return Err(Error::param("sigma must be non-negative"));
    }
    if sigma == 0.0 {
        return Ok(s.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::param(e.to_string()))?;
    let values = s.values().iter().map(|v| v + normal.sample(rng)).collect();
    s.with_values(values)
}

const MAX_REDRAWS: usize = 100;

/// Multiplies the whole sample by one factor α ~ N(μ, σ²), redrawn until positive.
pub fn uniform_scale(s: &Signal, mu: f64, sigma: f64, rng: &mut Rng) -> Result<Signal> {
    check_finite("mu", mu)?;
    check_finite("sigma", sigma)?;
    if sigma < 0.0 {
        return Err(Error::param("sigma must be non-negative"));
    }
    let alpha = draw_positive(mu, sigma, rng)?;
    s.with_values(s.values().iter().map(|v| alpha * v).collect())
}

fn draw_positive(mu: f64, sigma: f64, rng: &mut Rng) -> Result<f64> {
    if sigma == 0.0 {
        return if mu > 0.0 {
            Ok(mu)
        } else {
            Err(Error::param(
                "scale factor mean must be positive when sigma = 0",
            ))
        };
    }
    let normal = Normal::new(mu, sigma).map_err(|e| Error::param(e.to_string()))?;
    for _ in 0..MAX_REDRAWS {
        let a = normal.sample(rng);
        if a > 0.0 {
            return Ok(a);
        }
    }
    Err(Error::param(format!(
        "no positive scale factor in {MAX_REDRAWS} draws from N({mu}, {sigma}²)"
    )))
}

/// Normalized cross-correlation of two equal-length windows.
///
/// Zero-variance windows correlate as 1 when identical and 0 otherwise.
pub fn normalized_xcorr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone)]
pub struct Splice {
    pub signal: Signal,
    /// First index taken from the second sample.
    pub cut: usize,
    pub similarity: f64,
    pub offset: usize,
}

/// Window correlations at every aligned offset, all channels pooled.
pub fn window_similarities(a: &Signal, b: &Signal, window: usize) -> Vec<f64> {
    let t = a.len();
    (0..=t - window)
        .map(|o| {
            let wa: Vec<f64> = (0..a.channels())
                .flat_map(|c| a.channel(c)[o..o + window].iter().copied())
                .collect();
            let wb: Vec<f64> = (0..b.channels())
                .flat_map(|c| b.channel(c)[o..o + window].iter().copied())
                .collect();
            normalized_xcorr(&wa, &wb)
        })
        .collect()
}

/// Splices `a` and `b` at the best-matching window when its similarity reaches `tau`.
///
/// The cut sits in the middle of the first window with maximal correlation.
pub fn splice_resample(a: &Signal, b: &Signal, window: usize, tau: f64) -> Result<Option<Splice>> {
    if !a.same_shape(b) {
        return Err(Error::InvalidPairing(
            "splice partners differ in shape".into(),
        ));
    }
    if a.label != b.label {
        return Err(Error::InvalidPairing(format!(
            "label mismatch {:?} vs {:?}",
            a.label, b.label
        )));
    }
    if window == 0 || window > a.len() {
        return Err(Error::param(format!(
            "window {window} outside 1..={}",
            a.len()
        )));
    }
    let sims = window_similarities(a, b, window);
    let (offset, similarity) =
        sims.iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            });
    if similarity < tau {
        return Ok(None);
    }
    let cut = offset + window / 2;
    let t = a.len();
    let mut values = Vec::with_capacity(a.values().len());
    for c in 0..a.channels() {
        values.extend_from_slice(&a.channel(c)[..cut]);
        values.extend_from_slice(&b.channel(c)[cut..t]);
    }
    Ok(Some(Splice {
        signal: a.with_values(values)?,
        cut,
        similarity,
        offset,
    }))
}

/// Natural cubic spline through `(xs[i], ys[i])`, `xs` strictly increasing.
#[derive(Debug, Clone)]
pub struct NaturalCubicSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    m: Vec<f64>,
}

impl NaturalCubicSpline {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        let n = xs.len();
        if n < 2 || ys.len() != n {
            return Err(Error::param("spline needs at least two knots"));
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::param("spline knots must increase strictly"));
        }
        // Second derivatives m with m[0] = m[n-1] = 0 (Thomas algorithm).
        let mut m = vec![0.0; n];
        if n > 2 {
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            let mut upper = vec![0.0; k];
            for i in 1..n - 1 {
                let h0 = xs[i] - xs[i - 1];
                let h1 = xs[i + 1] - xs[i];
                diag[i - 1] = 2.0 * (h0 + h1);
                upper[i - 1] = h1;
                rhs[i - 1] = 6.0 * ((ys[i + 1] - ys[i]) / h1 - (ys[i] - ys[i - 1]) / h0);
            }
            for i in 1..k {
                let lower = xs[i + 1] - xs[i];
                let w = lower / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            let mut sol = vec![0.0; k];
            sol[k - 1] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                sol[i] = (rhs[i] - upper[i] * sol[i + 1]) / diag[i];
            }
            m[1..n - 1].copy_from_slice(&sol);
        }
        Ok(Self { xs, ys, m })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        let i = match self.xs.partition_point(|&k| k <= x) {
            0 => 0,
            p if p >= n => n - 2,
            p => p - 1,
        };
        let h = self.xs[i + 1] - self.xs[i];
        let a = (self.xs[i + 1] - x) / h;
        let b = (x - self.xs[i]) / h;
        a * self.ys[i]
            + b * self.ys[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }
}

fn knot_positions(t: usize, n_knots: usize) -> Vec<f64> {
    (0..n_knots)
        .map(|j| j as f64 * (t - 1) as f64 / (n_knots - 1) as f64)
        .collect()
}

/// Smooth random curve through `n_knots` equally spaced N(1, σ²) values.
pub fn random_curve(t: usize, n_knots: usize, sigma: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if n_knots < 2 {
        return Err(Error::param("n_knots must be at least 2"));
    }
    check_finite("sigma", sigma)?;
    if sigma < 0.0 {
        return Err(Error::param("sigma must be non-negative"));
    }
    if sigma == 0.0 {
        return Ok(vec![1.0; t]);
    }
    let normal = Normal::new(1.0, sigma).map_err(|e| Error::param(e.to_string()))?;
    let ys: Vec<f64> = (0..n_knots).map(|_| normal.sample(rng)).collect();
    let spline = NaturalCubicSpline::new(knot_positions(t, n_knots), ys)?;
    Ok((0..t).map(|i| spline.eval(i as f64)).collect())
}

/// Floor on warp factors so the warp stays strictly positive.
pub const MIN_WARP: f64 = 0.05;

/// Multiplies each time step by a smooth positive random curve.
pub fn magnitude_warp(s: &Signal, n_knots: usize, sigma: f64, rng: &mut Rng) -> Result<Signal> {
    let curve: Vec<f64> = random_curve(s.len(), n_knots, sigma, rng)?
        .into_iter()
        .map(|a| a.max(MIN_WARP))
        .collect();
    let t = s.len();
    let values = s
        .values()
        .iter()
        .enumerate()
        .map(|(i, v)| v * curve[i % t])
        .collect();
    s.with_values(values)
}

/// Monotone warp map τ with τ(0) = 0 and τ(T−1) = T−1, built by integrating a
/// positive spline speed curve.
pub fn time_warp_map(t: usize, n_knots: usize, sigma: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    let speed: Vec<f64> = random_curve(t, n_knots, sigma, rng)?
        .into_iter()
        .map(|a| a.max(MIN_WARP))
        .collect();
    let mut tau = vec![0.0; t];
    for i in 1..t {
        tau[i] = tau[i - 1] + 0.5 * (speed[i - 1] + speed[i]);
    }
    let scale = (t - 1) as f64 / tau[t - 1];
    for v in tau.iter_mut() {
        *v *= scale;
    }
    tau[t - 1] = (t - 1) as f64;
    Ok(tau)
}

fn interp_at(x: &[f64], pos: f64) -> f64 {
    let i = (pos.floor() as usize).min(x.len() - 1);
    if i + 1 >= x.len() {
        return x[x.len() - 1];
    }
    let f = pos - i as f64;
    if f == 0.0 {
        x[i]
    } else {
        x[i] * (1.0 - f) + x[i + 1] * f
    }
}

/// Resamples along a random monotone time warp (linear interpolation).
pub fn time_warp(s: &Signal, n_knots: usize, sigma: f64, rng: &mut Rng) -> Result<Signal> {
    let tau = time_warp_map(s.len(), n_knots, sigma, rng)?;
    debug_assert!(tau.windows(2).all(|w| w[1] >= w[0]));
    let mut values = Vec::with_capacity(s.values().len());
    for c in 0..s.channels() {
        let x = s.channel(c);
        values.extend(tau.iter().map(|&p| interp_at(x, p)));
    }
    s.with_values(values)
}

/// Haar-random orthogonal matrix (Gram–Schmidt on Gaussian columns).
pub fn random_rotation(d: usize, rng: &mut Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let m = nalgebra::DMatrix::from_fn(d, d, |_, _| normal.sample(rng));
    let q = m.qr().q();
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = q[(i, j)];
        }
    }
    out
}

/// Maps each per-step channel vector x_t to R x_t.
pub fn rotate(s: &Signal, r: &[f64]) -> Result<Signal> {
    let dc = s.channels();
    if dc < 2 {
        return Err(Error::Unsupported(
            "rotation needs at least two channels".into(),
        ));
    }
    if r.len() != dc * dc {
        return Err(Error::param(format!("rotation must be {dc}x{dc}")));
    }
    for i in 0..dc {
        for j in 0..dc {
            let dot: f64 = (0..dc).map(|k| r[k * dc + i] * r[k * dc + j]).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            if (dot - want).abs() > 1e-8 {
                return Err(Error::param("rotation matrix is not orthogonal"));
            }
        }
    }
    let t = s.len();
    let mut values = vec![0.0; s.values().len()];
    for step in 0..t {
        for i in 0..dc {
            values[i * t + step] = (0..dc).map(|k| r[i * dc + k] * s.channel(k)[step]).sum();
        }
    }
    s.with_values(values)
}

/// Segment boundaries: `n` equal pieces, remainder appended to the last.
pub fn segment_bounds(t: usize, n: usize) -> Vec<(usize, usize)> {
    let len = t / n;
    (0..n)
        .map(|i| {
            let end = if i + 1 == n { t } else { (i + 1) * len };
            (i * len, end)
        })
        .collect()
}

/// Cuts the sample into `n_segments` pieces and concatenates them in random order.
pub fn slice_shuffle(s: &Signal, n_segments: usize, rng: &mut Rng) -> Result<Signal> {
    if n_segments == 0 || n_segments > s.len() {
        return Err(Error::param(format!(
            "n_segments {n_segments} outside 1..={}",
            s.len()
        )));
    }
    let mut order: Vec<usize> = (0..n_segments).collect();
    order.shuffle(rng);
    slice_permute(s, &order)
}

/// Reassembles segments in the given order.
pub fn slice_permute(s: &Signal, order: &[usize]) -> Result<Signal> {
    let bounds = segment_bounds(s.len(), order.len());
    let mut values = Vec::with_capacity(s.values().len());
    for c in 0..s.channels() {
        let x = s.channel(c);
        for &k in order {
            let (a, b) = bounds[k];
            values.extend_from_slice(&x[a..b]);
        }
    }
    s.with_values(values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskFill {
    Gaussian,
    LinearInterp,
    Zero,
}

/// Replaces one contiguous block of ⌊ratio·T⌋ steps.
pub fn random_mask(s: &Signal, ratio: f64, fill: MaskFill, rng: &mut Rng) -> Result<Signal> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::param(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let t = s.len();
    let m = (ratio * t as f64).floor() as usize;
    if m == 0 {
        return Ok(s.clone());
    }
    let start = rng.random_range(0..=t - m);
    mask_block(s, start, m, fill, rng)
}

/// Fills `[start, start + len)` in every channel.
pub fn mask_block(
    s: &Signal,
    start: usize,
    len: usize,
    fill: MaskFill,
    rng: &mut Rng,
) -> Result<Signal> {
    let t = s.len();
    let end = start + len;
    let mut values = s.values().to_vec();
    for c in 0..s.channels() {
        let x = s.channel(c);
        let std = {
            let n = t as f64;
            let mean = x.iter().sum::<f64>() / n;
            (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
        };
        let row = &mut values[c * t..(c + 1) * t];
        match fill {
            MaskFill::Zero => row[start..end].iter_mut().for_each(|v| *v = 0.0),
            MaskFill::Gaussian => {
                let normal = Normal::new(0.0, std.max(1e-12)).unwrap();
                row[start..end]
                    .iter_mut()
                    .for_each(|v| *v = normal.sample(rng));
            }
            MaskFill::LinearInterp => {
                // Line through the nearest unmasked neighbours; extrapolated
                // from one side at the edges.
                let anchors: Option<(usize, usize)> = if start > 0 && end < t {
                    Some((start - 1, end))
                } else if start >= 2 {
                    Some((start - 2, start - 1))
                } else if end + 1 < t {
                    Some((end, end + 1))
                } else {
                    None
                };
                match anchors {
                    Some((i0, i1)) => {
                        let slope = (x[i1] - x[i0]) / (i1 - i0) as f64;
                        for p in start..end {
                            row[p] = x[i0] + slope * (p as f64 - i0 as f64);
                        }
                    }
                    None => row[start..end].iter_mut().for_each(|v| *v = 0.0),
                }
            }
        }
    }
    s.with_values(values)
}

/// Decodes the latent code plus N(0, σ² I) noise.
pub fn latent_jitter(ae: &Autoencoder, s: &Signal, sigma: f64, rng: &mut Rng) -> Result<Signal> {
    check_finite("sigma", sigma)?;
    if sigma < 0.0 {
        return Err(Error::param("sigma must be non-negative"));
    }
    ae.ensure_ready()?;
    let mut z = ae.encode(s)?;
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).unwrap();
        z.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    ae.decode_like(&z, s)
}

/// Decodes λ·enc(a) + (1 − λ)·enc(b).
pub fn latent_interpolate(ae: &Autoencoder, a: &Signal, b: &Signal, lambda: f64) -> Result<Signal> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::param(format!("lambda {lambda} outside [0, 1]")));
    }
    if a.label != b.label {
        return Err(Error::InvalidPairing(format!(
            "label mismatch {:?} vs {:?}",
            a.label, b.label
        )));
    }
    ae.ensure_ready()?;
    let za = ae.encode(a)?;
    let zb = ae.encode(b)?;
    let z: Vec<f64> = za
        .iter()
        .zip(&zb)
        .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
        .collect();
    ae.decode_like(&z, a)
}

/// The weak and strong operator families used during training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbSet {
    pub weak: Vec<PerturbSpec>,
    pub strong: Vec<PerturbSpec>,
}

impl Default for PerturbSet {
    fn default() -> Self {
        Self {
            weak: vec![
                PerturbSpec::new(PerturbKind::Jitter, &[("rel_sigma", 0.03)], 0),
                PerturbSpec::new(PerturbKind::UniformScale, &[("mu", 1.0), ("sigma", 0.1)], 0),
                PerturbSpec::new(PerturbKind::Splice, &[("tau", 0.8)], 0),
            ],
            strong: vec![
                PerturbSpec::new(
                    PerturbKind::MagnitudeWarp,
                    &[("n_knots", 4.0), ("sigma", 0.2)],
                    0,
                ),
                PerturbSpec::new(
                    PerturbKind::TimeWarp,
                    &[("n_knots", 4.0), ("sigma", 0.2)],
                    0,
                ),
                PerturbSpec::new(PerturbKind::SliceShuffle, &[("n_segments", 4.0)], 0),
                PerturbSpec::new(PerturbKind::RandomMask, &[("ratio", 0.15)], 0),
                PerturbSpec::new(PerturbKind::Rotate, &[], 0),
            ],
        }
    }
}

impl PerturbSet {
    /// Applies one operator picked uniformly from `family`.
    ///
    /// Operators that cannot run on this sample (rotation of a mono signal,
    /// a splice without partner or below threshold) fall back to jitter.
    pub fn apply_random(
        family: &[PerturbSpec],
        s: &Signal,
        partner: Option<&Signal>,
        rng: &mut Rng,
    ) -> Result<Signal> {
        let usable: Vec<&PerturbSpec> = family
            .iter()
            .filter(|p| !(p.kind == PerturbKind::Rotate && s.channels() < 2))
            .collect();
        let spec = usable[rng.random_range(0..usable.len())];
        let spec = resolve_relative(spec, s);
        let ctx = PerturbContext {
            partner: partner.filter(|p| p.label == s.label && p.same_shape(s)),
            ..Default::default()
        };
        let fallback = |rng: &mut Rng| jitter(s, 0.03 * s.std(), rng);
        match spec.kind {
            PerturbKind::Splice if ctx.partner.is_none() => fallback(rng),
            _ => match apply_with(&spec, s, ctx, rng)? {
                Some(out) => Ok(out),
                None => fallback(rng),
            },
        }
    }
}

/// Turns `rel_sigma` (a fraction of the sample std) into an absolute `sigma`.
fn resolve_relative(spec: &PerturbSpec, s: &Signal) -> PerturbSpec {
    let mut out = spec.clone();
    if let Some(rel) = out.params.remove("rel_sigma") {
        out.params.insert("sigma".into(), rel * s.std());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sig(values: Vec<f64>) -> Signal {
        Signal::mono(values)
            .unwrap()
            .with_label(1)
            .with_condition(2)
    }

    fn sine(t: usize, period: f64, phase: f64) -> Signal {
        sig((0..t)
            .map(|i| (2.0 * std::f64::consts::PI * i as f64 / period + phase).sin())
            .collect())
    }

    #[test]
    fn jitter_identity_and_mean() {
        let s = sine(64, 16.0, 0.0);
        let mut r = rng::from_seed(1);
        assert_eq!(jitter(&s, 0.0, &mut r).unwrap(), s);
        let z = sig(vec![0.0; 4096]);
        let out = jitter(&z, 0.1, &mut r).unwrap();
        let mean = out.values().iter().sum::<f64>() / 4096.0;
        assert!(mean.abs() < 3.0 * 0.1 / 64.0);
        assert!(jitter(&s, f64::NAN, &mut r).is_err());
    }

    #[test]
    fn jitter_deterministic() {
        let s = sine(64, 16.0, 0.0);
        let a = jitter(&s, 0.2, &mut rng::from_seed(9)).unwrap();
        let b = jitter(&s, 0.2, &mut rng::from_seed(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_scale_cases() {
        let mut r = rng::from_seed(3);
        let s = sine(64, 10.0, 0.3);
        assert_eq!(uniform_scale(&s, 1.0, 0.0, &mut r).unwrap(), s);
        let mut v = vec![1.0, 2.0, 3.0];
        v.resize(32, 0.0);
        let out = uniform_scale(&sig(v), 2.0, 0.0, &mut r).unwrap();
        assert_eq!(&out.values()[..3], &[2.0, 4.0, 6.0]);
        let out = uniform_scale(&s, 1.0, 0.3, &mut r).unwrap();
        let ratios: Vec<f64> = out
            .values()
            .iter()
            .zip(s.values())
            .filter(|(_, x)| x.abs() > 1e-9)
            .map(|(y, x)| y / x)
            .collect();
        assert!(ratios.iter().all(|q| (q - ratios[0]).abs() < 1e-12));
        assert!(uniform_scale(&s, 1.0, -1.0, &mut r).is_err());
        assert!(uniform_scale(&s, -50.0, 0.1, &mut r).is_err());
    }

    #[test]
    fn splice_identical_and_threshold() {
        let a = sine(128, 20.0, 0.0);
        let sp = splice_resample(&a, &a, 32, 1.0).unwrap().unwrap();
        assert_eq!(sp.signal, a);
        assert!((sp.similarity - 1.0).abs() < 1e-12);
        assert!(splice_resample(&a, &a, 32, 1.01).unwrap().is_none());
        assert!(splice_resample(&a, &a, 129, 0.5).is_err());
        let b = a.clone().with_label(5);
        assert!(matches!(
            splice_resample(&a, &b, 32, 0.5),
            Err(Error::InvalidPairing(_))
        ));
    }

    #[test]
    fn splice_cut_matches_exhaustive_scan() {
        let mut noise = rng::from_seed(42);
        let a = jitter(&sine(256, 37.0, 0.0), 0.05, &mut noise).unwrap();
        let b = jitter(&sine(256, 37.0, 0.4), 0.05, &mut noise).unwrap();
        // Independent scan: Pearson correlation at each offset.
        let w = 64;
        let mut best = (0usize, f64::NEG_INFINITY);
        for o in 0..=256 - w {
            let x = &a.values()[o..o + w];
            let y = &b.values()[o..o + w];
            let mx = x.iter().sum::<f64>() / w as f64;
            let my = y.iter().sum::<f64>() / w as f64;
            let cov: f64 = x.iter().zip(y).map(|(p, q)| (p - mx) * (q - my)).sum();
            let vx: f64 = x.iter().map(|p| (p - mx).powi(2)).sum();
            let vy: f64 = y.iter().map(|q| (q - my).powi(2)).sum();
            let r = cov / (vx * vy).sqrt();
            if r > best.1 {
                best = (o, r);
            }
        }
        let sp = splice_resample(&a, &b, w, 0.9)
            .unwrap()
            .expect("similar enough");
        assert_eq!(sp.offset, best.0);
        assert_eq!(sp.cut, best.0 + w / 2);
        assert_eq!(&sp.signal.values()[..sp.cut], &a.values()[..sp.cut]);
        assert_eq!(&sp.signal.values()[sp.cut..], &b.values()[sp.cut..]);
    }

    #[test]
    fn spline_interpolates_knots() {
        let xs = vec![0.0, 1.5, 4.0, 7.0, 9.0];
        let ys = vec![1.0, -0.5, 2.0, 0.3, 0.9];
        let sp = NaturalCubicSpline::new(xs.clone(), ys.clone()).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            assert!((sp.eval(*x) - y).abs() < 1e-9);
        }
        // A natural spline reproduces straight lines.
        let line = NaturalCubicSpline::new(xs.clone(), xs.iter().map(|x| 2.0 * x - 1.0).collect())
            .unwrap();
        assert!((line.eval(5.3) - 9.6).abs() < 1e-12);
    }

    #[test]
    fn magnitude_warp_cases() {
        let s = sine(128, 20.0, 0.0);
        let mut r = rng::from_seed(4);
        assert_eq!(magnitude_warp(&s, 4, 0.0, &mut r).unwrap(), s);
        let ones = sig(vec![1.0; 128]);
        let out = magnitude_warp(&ones, 5, 0.2, &mut rng::from_seed(11)).unwrap();
        let curve = random_curve(128, 5, 0.2, &mut rng::from_seed(11)).unwrap();
        for (o, c) in out.values().iter().zip(&curve) {
            assert!((o - c.max(MIN_WARP)).abs() < 1e-12);
        }
        assert!(magnitude_warp(&s, 1, 0.2, &mut r).is_err());
    }

    #[test]
    fn time_warp_cases() {
        let s = sine(128, 20.0, 0.0);
        assert_eq!(time_warp(&s, 4, 0.0, &mut rng::from_seed(1)).unwrap(), s);
        let ramp = sig((0..128).map(f64::from).collect());
        for seed in 0..20 {
            let tau = time_warp_map(128, 4, 0.4, &mut rng::from_seed(seed)).unwrap();
            assert_eq!(tau[0], 0.0);
            assert_eq!(tau[127], 127.0);
            let out = time_warp(&ramp, 4, 0.4, &mut rng::from_seed(seed)).unwrap();
            assert!(out.values().windows(2).all(|w| w[1] >= w[0]));
        }
        assert!(time_warp(&s, 1, 0.2, &mut rng::from_seed(1)).is_err());
    }

    #[test]
    fn rotate_cases() {
        let mut v: Vec<f64> = vec![1.0; 64];
        v.extend(vec![0.0; 64]);
        let s = Signal::new(v, 2, 1.0).unwrap();
        let eye = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(rotate(&s, &eye).unwrap(), s);
        let quarter = [0.0, -1.0, 1.0, 0.0];
        let out = rotate(&s, &quarter).unwrap();
        assert!(out.channel(0).iter().all(|x| x.abs() < 1e-12));
        assert!(out.channel(1).iter().all(|x| (x - 1.0).abs() < 1e-12));
        assert!(rotate(&s, &[1.0, 0.5, 0.0, 1.0]).is_err());
        let mono = sine(64, 8.0, 0.0);
        assert!(matches!(rotate(&mono, &[1.0]), Err(Error::Unsupported(_))));
    }

    #[test]
    fn rotation_preserves_norms() {
        let mut r = rng::from_seed(5);
        let values: Vec<f64> = (0..3 * 64).map(|i| (i as f64 * 0.37).sin()).collect();
        let s = Signal::new(values, 3, 1.0).unwrap();
        let rot = random_rotation(3, &mut r);
        let out = rotate(&s, &rot).unwrap();
        for t in 0..64 {
            let n0: f64 = (0..3).map(|c| s.channel(c)[t].powi(2)).sum();
            let n1: f64 = (0..3).map(|c| out.channel(c)[t].powi(2)).sum();
            assert!((n0.sqrt() - n1.sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn slice_shuffle_cases() {
        let s = sine(100, 13.0, 0.1);
        let mut r = rng::from_seed(6);
        assert_eq!(slice_shuffle(&s, 1, &mut r).unwrap(), s);
        assert!(slice_shuffle(&s, 101, &mut r).is_err());
        // n = T: output is the input permuted by the seeded order.
        let out = slice_shuffle(&s, 100, &mut rng::from_seed(8)).unwrap();
        let mut order: Vec<usize> = (0..100).collect();
        order.shuffle(&mut rng::from_seed(8));
        for (i, &k) in order.iter().enumerate() {
            assert_eq!(out.values()[i], s.values()[k]);
        }
    }

    #[test]
    fn random_mask_cases() {
        let s = sine(100, 13.0, 0.1);
        let mut r = rng::from_seed(7);
        assert_eq!(random_mask(&s, 0.0, MaskFill::Gaussian, &mut r).unwrap(), s);
        let z = random_mask(&s, 1.0, MaskFill::Zero, &mut r).unwrap();
        assert!(z.values().iter().all(|v| *v == 0.0));
        assert!(random_mask(&s, 1.5, MaskFill::Zero, &mut r).is_err());
        let line = sig((0..100).map(|i| 0.5 * i as f64 - 3.0).collect());
        for seed in 0..10 {
            let out = random_mask(
                &line,
                0.3,
                MaskFill::LinearInterp,
                &mut rng::from_seed(seed),
            )
            .unwrap();
            for (a, b) in out.values().iter().zip(line.values()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        let masked = random_mask(&s, 0.2, MaskFill::Gaussian, &mut rng::from_seed(2)).unwrap();
        let changed = masked
            .values()
            .iter()
            .zip(s.values())
            .filter(|(a, b)| a != b)
            .count();
        assert!(changed <= 20);
    }

    #[test]
    fn spec_strength_classification() {
        let j = PerturbSpec::new(PerturbKind::Jitter, &[("sigma", 0.1)], 1);
        assert_eq!(j.strength, Strength::Weak);
        let lj = PerturbSpec::new(PerturbKind::LatentJitter, &[("sigma", 0.5)], 1);
        assert_eq!(lj.strength, Strength::Strong);
        let mut bad = j.clone();
        bad.strength = Strength::Strong;
        assert!(bad.validate().is_err());
        let json = serde_json::to_string(&j).unwrap();
        assert!(json.contains("\"kind\":\"jitter\""));
        let back: PerturbSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, j);
    }

    proptest! {
        #[test]
        fn operators_preserve_shape_and_metadata(seed in 0u64..500, kind in 0usize..6) {
            let s = sine(96, 11.0, 0.2).with_source("x");
            let mut r = rng::from_seed(seed);
            let out = match kind {
                0 => jitter(&s, 0.1, &mut r),
                1 => uniform_scale(&s, 1.0, 0.1, &mut r),
                2 => magnitude_warp(&s, 4, 0.3, &mut r),
                3 => time_warp(&s, 4, 0.3, &mut r),
                4 => slice_shuffle(&s, 5, &mut r),
                _ => random_mask(&s, 0.25, MaskFill::Gaussian, &mut r),
            }.unwrap();
            prop_assert_eq!(out.len(), s.len());
            prop_assert_eq!(out.channels(), s.channels());
            prop_assert_eq!(out.label, s.label);
            prop_assert_eq!(out.condition, s.condition);
            prop_assert_eq!(&out.source_id, &s.source_id);
        }

        #[test]
        fn slice_shuffle_preserves_multiset(seed in 0u64..1000, n in 1usize..20) {
            let s = sine(97, 7.3, 0.4);
            let out = slice_shuffle(&s, n, &mut rng::from_seed(seed)).unwrap();
            let mut a = s.values().to_vec();
            let mut b = out.values().to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }
    }
}
