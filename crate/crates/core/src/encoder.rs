//! Feature encoder, metric encoder, autoencoder and the training helpers
//! shared by every learned component.
//!
//! A [`Network`] is a sequence of [`LayerSpec`] units with all weights in one
//! flat `f64` vector. Forward passes are recorded on an autodiff [`Graph`] so
//! that any scalar loss built on top of them can be differentiated.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::signal::Signal;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        c: usize,
    },
    MaxPool2,
    Relu,
    LeakyRelu {
        slope: f64,
    },
    Tanh,
    Sigmoid,
    /// Global average pool over the time axis.
    Gap,
    Affine {
        inp: usize,
        out: usize,
    },
}

impl LayerSpec {
    fn n_params(&self) -> usize {
        match *self {
            LayerSpec::Conv { cin, cout, k, .. } => cout * cin * k + cout,
            LayerSpec::BatchNorm { c } => 2 * c,
            LayerSpec::Affine { inp, out } => out * inp + out,
            _ => 0,
        }
    }

    fn n_running(&self) -> usize {
        match *self {
            LayerSpec::BatchNorm { c } => 2 * c,
            _ => 0,
        }
    }

    /// Per-sample output shape, or an error when `shape` does not fit.
    fn out_shape(&self, shape: &[usize]) -> Result<Vec<usize>> {
        let bad = |what: &str| Err(Error::param(format!("{what} does not fit input {shape:?}")));
        match *self {
            LayerSpec::Conv {
                cin,
                cout,
                k,
                stride,
                pad,
            } => {
                if shape.len() != 2 || shape[0] != cin || shape[1] + 2 * pad < k || stride == 0 {
                    return bad("conv");
                }
                Ok(vec![cout, (shape[1] + 2 * pad - k) / stride + 1])
            }
            LayerSpec::BatchNorm { c } => {
                if shape.is_empty() || shape.len() > 2 || shape[0] != c {
                    return bad("batch norm");
                }
                Ok(shape.to_vec())
            }
            LayerSpec::MaxPool2 => {
                let mut s = shape.to_vec();
                match s.last_mut() {
                    Some(l) if *l >= 2 => *l /= 2,
                    _ => return bad("max pool"),
                }
                Ok(s)
            }
            LayerSpec::Gap => {
                if shape.len() != 2 {
                    return bad("global pool");
                }
                Ok(vec![shape[0]])
            }
            LayerSpec::Affine { inp, out } => {
                if shape.iter().product::<usize>() != inp {
                    return bad("affine");
                }
                Ok(vec![out])
            }
            _ => Ok(shape.to_vec()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch-norm uses batch statistics.
    Train,
    /// Batch-norm uses running statistics.
    Eval,
}

/// Result of a recorded forward pass.
pub struct Forward {
    pub out: Var,
    norms: Vec<(usize, Var)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<LayerSpec>,
    /// Per-sample input shape.
    pub input: Vec<usize>,
    pub params: Vec<f64>,
    /// Batch-norm running mean and variance, layer by layer.
    pub running: Vec<f64>,
}

impl Network {
    pub fn new(layers: Vec<LayerSpec>, input: Vec<usize>, rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(layers, input)?;
        let mut off = 0;
        for layer in &net.layers {
            match *layer {
                LayerSpec::Conv { cin, cout, k, .. } => {
                    let bound = 1.0 / ((cin * k) as f64).sqrt();
                    for v in &mut net.params[off..off + cout * cin * k + cout] {
                        *v = rng.random_range(-bound..bound);
                    }
                }
                LayerSpec::Affine { inp, out } => {
                    let bound = 1.0 / (inp as f64).sqrt();
                    for v in &mut net.params[off..off + out * inp + out] {
                        *v = rng.random_range(-bound..bound);
                    }
                }
                _ => {}
            }
            off += layer.n_params();
        }
        Ok(net)
    }

    /// All weights zero, batch-norm scale one.
    pub fn zeros(layers: Vec<LayerSpec>, input: Vec<usize>) -> Result<Self> {
        let mut shape = input.clone();
        for l in &layers {
            shape = l.out_shape(&shape)?;
        }
        let n_params = layers.iter().map(LayerSpec::n_params).sum();
        let n_running = layers.iter().map(LayerSpec::n_running).sum();
        let mut params = vec![0.0; n_params];
        let mut running = vec![0.0; n_running];
        let (mut off, mut roff) = (0, 0);
        for l in &layers {
            if let LayerSpec::BatchNorm { c } = *l {
                params[off..off + c].iter_mut().for_each(|v| *v = 1.0);
                running[roff + c..roff + 2 * c]
                    .iter_mut()
                    .for_each(|v| *v = 1.0);
            }
            off += l.n_params();
            roff += l.n_running();
        }
        Ok(Self {
            layers,
            input,
            params,
            running,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut shape = self.input.clone();
        for l in &self.layers {
            shape = l.out_shape(&shape).expect("validated at construction");
        }
        shape
    }

    pub fn output_dim(&self) -> usize {
        self.output_shape().iter().product()
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    /// Records the forward pass of `x` (`[n, ..input]`) with weights `p`.
    pub fn forward(&self, g: &mut Graph, p: Var, x: Var, mode: Mode) -> Forward {
        let n = g.numel(x) / self.input_len();
        let shape: Vec<usize> = std::iter::once(n)
            .chain(self.input.iter().copied())
            .collect();
        let mut h = g.reshape(x, &shape);
        let (mut off, mut roff) = (0, 0);
        let mut norms = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            h = match *layer {
                LayerSpec::Conv {
                    cin,
                    cout,
                    k,
                    stride,
                    pad,
                } => {
                    let w = g.slice(p, off, &[cout, cin, k]);
                    let b = g.slice(p, off + cout * cin * k, &[cout]);
                    g.conv1d(h, w, b, stride, pad)
                }
                LayerSpec::BatchNorm { c } => {
                    let gamma = g.slice(p, off, &[c]);
                    let beta = g.slice(p, off + c, &[c]);
                    match mode {
                        Mode::Train => {
                            let out = g.batch_norm(h, gamma, beta, BN_EPS);
                            norms.push((li, out));
                            out
                        }
                        Mode::Eval => {
                            let rm = &self.running[roff..roff + c];
                            let rv = &self.running[roff + c..roff + 2 * c];
                            g.frozen_norm(h, gamma, beta, rm, rv, BN_EPS)
                        }
                    }
                }
                LayerSpec::MaxPool2 => g.max_pool2(h),
                LayerSpec::Relu => g.relu(h),
                LayerSpec::LeakyRelu { slope } => g.leaky_relu(h, slope),
                LayerSpec::Tanh => g.tanh(h),
                LayerSpec::Sigmoid => g.sigmoid(h),
                LayerSpec::Gap => g.mean_last(h),
                LayerSpec::Affine { inp, out } => {
                    let w = g.slice(p, off, &[out, inp]);
                    let b = g.slice(p, off + out * inp, &[out]);
                    g.affine(h, w, b)
                }
            };
            off += layer.n_params();
            roff += layer.n_running();
        }
        Forward { out: h, norms }
    }

    /// Folds batch statistics from a training forward pass into the running ones.
    pub fn update_running(&mut self, g: &Graph, fwd: &Forward) {
        let mut roffs = Vec::with_capacity(self.layers.len());
        let mut roff = 0;
        for l in &self.layers {
            roffs.push(roff);
            roff += l.n_running();
        }
        for &(li, v) in &fwd.norms {
            let Some(stats) = g.batch_stats(v) else {
                continue;
            };
            let c = stats.mean.len();
            let base = roffs[li];
            for ch in 0..c {
                let rm = &mut self.running[base + ch];
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * stats.mean[ch];
                let rv = &mut self.running[base + c + ch];
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * stats.var[ch];
            }
        }
    }

    /// Inference on a flat batch; one output row per sample.
    pub fn infer(&self, inputs: &[f64]) -> Result<Vec<Vec<f64>>> {
        let per = self.input_len();
        if inputs.is_empty() || !inputs.len().is_multiple_of(per) {
            return Err(Error::input(format!(
                "input of {} values does not match per-sample size {per}",
                inputs.len()
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("non-finite input"));
        }
        let n = inputs.len() / per;
        let mut g = Graph::new();
        let p = g.constant(&self.params, &[self.params.len()]);
        let x = g.constant(inputs, &[n, per]);
        let out = self.forward(&mut g, p, x, Mode::Eval).out;
        let d = self.output_dim();
        Ok(g.value(out).chunks(d).map(<[f64]>::to_vec).collect())
    }
}

/// Default feature-encoder stack for `channels` input channels and output size `d`.
pub fn feature_layers(channels: usize, d: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv {
            cin: channels,
            cout: 8,
            k: 7,
            stride: 2,
            pad: 0,
        },
        LayerSpec::Relu,
        LayerSpec::Conv {
            cin: 8,
            cout: 16,
            k: 5,
            stride: 2,
            pad: 0,
        },
        LayerSpec::Relu,
        LayerSpec::Gap,
        LayerSpec::Affine { inp: 16, out: d },
    ]
}

/// Metric-encoder stack for feature dimension `d` (treated as a 1×d sequence).
pub fn metric_layers(d: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv {
            cin: 1,
            cout: 32,
            k: 3,
            stride: 1,
            pad: 1,
        },
        LayerSpec::BatchNorm { c: 32 },
        LayerSpec::MaxPool2,
        LayerSpec::LeakyRelu { slope: 0.2 },
        LayerSpec::Affine {
            inp: 32 * (d / 2),
            out: 128,
        },
        LayerSpec::BatchNorm { c: 128 },
        LayerSpec::Relu,
        LayerSpec::Affine { inp: 128, out: 1 },
        LayerSpec::Sigmoid,
    ]
}

/// f_θ: signal → d-dimensional feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEncoder {
    pub net: Network,
}

impl FeatureEncoder {
    pub fn new(channels: usize, len: usize, d: usize, rng: &mut Rng) -> Result<Self> {
        if d == 0 {
            return Err(Error::param("feature dimension must be positive"));
        }
        Ok(Self {
            net: Network::new(feature_layers(channels, d), vec![channels, len], rng)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn channels(&self) -> usize {
        self.net.input[0]
    }

    pub fn len(&self) -> usize {
        self.net.input[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, s: &Signal) -> Result<()> {
        if s.channels() != self.channels() || s.len() != self.len() {
            return Err(Error::input(format!(
                "signal {}x{} does not match encoder input {}x{}",
                s.channels(),
                s.len(),
                self.channels(),
                self.len()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, s: &Signal) -> Result<Vec<f64>> {
        self.check(s)?;
        Ok(self.net.infer(s.values())?.remove(0))
    }

    pub fn encode_batch(&self, signals: &[&Signal]) -> Result<Vec<Vec<f64>>> {
        if signals.is_empty() {
            return Ok(Vec::new());
        }
        let mut flat = Vec::with_capacity(signals.len() * self.net.input_len());
        for s in signals {
            self.check(s)?;
            flat.extend_from_slice(s.values());
        }
        self.net.infer(&flat)
    }

    /// Records the encoding of `signals` as a `[n, d]` tensor.
    pub fn forward(&self, g: &mut Graph, p: Var, signals: &[&Signal]) -> Result<Var> {
        let mut flat = Vec::with_capacity(signals.len() * self.net.input_len());
        for s in signals {
            self.check(s)?;
            flat.extend_from_slice(s.values());
        }
        let x = g.constant(&flat, &[signals.len(), self.net.input_len()]);
        Ok(self.net.forward(g, p, x, Mode::Train).out)
    }
}

/// E_φ: feature vector → scale factor in (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEncoder {
    pub net: Network,
}

impl MetricEncoder {
    pub fn new(d: usize, rng: &mut Rng) -> Result<Self> {
        if d < 2 {
            return Err(Error::param("metric encoder needs d >= 2"));
        }
        Ok(Self {
            net: Network::new(metric_layers(d), vec![1, d], rng)?,
        })
    }

    pub fn scale(&self, x: &[f64]) -> Result<f64> {
        Ok(self.net.infer(x)?[0][0])
    }
}

/// The scale function used by the modified distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Metric {
    Learned(MetricEncoder),
    /// E ≡ 1: Euclidean distance between unit-normalized vectors.
    Unit,
}

impl Metric {
    pub fn scale(&self, x: &[f64]) -> Result<f64> {
        match self {
            Metric::Learned(m) => m.scale(x),
            Metric::Unit => {
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::input("non-finite feature"));
                }
                Ok(1.0)
            }
        }
    }

    /// Scale factors for the rows of `x` (`[n, d]`) as an `[n]` tensor.
    ///
    /// `p` holds the metric weights when learned; `Mode::Train` uses batch
    /// statistics over the rows.
    pub fn scales(
        &self,
        g: &mut Graph,
        p: Option<Var>,
        x: Var,
        mode: Mode,
    ) -> (Var, Option<Forward>) {
        let n = g.shape(x)[0];
        match self {
            Metric::Learned(m) => {
                let p = p.unwrap_or_else(|| g.constant(&m.net.params, &[m.net.params.len()]));
                let fwd = m.net.forward(g, p, x, mode);
                let out = g.reshape(fwd.out, &[n]);
                (out, Some(fwd))
            }
            Metric::Unit => (g.constant(&vec![1.0; n], &[n]), None),
        }
    }

    pub fn params(&self) -> Option<&[f64]> {
        match self {
            Metric::Learned(m) => Some(&m.net.params),
            Metric::Unit => None,
        }
    }
}

/// Row `x / (‖x‖·E(x))`.
pub fn scaled_unit(x: &[f64], scale: f64) -> Result<Vec<f64>> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::DegenerateInput("zero-norm feature vector".into()));
    }
    Ok(x.iter().map(|v| v / (norm * scale)).collect())
}

/// d_φ(x_i, x_j) = ‖x_i/(‖x_i‖E(x_i)) − x_j/(‖x_j‖E(x_j))‖.
pub fn modified_distance(metric: &Metric, xi: &[f64], xj: &[f64]) -> Result<f64> {
    if xi.len() != xj.len() {
        return Err(Error::input("feature dimensions differ"));
    }
    let a = scaled_unit(xi, metric.scale(xi)?)?;
    let b = scaled_unit(xj, metric.scale(xj)?)?;
    Ok(euclid(&a, &b))
}

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Dense autoencoder over flattened signals, used for latent-space perturbations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Autoencoder {
    pub encoder: Network,
    pub decoder: Network,
    pub channels: usize,
    pub len: usize,
    /// Mean squared reconstruction error above which the model is not ready.
    pub ready_bound: f64,
    /// Error measured after the last training run.
    pub recon_error: Option<f64>,
}

impl Autoencoder {
    pub fn new(
        channels: usize,
        len: usize,
        latent: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let n = channels * len;
        let encoder = Network::new(
            vec![
                LayerSpec::Affine {
                    inp: n,
                    out: hidden,
                },
                LayerSpec::Tanh,
                LayerSpec::Affine {
                    inp: hidden,
                    out: latent,
                },
            ],
            vec![n],
            rng,
        )?;
        let decoder = Network::new(
            vec![
                LayerSpec::Affine {
                    inp: latent,
                    out: hidden,
                },
                LayerSpec::Tanh,
                LayerSpec::Affine {
                    inp: hidden,
                    out: n,
                },
            ],
            vec![latent],
            rng,
        )?;
        Ok(Self {
            encoder,
            decoder,
            channels,
            len,
            ready_bound: 0.5,
            recon_error: None,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn ensure_ready(&self) -> Result<()> {
        match self.recon_error {
            Some(e) if e <= self.ready_bound => Ok(()),
            Some(e) => Err(Error::ModelNotReady(format!(
                "reconstruction error {e:.4} above bound {}",
                self.ready_bound
            ))),
            None => Err(Error::ModelNotReady("autoencoder is untrained".into())),
        }
    }

    pub fn encode(&self, s: &Signal) -> Result<Vec<f64>> {
        if s.channels() != self.channels || s.len() != self.len {
            return Err(Error::input("signal shape does not match autoencoder"));
        }
        Ok(self.encoder.infer(s.values())?.remove(0))
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.latent_dim() {
            return Err(Error::input(format!(
                "latent of size {} expected {}",
                z.len(),
                self.latent_dim()
            )));
        }
        Ok(self.decoder.infer(z)?.remove(0))
    }

    /// Decodes `z` into a signal carrying the metadata of `like`.
    pub fn decode_like(&self, z: &[f64], like: &Signal) -> Result<Signal> {
        like.with_values(self.decode(z)?)
    }

    fn loss(&self, g: &mut Graph, pe: Var, pd: Var, flat: &[f64], n: usize) -> Var {
        let x = g.constant(flat, &[n, self.channels * self.len]);
        let z = self.encoder.forward(g, pe, x, Mode::Train).out;
        let y = self.decoder.forward(g, pd, z, Mode::Train).out;
        let y = g.reshape(y, &[flat.len()]);
        let x = g.reshape(x, &[flat.len()]);
        let diff = g.sub(y, x);
        let sq = g.square(diff);
        g.mean(sq)
    }

    pub fn reconstruction_error(&self, signals: &[&Signal]) -> Result<f64> {
        let flat: Vec<f64> = signals
            .iter()
            .flat_map(|s| s.values().iter().copied())
            .collect();
        let mut g = Graph::new();
        let pe = g.constant(&self.encoder.params, &[self.encoder.params.len()]);
        let pd = g.constant(&self.decoder.params, &[self.decoder.params.len()]);
        let l = self.loss(&mut g, pe, pd, &flat, signals.len());
        Ok(g.scalar(l))
    }

    /// Full-batch Adam; returns the loss before each epoch.
    pub fn train(&mut self, signals: &[&Signal], epochs: usize, lr: f64) -> Result<Vec<f64>> {
        if signals.is_empty() {
            return Err(Error::InsufficientData("no signals to train on".into()));
        }
        for s in signals {
            if s.channels() != self.channels || s.len() != self.len {
                return Err(Error::input("signal shape does not match autoencoder"));
            }
        }
        let flat: Vec<f64> = signals
            .iter()
            .flat_map(|s| s.values().iter().copied())
            .collect();
        let n = signals.len();
        let mut opt_e = Adam::new(lr, self.encoder.params.len());
        let mut opt_d = Adam::new(lr, self.decoder.params.len());
        let mut curve = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let step = differentiate(&[&self.encoder.params, &self.decoder.params], |g, p| {
                Ok((self.loss(g, p[0], p[1], &flat, n), ()))
            })?;
            curve.push(step.loss);
            opt_e.step(&mut self.encoder.params, &step.grads[0]);
            opt_d.step(&mut self.decoder.params, &step.grads[1]);
        }
        self.recon_error = Some(self.reconstruction_error(signals)?);
        Ok(curve)
    }
}

/// Loss value and gradients for each parameter block, plus the recorded graph.
pub struct Step<T> {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub graph: Graph,
    pub extra: T,
}

/// Evaluates `f` with one trainable leaf per block and differentiates it.
pub fn differentiate<T, F>(blocks: &[&[f64]], f: F) -> Result<Step<T>>
where
    F: FnOnce(&mut Graph, &[Var]) -> Result<(Var, T)>,
{
    let mut g = Graph::new();
    let leaves: Vec<Var> = blocks.iter().map(|b| g.param(b, &[b.len()])).collect();
    let (out, extra) = f(&mut g, &leaves)?;
    let loss = g.scalar(out);
    if !loss.is_finite() {
        return Err(Error::NumericalFailure(format!("loss evaluated to {loss}")));
    }
    let gr = g.backward(out);
    let grads: Vec<Vec<f64>> = leaves
        .iter()
        .zip(blocks)
        .map(|(v, b)| gr.of(*v, b.len()))
        .collect();
    for (i, gv) in grads.iter().enumerate() {
        if let Some(j) = gv.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure(format!(
                "non-finite gradient in block {i} at index {j}"
            )));
        }
    }
    Ok(Step {
        loss,
        grads,
        graph: g,
        extra,
    })
}

/// One plain gradient-descent step: `params − lr·∇`.
pub fn train_step<F>(params: &[f64], loss_fn: F, lr: f64) -> Result<(Vec<f64>, f64)>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    let step = differentiate(&[params], |g, p| Ok((loss_fn(g, p[0])?, ())))?;
    let next = params
        .iter()
        .zip(&step.grads[0])
        .map(|(w, d)| w - lr * d)
        .collect();
    Ok((next, step.loss))
}

/// Gradients below this magnitude are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// Worst relative error between analytic and central finite-difference gradients.
///
/// Checks every weight, or `subset` seeded random weights when given and
/// smaller than the parameter count. Errors are `|a − n| / max(|a|, |n|, floor)`.
pub fn grad_check<F>(params: &[f64], loss_fn: F, eps: f64, subset: Option<(usize, u64)>) -> f64
where
    F: Fn(&mut Graph, Var) -> Var,
{
    let eval = |w: &[f64]| {
        let mut g = Graph::new();
        let p = g.constant(w, &[w.len()]);
        let out = loss_fn(&mut g, p);
        g.scalar(out)
    };
    let mut g = Graph::new();
    let p = g.param(params, &[params.len()]);
    let out = loss_fn(&mut g, p);
    let analytic = g.backward(out).of(p, params.len());
    let indices: Vec<usize> = match subset {
        Some((k, seed)) if k < params.len() => {
            let mut r = rng::from_seed(seed);
            rand::seq::index::sample(&mut r, params.len(), k).into_vec()
        }
        _ => (0..params.len()).collect(),
    };
    let mut w = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in indices {
        let orig = w[i];
        w[i] = orig + eps;
        let up = eval(&w);
        w[i] = orig - eps;
        let down = eval(&w);
        w[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
    }
    worst
}

/// Adam with bias correction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

const CKPT_MAGIC: &[u8; 8] = b"UBMFCKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub layers: Vec<LayerSpec>,
    pub input: Vec<usize>,
    pub n_params: usize,
    pub n_running: usize,
    pub seed: u64,
    pub step: u64,
}

/// Writes magic, header length (u32 LE), JSON header, then weights and
/// running statistics as f64 LE.
pub fn save_network(path: &Path, net: &Network, kind: &str, seed: u64, step: u64) -> Result<()> {
    let header = CheckpointHeader {
        kind: kind.to_string(),
        layers: net.layers.clone(),
        input: net.input.clone(),
        n_params: net.params.len(),
        n_running: net.running.len(),
        seed,
        step,
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for v in net.params.iter().chain(&net.running) {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_network(path: &Path) -> Result<(Network, CheckpointHeader)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "not a checkpoint".into(),
        });
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json).map_err(|e| Error::Format {
        offset: 12,
        message: e.to_string(),
    })?;
    let mut net = Network::zeros(header.layers.clone(), header.input.clone())?;
    if net.params.len() != header.n_params || net.running.len() != header.n_running {
        return Err(Error::Format {
            offset: 12,
            message: "header sizes disagree with layer stack".into(),
        });
    }
    let mut buf = [0u8; 8];
    let total = header.n_params + header.n_running;
    for i in 0..total {
        r.read_exact(&mut buf).map_err(|_| Error::Format {
            offset: 12 + json.len() as u64 + 8 * i as u64,
            message: "truncated weight blob".into(),
        })?;
        let v = f64::from_le_bytes(buf);
        if i < header.n_params {
            net.params[i] = v;
        } else {
            net.running[i - header.n_params] = v;
        }
    }
    Ok((net, header))
}
