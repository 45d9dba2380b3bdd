use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum number of time steps a sample may have.
pub const MIN_LEN: usize = 32;

/// A fixed-length multichannel waveform, stored channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    values: Vec<f64>,
    channels: usize,
    pub sample_rate: f64,
    pub label: Option<usize>,
    pub condition: usize,
    pub source_id: String,
}

impl Signal {
    pub fn new(values: Vec<f64>, channels: usize, sample_rate: f64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::input("signal needs at least one channel"));
        }
        if !values.len().is_multiple_of(channels) {
            return Err(Error::input(format!(
                "{} values do not split into {channels} channels",
                values.len()
            )));
        }
        let len = values.len() / channels;
        if len < MIN_LEN {
            return Err(Error::input(format!("signal length {len} below {MIN_LEN}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("signal contains non-finite values"));
        }
        Ok(Self {
            values,
            channels,
            sample_rate,
            label: None,
            condition: 0,
            source_id: String::new(),
        })
    }

    /// Single-channel signal at a nominal 1 Hz rate; handy for tests and tooling.
    pub fn mono(values: Vec<f64>) -> Result<Self> {
        Self::new(values, 1, 1.0)
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_condition(mut self, condition: usize) -> Self {
        self.condition = condition;
        self
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source_id = source.into();
        self
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of time steps T.
    pub fn len(&self) -> usize {
        self.values.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let t = self.len();
        &self.values[c * t..(c + 1) * t]
    }

    /// Same metadata, new values. Values must keep the shape.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::input(format!(
                "shape change {} -> {}",
                self.values.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure(
                "operator produced non-finite values".into(),
            ));
        }
        Ok(Self {
            values,
            ..self.clone()
        })
    }

    pub fn same_shape(&self, other: &Signal) -> bool {
        self.channels == other.channels && self.values.len() == other.values.len()
    }

    pub fn mean_abs(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum::<f64>() / self.values.len() as f64
    }

    pub fn std(&self) -> f64 {
        let n = self.values.len() as f64;
        let m = self.values.iter().sum::<f64>() / n;
        (self.values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
    }
}
