//! Evaluation metrics.
//!
//! Accuracies (RRA, RTA, AUC, APD, AJ, OA) are reported in percent, on
//! `[0, 100]`. Depth threshold accuracy is reported as a fraction on
//! `[0, 1]`, following the usual depth-benchmark convention. Angles are in
//! degrees.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pose::GeometryError;

pub mod depth;
pub mod pointcloud;
pub mod tracking;
pub mod trajectory;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch { what: &'static str, left: usize, right: usize },
    #[error("need at least {need} {what}, got {got}")]
    TooFew { what: &'static str, need: usize, got: usize },
    #[error("step {step} must be in 1..{len}")]
    InvalidStep { step: usize, len: usize },
    #[error("no valid pixels to evaluate")]
    EmptyValidMask,
    #[error("every frame pair has a zero-length baseline")]
    ZeroBaseline,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// One named scalar with free-form metadata (alignment, thresholds, ...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub name: String,
    pub value: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub entries: Vec<MetricEntry>,
}

impl MetricReport {
    pub fn push(&mut self, name: impl Into<String>, value: f64, meta: &[(&str, String)]) {
        self.entries.push(MetricEntry {
            name: name.into(),
            value,
            meta: meta.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        });
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.value)
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }

    /// `name,value,meta` rows; meta is `key=value` pairs joined by `;`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,value,meta\n");
        for e in &self.entries {
            let meta: Vec<String> = e.meta.iter().map(|(k, v)| format!("{k}={v}")).collect();
            out.push_str(&format!("{},{},{}\n", e.name, e.value, meta.join(";")));
        }
        out
    }
}

pub(crate) fn rms(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v * v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}
