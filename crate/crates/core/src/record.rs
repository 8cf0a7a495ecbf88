//! Run records: one result per sweep point plus fits and metadata.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::fit::FitResult;
use crate::imaging::ScanMap;
use crate::readout::CurrentTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub index: usize,
    pub sweep_value: f64,
    /// Sub-series label, e.g. the echo projection or the NV identifier.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub variant: String,
    /// Q_int (C) for the charge protocols, a probability for hole capture.
    pub value: f64,
    pub sigma: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunRecord {
    pub protocol: String,
    pub sweep_name: String,
    pub sweep_unit: String,
    pub value_name: String,
    pub value_unit: String,
    pub points: Vec<PointResult>,
    #[serde(default)]
    pub fits: BTreeMap<String, FitResult>,
    /// Scalar results derived from the sweep (contrast, collapse statistics, ...).
    #[serde(default)]
    pub derived: BTreeMap<String, f64>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    pub warnings: Vec<String>,
    /// Raw traces keyed by point index, when requested.
    #[serde(skip)]
    pub traces: Vec<(usize, CurrentTrace)>,
    /// Host wall time; reported in the manifest only.
    #[serde(skip)]
    pub wall_time_s: f64,
    /// Maps produced by the imaging protocols.
    #[serde(skip)]
    pub maps: Vec<ScanMap>,
}

impl RunRecord {
    pub fn new(protocol: impl Into<String>, sweep_name: impl Into<String>, sweep_unit: impl Into<String>) -> Self {
        Self {
            protocol: protocol.into(),
            sweep_name: sweep_name.into(),
            sweep_unit: sweep_unit.into(),
            value_name: "q_int".into(),
            value_unit: "C".into(),
            ..Default::default()
        }
    }

    /// Points of one variant, in sweep order.
    pub fn series(&self, variant: &str) -> Vec<&PointResult> {
        self.points.iter().filter(|p| p.variant == variant).collect()
    }

    pub fn variants(&self) -> Vec<String> {
        let mut v: Vec<String> = Vec::new();
        for p in &self.points {
            if !v.contains(&p.variant) {
                v.push(p.variant.clone());
            }
        }
        v
    }

    /// CSV with one row per point: index, variant, sweep value, value, σ, seed
    /// and any extra columns present on every point.
    pub fn to_csv(&self) -> String {
        let mut extra: Vec<&String> = self.points.first().map(|p| p.extra.keys().collect()).unwrap_or_default();
        extra.retain(|k| self.points.iter().all(|p| p.extra.contains_key(*k)));
        let mut s = format!(
            "index,variant,{}_{},{}_{},sigma_{},seed",
            self.sweep_name, self.sweep_unit, self.value_name, self.value_unit, self.value_unit
        );
        for k in &extra {
            s.push(',');
            s.push_str(k);
        }
        s.push('\n');
        for p in &self.points {
            s.push_str(&format!("{},{},{:e},{:e},{:e},{}", p.index, p.variant, p.sweep_value, p.value, p.sigma, p.seed));
            for k in &extra {
                s.push_str(&format!(",{:e}", p.extra[*k]));
            }
            s.push('\n');
        }
        s
    }
}
