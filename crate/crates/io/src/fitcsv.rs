//! Fitting of previously written CSV files: current traces and sweep tables.

use std::collections::BTreeMap;

use ccdmr_core::fit::{self, EchoOptions, FitResult, Lineshape, Spectrum};
use ccdmr_core::readout::{AmplifierChain, CurrentTrace};
use ccdmr_core::sequence::protocols::fit_release;
use serde::{Deserialize, Serialize};

use crate::manifest::SCHEMA_VERSION;
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitModel {
    /// Chosen from the file: double exponential for traces, otherwise from
    /// the sweep column name.
    Auto,
    Lorentzian,
    Lorentzian2,
    Gaussian,
    Sinusoid,
    Echo,
    DoubleExponential,
    Exponential,
}

impl FitModel {
    pub fn parse(s: &str) -> Result<Self, Error> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Usage(format!("unknown fit model `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub schema_version: u32,
    pub source: String,
    pub model: FitModel,
    pub fit: FitResult,
    #[serde(default)]
    pub derived: BTreeMap<String, f64>,
}

struct Table {
    x_name: String,
    y_unit: String,
    rows: Vec<(String, f64, f64, f64)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Core(ccdmr_core::Error::Parse(msg.into()))
}

fn read_table(text: &str) -> Result<Table, Error> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty file"))?.split(',').map(str::trim).collect();
    if header.len() < 6 || header[0] != "index" || header[1] != "variant" || !header[4].starts_with("sigma_") {
        return Err(bad("expected a sweep table with header `index,variant,<sweep>,<value>,sigma_<unit>,seed`"));
    }
    let y_unit = header[3].rsplit('_').next().unwrap_or("").to_string();
    let mut rows = Vec::new();
    for (n, l) in lines.enumerate() {
        let c: Vec<&str> = l.split(',').map(str::trim).collect();
        if c.len() < 6 {
            return Err(bad(format!("row {}: expected at least 6 columns", n + 2)));
        }
        let num = |i: usize| c[i].parse::<f64>().map_err(|_| bad(format!("row {}: `{}` is not a number", n + 2, c[i])));
        rows.push((c[1].to_string(), num(2)?, num(3)?, num(4)?));
    }
    if rows.is_empty() {
        return Err(bad("no data rows"));
    }
    Ok(Table {
        x_name: header[2].to_string(),
        y_unit,
        rows,
    })
}

fn spectrum(x: Vec<f64>, y: Vec<f64>, s: Vec<f64>) -> Result<Spectrum, Error> {
    Ok(if s.iter().all(|v| *v > 0.0) {
        Spectrum::new(x, y, s)?
    } else {
        Spectrum::unweighted(x, y)?
    })
}

fn fit_table(t: &Table, model: FitModel) -> Result<FitReport, Error> {
    let model = match model {
        FitModel::Auto => match t.x_name.as_str() {
            "frequency_Hz" => FitModel::Lorentzian,
            "mw_duration_s" => FitModel::Sinusoid,
            "tau_s" => FitModel::Echo,
            other => return Err(Error::Usage(format!("no default model for sweep `{other}`; pass --model"))),
        },
        FitModel::DoubleExponential => return Err(Error::Usage("double_exponential applies to trace files".into())),
        m => m,
    };
    // charges are fitted in pC, as the protocols do
    let ys = if t.y_unit == "C" { 1e12 } else { 1.0 };
    let xs = match t.x_name.as_str() {
        "frequency_Hz" => 1e-6,
        "mw_duration_s" => 1e9,
        "tau_s" => 1e6,
        _ => 1.0,
    };
    let x: Vec<f64> = t.rows.iter().map(|r| r.1 * xs).collect();
    let y: Vec<f64> = t.rows.iter().map(|r| r.2 * ys).collect();
    let s: Vec<f64> = t.rows.iter().map(|r| r.3 * ys).collect();
    let mut derived = BTreeMap::new();
    let fit = match model {
        FitModel::Lorentzian | FitModel::Lorentzian2 | FitModel::Gaussian => {
            let n = if model == FitModel::Lorentzian2 { 2 } else { 1 };
            let shape = if model == FitModel::Gaussian { Lineshape::Gaussian } else { Lineshape::Lorentzian };
            let f = fit::fit_dips(&spectrum(x, y, s)?, n, shape)?;
            if n == 2 {
                derived.insert("split".into(), (f.value("center_2") - f.value("center_1")).abs());
            }
            f
        }
        FitModel::Sinusoid => {
            let f = fit::fit_damped_sinusoid(&spectrum(x, y, s)?)?;
            derived.insert("contrast".into(), 2.0 * f.value("amplitude").abs() / f.value("offset"));
            f
        }
        FitModel::Echo => {
            let pick = |v: &str| -> Vec<&(String, f64, f64, f64)> { t.rows.iter().filter(|r| r.0 == v).collect() };
            let (a, b) = (pick("half_pi"), pick("three_halves_pi"));
            if a.is_empty() || a.len() != b.len() {
                return Err(bad("echo fit needs matching `half_pi` and `three_halves_pi` rows"));
            }
            let mut tx = Vec::new();
            let mut d = Vec::new();
            let mut ds = Vec::new();
            for (p, q) in a.iter().zip(&b) {
                let sum = p.2 + q.2;
                tx.push(p.1 * xs);
                d.push((q.2 - p.2) / sum);
                let g1 = -2.0 * q.2 / (sum * sum);
                let g3 = 2.0 * p.2 / (sum * sum);
                ds.push(((g1 * p.3).powi(2) + (g3 * q.3).powi(2)).sqrt());
            }
            fit::fit_echo(&spectrum(tx, d, ds)?, EchoOptions { fix_exponent: None, free_amplitude: true })?
        }
        FitModel::Exponential => fit::fit_exponential(&spectrum(x, y, s)?, true)?,
        FitModel::Auto | FitModel::DoubleExponential => unreachable!(),
    };
    Ok(FitReport {
        schema_version: SCHEMA_VERSION,
        source: "sweep".into(),
        model,
        fit,
        derived,
    })
}

/// Fit a trace file (`# key=value` header, `t_s,current_A` rows) or a sweep
/// table written by `run`.
pub fn fit_csv(text: &str, model: FitModel) -> Result<FitReport, Error> {
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    if first.starts_with('#') || first.replace(' ', "") == "t_s,current_A" {
        if !matches!(model, FitModel::Auto | FitModel::DoubleExponential) {
            return Err(Error::Usage("trace files are fitted with the double exponential".into()));
        }
        let tr = CurrentTrace::read_csv(text.as_bytes())?;
        let chain = AmplifierChain {
            cutoff_hz: if tr.meta.cutoff_hz > 0.0 { tr.meta.cutoff_hz } else { AmplifierChain::default().cutoff_hz },
            ..AmplifierChain::default()
        };
        let fit = fit_release(&tr, chain.time_constant_s())?;
        let mut derived = BTreeMap::new();
        derived.insert("tau_s".into(), fit.value("tau_s"));
        return Ok(FitReport {
            schema_version: SCHEMA_VERSION,
            source: "trace".into(),
            model: FitModel::DoubleExponential,
            fit,
            derived,
        });
    }
    fit_table(&read_table(text)?, model)
}
