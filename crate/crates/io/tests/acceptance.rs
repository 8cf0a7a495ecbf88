//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ccdmr_core::fit::poisson_mixture_threshold;
use ccdmr_core::imaging::{prepared_minus_fraction, preparation_statistics, ChargeReadoutModel};
use ccdmr_core::photophysics::SpinManifold;
use ccdmr_core::readout::{
    integrate_excess_charge, synthesize, synthesize_trace, AmplifierChain, AnalyticCurrent, CurrentSource, QIntOptions,
    SampledCurrent, TraceMeta,
};
use ccdmr_core::record::RunRecord;
use ccdmr_core::sequence::protocols::{run_protocol, CcdmrParams, RabiParams, Sweep};
use ccdmr_core::sequence::{build_protocol, execute, ExecOptions, Protocol, World};
use ccdmr_core::traps::TrapBank;
use ccdmr_io::{load_config, orchestrate, ExperimentConfig, RunOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn bundled(name: &str) -> ExperimentConfig {
    let path = configs_dir().join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    load_config(&text).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn run_block(cfg: &ExperimentConfig, i: usize) -> Result<RunRecord, String> {
    let world = cfg.world().map_err(|e| e.to_string())?;
    run_protocol(&cfg.blocks[i].protocol, &world, cfg.seed, i as u64).map_err(|e| e.to_string())
}

fn block_named(cfg: &ExperimentConfig, name: &str) -> usize {
    (0..cfg.blocks.len()).find(|&i| cfg.block_name(i) == name).expect("block present")
}

fn derived(rec: &RunRecord, key: &str) -> Result<f64, String> {
    rec.derived.get(key).copied().ok_or_else(|| format!("missing derived value `{key}`"))
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Noise-free collected charge at each point of `protocol`.
fn expected_charges(protocol: &Protocol, world: &World) -> Result<Vec<f64>, String> {
    let plan = build_protocol(protocol, world).map_err(|e| e.to_string())?;
    plan.points
        .iter()
        .map(|pt| {
            let mut w = world.clone();
            let out = execute(&pt.sequence, &mut w, 1, &ExecOptions::default()).map_err(|e| e.to_string())?;
            Ok(out.reads.last().expect("read").expected_charge_c)
        })
        .collect()
}

fn c1_zero_field() -> Outcome {
    let cfg = bundled("ccdmr_zero_field.toml");
    let t = Instant::now();
    let rec = run_block(&cfg, 0)?;
    let secs = t.elapsed().as_secs_f64();
    let Protocol::Ccdmr(p) = &cfg.blocks[0].protocol else { return Err("not a ccdmr block".into()) };
    let world = cfg.world().map_err(|e| e.to_string())?;
    let probe = Protocol::Ccdmr(CcdmrParams { frequencies: Sweep::list(&[2.77e9, 2.87e9]), ..p.clone() });
    let q = expected_charges(&probe, &world)?;
    let model = 1.0 - q[1] / q[0];
    let centre = derived(&rec, "center_1_mhz")?;
    let contrast = derived(&rec, "contrast_1")?;
    check(
        rec.points.len() == 41 && secs < 60.0 && (centre - 2870.0).abs() <= 1.0 && (contrast - model).abs() <= 0.015,
        format!(
            "{} points in {secs:.2} s, centre {centre:.2} MHz, contrast {:.2}% vs model {:.2}%",
            rec.points.len(),
            contrast * 100.0,
            model * 100.0
        ),
    )
}

fn c2_split() -> Outcome {
    let cfg = bundled("ccdmr_split.toml");
    let rec = run_block(&cfg, 0)?;
    let want = 2.0 * cfg.spin.gamma_mhz_per_g * cfg.spin.field.value();
    let got = derived(&rec, "split_mhz")?;
    check(
        rec.derived.contains_key("center_2_mhz") && (got - want).abs() <= 0.5,
        format!("split {got:.2} MHz vs 2γB = {want:.2} MHz"),
    )
}

fn c3_rabi() -> Outcome {
    let cfg = bundled("rabi.toml");
    let rec = run_block(&cfg, 0)?;
    let Protocol::Rabi(p) = &cfg.blocks[0].protocol else { return Err("not a rabi block".into()) };
    let world = cfg.world().map_err(|e| e.to_string())?;
    let period_ns = 1e3 / (world.nvs[0].rabi_per_drive_mhz * p.mw_amplitude);
    let probe = Protocol::Rabi(RabiParams { durations: Sweep::list(&[0.0, 0.5 * period_ns * 1e-9]), ..p.clone() });
    let q = expected_charges(&probe, &world)?;
    let model = 2.0 * (q[0] - q[1]) / (q[0] + q[1]);
    let period = derived(&rec, "period_ns")?;
    let contrast = derived(&rec, "contrast")?;
    check(
        (period / period_ns - 1.0).abs() <= 0.02
            && (period / 221.1 - 1.0).abs() <= 0.02
            && (contrast - model).abs() <= 0.03
            && (contrast - 0.184).abs() <= 0.03,
        format!(
            "period {period:.1} ns vs {period_ns:.1} ns, contrast {:.2}% vs model {:.2}%",
            contrast * 100.0,
            model * 100.0
        ),
    )
}

fn c4_echo() -> Outcome {
    let cfg = bundled("echo.toml");
    let rec = run_block(&cfg, 0)?;
    let want = cfg.nvs[0].t2.value() * 1e6;
    let t2 = derived(&rec, "t2_us")?;
    check(
        (t2 / want - 1.0).abs() <= 0.05 && (t2 / 24.90 - 1.0).abs() <= 0.05,
        format!("T2 {t2:.2} µs vs {want:.2} µs"),
    )
}

fn c5_dark() -> Outcome {
    let cfg = bundled("trap_storage.toml");
    let rec = run_block(&cfg, block_named(&cfg, "dark_stability"))?;
    let waits: Vec<f64> = rec.points.iter().map(|p| p.sweep_value).collect();
    let mut worst: f64 = 0.0;
    for (i, a) in rec.points.iter().enumerate() {
        for b in &rec.points[i + 1..] {
            worst = worst.max((a.value - b.value).abs() / a.sigma.hypot(b.sigma));
        }
    }
    check(
        waits == [60.0, 3600.0, 86400.0] && worst < 3.0,
        format!("waits {waits:?} s, largest pairwise difference {worst:.2}σ"),
    )
}

fn c6_fill() -> Outcome {
    let cfg = bundled("fill_distance.toml");
    let rec = run_block(&cfg, 0)?;
    let ids: Vec<&str> = cfg.nvs.iter().map(|n| n.id.as_str()).collect();
    let qsat = ids.iter().map(|v| derived(&rec, &format!("qsat_{v}"))).collect::<Result<Vec<_>, _>>()?;
    let t10 = ids.iter().map(|v| derived(&rec, &format!("t10_{v}"))).collect::<Result<Vec<_>, _>>()?;
    let hi = qsat.iter().cloned().fold(f64::MIN, f64::max);
    let lo = qsat.iter().cloned().fold(f64::MAX, f64::min);
    let spread = hi / lo - 1.0;
    let increasing = t10.windows(2).all(|w| w[1] > w[0]);
    check(
        spread <= 0.02 && increasing,
        format!(
            "saturated Q spread {:.2}%, 10% fill times {:?} s",
            spread * 100.0,
            t10.iter().map(|t| format!("{t:.4e}")).collect::<Vec<_>>()
        ),
    )
}

fn c7_power() -> Outcome {
    let cfg = bundled("trap_storage.toml");
    let rec = run_block(&cfg, block_named(&cfg, "read_power"))?;
    let q: Vec<f64> = rec.points.iter().map(|p| p.value).collect();
    let taus: Vec<f64> = rec.points.iter().filter_map(|p| p.extra.get("tau_s").copied()).collect();
    let powers: Vec<f64> = rec.points.iter().map(|p| p.sweep_value * 1e3).collect();
    let non_decreasing = q.windows(2).all(|w| w[1] >= w[0]);
    let last = q[q.len() - 1] / q[q.len() - 2] - 1.0;
    let tau_dec = taus.len() == q.len() && taus.windows(2).all(|w| w[1] < w[0]);
    check(
        powers == [0.5, 1.0, 2.0, 3.5, 7.0] && non_decreasing && last < 0.05 && tau_dec,
        format!("Q non-decreasing {non_decreasing}, last step {:+.2}%, τ_s {taus:.3?} s", last * 100.0),
    )
}

fn c8_wavelength() -> Outcome {
    let cfg = bundled("trap_storage.toml");
    let rec = run_block(&cfg, block_named(&cfg, "read_wavelength"))?;
    let pts: Vec<(f64, f64, f64)> = rec.points.iter().map(|p| (p.sweep_value, p.value, p.sigma)).collect();
    let red = pts.iter().find(|p| (p.0 - 633.0).abs() < 1e-9).ok_or("no 633 nm point")?;
    let mut band: Vec<(f64, f64)> = pts.iter().filter(|p| p.0 <= 570.0 + 1e-9).map(|p| (p.0, p.1)).collect();
    band.sort_by(|a, b| b.0.total_cmp(&a.0));
    let rising = band.len() >= 2 && band.windows(2).all(|w| w[1].1 > w[0].1);
    let peak = pts.iter().max_by(|a, b| a.1.total_cmp(&b.1)).map_or(0.0, |p| p.0);
    check(
        red.1.abs() <= 3.0 * red.2 && rising && (peak - 540.0).abs() < 1e-9,
        format!(
            "Q(633 nm) = {:.2}σ, rising over 570→540 nm {rising}, maximum at {peak} nm",
            red.1 / red.2
        ),
    )
}

fn c9_holes() -> Outcome {
    let cfg = bundled("hole_capture.toml");
    let rec = run_block(&cfg, 0)?;
    let edge = derived(&rec, "spearman_edge")?;
    let radial = derived(&rec, "spearman_radial")?;
    let pump = derived(&rec, "prepumped_not_slower")?;
    check(
        edge < -0.95 && radial.abs() < 0.5 && pump == 1.0,
        format!("Spearman vs edge distance {edge:.3}, vs spot distance {radial:.3}, prepumped ≥ unpumped {}", pump == 1.0),
    )
}

fn c10_chain() -> Outcome {
    let quiet = AmplifierChain { noise_rms_a: 0.0, ..AmplifierChain::default() };
    let omega = TAU * 37.0;
    // step response of the sampled (zero-order-hold) path
    let dt = 1e-5;
    let n = 20_000;
    let step = SampledCurrent { dt_s: dt, values: vec![1.0; n] };
    let y = step.filtered(n, dt, omega);
    let mut step_err: f64 = 0.0;
    for (k, v) in y.iter().enumerate().skip(1) {
        let exact = 1.0 - (-omega * k as f64 * dt).exp();
        step_err = step_err.max((v / exact - 1.0).abs());
    }
    // analytic excess A·e^{−t/τ}
    let src = AnalyticCurrent { baseline_a: 5e-12, terms: vec![(10e-12, 0.5)] };
    let tr = synthesize(&src, &quiet, 60.0, 1, TraceMeta::default()).map_err(|e| e.to_string())?;
    let q = integrate_excess_charge(&tr, &QIntOptions::default()).map_err(|e| e.to_string())?.charge_c;
    let q_err = (q / 20e-12 - 1.0).abs();
    // released holes against integrated charge
    let bank = TrapBank::default().deliver(0.6 * TrapBank::default().capacity());
    let (_, profile) = bank.discharge(3.5e-3, 532.0, 60.0).map_err(|e| e.to_string())?;
    let q_hole = 1.602176634e-19;
    let tr = synthesize_trace(&profile, q_hole, 2e-12, &quiet, 60.0, 2, TraceMeta::default()).map_err(|e| e.to_string())?;
    let qi = integrate_excess_charge(&tr, &QIntOptions::default()).map_err(|e| e.to_string())?.charge_c;
    let c_err = (qi / (q_hole * profile.released(60.0)) - 1.0).abs();
    check(
        step_err <= 1e-6 && q_err <= 5e-3 && c_err <= 5e-3,
        format!(
            "step response error {step_err:.1e}, Q_int {:.4} pC (error {:.3}%), conservation error {:.3}%",
            q * 1e12,
            q_err * 100.0,
            c_err * 100.0
        ),
    )
}

/// Balanced fidelity of every integer threshold, with pmfs built by
/// repeated multiplication.
fn exhaustive_threshold(bright: f64, dim: f64) -> u64 {
    let n_max = (bright + 12.0 * bright.sqrt() + 30.0).ceil() as u64;
    let pmf = |m: f64| {
        let mut p = vec![(-m).exp()];
        for k in 1..=n_max {
            let last = p[k as usize - 1];
            p.push(last * m / k as f64);
        }
        p
    };
    let (pb, pd) = (pmf(bright), pmf(dim));
    let mut best = (0u64, f64::NEG_INFINITY);
    for t in 0..=n_max {
        let below_b: f64 = pb[..=t as usize].iter().sum();
        let below_d: f64 = pd[..=t as usize].iter().sum();
        let f = 0.5 * (1.0 - below_b) + 0.5 * below_d;
        if f > best.1 + 1e-12 {
            best = (t, f);
        }
    }
    best.0
}

fn c11_threshold() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = Vec::new();
    for _ in 0..50 {
        let dim = rng.random_range(0.5..30.0);
        let bright = dim + rng.random_range(1.0..60.0);
        let op = poisson_mixture_threshold(bright, dim, 0.5).map_err(|e| e.to_string())?;
        let oracle = exhaustive_threshold(bright, dim);
        if op.threshold != Some(oracle) {
            mismatches.push((bright, dim, op.threshold, oracle));
        }
    }
    let world = World::reference(ccdmr_core::photophysics::PhotoParams::preset_default()).map_err(|e| e.to_string())?;
    let model = ChargeReadoutModel::default();
    let mut prep = Vec::new();
    for (k, nm) in [532.0, 633.0].into_iter().enumerate() {
        let p = prepared_minus_fraction(&world.photo, SpinManifold::Lumped, 3.5e-3, nm).map_err(|e| e.to_string())?;
        let s = preparation_statistics(p, &model, 10_000, 100 + k as u64).map_err(|e| e.to_string())?;
        prep.push((p, s));
    }
    let (g, gs) = prep[0];
    let (r, rs) = prep[1];
    let within = |p: f64, s: &ccdmr_core::imaging::PreparationStats| (s.estimated_minus - p).abs() <= 3.0 * s.sigma;
    check(
        mismatches.is_empty()
            && within(g, &gs)
            && within(r, &rs)
            && (gs.estimated_minus - 0.70).abs() <= 3.0 * gs.sigma.max(0.0046)
            && 1.0 - rs.estimated_minus >= 0.97,
        format!(
            "{} of 50 thresholds differ from the scan; green NV⁻ {:.3} ± {:.3} (model {g:.3}), red NV⁰ {:.3} ± {:.3}",
            mismatches.len(),
            gs.estimated_minus,
            gs.sigma,
            1.0 - rs.estimated_minus,
            rs.sigma
        ),
    )
}

fn data_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).expect("output dir") {
        let e = e.expect("entry");
        let name = e.file_name().to_string_lossy().into_owned();
        if name != ccdmr_io::manifest::MANIFEST_FILE {
            out.insert(name, std::fs::read(e.path()).expect("read"));
        }
    }
    out
}

fn c12_determinism() -> Outcome {
    let mut names: Vec<PathBuf> = std::fs::read_dir(configs_dir())
        .map_err(|e| e.to_string())?
        .map(|e| e.expect("entry").path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    names.sort();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = 0;
    let mut differing = Vec::new();
    for path in &names {
        let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
        let cfg = bundled(&format!("{stem}.toml"));
        let mut runs = Vec::new();
        for k in 0..2 {
            let dir = tmp.path().join(format!("{stem}_{k}"));
            let m = orchestrate(&cfg, &RunOptions { out_dir: dir.clone(), png_data: true }).map_err(|e| e.to_string())?;
            if m.failures().next().is_some() || !m.verify(&dir).is_empty() {
                return Err(format!("{stem}: failed block or checksum mismatch"));
            }
            runs.push(data_files(&dir));
        }
        files += runs[0].len();
        if runs[0] != runs[1] {
            differing.push(stem);
        }
    }
    check(
        differing.is_empty() && files > 0,
        format!("{} configs, {files} data files, differing configs {differing:?}", names.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("CCDMR zero-field spectrum", c1_zero_field),
        ("split spectrum at 4 G", c2_split),
        ("Rabi period and contrast", c3_rabi),
        ("Hahn echo T2", c4_echo),
        ("dark stability", c5_dark),
        ("distance saturation", c6_fill),
        ("read-power behaviour", c7_power),
        ("wavelength gate", c8_wavelength),
        ("edge-distance law", c9_holes),
        ("signal-chain oracles", c10_chain),
        ("Poisson threshold and preparation", c11_threshold),
        ("determinism", c12_determinism),
    ];
    let mut failed = 0;
    let mut out = std::io::stdout().lock();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let r = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let (tag, detail) = match r {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        writeln!(out, "{tag} {:>2} {name}: {detail}", i + 1).unwrap();
    }
    writeln!(out, "acceptance: {} passed, {failed} failed", criteria.len() - failed).unwrap();
    if failed > 0 {
        std::process::exit(1);
    }
}
