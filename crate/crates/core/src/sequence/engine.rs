use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{has_errors, validate, PulseEvent, PulseSequence, Segment, World};
use crate::geometry::{spot_power_at, LaserSpot};
use crate::photophysics::{Beam, JumpCounts, JumpTable, Propagator, SpinManifold, G0, G1, GP1};
use crate::readout::{edge_factor, forward_voltage, integrate_excess_charge, synthesize_trace, CurrentTrace, QInt, TraceMeta};
use crate::record::{PointResult, RunRecord};
use crate::spin::{block_transfer, SpinStep};
use crate::transport::route_holes;
use crate::{seeds, Error, Result};

/// Longest interval propagated in one matrix exponential; longer intervals
/// are built by repeated squaring.
const CHUNK_S: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Repeated cycles collapse onto one propagator raised to the repeat count.
    #[default]
    Expectation,
    /// Read-free segments are simulated cycle by cycle with exact jumps.
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ExecOptions {
    pub mode: Mode,
    pub keep_traces: bool,
}

#[derive(Debug, Clone)]
pub struct ReadResult {
    pub segment: usize,
    /// Global index of the read event.
    pub event: usize,
    pub electrode: usize,
    pub q: QInt,
    /// Holes released from the bank during the window.
    pub released_holes: f64,
    /// Noise-free collected charge, q_eff·c·released.
    pub expected_charge_c: f64,
    pub seed: u64,
    pub trace: Option<CurrentTrace>,
}

#[derive(Debug, Clone, Default)]
pub struct ExecOutcome {
    pub reads: Vec<ReadResult>,
    /// Holes emitted per NV over the whole sequence.
    pub holes_emitted: Vec<f64>,
    /// Standard error of `holes_emitted` in stochastic mode, else 0.
    pub holes_sem: Vec<f64>,
    pub warnings: Vec<String>,
}

enum Piece {
    Optical { lasers: Vec<LaserSpot>, dt: f64, event: usize },
    Mw { steps: Vec<SpinStep>, dt: f64, event: usize },
    Read { event: usize },
    Bias { volts: f64 },
}

/// Slice one segment at every event boundary.
fn compile(seg: &Segment, offset: usize) -> Vec<Piece> {
    let mut cuts: Vec<f64> = vec![0.0];
    for e in &seg.events {
        cuts.push(e.start());
        cuts.push(e.end());
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut biases: Vec<(f64, usize)> = seg
        .events
        .iter()
        .enumerate()
        .filter(|(_, e)| matches!(e, PulseEvent::SetBias { .. }))
        .map(|(i, e)| (e.start(), i))
        .collect();
    biases.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut bi = 0;

    let mut out = Vec::new();
    let mut block: Option<(Vec<SpinStep>, f64, usize)> = None;
    let mut last_read = None;
    let flush = |block: &mut Option<(Vec<SpinStep>, f64, usize)>, out: &mut Vec<Piece>| {
        if let Some((steps, dt, event)) = block.take() {
            out.push(Piece::Mw { steps, dt, event });
        }
    };
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        while bi < biases.len() && biases[bi].0 <= a {
            flush(&mut block, &mut out);
            if let PulseEvent::SetBias { volts, .. } = seg.events[biases[bi].1] {
                out.push(Piece::Bias { volts });
            }
            bi += 1;
        }
        let dt = b - a;
        if dt <= 0.0 {
            continue;
        }
        let mid = 0.5 * (a + b);
        let active = |e: &PulseEvent| e.start() <= mid && mid < e.end();
        let mut lasers = Vec::new();
        let mut mw = None;
        let mut read = None;
        let mut first_event = None;
        for (i, e) in seg.events.iter().enumerate() {
            if !active(e) {
                continue;
            }
            first_event.get_or_insert(offset + i);
            match e {
                PulseEvent::Laser { spot, .. } => lasers.push(*spot),
                PulseEvent::Microwave { frequency_hz, amplitude, phase_rad, .. } => {
                    mw = Some((*frequency_hz, *amplitude, *phase_rad, offset + i))
                }
                PulseEvent::ReadWindow { .. } => read = Some(offset + i),
                _ => {}
            }
        }
        if let Some(r) = read {
            flush(&mut block, &mut out);
            if last_read != Some(r) {
                out.push(Piece::Read { event: r });
                last_read = Some(r);
            }
            continue;
        }
        let event = first_event.unwrap_or(offset);
        match (mw, lasers.is_empty()) {
            (Some((f, amp, ph, ev)), _) => {
                let blk = block.get_or_insert((Vec::new(), 0.0, ev));
                blk.0.push(SpinStep::Pulse { freq_mhz: f * 1e-6, amplitude: amp, phase_rad: ph, t_us: dt * 1e6 });
                blk.1 += dt;
            }
            (None, true) if block.is_some() => {
                let blk = block.as_mut().expect("open block");
                blk.0.push(SpinStep::Free { t_us: dt * 1e6 });
                blk.1 += dt;
            }
            _ => {
                flush(&mut block, &mut out);
                out.push(Piece::Optical { lasers, dt, event });
            }
        }
    }
    flush(&mut block, &mut out);
    for &(_, i) in &biases[bi..] {
        if let PulseEvent::SetBias { volts, .. } = seg.events[i] {
            out.push(Piece::Bias { volts });
        }
    }
    out
}

fn beams_at(world: &World, nv: usize, lasers: &[LaserSpot]) -> Vec<Beam> {
    let pos = &world.nvs[nv].position;
    lasers
        .iter()
        .map(|s| Beam::new(s.power_w * spot_power_at(pos, s), s.wavelength_nm))
        .filter(|b| b.power_w > 0.0)
        .collect()
}

/// Constant-illumination propagator for any interval length.
fn interval(world: &World, beams: &[Beam], dt: f64) -> Result<Propagator> {
    let (p, m) = (&world.photo, world.manifold);
    if dt <= CHUNK_S {
        return Propagator::new(p, m, beams, dt);
    }
    let n = (dt / CHUNK_S).floor();
    let rem = dt - n * CHUNK_S;
    let mut prop = Propagator::new(p, m, beams, CHUNK_S)?.repeated(n as u64);
    if rem > 1e-12 * dt {
        prop = prop.then(&Propagator::new(p, m, beams, rem)?);
    }
    Ok(prop)
}

/// Population exchange of a microwave block on the ground spin levels.
fn mw_map(world: &World, nv: usize, steps: &[SpinStep]) -> DMatrix<f64> {
    let split = world.manifold == SpinManifold::Split;
    let t = block_transfer(steps, &world.spin_for(nv), split);
    let n = world.manifold.levels();
    let mut m = DMatrix::identity(n, n);
    let pm = t.minus.clamp(0.0, 1.0);
    let pp = if split { t.plus.clamp(0.0, 1.0 - pm) } else { 0.0 };
    m[(G0, G0)] = 1.0 - pm - pp;
    m[(G1, G0)] = pm;
    m[(G0, G1)] = pm;
    m[(G1, G1)] = 1.0 - pm;
    if split {
        m[(GP1, G0)] = pp;
        m[(G0, GP1)] = pp;
        m[(GP1, GP1)] = 1.0 - pp;
    }
    m
}

fn piece_propagator(world: &World, nv: usize, piece: &Piece) -> Result<Propagator> {
    match piece {
        Piece::Optical { lasers, dt, event } => {
            let mut p = interval(world, &beams_at(world, nv, lasers), *dt).map_err(|e| Error::at_event(*event, e))?;
            let total: f64 = lasers.iter().map(|s| s.power_w).sum();
            if world.yield_exponent != 1.0 && total > 0.0 {
                let pos = &world.nvs[nv].position;
                let f = lasers.iter().map(|s| s.power_w * spot_power_at(pos, s)).sum::<f64>() / total;
                if f > 0.0 && f < 1.0 {
                    let k = f.powf(world.yield_exponent - 1.0);
                    p.holes *= k;
                    p.electrons *= k;
                }
            }
            Ok(p)
        }
        Piece::Mw { steps, dt, event } => {
            let flip = Propagator::map(mw_map(world, nv, steps));
            Ok(flip.then(&interval(world, &[], *dt).map_err(|e| Error::at_event(*event, e))?))
        }
        _ => Ok(Propagator::identity(world.manifold.levels())),
    }
}

fn deliver(world: &mut World, nv: usize, holes: f64) {
    if holes <= 0.0 {
        return;
    }
    let split = route_holes(&world.nvs[nv].position, holes, &world.layout, &world.capture);
    for (b, h) in world.banks.iter_mut().zip(&split.per_electrode) {
        *b = b.deliver(*h);
    }
}

fn read_event(world: &mut World, ev: &PulseEvent, seed: u64, keep: bool) -> Result<(usize, QInt, f64, f64, Option<CurrentTrace>)> {
    let PulseEvent::ReadWindow { duration_s, spot, electrode, .. } = ev else {
        unreachable!("read piece always refers to a read window")
    };
    let idx = match electrode {
        Some(name) => world
            .layout
            .electrode_index(name)
            .ok_or_else(|| Error::param("read.electrode", format!("no electrode named `{name}`")))?,
        None => world.layout.nearest_electrode(&spot.center),
    };
    crate::error::check_range("bias (V)", world.bias_v, -10.0, 10.0)?;
    let f = edge_factor(spot, &world.layout, idx, &world.egpc);
    let (bank, profile) = world.banks[idx].discharge(spot.power_w * f, spot.wavelength_nm, *duration_s)?;
    world.banks[idx] = bank;
    let v = forward_voltage(&world.layout, idx, world.bias_v);
    let c = if v > 0.0 { f } else { 0.0 };
    let i0 = world.egpc.photocurrent_per_watt * spot.power_w * world.egpc.sat(v) * f;
    let q_c = world.egpc.q_eff() * c;
    let meta = TraceMeta {
        bias_v: world.bias_v,
        read_power_w: spot.power_w,
        wavelength_nm: spot.wavelength_nm,
        spot: spot.center,
        ..TraceMeta::default()
    };
    let trace = synthesize_trace(&profile, q_c, i0, &world.chain, *duration_s, seed, meta)?;
    let q = integrate_excess_charge(&trace, &world.qint)?;
    let released = profile.released(*duration_s);
    Ok((idx, q, released, q_c * released, keep.then_some(trace)))
}

fn sample_level<R: Rng>(x: &DVector<f64>, rng: &mut R) -> usize {
    let mut u: f64 = rng.random::<f64>() * x.sum();
    for (i, p) in x.iter().enumerate() {
        u -= p;
        if u < 0.0 {
            return i;
        }
    }
    x.len() - 1
}

enum JumpPiece {
    Optical(JumpTable, f64),
    Mw(DMatrix<f64>, JumpTable, f64),
}

/// Cycle-by-cycle Gillespie run of a read-free segment for one NV. Returns
/// the total holes, their standard error and the final level.
fn stochastic_segment(world: &World, nv: usize, pieces: &[Piece], repeat: u64, seed: u64) -> (f64, f64, usize) {
    let (p, m) = (&world.photo, world.manifold);
    let table: Vec<JumpPiece> = pieces
        .iter()
        .filter_map(|pc| match pc {
            Piece::Optical { lasers, dt, .. } => Some(JumpPiece::Optical(JumpTable::new(p, m, &beams_at(world, nv, lasers)), *dt)),
            Piece::Mw { steps, dt, .. } => Some(JumpPiece::Mw(mw_map(world, nv, steps), JumpTable::new(p, m, &[]), *dt)),
            _ => None,
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut level = sample_level(&world.populations[nv], &mut rng);
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..repeat {
        let mut c = JumpCounts::default();
        for jp in &table {
            match jp {
                JumpPiece::Optical(t, dt) => level = t.run(level, *dt, &mut rng, &mut c),
                JumpPiece::Mw(map, dark, dt) => {
                    level = sample_level(&map.column(level).into_owned(), &mut rng);
                    level = dark.run(level, *dt, &mut rng, &mut c);
                }
            }
        }
        let h = c.holes as f64;
        sum += h;
        sum2 += h * h;
    }
    let n = repeat as f64;
    let var = if repeat > 1 { (sum2 - sum * sum / n) / (n - 1.0) } else { 0.0 };
    (sum, (var.max(0.0) * n).sqrt(), level)
}

/// Execute `seq` against `world`, mutating NV populations, banks and bias.
pub fn execute(seq: &PulseSequence, world: &mut World, seed: u64, opts: &ExecOptions) -> Result<ExecOutcome> {
    let violations = validate(seq);
    if has_errors(&violations) {
        let msgs: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(Error::InvalidSequence(msgs.join("; ")));
    }
    let n_nv = world.nvs.len();
    let mut out = ExecOutcome {
        holes_emitted: vec![0.0; n_nv],
        holes_sem: vec![0.0; n_nv],
        warnings: violations.iter().map(|v| v.to_string()).collect(),
        ..Default::default()
    };
    let mut offset = 0;
    let mut n_reads = 0u64;
    for (si, seg) in seq.segments.iter().enumerate() {
        let pieces = compile(seg, offset);
        let events: Vec<&PulseEvent> = seg.events.iter().collect();
        if seg.repeat > 0 && !seg.has_read() {
            for nv in 0..n_nv {
                let holes = match opts.mode {
                    Mode::Expectation => {
                        let mut cycle = Propagator::identity(world.manifold.levels());
                        for pc in &pieces {
                            cycle = cycle.then(&piece_propagator(world, nv, pc)?);
                        }
                        let (x, em) = cycle.repeated(seg.repeat).apply(&world.populations[nv]);
                        world.populations[nv] = x;
                        em.holes
                    }
                    Mode::Stochastic => {
                        let s = seeds::derive(seed, &[0x5eed, si as u64, nv as u64]);
                        let (h, se, level) = stochastic_segment(world, nv, &pieces, seg.repeat, s);
                        let mut x = DVector::zeros(world.manifold.levels());
                        x[level] = 1.0;
                        world.populations[nv] = x;
                        out.holes_sem[nv] = (out.holes_sem[nv].powi(2) + se * se).sqrt();
                        h
                    }
                };
                out.holes_emitted[nv] += holes;
                deliver(world, nv, holes);
            }
            for pc in &pieces {
                if let Piece::Bias { volts } = pc {
                    world.bias_v = *volts;
                }
            }
        } else {
            for _ in 0..seg.repeat {
                let mut pending: Vec<Option<Propagator>> = vec![None; n_nv];
                for pc in &pieces {
                    match pc {
                        Piece::Bias { volts } => world.bias_v = *volts,
                        Piece::Read { event } => {
                            flush(world, &mut pending, &mut out)?;
                            let ev = events[event - offset];
                            let s = seeds::derive(seed, &[n_reads]);
                            let (electrode, q, released, expected, trace) =
                                read_event(world, ev, s, opts.keep_traces).map_err(|e| Error::at_event(*event, e))?;
                            out.reads.push(ReadResult {
                                segment: si,
                                event: *event,
                                electrode,
                                q,
                                released_holes: released,
                                expected_charge_c: expected,
                                seed: s,
                                trace,
                            });
                            n_reads += 1;
                        }
                        _ => {
                            for (nv, slot) in pending.iter_mut().enumerate() {
                                let p = piece_propagator(world, nv, pc)?;
                                *slot = Some(match slot.take() {
                                    Some(acc) => acc.then(&p),
                                    None => p,
                                });
                            }
                        }
                    }
                }
                flush(world, &mut pending, &mut out)?;
            }
        }
        offset += seg.events.len();
    }
    Ok(out)
}

fn flush(world: &mut World, pending: &mut [Option<Propagator>], out: &mut ExecOutcome) -> Result<()> {
    for (nv, slot) in pending.iter_mut().enumerate() {
        if let Some(p) = slot.take() {
            let (x, em) = p.apply(&world.populations[nv]);
            world.populations[nv] = x;
            out.holes_emitted[nv] += em.holes;
            deliver(world, nv, em.holes);
        }
    }
    Ok(())
}

/// Execute one sequence and report every read window as a point.
pub fn run(seq: &PulseSequence, world: &mut World, seed: u64) -> Result<RunRecord> {
    let out = execute(seq, world, seed, &ExecOptions::default())?;
    let mut rec = RunRecord::new("sequence", "read", "index");
    rec.warnings = out.warnings;
    for (i, r) in out.reads.iter().enumerate() {
        rec.points.push(PointResult {
            index: i,
            sweep_value: i as f64,
            variant: String::new(),
            value: r.q.charge_c,
            sigma: r.q.sigma_c,
            seed: r.seed,
            extra: Default::default(),
        });
    }
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{DeviceLayout, NvRecord, Point3};
    use crate::photophysics::PhotoParams;
    use crate::traps::TrapBank;

    fn world() -> World {
        let layout = DeviceLayout::facing_pads(10.0, 10.0, 10.0).unwrap();
        let nv = NvRecord::new("nv1", Point3::new(0.0, 0.0, 4.0)).unwrap();
        World::new(layout, vec![nv], PhotoParams::preset_default(), SpinManifold::Lumped, TrapBank::default()).unwrap()
    }

    fn green(start: f64, dur: f64, p: f64) -> PulseEvent {
        PulseEvent::Laser {
            start_s: start,
            duration_s: dur,
            spot: LaserSpot::new(Point3::new(0.0, 0.0, 4.0), 532.0, p).unwrap(),
        }
    }

    fn cycle() -> Vec<PulseEvent> {
        vec![
            green(0.0, 2.5e-6, 300e-6),
            PulseEvent::Microwave { start_s: 2.5e-6, duration_s: 1e-7, frequency_hz: 2.87e9, amplitude: 1.1, phase_rad: 0.0 },
            green(2.6e-6, 5e-7, 3.5e-3),
            PulseEvent::Wait { start_s: 3.1e-6, duration_s: 1e-6 },
        ]
    }

    #[test]
    fn compile_slices_cycle() {
        let seg = Segment::new("c", cycle(), 1);
        let p = compile(&seg, 0);
        assert_eq!(p.len(), 4);
        assert!(matches!(p[1], Piece::Mw { .. }));
        match &p[3] {
            Piece::Optical { lasers, dt, .. } => {
                assert!(lasers.is_empty());
                assert!((dt - 1e-6).abs() < 1e-15);
            }
            _ => panic!("expected dark gap"),
        }
    }

    #[test]
    fn folded_cycles_equal_unrolled() {
        let mut w1 = world();
        let mut w2 = world();
        let folded = PulseSequence::new(vec![Segment::new("c", cycle(), 50)]);
        let unrolled = PulseSequence::new((0..50).map(|_| Segment::new("c", cycle(), 1)).collect());
        let a = execute(&folded, &mut w1, 1, &ExecOptions::default()).unwrap();
        let b = execute(&unrolled, &mut w2, 1, &ExecOptions::default()).unwrap();
        assert!((a.holes_emitted[0] / b.holes_emitted[0] - 1.0).abs() < 1e-10);
        assert!((w1.stored_holes() / w2.stored_holes() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn zero_repeat_reads_nothing_but_noise() {
        let mut w = world();
        let read = PulseEvent::ReadWindow {
            start_s: 0.0,
            duration_s: 10.0,
            spot: LaserSpot::new(Point3::new(5.0, 0.0, 0.0), 532.0, 3.5e-3).unwrap(),
            electrode: None,
        };
        let seq = PulseSequence::new(vec![
            Segment::new("pump", cycle(), 0),
            Segment::new("read", vec![PulseEvent::SetBias { start_s: 0.0, volts: 2.2 }, read], 1),
        ]);
        let out = execute(&seq, &mut w, 3, &ExecOptions::default()).unwrap();
        let q = out.reads[0].q;
        assert_eq!(out.reads[0].released_holes, 0.0);
        assert!(q.charge_c.abs() < 3.0 * q.sigma_c, "{q:?}");
    }

    #[test]
    fn invalid_sequence_is_rejected() {
        let seq = PulseSequence::new(vec![Segment::new("x", vec![green(0.0, 1e-6, 1e-3), green(0.5e-6, 1e-6, 1e-3)], 1)]);
        assert!(matches!(execute(&seq, &mut world(), 0, &ExecOptions::default()), Err(Error::InvalidSequence(_))));
    }

    #[test]
    fn errors_carry_event_index() {
        let read = PulseEvent::ReadWindow {
            start_s: 0.0,
            duration_s: 10.0,
            spot: LaserSpot::new(Point3::new(5.0, 0.0, 0.0), 532.0, 3.5e-3).unwrap(),
            electrode: Some("middle".into()),
        };
        let seq = PulseSequence::new(vec![
            Segment::new("pump", vec![green(0.0, 1e-3, 1e-3)], 1),
            Segment::new("read", vec![PulseEvent::SetBias { start_s: 0.0, volts: 2.2 }, read], 1),
        ]);
        match execute(&seq, &mut world(), 0, &ExecOptions::default()) {
            Err(Error::AtEvent { index, .. }) => assert_eq!(index, 2),
            other => panic!("{other:?}"),
        }
    }
}
