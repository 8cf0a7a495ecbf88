//! Timed pulse sequences, their validation, the executor and the protocol
//! builders.

use serde::{Deserialize, Serialize};

use crate::geometry::LaserSpot;

mod engine;
pub mod protocols;
mod world;

pub use engine::{execute, run, ExecOptions, ExecOutcome, Mode, ReadResult};
pub use protocols::{build_protocol, Protocol, ProtocolKind, ProtocolPlan, SweepPoint};
pub use world::World;

/// Times are seconds from the start of the enclosing segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PulseEvent {
    Laser {
        start_s: f64,
        duration_s: f64,
        spot: LaserSpot,
    },
    Microwave {
        start_s: f64,
        duration_s: f64,
        frequency_hz: f64,
        /// Drive amplitude; the Rabi frequency is amplitude × the NV's
        /// Rabi frequency per unit drive.
        amplitude: f64,
        #[serde(default)]
        phase_rad: f64,
    },
    SetBias {
        start_s: f64,
        volts: f64,
    },
    ReadWindow {
        start_s: f64,
        duration_s: f64,
        spot: LaserSpot,
        /// Bank to discharge; the electrode nearest the spot when absent.
        #[serde(default)]
        electrode: Option<String>,
    },
    Wait {
        start_s: f64,
        duration_s: f64,
    },
}

impl PulseEvent {
    pub fn start(&self) -> f64 {
        match *self {
            PulseEvent::Laser { start_s, .. }
            | PulseEvent::Microwave { start_s, .. }
            | PulseEvent::SetBias { start_s, .. }
            | PulseEvent::ReadWindow { start_s, .. }
            | PulseEvent::Wait { start_s, .. } => start_s,
        }
    }

    /// Zero for bias markers.
    pub fn duration(&self) -> f64 {
        match *self {
            PulseEvent::Laser { duration_s, .. }
            | PulseEvent::Microwave { duration_s, .. }
            | PulseEvent::ReadWindow { duration_s, .. }
            | PulseEvent::Wait { duration_s, .. } => duration_s,
            PulseEvent::SetBias { .. } => 0.0,
        }
    }

    pub fn end(&self) -> f64 {
        self.start() + self.duration()
    }

    fn name(&self) -> &'static str {
        match self {
            PulseEvent::Laser { .. } => "laser",
            PulseEvent::Microwave { .. } => "microwave",
            PulseEvent::SetBias { .. } => "bias",
            PulseEvent::ReadWindow { .. } => "read",
            PulseEvent::Wait { .. } => "wait",
        }
    }

    fn is_optical(&self) -> bool {
        matches!(self, PulseEvent::Laser { .. } | PulseEvent::ReadWindow { .. })
    }
}

/// A block of events repeated `repeat` times back to back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    #[serde(default)]
    pub label: String,
    pub events: Vec<PulseEvent>,
    #[serde(default = "one")]
    pub repeat: u64,
}

fn one() -> u64 {
    1
}

impl Segment {
    pub fn new(label: impl Into<String>, events: Vec<PulseEvent>, repeat: u64) -> Self {
        Self { label: label.into(), events, repeat }
    }

    /// Length of one repetition.
    pub fn period(&self) -> f64 {
        self.events.iter().map(PulseEvent::end).fold(0.0, f64::max)
    }

    pub fn has_read(&self) -> bool {
        self.events.iter().any(|e| matches!(e, PulseEvent::ReadWindow { .. }))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseSequence {
    pub segments: Vec<Segment>,
}

impl PulseSequence {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments }
    }

    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.period() * s.repeat as f64).sum()
    }

    pub fn read_count(&self) -> u64 {
        self.segments
            .iter()
            .map(|s| s.repeat * s.events.iter().filter(|e| matches!(e, PulseEvent::ReadWindow { .. })).count() as u64)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub severity: Severity,
    pub segment: usize,
    /// Index of the offending event within its segment.
    pub event: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        match self.event {
            Some(e) => write!(f, "{sev}: segment {} event {e}: {}", self.segment, self.message),
            None => write!(f, "{sev}: segment {}: {}", self.segment, self.message),
        }
    }
}

pub fn has_errors(v: &[Violation]) -> bool {
    v.iter().any(|x| x.severity == Severity::Error)
}

const OVERLAP_EPS: f64 = 1e-15;

fn overlaps(a: &PulseEvent, b: &PulseEvent) -> bool {
    let slack = OVERLAP_EPS * a.end().abs().max(b.end().abs()).max(1.0);
    a.start() < b.end() - slack && b.start() < a.end() - slack
}

fn same_spot(a: &LaserSpot, b: &LaserSpot) -> bool {
    a.center == b.center
}

/// Check a sequence. Errors make the engine refuse the sequence; warnings
/// flag physically pointless but executable schedules. Bias starts at 0 V.
pub fn validate(seq: &PulseSequence) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut bias = 0.0f64;
    for (si, seg) in seq.segments.iter().enumerate() {
        let mut push = |sev, ev: Option<usize>, msg: String| {
            out.push(Violation { severity: sev, segment: si, event: ev, message: msg })
        };
        if seg.events.is_empty() {
            push(Severity::Warning, None, "segment has no events".into());
        }
        for (ei, e) in seg.events.iter().enumerate() {
            if !(e.start() >= 0.0 && e.start().is_finite()) {
                push(Severity::Error, Some(ei), format!("negative or non-finite start time {}", e.start()));
            }
            match e {
                PulseEvent::SetBias { volts, .. } => {
                    if !(volts.is_finite() && volts.abs() <= 10.0) {
                        push(Severity::Error, Some(ei), format!("bias {volts} V outside ±10 V"));
                    }
                }
                _ => {
                    if !(e.duration() > 0.0 && e.duration().is_finite()) {
                        push(Severity::Error, Some(ei), format!("{} duration must be > 0, got {}", e.name(), e.duration()));
                    }
                }
            }
            match e {
                PulseEvent::Laser { spot, .. } | PulseEvent::ReadWindow { spot, .. } => {
                    if let Err(err) = spot.validate() {
                        push(Severity::Error, Some(ei), err.to_string());
                    }
                }
                PulseEvent::Microwave { frequency_hz, amplitude, .. } => {
                    if !(2e9..=4e9).contains(frequency_hz) {
                        push(Severity::Warning, Some(ei), format!("microwave at {frequency_hz} Hz is outside 2–4 GHz"));
                    }
                    if !(*amplitude >= 0.0 && amplitude.is_finite()) {
                        push(Severity::Error, Some(ei), "microwave amplitude must be ≥ 0".into());
                    }
                }
                _ => {}
            }
        }

        for i in 0..seg.events.len() {
            for j in i + 1..seg.events.len() {
                let (a, b) = (&seg.events[i], &seg.events[j]);
                if !overlaps(a, b) {
                    continue;
                }
                let clash = match (a, b) {
                    (PulseEvent::Laser { spot: s1, .. }, PulseEvent::Laser { spot: s2, .. }) => {
                        same_spot(s1, s2).then(|| "overlapping laser events on one spot".to_string())
                    }
                    (PulseEvent::Microwave { .. }, PulseEvent::Microwave { .. }) => {
                        Some("overlapping microwave events".into())
                    }
                    (PulseEvent::Wait { .. }, PulseEvent::Wait { .. }) => Some("overlapping waits".into()),
                    (PulseEvent::ReadWindow { .. }, _) | (_, PulseEvent::ReadWindow { .. })
                        if !matches!(a, PulseEvent::SetBias { .. }) && !matches!(b, PulseEvent::SetBias { .. }) =>
                    {
                        Some(format!("read window overlaps a {} event", if matches!(a, PulseEvent::ReadWindow { .. }) { b.name() } else { a.name() }))
                    }
                    (PulseEvent::Microwave { .. }, o) | (o, PulseEvent::Microwave { .. }) if o.is_optical() => {
                        Some("microwave during illumination is not supported".into())
                    }
                    (PulseEvent::Wait { .. }, o) | (o, PulseEvent::Wait { .. }) if o.is_optical() || matches!(o, PulseEvent::Microwave { .. }) => {
                        Some(format!("wait overlaps a {} event", o.name()))
                    }
                    _ => None,
                };
                if let Some(m) = clash {
                    push(Severity::Error, Some(j), format!("{m} (with event {i})"));
                }
            }
        }

        let mut order: Vec<usize> = (0..seg.events.len()).collect();
        order.sort_by(|&a, &b| seg.events[a].start().total_cmp(&seg.events[b].start()));
        let mut seg_bias = bias;
        for &ei in &order {
            match &seg.events[ei] {
                PulseEvent::SetBias { volts, .. } => seg_bias = *volts,
                PulseEvent::ReadWindow { .. } if seg_bias == 0.0 => {
                    push(Severity::Warning, Some(ei), "release without current: read window with zero bias".into());
                }
                _ => {}
            }
        }
        bias = seg_bias;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point3;
    use proptest::prelude::*;

    fn spot(p: f64) -> LaserSpot {
        LaserSpot::new(Point3::new(0.0, 0.0, 4.0), 532.0, p).unwrap()
    }

    fn laser(start: f64, dur: f64) -> PulseEvent {
        PulseEvent::Laser { start_s: start, duration_s: dur, spot: spot(3.5e-3) }
    }

    fn canonical() -> Segment {
        Segment::new(
            "cycle",
            vec![
                PulseEvent::Laser { start_s: 0.0, duration_s: 2.5e-6, spot: spot(300e-6) },
                PulseEvent::Microwave { start_s: 2.5e-6, duration_s: 100e-9, frequency_hz: 2.87e9, amplitude: 1.0, phase_rad: 0.0 },
                PulseEvent::Laser { start_s: 2.6e-6, duration_s: 500e-9, spot: spot(3.5e-3) },
            ],
            365_853,
        )
    }

    #[test]
    fn canonical_cycle_is_clean() {
        let v = validate(&PulseSequence::new(vec![canonical()]));
        assert!(v.is_empty(), "{v:?}");
    }

    #[test]
    fn overlapping_lasers_on_one_spot() {
        let seq = PulseSequence::new(vec![Segment::new("x", vec![laser(0.0, 1e-6), laser(0.5e-6, 1e-6)], 1)]);
        let v = validate(&seq);
        assert!(has_errors(&v));
        assert!(v[0].message.contains("overlapping laser"));
    }

    #[test]
    fn zero_bias_read_warns() {
        let read = PulseEvent::ReadWindow { start_s: 0.0, duration_s: 30.0, spot: spot(3.5e-3), electrode: None };
        let v = validate(&PulseSequence::new(vec![Segment::new("read", vec![read.clone()], 1)]));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].severity, Severity::Warning);
        assert!(v[0].message.contains("release without current"));
        let biased = vec![PulseEvent::SetBias { start_s: 0.0, volts: 2.2 }, read];
        assert!(validate(&PulseSequence::new(vec![Segment::new("read", biased, 1)])).is_empty());
    }

    #[test]
    fn out_of_band_microwave_and_negative_time() {
        let seg = Segment::new(
            "x",
            vec![
                PulseEvent::Microwave { start_s: 0.0, duration_s: 1e-7, frequency_hz: 1.0e9, amplitude: 1.0, phase_rad: 0.0 },
                laser(-1e-6, 1e-7),
            ],
            1,
        );
        let v = validate(&PulseSequence::new(vec![seg]));
        assert!(v.iter().any(|x| x.severity == Severity::Warning && x.message.contains("2–4 GHz")));
        assert!(v.iter().any(|x| x.severity == Severity::Error && x.message.contains("negative")));
    }

    #[test]
    fn period_and_counts() {
        let seq = PulseSequence::new(vec![canonical()]);
        assert!((seq.segments[0].period() - 3.1e-6).abs() < 1e-18);
        assert_eq!(seq.read_count(), 0);
    }

    fn arb_event() -> impl Strategy<Value = PulseEvent> {
        // dyadic times survive any text round trip exactly
        let t = (0u32..1000).prop_map(|k| k as f64 / 1024.0);
        let d = (1u32..1000).prop_map(|k| k as f64 / 4096.0);
        prop_oneof![
            (t.clone(), d.clone(), 500u32..780).prop_map(|(s, d, nm)| PulseEvent::Laser {
                start_s: s,
                duration_s: d,
                spot: LaserSpot::new(Point3::new(0.5, -1.25, 4.0), nm as f64, 1e-3).unwrap()
            }),
            (t.clone(), d.clone(), 2000u32..4000).prop_map(|(s, d, f)| PulseEvent::Microwave {
                start_s: s,
                duration_s: d,
                frequency_hz: f as f64 * 1e6,
                amplitude: 0.5,
                phase_rad: 0.25
            }),
            (t.clone(), -10i32..10).prop_map(|(s, v)| PulseEvent::SetBias { start_s: s, volts: v as f64 }),
            (t.clone(), d.clone()).prop_map(|(s, d)| PulseEvent::Wait { start_s: s, duration_s: d }),
            (t, d).prop_map(|(s, d)| PulseEvent::ReadWindow {
                start_s: s,
                duration_s: d,
                spot: LaserSpot::new(Point3::new(5.0, 0.0, 0.0), 532.0, 3.5e-3).unwrap(),
                electrode: Some("right".into())
            }),
        ]
    }

    proptest! {
        #[test]
        fn serialization_round_trip(evs in proptest::collection::vec(arb_event(), 0..12), rep in 1u64..1_000_000) {
            let seq = PulseSequence::new(vec![Segment::new("s", evs, rep)]);
            let text = serde_json::to_string(&seq).unwrap();
            let back: PulseSequence = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(&back, &seq);
            prop_assert_eq!(validate(&back), validate(&seq));
        }
    }
}
