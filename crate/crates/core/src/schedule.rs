//! Piecewise learning-rate schedules `S[g]` over real-valued epochs.
//!
//! Segments are half-open `[start, end)`, contiguous from epoch 0 to `T`.
//! Past the end the final rate is held: `S[g > T] = S[T]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Segment {
    Constant { start: f64, end: f64, rate: f64 },
    /// Linear ramp from `from` at `start` towards `to` at `end`.
    Warmup { start: f64, end: f64, from: f64, to: f64 },
}

impl Segment {
    pub fn start(&self) -> f64 {
        match *self {
            Segment::Constant { start, .. } | Segment::Warmup { start, .. } => start,
        }
    }

    pub fn end(&self) -> f64 {
        match *self {
            Segment::Constant { end, .. } | Segment::Warmup { end, .. } => end,
        }
    }

    fn rate_at(&self, g: f64) -> f64 {
        match *self {
            Segment::Constant { rate, .. } => rate,
            Segment::Warmup {
                start,
                end,
                from,
                to,
            } => from + (to - from) * ((g - start) / (end - start)),
        }
    }

    /// Rate approached at the segment's right edge.
    fn final_rate(&self) -> f64 {
        match *self {
            Segment::Constant { rate, .. } => rate,
            Segment::Warmup { to, .. } => to,
        }
    }

    /// The part of this segment on `[from, end)`, shifted left by `shift`.
    fn clip_and_shift(&self, from: f64, shift: f64) -> Segment {
        let start = self.start().max(from);
        match *self {
            Segment::Constant { end, rate, .. } => Segment::Constant {
                start: start - shift,
                end: end - shift,
                rate,
            },
            Segment::Warmup { end, to, .. } => Segment::Warmup {
                start: start - shift,
                end: end - shift,
                from: self.rate_at(start),
                to,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Schedule {
    segments: Vec<Segment>,
}

impl Schedule {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let mut expected_start = 0.0;
        for (i, seg) in segments.iter().enumerate() {
            let (start, end) = (seg.start(), seg.end());
            if start != expected_start {
                return Err(Error::Schedule(format!(
                    "segment {i} starts at {start}, expected {expected_start} (segments must partition [0, T])"
                )));
            }
            if !(end > start && end.is_finite()) {
                return Err(Error::Schedule(format!(
                    "segment {i} has empty or invalid span [{start}, {end})"
                )));
            }
            let ok = match *seg {
                Segment::Constant { rate, .. } => rate > 0.0 && rate.is_finite(),
                Segment::Warmup { from, to, .. } => {
                    from >= 0.0 && from.is_finite() && to > 0.0 && to.is_finite()
                }
            };
            if !ok {
                return Err(Error::Schedule(format!("segment {i} has a non-positive rate")));
            }
            expected_start = end;
        }
        Ok(Self { segments })
    }

    /// Constant rate for `epochs` epochs (empty when `epochs == 0`).
    pub fn constant(rate: f64, epochs: f64) -> Result<Self> {
        if epochs == 0.0 {
            return Ok(Self::default());
        }
        Self::new(vec![Segment::Constant {
            start: 0.0,
            end: epochs,
            rate,
        }])
    }

    /// 182-epoch CIFAR-10 ResNet schedule: 0.1, then 0.01 from 91, 0.001 from 136.
    pub fn cifar_resnet() -> Self {
        Self::new(vec![
            Segment::Constant { start: 0.0, end: 91.0, rate: 0.1 },
            Segment::Constant { start: 91.0, end: 136.0, rate: 0.01 },
            Segment::Constant { start: 136.0, end: 182.0, rate: 0.001 },
        ])
        .expect("valid preset")
    }

    /// 90-epoch ImageNet ResNet schedule with a 5-epoch linear warmup to 0.4.
    pub fn imagenet_resnet() -> Self {
        Self::new(vec![
            Segment::Warmup { start: 0.0, end: 5.0, from: 0.0, to: 0.4 },
            Segment::Constant { start: 5.0, end: 30.0, rate: 0.4 },
            Segment::Constant { start: 30.0, end: 60.0, rate: 0.04 },
            Segment::Constant { start: 60.0, end: 80.0, rate: 0.004 },
            Segment::Constant { start: 80.0, end: 90.0, rate: 0.0004 },
        ])
        .expect("valid preset")
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Total length `T` in epochs.
    pub fn total_epochs(&self) -> f64 {
        self.segments.last().map_or(0.0, |s| s.end())
    }

    /// `S[T]`, the rate held forever after the schedule ends.
    pub fn final_rate(&self) -> Result<f64> {
        self.segments
            .last()
            .map(Segment::final_rate)
            .ok_or_else(|| Error::Schedule("empty schedule has no final rate".into()))
    }

    /// Learning rate at epoch `g`.
    pub fn lr_at(&self, g: f64) -> Result<f64> {
        if !(g >= 0.0) {
            return Err(Error::Schedule(format!("epoch must be >= 0, got {g}")));
        }
        if g >= self.total_epochs() {
            return self.final_rate();
        }
        let seg = self
            .segments
            .iter()
            .find(|s| s.start() <= g && g < s.end())
            .expect("segments partition [0, T)");
        Ok(seg.rate_at(g))
    }

    /// Fine-tuning schedule: `t` epochs at the constant rate `S[T]`.
    pub fn fine_tune_schedule(&self, t: f64) -> Result<Schedule> {
        check_span(t)?;
        Schedule::constant(self.final_rate()?, t)
    }

    /// The last `t` epochs of this schedule, re-based to start at 0.
    pub fn rewound_schedule(&self, t: f64) -> Result<Schedule> {
        check_span(t)?;
        let total = self.total_epochs();
        if t > total {
            return Err(Error::RetrainTooLong { t, total });
        }
        if t == 0.0 {
            return Ok(Schedule::default());
        }
        let from = total - t;
        let segments = self
            .segments
            .iter()
            .filter(|s| s.end() > from)
            .map(|s| s.clip_and_shift(from, from))
            .collect();
        Schedule::new(segments)
    }
}

fn check_span(t: f64) -> Result<()> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::Schedule(format!(
            "retraining time must be a finite value >= 0, got {t}"
        )));
    }
    Ok(())
}

/// Serialized form: constant segments plus an optional linear warmup from 0
/// to `peak_rate` over `[0, warmup_end)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub segments: Vec<ConstantSegment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_end: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peak_rate: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantSegment {
    pub start: f64,
    pub end: f64,
    pub rate: f64,
}

impl TryFrom<&ScheduleConfig> for Schedule {
    type Error = Error;

    fn try_from(cfg: &ScheduleConfig) -> Result<Schedule> {
        let mut segments = Vec::with_capacity(cfg.segments.len() + 1);
        match (cfg.warmup_end, cfg.peak_rate) {
            (Some(end), Some(to)) => segments.push(Segment::Warmup {
                start: 0.0,
                end,
                from: 0.0,
                to,
            }),
            (None, None) => {}
            _ => {
                return Err(Error::Schedule(
                    "warmup_end and peak_rate must be given together".into(),
                ))
            }
        }
        segments.extend(cfg.segments.iter().map(|s| Segment::Constant {
            start: s.start,
            end: s.end,
            rate: s.rate,
        }));
        if segments.is_empty() {
            return Err(Error::Schedule("schedule has no segments".into()));
        }
        Schedule::new(segments)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cifar_lookups() {
        let s = Schedule::cifar_resnet();
        assert_eq!(s.total_epochs(), 182.0);
        assert_eq!(s.lr_at(0.0).unwrap(), 0.1);
        assert_eq!(s.lr_at(90.999).unwrap(), 0.1);
        assert_eq!(s.lr_at(91.0).unwrap(), 0.01);
        assert_eq!(s.lr_at(100.0).unwrap(), 0.01);
        assert_eq!(s.lr_at(136.0).unwrap(), 0.001);
        assert_eq!(s.lr_at(182.0).unwrap(), 0.001);
        assert_eq!(s.lr_at(200.0).unwrap(), 0.001);
        assert!(s.lr_at(-1.0).is_err());
        assert!(s.lr_at(f64::NAN).is_err());
    }

    #[test]
    fn warmup_interpolates() {
        let s = Schedule::imagenet_resnet();
        assert_eq!(s.lr_at(2.5).unwrap(), 0.2);
        assert_eq!(s.lr_at(0.0).unwrap(), 0.0);
        assert_eq!(s.lr_at(5.0).unwrap(), 0.4);
        assert_eq!(s.lr_at(95.0).unwrap(), 0.0004);
    }

    #[test]
    fn rejects_gaps_and_overlaps() {
        let gap = Schedule::new(vec![
            Segment::Constant { start: 0.0, end: 1.0, rate: 0.1 },
            Segment::Constant { start: 2.0, end: 3.0, rate: 0.1 },
        ]);
        assert!(gap.is_err());
        let overlap = Schedule::new(vec![
            Segment::Constant { start: 0.0, end: 2.0, rate: 0.1 },
            Segment::Constant { start: 1.0, end: 3.0, rate: 0.1 },
        ]);
        assert!(overlap.is_err());
        let late = Schedule::new(vec![Segment::Constant { start: 1.0, end: 2.0, rate: 0.1 }]);
        assert!(late.is_err());
        let zero_rate = Schedule::new(vec![Segment::Constant { start: 0.0, end: 2.0, rate: 0.0 }]);
        assert!(zero_rate.is_err());
    }

    #[test]
    fn fine_tune_schedule_is_constant_final_rate() {
        let ft = Schedule::cifar_resnet().fine_tune_schedule(30.0).unwrap();
        assert_eq!(ft.total_epochs(), 30.0);
        for g in [0.0, 10.0, 29.9, 30.0, 45.0] {
            assert_eq!(ft.lr_at(g).unwrap(), 0.001);
        }
        assert!(Schedule::cifar_resnet().fine_tune_schedule(0.0).unwrap().is_empty());
    }

    #[test]
    fn fine_tune_inside_warmup_uses_rate_at_end() {
        let s = Schedule::new(vec![Segment::Warmup { start: 0.0, end: 4.0, from: 0.0, to: 0.8 }]).unwrap();
        // the ramp is open at T; S[T] is its right-edge value
        assert_eq!(s.lr_at(4.0).unwrap(), 0.8);
        let ft = s.fine_tune_schedule(3.0).unwrap();
        assert_eq!(ft.lr_at(1.0).unwrap(), s.lr_at(4.0).unwrap());
    }

    #[test]
    fn rewound_suffixes() {
        let s = Schedule::cifar_resnet();
        let r46 = s.rewound_schedule(46.0).unwrap();
        assert_eq!(r46.segments().len(), 1);
        assert_eq!(r46.lr_at(0.0).unwrap(), 0.001);
        assert_eq!(r46.total_epochs(), 46.0);

        assert_eq!(s.rewound_schedule(182.0).unwrap(), s);

        let r91 = s.rewound_schedule(91.0).unwrap();
        assert_eq!(
            r91.segments(),
            &[
                Segment::Constant { start: 0.0, end: 45.0, rate: 0.01 },
                Segment::Constant { start: 45.0, end: 91.0, rate: 0.001 },
            ]
        );
        assert!(matches!(s.rewound_schedule(183.0), Err(Error::RetrainTooLong { .. })));
        assert!(s.rewound_schedule(0.0).unwrap().is_empty());
    }

    #[test]
    fn rewound_slice_through_warmup() {
        let s = Schedule::imagenet_resnet();
        let r = s.rewound_schedule(88.0).unwrap();
        assert!((r.lr_at(0.0).unwrap() - s.lr_at(2.0).unwrap()).abs() < 1e-15);
        assert!((r.lr_at(1.5).unwrap() - s.lr_at(3.5).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn config_with_warmup() {
        let cfg: ScheduleConfig = serde_json::from_str(
            r#"{"segments":[{"start":5,"end":30,"rate":0.4},{"start":30,"end":90,"rate":0.04}],
                "warmup_end":5,"peak_rate":0.4}"#,
        )
        .unwrap();
        let s = Schedule::try_from(&cfg).unwrap();
        assert_eq!(s.lr_at(2.5).unwrap(), 0.2);
        assert_eq!(s.lr_at(100.0).unwrap(), 0.04);
    }

    fn arb_schedule() -> impl Strategy<Value = Schedule> {
        proptest::collection::vec((1u32..40, 1u32..1000), 1..6).prop_map(|parts| {
            let mut start = 0.0;
            let segs = parts
                .into_iter()
                .map(|(len, r)| {
                    let end = start + len as f64;
                    let seg = Segment::Constant { start, end, rate: r as f64 * 1e-4 };
                    start = end;
                    seg
                })
                .collect();
            Schedule::new(segs).unwrap()
        })
    }

    proptest! {
        #[test]
        fn rewound_matches_shifted_lookup(s in arb_schedule(), frac in 0.0f64..=1.0, probes in proptest::collection::vec(0.0f64..=1.0, 1..20)) {
            let total = s.total_epochs();
            let t = (frac * total).round().max(1.0);
            let r = s.rewound_schedule(t).unwrap();
            for p in probes {
                let e = (p * t * 4.0).round() / 4.0;
                prop_assert_eq!(r.lr_at(e).unwrap(), s.lr_at(total - t + e).unwrap());
            }
        }

        #[test]
        fn suffix_equals_fine_tune_when_constant(s in arb_schedule(), frac in 0.0f64..=1.0) {
            let last = *s.segments().last().unwrap();
            let t = (frac * (last.end() - last.start())).floor();
            let a = s.rewound_schedule(t).unwrap();
            let b = s.fine_tune_schedule(t).unwrap();
            for k in 0..=(t as usize * 2) {
                let e = k as f64 / 2.0;
                prop_assert_eq!(a.lr_at(e).unwrap_or(0.0), b.lr_at(e).unwrap_or(0.0));
            }
        }

        #[test]
        fn lr_is_total_and_positive(s in arb_schedule(), g in 0.0f64..500.0) {
            let r = s.lr_at(g).unwrap();
            prop_assert!(r > 0.0 && r.is_finite());
        }
    }
}
