use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::money::Money;
use crate::time::{TimeOfDay, MS_PER_DAY};

/// One daily pricing window, `[start, end)`, possibly wrapping past midnight.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: TimeOfDay,
    pub end: TimeOfDay,
    /// Money per cpu-hour.
    pub rate: Money,
}

impl Segment {
    fn len_ms(&self) -> i64 {
        let d = (self.end.millis() - self.start.millis()).rem_euclid(MS_PER_DAY);
        if d == 0 {
            MS_PER_DAY
        } else {
            d
        }
    }

    fn contains(&self, t: TimeOfDay) -> bool {
        (t.millis() - self.start.millis()).rem_euclid(MS_PER_DAY) < self.len_ms()
    }
}

/// A resource owner's time-varying price list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSchedule {
    pub segments: Vec<Segment>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_user_multiplier: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScheduleError {
    #[error("cost schedule has no segments")]
    Empty,
    #[error("cost segment {start}-{end} has non-positive rate {rate}")]
    NonPositiveRate { start: TimeOfDay, end: TimeOfDay, rate: Money },
    #[error("cost segments overlap at {at}")]
    Overlap { at: TimeOfDay },
    #[error("cost segments leave a gap at {at}")]
    Gap { at: TimeOfDay },
    #[error("user multiplier for `{user}` must be positive, got {factor}")]
    BadMultiplier { user: String, factor: f64 },
}

impl CostSchedule {
    /// A single all-day rate.
    pub fn flat(rate: Money) -> Self {
        CostSchedule {
            segments: vec![Segment { start: TimeOfDay::MIDNIGHT, end: TimeOfDay::MIDNIGHT, rate }],
            per_user_multiplier: BTreeMap::new(),
        }
    }

    /// `day_rate` from 08:00 to 20:00, `night_rate` otherwise.
    pub fn day_night(day_rate: Money, night_rate: Money) -> Self {
        CostSchedule {
            segments: vec![
                Segment { start: TimeOfDay::hm(8, 0), end: TimeOfDay::hm(20, 0), rate: day_rate },
                Segment { start: TimeOfDay::hm(20, 0), end: TimeOfDay::hm(8, 0), rate: night_rate },
            ],
            per_user_multiplier: BTreeMap::new(),
        }
    }

    pub fn with_multiplier(mut self, user: impl Into<String>, factor: f64) -> Self {
        self.per_user_multiplier.insert(user.into(), factor);
        self
    }

    /// Checks that the segments partition the day exactly and every rate and
    /// multiplier is positive.
    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.segments.is_empty() {
            return Err(ScheduleError::Empty);
        }
        for s in &self.segments {
            if !s.rate.is_positive() {
                return Err(ScheduleError::NonPositiveRate { start: s.start, end: s.end, rate: s.rate });
            }
        }
        for (user, &factor) in &self.per_user_multiplier {
            if !(factor.is_finite() && factor > 0.0) {
                return Err(ScheduleError::BadMultiplier { user: user.clone(), factor });
            }
        }
        let mut sorted: Vec<&Segment> = self.segments.iter().collect();
        sorted.sort_by_key(|s| s.start);
        for pair in sorted.windows(2) {
            if pair[0].start == pair[1].start {
                return Err(ScheduleError::Overlap { at: pair[1].start });
            }
        }
        // Walking the starts in order, each segment must end exactly where the
        // next one (cyclically) starts.
        let n = sorted.len();
        for i in 0..n {
            let cur = sorted[i];
            let next = sorted[(i + 1) % n];
            if cur.end != next.start || (n > 1 && cur.len_ms() == MS_PER_DAY) {
                let cur_end = cur.start.millis() + cur.len_ms();
                let gap = (next.start.millis() - cur.start.millis()).rem_euclid(MS_PER_DAY);
                let gap = if gap == 0 { MS_PER_DAY } else { gap };
                return Err(if cur.len_ms() > gap {
                    ScheduleError::Overlap { at: next.start }
                } else {
                    ScheduleError::Gap { at: TimeOfDay::from_millis(cur_end) }
                });
            }
        }
        let total: i64 = self.segments.iter().map(Segment::len_ms).sum();
        if total != MS_PER_DAY {
            return Err(ScheduleError::Overlap { at: sorted[0].start });
        }
        Ok(())
    }

    pub fn multiplier(&self, user: &str) -> f64 {
        self.per_user_multiplier.get(user).copied().unwrap_or(1.0)
    }

    fn segment_at(&self, t: TimeOfDay) -> &Segment {
        self.segments.iter().find(|s| s.contains(t)).expect("validated schedule covers the whole day")
    }

    /// The next time of day, strictly after `t`, at which the rate segment
    /// changes; `None` for a single-segment schedule.
    pub fn next_boundary_after(&self, t: TimeOfDay) -> Option<i64> {
        if self.segments.len() < 2 {
            return None;
        }
        self.segments
            .iter()
            .map(|s| {
                let d = (s.start.millis() - t.millis()).rem_euclid(MS_PER_DAY);
                if d == 0 {
                    MS_PER_DAY
                } else {
                    d
                }
            })
            .min()
    }
}

/// Rate for `user` at time of day `t`: the containing segment's rate times the
/// user's multiplier. Segment boundaries belong to the segment that starts there.
pub fn cost_at(schedule: &CostSchedule, user: &str, t: TimeOfDay) -> Money {
    schedule.segment_at(t).rate.scale(schedule.multiplier(user))
}

/// Charge for `cpu_hours` spread evenly over the wall-clock span
/// `[start, start + wall_ms)`, integrating the rate piecewise. Used when
/// integrated charging is configured instead of the rate pinned at dispatch.
pub fn integrated_charge(schedule: &CostSchedule, user: &str, start: TimeOfDay, wall_ms: i64, cpu_hours: f64) -> Money {
    if wall_ms <= 0 {
        return cost_at(schedule, user, start).scale(cpu_hours);
    }
    let mut t = start.millis();
    let mut left = wall_ms;
    let mut cents = 0.0;
    while left > 0 {
        let tod = TimeOfDay::from_millis(t);
        let step = schedule.next_boundary_after(tod).unwrap_or(i64::MAX).min(left);
        let rate = cost_at(schedule, user, tod);
        cents += rate.cents() as f64 * cpu_hours * (step as f64 / wall_ms as f64);
        t += step;
        left -= step;
    }
    Money::from_cents(cents.round() as i64)
}

/// Highest rate `user` can be charged under this schedule.
pub fn peak_rate(schedule: &CostSchedule, user: &str) -> Money {
    let m = schedule.multiplier(user);
    schedule.segments.iter().map(|s| s.rate.scale(m)).max().unwrap_or(Money::ZERO)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn day_night() -> CostSchedule {
        CostSchedule::day_night(Money::units(6), Money::units(2))
    }

    #[test]
    fn piecewise_lookup() {
        let s = day_night();
        s.validate().unwrap();
        assert_eq!(cost_at(&s, "u", TimeOfDay::hm(21, 0)), Money::units(2));
        assert_eq!(cost_at(&s, "u", TimeOfDay::hm(8, 0)), Money::units(6));
        assert_eq!(cost_at(&s, "u", TimeOfDay::hm(7, 59)), Money::units(2));
        assert_eq!(cost_at(&s, "u", TimeOfDay::hm(20, 0)), Money::units(2));
        let half = day_night().with_multiplier("student", 0.5);
        assert_eq!(cost_at(&half, "student", TimeOfDay::hm(12, 0)), Money::units(3));
        assert_eq!(cost_at(&half, "other", TimeOfDay::hm(12, 0)), Money::units(6));
    }

    #[test]
    fn rejects_overlap_and_gap() {
        let mut s = day_night();
        s.segments[0].end = TimeOfDay::hm(21, 0);
        assert!(matches!(s.validate(), Err(ScheduleError::Overlap { .. })));
        let mut s = day_night();
        s.segments[0].end = TimeOfDay::hm(19, 0);
        assert!(matches!(s.validate(), Err(ScheduleError::Gap { .. })));
        let mut s = day_night();
        s.segments[1].rate = Money::ZERO;
        assert!(matches!(s.validate(), Err(ScheduleError::NonPositiveRate { .. })));
        let s = day_night().with_multiplier("u", 0.0);
        assert!(matches!(s.validate(), Err(ScheduleError::BadMultiplier { .. })));
        let mut s = CostSchedule::flat(Money::units(1));
        s.segments.push(Segment { start: TimeOfDay::hm(3, 0), end: TimeOfDay::hm(4, 0), rate: Money::units(1) });
        assert!(s.validate().is_err());
        CostSchedule::flat(Money::units(1)).validate().unwrap();
    }

    #[test]
    fn boundaries() {
        let s = day_night();
        assert_eq!(s.next_boundary_after(TimeOfDay::hm(8, 0)), Some(12 * 3_600_000));
        assert_eq!(s.next_boundary_after(TimeOfDay::hm(19, 0)), Some(3_600_000));
        assert_eq!(CostSchedule::flat(Money::units(1)).next_boundary_after(TimeOfDay::hm(1, 0)), None);
    }

    #[test]
    fn integrated_charge_splits_across_boundary() {
        let s = day_night();
        // 2 cpu-hours over 19:00-21:00: half at 6, half at 2.
        let m = integrated_charge(&s, "u", TimeOfDay::hm(19, 0), 2 * 3_600_000, 2.0);
        assert_eq!(m, Money::units(8));
        let m = integrated_charge(&s, "u", TimeOfDay::hm(9, 0), 3_600_000, 1.5);
        assert_eq!(m, Money::units(9));
    }

    fn partition() -> impl Strategy<Value = CostSchedule> {
        (prop::collection::btree_set(0i64..(24 * 60), 1..6), prop::collection::vec(1i64..1000, 6), 0usize..6).prop_map(
            |(cuts, rates, rot)| {
                let cuts: Vec<i64> = cuts.into_iter().collect();
                let n = cuts.len();
                let segments = (0..n)
                    .map(|i| Segment {
                        start: TimeOfDay::from_millis(cuts[i] * 60_000),
                        end: TimeOfDay::from_millis(cuts[(i + 1) % n] * 60_000),
                        rate: Money::from_cents(rates[i]),
                    })
                    .collect::<Vec<_>>();
                let mut segments = segments;
                segments.rotate_left(rot % n);
                CostSchedule { segments, per_user_multiplier: BTreeMap::new() }
            },
        )
    }

    proptest! {
        #[test]
        fn cost_at_is_total(s in partition(), minute in 0i64..(24 * 60)) {
            prop_assert!(s.validate().is_ok());
            let t = TimeOfDay::from_millis(minute * 60_000);
            let hits = s.segments.iter().filter(|seg| seg.contains(t)).count();
            prop_assert_eq!(hits, 1);
            prop_assert!(cost_at(&s, "anyone", t).is_positive());
        }
    }
}
