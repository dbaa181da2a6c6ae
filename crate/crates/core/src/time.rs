//! Simulation time.
//!
//! The simulation clock counts integer milliseconds from experiment start.
//! Durations accept both a compact form (`10h`, `90m`, `2h30m`, `45s`) and
//! ISO-8601 (`PT10H`, `P1DT2H`), and serialize as ISO-8601. Instants
//! serialize as their ISO-8601 offset from the simulation epoch.

use std::fmt;
use std::ops::{Add, AddAssign, Sub};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const MS_PER_SECOND: i64 = 1_000;
pub const MS_PER_MINUTE: i64 = 60 * MS_PER_SECOND;
pub const MS_PER_HOUR: i64 = 60 * MS_PER_MINUTE;
pub const MS_PER_DAY: i64 = 24 * MS_PER_HOUR;

/// A span of simulated time in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimDuration(i64);

impl SimDuration {
    pub const ZERO: SimDuration = SimDuration(0);

    pub const fn from_millis(ms: i64) -> Self {
        SimDuration(ms)
    }

    pub const fn from_secs(s: i64) -> Self {
        SimDuration(s * MS_PER_SECOND)
    }

    pub const fn from_minutes(m: i64) -> Self {
        SimDuration(m * MS_PER_MINUTE)
    }

    pub const fn from_hours(h: i64) -> Self {
        SimDuration(h * MS_PER_HOUR)
    }

    /// Rounds down to the millisecond.
    pub fn from_hours_f64(h: f64) -> Self {
        SimDuration((h * MS_PER_HOUR as f64).floor() as i64)
    }

    pub const fn millis(self) -> i64 {
        self.0
    }

    pub fn hours(self) -> f64 {
        self.0 as f64 / MS_PER_HOUR as f64
    }

    pub fn is_positive(self) -> bool {
        self.0 > 0
    }

    pub fn saturating_sub(self, rhs: SimDuration) -> SimDuration {
        SimDuration((self.0 - rhs.0).max(0))
    }
}

impl Add for SimDuration {
    type Output = SimDuration;
    fn add(self, rhs: SimDuration) -> SimDuration {
        SimDuration(self.0 + rhs.0)
    }
}

impl Sub for SimDuration {
    type Output = SimDuration;
    fn sub(self, rhs: SimDuration) -> SimDuration {
        SimDuration(self.0 - rhs.0)
    }
}

/// An instant on the simulation clock, in milliseconds since experiment start.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimTime(i64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_millis(ms: i64) -> Self {
        SimTime(ms)
    }

    pub const fn millis(self) -> i64 {
        self.0
    }

    pub fn hours(self) -> f64 {
        self.0 as f64 / MS_PER_HOUR as f64
    }

    pub fn since_start(self) -> SimDuration {
        SimDuration(self.0)
    }

    /// Elapsed time from `earlier` to `self`, clamped at zero.
    pub fn duration_since(self, earlier: SimTime) -> SimDuration {
        SimDuration((self.0 - earlier.0).max(0))
    }
}

impl Add<SimDuration> for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimDuration) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign<SimDuration> for SimTime {
    fn add_assign(&mut self, rhs: SimDuration) {
        self.0 += rhs.0;
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", SimDuration(self.0))
    }
}

/// Time of day as milliseconds after midnight, in `[0, 24h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeOfDay(i64);

impl TimeOfDay {
    pub const MIDNIGHT: TimeOfDay = TimeOfDay(0);

    pub fn from_millis(ms: i64) -> Self {
        TimeOfDay(ms.rem_euclid(MS_PER_DAY))
    }

    pub fn hm(hour: u32, minute: u32) -> Self {
        TimeOfDay::from_millis(hour as i64 * MS_PER_HOUR + minute as i64 * MS_PER_MINUTE)
    }

    pub const fn millis(self) -> i64 {
        self.0
    }
}

impl fmt::Display for TimeOfDay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mins = self.0 / MS_PER_MINUTE;
        write!(f, "{:02}:{:02}", mins / 60, mins % 60)
    }
}

impl FromStr for TimeOfDay {
    type Err = ParseTimeError;

    /// `HH:MM`; `24:00` is accepted as an end-of-day marker and maps to midnight.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseTimeError(s.to_string());
        let (h, m) = s.trim().split_once(':').ok_or_else(err)?;
        let h: u32 = h.parse().map_err(|_| err())?;
        let m: u32 = m.parse().map_err(|_| err())?;
        if m >= 60 || h > 24 || (h == 24 && m != 0) {
            return Err(err());
        }
        Ok(TimeOfDay::hm(h, m))
    }
}

impl Serialize for TimeOfDay {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TimeOfDay {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid time `{0}`")]
pub struct ParseTimeError(String);

impl fmt::Display for SimDuration {
    /// ISO-8601 duration, e.g. `PT10H`, `PT1H30M`, `PT0.5S`, `-PT2M`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let neg = self.0 < 0;
        let mut ms = self.0.unsigned_abs() as i64;
        if neg {
            f.write_str("-")?;
        }
        f.write_str("PT")?;
        if ms == 0 {
            return f.write_str("0S");
        }
        let h = ms / MS_PER_HOUR;
        ms %= MS_PER_HOUR;
        let m = ms / MS_PER_MINUTE;
        ms %= MS_PER_MINUTE;
        if h > 0 {
            write!(f, "{h}H")?;
        }
        if m > 0 {
            write!(f, "{m}M")?;
        }
        if ms > 0 {
            let s = ms / MS_PER_SECOND;
            let rem = ms % MS_PER_SECOND;
            if rem == 0 {
                write!(f, "{s}S")?;
            } else {
                let frac = format!("{rem:03}");
                write!(f, "{s}.{}S", frac.trim_end_matches('0'))?;
            }
        }
        Ok(())
    }
}

impl FromStr for SimDuration {
    type Err = ParseTimeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let (neg, body) = match t.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, t),
        };
        let ms = if body.starts_with('P') || body.starts_with('p') { parse_iso(body) } else { parse_compact(body) }
            .ok_or_else(|| ParseTimeError(s.to_string()))?;
        Ok(SimDuration(if neg { -ms } else { ms }))
    }
}

fn unit_ms(unit: char, in_time: bool) -> Option<f64> {
    Some(match (unit.to_ascii_uppercase(), in_time) {
        ('W', false) => 7.0 * MS_PER_DAY as f64,
        ('D', false) => MS_PER_DAY as f64,
        ('H', true) => MS_PER_HOUR as f64,
        ('M', true) => MS_PER_MINUTE as f64,
        ('S', true) => MS_PER_SECOND as f64,
        _ => return None,
    })
}

fn parse_iso(body: &str) -> Option<i64> {
    let mut total = 0.0;
    let mut in_time = false;
    let mut num = String::new();
    let mut any = false;
    for c in body.chars().skip(1) {
        match c {
            'T' | 't' => {
                if in_time || !num.is_empty() {
                    return None;
                }
                in_time = true;
            }
            '0'..='9' | '.' | ',' => num.push(if c == ',' { '.' } else { c }),
            _ => {
                let value: f64 = num.parse().ok()?;
                total += value * unit_ms(c, in_time)?;
                num.clear();
                any = true;
            }
        }
    }
    if !num.is_empty() || !any {
        return None;
    }
    Some(total.round() as i64)
}

fn parse_compact(body: &str) -> Option<i64> {
    let mut total = 0.0;
    let mut num = String::new();
    let mut any = false;
    for c in body.chars() {
        match c {
            '0'..='9' | '.' => num.push(c),
            'd' | 'h' | 'm' | 's' => {
                let value: f64 = num.parse().ok()?;
                total += value * unit_ms(c, c != 'd')?;
                num.clear();
                any = true;
            }
            _ => return None,
        }
    }
    if !num.is_empty() || !any {
        return None;
    }
    Some(total.round() as i64)
}

impl Serialize for SimDuration {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SimDuration {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl Serialize for SimTime {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SimTime {
    /// Accepts the ISO-8601 offset or integer milliseconds.
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Millis(i64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Millis(ms) => Ok(SimTime(ms)),
            Repr::Text(t) => t.parse::<SimDuration>().map(|d| SimTime(d.0)).map_err(serde::de::Error::custom),
        }
    }
}
