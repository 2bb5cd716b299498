//! Half-open time ranges and `HH:MM:SS` timecodes.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A half-open interval `[start_s, end_s)` in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeRange {
    pub start_s: f64,
    pub end_s: f64,
}

impl TimeRange {
    pub fn new(start_s: f64, end_s: f64) -> Result<Self> {
        if !(start_s.is_finite() && end_s.is_finite()) || start_s < 0.0 || start_s >= end_s {
            return Err(Error::InvalidRange {
                start: start_s,
                end: end_s,
            });
        }
        Ok(Self { start_s, end_s })
    }

    pub fn len(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn is_valid(&self) -> bool {
        self.start_s.is_finite()
            && self.end_s.is_finite()
            && self.start_s >= 0.0
            && self.start_s < self.end_s
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start_s && t < self.end_s
    }

    pub fn intersects(&self, other: &TimeRange) -> bool {
        self.start_s < other.end_s && other.start_s < self.end_s
    }

    /// Overlap of two ranges, or `None` when they only touch or are disjoint.
    pub fn intersect(&self, other: &TimeRange) -> Option<TimeRange> {
        let start_s = self.start_s.max(other.start_s);
        let end_s = self.end_s.min(other.end_s);
        (start_s < end_s).then_some(TimeRange { start_s, end_s })
    }

    /// Parses a `(start, end)` pair of timecodes.
    pub fn from_timecodes(start: &str, end: &str) -> Result<Self> {
        Self::new(parse_timecode(start)? as f64, parse_timecode(end)? as f64)
    }
}

impl fmt::Display for TimeRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}–{}",
            render_timecode(self.start_s),
            render_timecode(self.end_s)
        )
    }
}

/// Parses zero-padded `HH:MM:SS` into whole seconds.
pub fn parse_timecode(text: &str) -> Result<u64> {
    let malformed = || Error::MalformedTimecode(text.to_string());
    let mut parts = text.split(':');
    let (Some(h), Some(m), Some(s), None) = (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err(malformed());
    };
    let digits = |p: &str, exact: bool| {
        let ok = if exact { p.len() == 2 } else { p.len() >= 2 };
        if ok && p.bytes().all(|b| b.is_ascii_digit()) {
            p.parse::<u64>().ok()
        } else {
            None
        }
    };
    let hours = digits(h, false).ok_or_else(malformed)?;
    let minutes = digits(m, true).ok_or_else(malformed)?;
    let seconds = digits(s, true).ok_or_else(malformed)?;
    if minutes >= 60 || seconds >= 60 {
        return Err(malformed());
    }
    Ok(3600 * hours + 60 * minutes + seconds)
}

/// Renders seconds as `HH:MM:SS`, truncating any fractional part.
pub fn render_timecode(seconds: f64) -> String {
    let total = if seconds.is_finite() && seconds > 0.0 {
        seconds.floor() as u64
    } else {
        0
    };
    format!(
        "{:02}:{:02}:{:02}",
        total / 3600,
        (total / 60) % 60,
        total % 60
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn r(a: f64, b: f64) -> TimeRange {
        TimeRange::new(a, b).unwrap()
    }

    #[test]
    fn parses_known_timecodes() {
        assert_eq!(parse_timecode("00:00:00").unwrap(), 0);
        assert_eq!(parse_timecode("00:57:00").unwrap(), 3420);
        assert_eq!(parse_timecode("01:08:21").unwrap(), 4101);
    }

    #[test]
    fn rejects_malformed_timecodes() {
        for bad in [
            "", "1:00:00", "00:60:00", "00:00:60", "00:00", "00:00:00:00", "aa:bb:cc", "00:0:00",
            " 00:00:00", "-1:00:00",
        ] {
            assert!(
                matches!(parse_timecode(bad), Err(Error::MalformedTimecode(_))),
                "{bad:?}"
            );
        }
    }

    #[test]
    fn intersect_examples() {
        assert_eq!(r(0.0, 30.0).intersect(&r(15.0, 45.0)), Some(r(15.0, 30.0)));
        assert_eq!(r(0.0, 30.0).intersect(&r(30.0, 60.0)), None);
        assert_eq!(r(10.0, 20.0).intersect(&r(10.0, 20.0)), Some(r(10.0, 20.0)));
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(TimeRange::new(5.0, 5.0).is_err());
        assert!(TimeRange::new(-1.0, 5.0).is_err());
        assert!(TimeRange::new(0.0, f64::NAN).is_err());
    }

    #[test]
    fn display_uses_timecodes() {
        assert_eq!(r(3300.0, 3420.0).to_string(), "00:55:00–00:57:00");
    }

    proptest! {
        #[test]
        fn timecode_round_trip(secs in 0u64..=359_999) {
            prop_assert_eq!(parse_timecode(&render_timecode(secs as f64)).unwrap(), secs);
        }

        #[test]
        fn intersect_commutative(a in 0u32..500, la in 1u32..200, b in 0u32..500, lb in 1u32..200) {
            let x = r(a as f64, (a + la) as f64);
            let y = r(b as f64, (b + lb) as f64);
            prop_assert_eq!(x.intersect(&y), y.intersect(&x));
            prop_assert_eq!(x.intersect(&x), Some(x));
            prop_assert_eq!(x.intersects(&y), x.intersect(&y).is_some());
        }
    }
}
