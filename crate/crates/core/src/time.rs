//! Centisecond-resolution timestamps, printed as ISO8601 with two fractional
//! digits (`2021-01-31T16:40:48.26`).

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime, Timelike};
use thiserror::Error;

pub const CENTIS_PER_SECOND: i64 = 100;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid ISO8601 timestamp {input:?}: {reason}")]
pub struct TimestampError {
    pub input: String,
    pub reason: &'static str,
}

/// Centiseconds since the Unix epoch (UTC, no zone suffix).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub const fn from_centis(c: i64) -> Self {
        Self(c)
    }

    pub const fn from_secs(s: i64) -> Self {
        Self(s * CENTIS_PER_SECOND)
    }

    pub const fn centis(self) -> i64 {
        self.0
    }

    /// Whole seconds, rounded toward negative infinity.
    pub const fn secs(self) -> i64 {
        self.0.div_euclid(CENTIS_PER_SECOND)
    }

    pub const fn plus_centis(self, c: i64) -> Self {
        Self(self.0 + c)
    }

    pub const fn plus_secs(self, s: i64) -> Self {
        Self(self.0 + s * CENTIS_PER_SECOND)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let secs = self.0.div_euclid(CENTIS_PER_SECOND);
        let centis = self.0.rem_euclid(CENTIS_PER_SECOND);
        match DateTime::from_timestamp(secs, 0) {
            Some(dt) => write!(f, "{}.{centis:02}", dt.naive_utc().format("%Y-%m-%dT%H:%M:%S")),
            None => write!(f, "@{}", self.0),
        }
    }
}

impl FromStr for Timestamp {
    type Err = TimestampError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = |reason| TimestampError { input: s.to_owned(), reason };
        let trimmed = s.trim().trim_matches('\'').trim_end_matches('Z');
        let dt = NaiveDateTime::parse_from_str(trimmed, "%Y-%m-%dT%H:%M:%S%.f")
            .map_err(|_| err("expected YYYY-MM-DDTHH:MM:SS[.ff]"))?;
        let nanos = i64::from(dt.nanosecond());
        if nanos >= 1_000_000_000 {
            return Err(err("leap seconds are not representable"));
        }
        if nanos % 10_000_000 != 0 {
            return Err(err("sub-centisecond precision"));
        }
        let secs = dt.and_utc().timestamp();
        Ok(Self(secs * CENTIS_PER_SECOND + nanos / 10_000_000))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_table_style_timestamps() {
        let t: Timestamp = "'2021-01-31T16:40:48.26'".parse().unwrap();
        assert_eq!(t.to_string(), "2021-01-31T16:40:48.26");
        let base: Timestamp = "2021-01-31T16:40:47.76".parse().unwrap();
        assert_eq!(t.centis() - base.centis(), 50);
        let whole: Timestamp = "2021-01-31T16:40:00".parse().unwrap();
        assert_eq!(whole.to_string(), "2021-01-31T16:40:00.00");
    }

    #[test]
    fn rejects_bad_input() {
        assert!("2021-01-31 16:40:48".parse::<Timestamp>().is_err());
        assert!("2021-01-31T16:40:48.265".parse::<Timestamp>().is_err());
        assert!("yesterday".parse::<Timestamp>().is_err());
    }

    proptest! {
        #[test]
        fn display_parse_round_trip(c in -1_000_000_000_000i64..10_000_000_000_000) {
            let t = Timestamp(c);
            prop_assert_eq!(t.to_string().parse::<Timestamp>().unwrap(), t);
        }
    }
}
