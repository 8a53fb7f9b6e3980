//! Whole-second UTC timestamps in the `YYYY-MM-DD HH:MM:SS` form used by
//! directory documents.

use std::fmt;
use std::ops::{Add, Sub};
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, NaiveDateTime, Timelike, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ModelError;

const FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// Seconds since the Unix epoch, UTC, whole-second resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Timestamp(i64);

impl Timestamp {
    pub const EPOCH: Timestamp = Timestamp(0);

    pub const fn from_unix(secs: i64) -> Self {
        Timestamp(secs)
    }

    pub const fn unix(self) -> i64 {
        self.0
    }

    pub fn now() -> Self {
        Timestamp(Utc::now().timestamp())
    }

    /// Parses `YYYY-MM-DD HH:MM:SS`.
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        NaiveDateTime::parse_from_str(s.trim(), FORMAT)
            .map(|dt| Timestamp(dt.and_utc().timestamp()))
            .map_err(|_| ModelError::BadTimestamp(s.to_string()))
    }

    /// Parses two whitespace-separated tokens (`date time`) as found on
    /// `published` and `r` lines.
    pub fn parse_pair(date: &str, time: &str) -> Result<Self, ModelError> {
        Self::parse(&format!("{date} {time}"))
    }

    pub fn from_date(date: NaiveDate) -> Self {
        Timestamp(date.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp())
    }

    fn datetime(self) -> DateTime<Utc> {
        DateTime::from_timestamp(self.0, 0).unwrap_or_default()
    }

    pub fn date(self) -> NaiveDate {
        self.datetime().date_naive()
    }

    /// Midnight of the same UTC day.
    pub fn start_of_day(self) -> Self {
        Self::from_date(self.date())
    }

    pub fn seconds_of_day(self) -> i64 {
        i64::from(self.datetime().num_seconds_from_midnight())
    }

    /// Formats with an arbitrary chrono format string.
    pub fn format(self, fmt: &str) -> String {
        self.datetime().format(fmt).to_string()
    }

    /// `YYYY-MM-DD-HH-MM-SS`, used in archive file names.
    pub fn file_stamp(self) -> String {
        self.format("%Y-%m-%d-%H-%M-%S")
    }

    pub fn parse_file_stamp(s: &str) -> Option<Self> {
        NaiveDateTime::parse_from_str(s, "%Y-%m-%d-%H-%M-%S")
            .ok()
            .map(|dt| Timestamp(dt.and_utc().timestamp()))
    }

    pub fn saturating_sub_secs(self, secs: i64) -> Self {
        Timestamp(self.0.saturating_sub(secs))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.datetime().format(FORMAT))
    }
}

impl FromStr for Timestamp {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl Add<i64> for Timestamp {
    type Output = Timestamp;

    fn add(self, secs: i64) -> Timestamp {
        Timestamp(self.0 + secs)
    }
}

impl Sub<i64> for Timestamp {
    type Output = Timestamp;

    fn sub(self, secs: i64) -> Timestamp {
        Timestamp(self.0 - secs)
    }
}

impl Sub<Timestamp> for Timestamp {
    type Output = i64;

    fn sub(self, other: Timestamp) -> i64 {
        self.0 - other.0
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Timestamp::parse(&s).map_err(serde::de::Error::custom)
    }
}
