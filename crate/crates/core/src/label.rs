use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// Number of severity classes. Fixed: every matrix, logit vector and
/// per-class table in the crate is indexed by [`SeverityLabel::index`].
pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SeverityLabel {
    Low = 0,
    Moderate = 1,
    Severe = 2,
}

impl SeverityLabel {
    pub const ALL: [SeverityLabel; NUM_CLASSES] = [
        SeverityLabel::Low,
        SeverityLabel::Moderate,
        SeverityLabel::Severe,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SeverityLabel::Low => "low",
            SeverityLabel::Moderate => "moderate",
            SeverityLabel::Severe => "severe",
        }
    }
}

impl fmt::Display for SeverityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SeverityLabel {
    type Err = Error;

    /// Case-insensitive; surrounding whitespace is ignored.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "low" => Ok(SeverityLabel::Low),
            "moderate" => Ok(SeverityLabel::Moderate),
            "severe" => Ok(SeverityLabel::Severe),
            _ => Err(Error::UnknownLabel(s.to_string())),
        }
    }
}

impl Serialize for SeverityLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for SeverityLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
