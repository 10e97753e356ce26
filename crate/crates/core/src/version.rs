//! Strict MAJOR.MINOR.PATCH versions and version requirements.
//!
//! No pre-release or build tags: versions stay total-ordered, which keeps
//! resolution deterministic. Requirement syntax:
//!
//! * `1.2.3` or `=1.2.3` — exact
//! * `^1.2.3` — at least 1.2.3, same MAJOR
//! * `>=1.0.0,<2.0.0` — range with per-bound inclusivity (`>=`/`>` and `<=`/`<`)

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VersionError {
    #[error("invalid version '{0}': expected MAJOR.MINOR.PATCH")]
    InvalidVersion(String),
    #[error("invalid version requirement '{0}'")]
    InvalidRequirement(String),
    #[error("invalid range '{0}': lower bound exceeds upper bound")]
    EmptyRange(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Version {
    pub major: u64,
    pub minor: u64,
    pub patch: u64,
}

impl Version {
    pub fn new(major: u64, minor: u64, patch: u64) -> Version {
        Version { major, minor, patch }
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.major, self.minor, self.patch)
    }
}

impl FromStr for Version {
    type Err = VersionError;

    fn from_str(s: &str) -> Result<Version, VersionError> {
        let invalid = || VersionError::InvalidVersion(s.to_string());
        let mut parts = s.split('.');
        let mut next = || -> Result<u64, VersionError> {
            let part = parts.next().ok_or_else(invalid)?;
            if part.is_empty() || !part.bytes().all(|b| b.is_ascii_digit()) {
                return Err(invalid());
            }
            // Reject redundant leading zeros so each version has one spelling.
            if part.len() > 1 && part.starts_with('0') {
                return Err(invalid());
            }
            part.parse().map_err(|_| invalid())
        };
        let v = Version::new(next()?, next()?, next()?);
        if parts.next().is_some() {
            return Err(invalid());
        }
        Ok(v)
    }
}

impl Serialize for Version {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Version {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A constraint over versions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VersionReq {
    Exact(Version),
    /// At least the given version, same MAJOR.
    Caret(Version),
    Range {
        lo: Version,
        hi: Version,
        lo_inclusive: bool,
        hi_inclusive: bool,
    },
}

impl VersionReq {
    pub fn matches(&self, v: Version) -> bool {
        match self {
            VersionReq::Exact(want) => v == *want,
            VersionReq::Caret(base) => v >= *base && v.major == base.major,
            VersionReq::Range { lo, hi, lo_inclusive, hi_inclusive } => {
                let above = if *lo_inclusive { v >= *lo } else { v > *lo };
                let below = if *hi_inclusive { v <= *hi } else { v < *hi };
                above && below
            }
        }
    }

    pub fn is_exact(&self) -> Option<Version> {
        match self {
            VersionReq::Exact(v) => Some(*v),
            _ => None,
        }
    }
}

impl fmt::Display for VersionReq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VersionReq::Exact(v) => write!(f, "={v}"),
            VersionReq::Caret(v) => write!(f, "^{v}"),
            VersionReq::Range { lo, hi, lo_inclusive, hi_inclusive } => write!(
                f,
                "{}{lo},{}{hi}",
                if *lo_inclusive { ">=" } else { ">" },
                if *hi_inclusive { "<=" } else { "<" },
            ),
        }
    }
}

impl FromStr for VersionReq {
    type Err = VersionError;

    fn from_str(s: &str) -> Result<VersionReq, VersionError> {
        let s = s.trim();
        let invalid = || VersionError::InvalidRequirement(s.to_string());
        if let Some(rest) = s.strip_prefix('^') {
            return Ok(VersionReq::Caret(rest.trim().parse().map_err(|_| invalid())?));
        }
        if let Some(rest) = s.strip_prefix('=') {
            return Ok(VersionReq::Exact(rest.trim().parse().map_err(|_| invalid())?));
        }
        if s.starts_with('>') {
            let (lo_part, hi_part) = s.split_once(',').ok_or_else(invalid)?;
            let (lo_inclusive, lo_str) = match lo_part.trim().strip_prefix(">=") {
                Some(rest) => (true, rest),
                None => (false, lo_part.trim().strip_prefix('>').ok_or_else(invalid)?),
            };
            let (hi_inclusive, hi_str) = match hi_part.trim().strip_prefix("<=") {
                Some(rest) => (true, rest),
                None => (false, hi_part.trim().strip_prefix('<').ok_or_else(invalid)?),
            };
            let lo: Version = lo_str.trim().parse().map_err(|_| invalid())?;
            let hi: Version = hi_str.trim().parse().map_err(|_| invalid())?;
            if lo > hi {
                return Err(VersionError::EmptyRange(s.to_string()));
            }
            return Ok(VersionReq::Range { lo, hi, lo_inclusive, hi_inclusive });
        }
        Ok(VersionReq::Exact(s.parse().map_err(|_| invalid())?))
    }
}

impl Serialize for VersionReq {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for VersionReq {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(s: &str) -> Version {
        s.parse().unwrap()
    }

    #[test]
    fn ordering_is_lexicographic_on_components() {
        assert!(v("1.2.3") < v("1.10.0"));
        assert!(v("2.0.0") > v("1.99.99"));
    }

    #[test]
    fn rejects_malformed_versions() {
        for bad in ["1.2", "1.2.3.4", "1.02.3", "a.b.c", "1.2.-3", ""] {
            assert!(bad.parse::<Version>().is_err(), "{bad} should be rejected");
        }
    }

    #[test]
    fn caret_matches_same_major_at_least() {
        let req: VersionReq = "^1.2.0".parse().unwrap();
        assert!(req.matches(v("1.2.0")));
        assert!(req.matches(v("1.9.9")));
        assert!(!req.matches(v("1.1.9")));
        assert!(!req.matches(v("2.0.0")));
    }

    #[test]
    fn range_respects_inclusivity() {
        let req: VersionReq = ">=1.0.0,<2.0.0".parse().unwrap();
        assert!(req.matches(v("1.0.0")));
        assert!(req.matches(v("1.9.9")));
        assert!(!req.matches(v("2.0.0")));
        let open: VersionReq = ">1.0.0,<=2.0.0".parse().unwrap();
        assert!(!open.matches(v("1.0.0")));
        assert!(open.matches(v("2.0.0")));
    }

    #[test]
    fn bare_version_parses_as_exact() {
        let req: VersionReq = "1.2.3".parse().unwrap();
        assert_eq!(req, VersionReq::Exact(v("1.2.3")));
    }

    #[test]
    fn display_round_trips() {
        for s in ["=1.2.3", "^0.4.1", ">=1.0.0,<2.0.0", ">0.1.0,<=0.2.0"] {
            let req: VersionReq = s.parse().unwrap();
            assert_eq!(req.to_string(), s);
            let again: VersionReq = req.to_string().parse().unwrap();
            assert_eq!(again, req);
        }
    }

    #[test]
    fn empty_range_is_rejected() {
        assert_eq!(
            ">=2.0.0,<1.0.0".parse::<VersionReq>(),
            Err(VersionError::EmptyRange(">=2.0.0,<1.0.0".to_string()))
        );
    }
}
