use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNKNOWN: &str = "unknown";

/// Profile attributes in prompt order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Gender,
    Age,
    Marriage,
    Occupation,
    Location,
}

impl Attribute {
    pub const ALL: [Attribute; 5] = [
        Attribute::Gender,
        Attribute::Age,
        Attribute::Marriage,
        Attribute::Occupation,
        Attribute::Location,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Gender => "gender",
            Attribute::Age => "age",
            Attribute::Marriage => "marriage",
            Attribute::Occupation => "occupation",
            Attribute::Location => "location",
        }
    }

    /// Labels an inferred profile may carry, most frequent first.
    pub fn labels(self) -> &'static [&'static str] {
        match self {
            Attribute::Gender => &["female", "male"],
            Attribute::Age => &[
                "20-years", "30-years", "40-years", "10-years", "60-years", "50-years",
            ],
            Attribute::Marriage => &["married"],
            Attribute::Occupation => &[
                "office-worker",
                "college-student",
                "part-time-worker",
                "unemployed",
                "homemaker",
                "business-owner",
                "high-school-student",
                "association-member",
                "civil-servant",
            ],
            Attribute::Location => &[
                "kanto",
                "kinki",
                "tokai",
                "kyushu-okinawa",
                "tohoku-hokkaido",
                "chugoku-shikoku",
                "hokuriku",
            ],
        }
    }

    pub fn is_label(self, value: &str) -> bool {
        self.labels().contains(&value)
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown profile attribute {s:?}")))
    }
}

/// Categorical user profile. Attributes set to `unknown` are not stored, so
/// two profiles are equal exactly when their known attributes agree.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<Attribute, String>", into = "BTreeMap<Attribute, String>")]
pub struct UserProfile {
    attrs: BTreeMap<Attribute, String>,
}

impl UserProfile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, attr: Attribute, value: &str) -> Result<Self> {
        self.set(attr, value)?;
        Ok(self)
    }

    pub fn set(&mut self, attr: Attribute, value: &str) -> Result<()> {
        if value == UNKNOWN {
            self.attrs.remove(&attr);
            return Ok(());
        }
        if !attr.is_label(value) {
            return Err(Error::Validation(format!("{value:?} is not a {attr} label")));
        }
        self.attrs.insert(attr, value.to_string());
        Ok(())
    }

    pub fn get(&self, attr: Attribute) -> &str {
        self.attrs.get(&attr).map_or(UNKNOWN, String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.attrs.is_empty()
    }

    /// Known values in prompt order.
    pub fn values(&self) -> impl Iterator<Item = &str> {
        self.attrs.values().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Attribute, &str)> {
        self.attrs.iter().map(|(a, v)| (*a, v.as_str()))
    }
}

impl TryFrom<BTreeMap<Attribute, String>> for UserProfile {
    type Error = Error;

    fn try_from(map: BTreeMap<Attribute, String>) -> Result<Self> {
        let mut p = UserProfile::new();
        for (a, v) in map {
            p.set(a, &v)?;
        }
        Ok(p)
    }
}

impl From<UserProfile> for BTreeMap<Attribute, String> {
    fn from(p: UserProfile) -> Self {
        p.attrs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_is_absent() {
        let p = UserProfile::new()
            .with(Attribute::Gender, "female")
            .unwrap()
            .with(Attribute::Age, UNKNOWN)
            .unwrap();
        assert_eq!(p.get(Attribute::Age), UNKNOWN);
        assert_eq!(p.values().collect::<Vec<_>>(), ["female"]);
        assert!(UserProfile::new().with(Attribute::Age, "female").is_err());
    }

    #[test]
    fn values_follow_attribute_order() {
        let p = UserProfile::new()
            .with(Attribute::Location, "kanto")
            .unwrap()
            .with(Attribute::Age, "30-years")
            .unwrap()
            .with(Attribute::Gender, "male")
            .unwrap();
        assert_eq!(p.values().collect::<Vec<_>>(), ["male", "30-years", "kanto"]);
    }

    #[test]
    fn label_sets_are_disjoint() {
        let mut seen = std::collections::HashSet::new();
        for a in Attribute::ALL {
            for l in a.labels() {
                assert!(seen.insert(*l), "{l} reused");
            }
        }
        assert!(!seen.contains(UNKNOWN));
    }

    #[test]
    fn serde_round_trip() {
        let p = UserProfile::new().with(Attribute::Occupation, "homemaker").unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, r#"{"occupation":"homemaker"}"#);
        let back: UserProfile = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
    }
}
