use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub const N_CLASSES: usize = 4;

/// Disease class of a scan. Discriminants are the class indices used by the
/// model heads and every on-disk format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Healthy = 0,
    Covid = 1,
    A = 2,
    G = 3,
}

impl Label {
    pub const ALL: [Label; N_CLASSES] = [Label::Healthy, Label::Covid, Label::A, Label::G];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Healthy => "Healthy",
            Label::Covid => "COVID",
            Label::A => "A",
            Label::G => "G",
        }
    }

    /// Lower-case key used in config files and column names.
    pub fn key(self) -> &'static str {
        match self {
            Label::Healthy => "healthy",
            Label::Covid => "covid",
            Label::A => "a",
            Label::G => "g",
        }
    }

    pub fn is_diseased(self) -> bool {
        self != Label::Healthy
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Label::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Invalid(format!("unknown label {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male = 0,
    Female = 1,
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::Male, Gender::Female];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Gender {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Gender::ALL
            .into_iter()
            .find(|g| g.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Invalid(format!("unknown gender {s:?}")))
    }
}

/// A (class, gender) cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Stratum {
    pub label: Label,
    pub gender: Gender,
}

impl Stratum {
    pub fn new(label: Label, gender: Gender) -> Self {
        Self { label, gender }
    }

    /// All eight strata in class-major order.
    pub fn all() -> impl Iterator<Item = Stratum> {
        Label::ALL
            .into_iter()
            .flat_map(|l| Gender::ALL.into_iter().map(move |g| Stratum::new(l, g)))
    }

    pub fn index(self) -> usize {
        self.label.index() * 2 + self.gender.index()
    }

    pub fn key(self) -> String {
        format!("{}_{}", self.label.key(), self.gender.name())
    }
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.label, self.gender)
    }
}
