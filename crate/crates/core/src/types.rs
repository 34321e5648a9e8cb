use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One of the three emotion dimensions regressed by the models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Arousal,
    Valence,
    Dominance,
}

impl Dimension {
    pub const ALL: [Dimension; 3] = [Dimension::Arousal, Dimension::Valence, Dimension::Dominance];

    /// Column index of the dimension in a `(batch, 3)` estimate matrix.
    pub fn index(self) -> usize {
        match self {
            Dimension::Arousal => 0,
            Dimension::Valence => 1,
            Dimension::Dominance => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Arousal => "arousal",
            Dimension::Valence => "valence",
            Dimension::Dominance => "dominance",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dimension {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "arousal" | "a" => Ok(Dimension::Arousal),
            "valence" | "v" => Ok(Dimension::Valence),
            "dominance" | "d" => Ok(Dimension::Dominance),
            other => Err(Error::invalid(format!("unknown emotion dimension `{other}`"))),
        }
    }
}

/// Arousal, valence and dominance, each in `[0, 1]` once normalized.
///
/// Used both for targets and for model estimates; estimates are not squashed
/// and may leave the unit interval.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EmotionTriple {
    pub arousal: f64,
    pub valence: f64,
    pub dominance: f64,
}

impl EmotionTriple {
    pub fn new(arousal: f64, valence: f64, dominance: f64) -> Self {
        Self {
            arousal,
            valence,
            dominance,
        }
    }

    /// Builds a label triple, rejecting values outside `[0, 1]`.
    pub fn normalized(arousal: f64, valence: f64, dominance: f64) -> Result<Self> {
        let triple = Self::new(arousal, valence, dominance);
        for dim in Dimension::ALL {
            let v = triple.get(dim);
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{dim} label {v} outside [0, 1]")));
            }
        }
        Ok(triple)
    }

    pub fn get(&self, dim: Dimension) -> f64 {
        match dim {
            Dimension::Arousal => self.arousal,
            Dimension::Valence => self.valence,
            Dimension::Dominance => self.dominance,
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.arousal, self.valence, self.dominance]
    }

    pub fn from_array(values: [f64; 3]) -> Self {
        Self::new(values[0], values[1], values[2])
    }
}

/// Corpus partition. `Test1` holds seen scenarios, `Test2` unseen ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Development,
    Test1,
    Test2,
}

impl Partition {
    pub const ALL: [Partition; 4] = [
        Partition::Train,
        Partition::Development,
        Partition::Test1,
        Partition::Test2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Development => "development",
            Partition::Test1 => "test1",
            Partition::Test2 => "test2",
        }
    }

    /// Heading used in result tables: test1 is "Seen Scenarios", test2 is
    /// "Unseen Scenarios".
    pub fn scenario_label(self) -> Option<&'static str> {
        match self {
            Partition::Test1 => Some("Seen Scenarios"),
            Partition::Test2 => Some("Unseen Scenarios"),
            _ => None,
        }
    }

    pub fn is_unseen(self) -> bool {
        self == Partition::Test2
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Partition::Train),
            "development" | "dev" | "validation" => Ok(Partition::Development),
            "test1" => Ok(Partition::Test1),
            "test2" => Ok(Partition::Test2),
            other => Err(Error::invalid(format!("unknown partition `{other}`"))),
        }
    }
}
