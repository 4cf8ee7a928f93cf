//! Two-modality embedding datasets: file format, synthetic generation,
//! feature-space augmentation and seeded missing-modality patterns.

mod augment;
mod batch;
mod format;
mod pattern;
mod synth;

use serde::{Deserialize, Serialize};

pub use augment::{augment, AugmentConfig};
pub use batch::{FeatureBatch, ModalitySlots};
pub use format::{
    parse_dataset, read_dataset, write_dataset, write_dataset_string, write_export_string, DatasetHeader, ExportRow,
    DATASET_FORMAT, EXPORT_FORMAT,
};
pub use pattern::{
    apply_pattern, generate_pattern, read_pattern, round_half_even, write_pattern, MissingPattern, PatternStats,
    Presence, Protocol,
};
pub use synth::{gen_synthetic, SynthConfig};

use crate::error::{Error, Result};

/// One of the two input channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    M1,
    M2,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::M1, Modality::M2];

    pub fn other(self) -> Modality {
        match self {
            Modality::M1 => Modality::M2,
            Modality::M2 => Modality::M1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::M1 => "m1",
            Modality::M2 => "m2",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Modality::M1 => 0,
            Modality::M2 => 1,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m1" => Ok(Modality::M1),
            "m2" => Ok(Modality::M2),
            _ => Err(Error::Argument(format!("unknown modality {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Single,
    Multi,
}

/// A class id (single-label) or a per-class membership vector (multi-label).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Single(usize),
    Multi(Vec<bool>),
}

impl Label {
    pub fn kind(&self) -> LabelKind {
        match self {
            Label::Single(_) => LabelKind::Single,
            Label::Multi(_) => LabelKind::Multi,
        }
    }

    /// Single-label class id; for multi-label the lowest active class (or 0).
    pub fn class(&self) -> usize {
        match self {
            Label::Single(c) => *c,
            Label::Multi(bits) => bits.iter().position(|&b| b).unwrap_or(0),
        }
    }

    pub fn has(&self, class: usize) -> bool {
        match self {
            Label::Single(c) => *c == class,
            Label::Multi(bits) => bits.get(class).copied().unwrap_or(false),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: Label,
    pub m1: Option<Vec<f64>>,
    pub m2: Option<Vec<f64>>,
}

impl Sample {
    pub fn features(&self, m: Modality) -> Option<&[f64]> {
        match m {
            Modality::M1 => self.m1.as_deref(),
            Modality::M2 => self.m2.as_deref(),
        }
    }

    pub fn features_mut(&mut self, m: Modality) -> &mut Option<Vec<f64>> {
        match m {
            Modality::M1 => &mut self.m1,
            Modality::M2 => &mut self.m2,
        }
    }

    pub fn presence(&self) -> Presence {
        Presence {
            m1: self.m1.is_some(),
            m2: self.m2.is_some(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.m1.is_some() && self.m2.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self, m: Modality) -> usize {
        match m {
            Modality::M1 => self.header.d1,
            Modality::M2 => self.header.d2,
        }
    }

    /// Subset by sample index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            header: self.header.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Checks every sample against the header invariants.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (i, s) in self.samples.iter().enumerate() {
            self.header
                .validate_sample(s)
                .map_err(|msg| Error::Data(format!("sample {} ({}): {msg}", i, s.id)))?;
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(())
    }
}
