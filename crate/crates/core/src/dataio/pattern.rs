//! Seeded missing-modality patterns.
//!
//! The missing rate is `eta = 1 - N_c / N`. Under `balanced` (and
//! `missing_both`, which uses the same mechanics) the `round(eta * N)`
//! incomplete samples are split evenly between the two modalities, so each
//! modality is retained in `(1 - eta / 2)` of the samples and no sample loses
//! both. Under `missing_m1` / `missing_m2` all incomplete samples lose the
//! named modality. Rounding is half-to-even; which samples are hit is decided
//! by a seeded shuffle.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Dataset, Modality};
use crate::error::{Error, Result};
use crate::numkernel::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Balanced,
    MissingM1,
    MissingM2,
    MissingBoth,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Balanced => "balanced",
            Protocol::MissingM1 => "missing_m1",
            Protocol::MissingM2 => "missing_m2",
            Protocol::MissingBoth => "missing_both",
        }
    }

    /// Nominal fraction of samples keeping each modality.
    pub fn nominal_retention(self, eta: f64) -> (f64, f64) {
        match self {
            Protocol::Balanced | Protocol::MissingBoth => (1.0 - eta / 2.0, 1.0 - eta / 2.0),
            Protocol::MissingM1 => (1.0 - eta, 1.0),
            Protocol::MissingM2 => (1.0, 1.0 - eta),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced" => Ok(Protocol::Balanced),
            "missing_m1" => Ok(Protocol::MissingM1),
            "missing_m2" => Ok(Protocol::MissingM2),
            "missing_both" => Ok(Protocol::MissingBoth),
            _ => Err(Error::Argument(format!(
                "unknown protocol {s:?} (expected balanced, missing_m1, missing_m2, missing_both)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Presence {
    pub m1: bool,
    pub m2: bool,
}

impl Presence {
    pub const COMPLETE: Presence = Presence { m1: true, m2: true };

    pub fn has(self, m: Modality) -> bool {
        match m {
            Modality::M1 => self.m1,
            Modality::M2 => self.m2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingPattern {
    pub protocol: Protocol,
    pub eta: f64,
    pub seed: u64,
    /// `(sample id, presence)` in dataset order.
    pub assignment: Vec<(String, Presence)>,
}

/// Realized composition of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternStats {
    pub n: usize,
    pub complete: usize,
    pub m1_only: usize,
    pub m2_only: usize,
}

impl PatternStats {
    pub fn of(ds: &Dataset) -> Self {
        let mut st = PatternStats {
            n: ds.len(),
            complete: 0,
            m1_only: 0,
            m2_only: 0,
        };
        for s in &ds.samples {
            match (s.m1.is_some(), s.m2.is_some()) {
                (true, true) => st.complete += 1,
                (true, false) => st.m1_only += 1,
                (false, true) => st.m2_only += 1,
                (false, false) => {}
            }
        }
        st
    }

    pub fn missing_rate(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            1.0 - self.complete as f64 / self.n as f64
        }
    }

    /// Fraction of samples carrying m1 and m2.
    pub fn retention(&self) -> (f64, f64) {
        if self.n == 0 {
            return (1.0, 1.0);
        }
        let n = self.n as f64;
        (
            (self.complete + self.m1_only) as f64 / n,
            (self.complete + self.m2_only) as f64 / n,
        )
    }
}

pub fn round_half_even(x: f64) -> usize {
    x.round_ties_even().max(0.0) as usize
}

/// Draws a pattern for `ds`. Only complete samples are eligible to lose a
/// modality, so the result never leaves a sample with nothing.
pub fn generate_pattern(ds: &Dataset, protocol: Protocol, eta: f64, seed: u64) -> Result<MissingPattern> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Argument(format!("missing rate must be in [0, 1], got {eta}")));
    }
    let n = ds.len();
    let total = round_half_even(eta * n as f64);
    if total > n {
        return Err(Error::Argument(format!("eta * N rounds to {total} > N = {n}")));
    }
    let mut rng = Rng::new(seed).fork(0x5041_5454);
    let (lose_m1, lose_m2) = match protocol {
        Protocol::Balanced | Protocol::MissingBoth => {
            let half = total / 2;
            if total % 2 == 1 {
                // the odd sample goes to a seeded choice of modality
                if rng.bernoulli(0.5) {
                    (half + 1, half)
                } else {
                    (half, half + 1)
                }
            } else {
                (half, half)
            }
        }
        Protocol::MissingM1 => (total, 0),
        Protocol::MissingM2 => (0, total),
    };
    let mut eligible: Vec<usize> = (0..n).filter(|&i| ds.samples[i].is_complete()).collect();
    let must_drop = lose_m1 + lose_m2;
    if must_drop > eligible.len() {
        return Err(Error::Argument(format!(
            "pattern needs {must_drop} complete samples to drop from, dataset has {}",
            eligible.len()
        )));
    }
    rng.shuffle(&mut eligible);
    let mut presence: Vec<Presence> = ds.samples.iter().map(|s| s.presence()).collect();
    for &i in &eligible[..lose_m1] {
        presence[i].m1 = false;
    }
    for &i in &eligible[lose_m1..must_drop] {
        presence[i].m2 = false;
    }
    Ok(MissingPattern {
        protocol,
        eta,
        seed,
        assignment: ds
            .samples
            .iter()
            .zip(presence)
            .map(|(s, p)| (s.id.clone(), p))
            .collect(),
    })
}

/// Removes the modalities the pattern marks absent. The pattern must cover
/// every sample (matched by id, any order) and may not leave a sample empty.
pub fn apply_pattern(ds: &Dataset, pattern: &MissingPattern) -> Result<Dataset> {
    let lookup: std::collections::BTreeMap<&str, Presence> =
        pattern.assignment.iter().map(|(id, p)| (id.as_str(), *p)).collect();
    let mut out = ds.clone();
    for s in &mut out.samples {
        let p = *lookup
            .get(s.id.as_str())
            .ok_or_else(|| Error::Data(format!("pattern has no entry for sample {}", s.id)))?;
        if !p.m1 {
            s.m1 = None;
        }
        if !p.m2 {
            s.m2 = None;
        }
        if s.m1.is_none() && s.m2.is_none() {
            return Err(Error::Data(format!("pattern leaves sample {} with no modality", s.id)));
        }
    }
    Ok(out)
}

/// Writes `id<TAB>m1_present<TAB>m2_present` rows (0/1) after a header.
pub fn write_pattern(path: impl AsRef<Path>, pattern: &MissingPattern) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(["id", "m1_present", "m2_present"]).map_err(io)?;
    for (id, p) in &pattern.assignment {
        w.write_record([id.as_str(), bit(p.m1), bit(p.m2)]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a table written by [`write_pattern`]; protocol and eta are supplied
/// by the caller since the table only records the assignment.
pub fn read_pattern(path: impl AsRef<Path>, protocol: Protocol, eta: f64, seed: u64) -> Result<MissingPattern> {
    let path = path.as_ref();
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut assignment = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let perr = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let rec = rec.map_err(|e| perr(e.to_string()))?;
        if rec.len() != 3 {
            return Err(perr(format!("expected 3 fields, got {}", rec.len())));
        }
        let flag = |s: &str| match s {
            "1" => Ok(true),
            "0" => Ok(false),
            _ => Err(perr(format!("presence flag must be 0 or 1, got {s:?}"))),
        };
        assignment.push((
            rec[0].to_string(),
            Presence {
                m1: flag(&rec[1])?,
                m2: flag(&rec[2])?,
            },
        ));
    }
    Ok(MissingPattern {
        protocol,
        eta,
        seed,
        assignment,
    })
}

fn bit(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}
