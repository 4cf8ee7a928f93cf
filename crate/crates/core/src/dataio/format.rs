//! Line-delimited JSON embedding files.
//!
//! Line 1 is a header record; every following non-empty line is one sample:
//!
//! ```text
//! {"format":"promise-embeddings","version":1,"d1":2,"d2":3,"label_kind":"single","class_count":4}
//! {"id":"s0","label":1,"m1":[0.5,-1.25],"m2":null}
//! ```
//!
//! Floats are written in shortest round-trip form, so a write/read cycle is
//! bit-exact. Multi-label rows carry `label` as a 0/1 array of length
//! `class_count`.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Label, LabelKind, Sample};
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "promise-embeddings";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub d1: usize,
    pub d2: usize,
    pub label_kind: LabelKind,
    pub class_count: usize,
}

impl DatasetHeader {
    pub(crate) fn validate_sample(&self, s: &Sample) -> std::result::Result<(), String> {
        if s.m1.is_none() && s.m2.is_none() {
            return Err("both modalities are missing".into());
        }
        for (name, v, d) in [("m1", &s.m1, self.d1), ("m2", &s.m2, self.d2)] {
            if let Some(v) = v {
                if v.len() != d {
                    return Err(format!("{name} has dimension {} but header declares {d}", v.len()));
                }
                if let Some(j) = v.iter().position(|x| !x.is_finite()) {
                    return Err(format!("{name}[{j}] is not finite"));
                }
            }
        }
        match (&s.label, self.label_kind) {
            (Label::Single(c), LabelKind::Single) if *c < self.class_count => Ok(()),
            (Label::Single(c), LabelKind::Single) => {
                Err(format!("label {c} out of range for {} classes", self.class_count))
            }
            (Label::Multi(bits), LabelKind::Multi) if bits.len() == self.class_count => Ok(()),
            (Label::Multi(bits), LabelKind::Multi) => Err(format!(
                "multi-label vector has length {} but class_count is {}",
                bits.len(),
                self.class_count
            )),
            _ => Err("label kind does not match header".into()),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderRecord {
    format: String,
    version: u32,
    d1: usize,
    d2: usize,
    label_kind: LabelKind,
    class_count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LabelRecord {
    Single(usize),
    Multi(Vec<u8>),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    label: LabelRecord,
    m1: Option<Vec<f64>>,
    m2: Option<Vec<f64>>,
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path)
}

/// Parses dataset text; `path` is used only in error messages.
pub fn parse_dataset(text: &str, path: &Path) -> Result<Dataset> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| perr(1, "missing header line".into()))?;
    let h: HeaderRecord = serde_json::from_str(first).map_err(|e| perr(1, format!("bad header: {e}")))?;
    if h.format != DATASET_FORMAT {
        return Err(perr(1, format!("unknown format {:?}", h.format)));
    }
    if h.version != DATASET_VERSION {
        return Err(perr(1, format!("unsupported version {} (expected {DATASET_VERSION})", h.version)));
    }
    if h.class_count == 0 {
        return Err(perr(1, "class_count must be positive".into()));
    }
    let header = DatasetHeader {
        d1: h.d1,
        d2: h.d2,
        label_kind: h.label_kind,
        class_count: h.class_count,
    };
    let mut samples = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let r: SampleRecord = serde_json::from_str(line).map_err(|e| perr(lineno, e.to_string()))?;
        let label = match (r.label, header.label_kind) {
            (LabelRecord::Single(c), LabelKind::Single) => Label::Single(c),
            (LabelRecord::Multi(bits), LabelKind::Multi) => {
                if bits.iter().any(|&b| b > 1) {
                    return Err(perr(lineno, "multi-label entries must be 0 or 1".into()));
                }
                Label::Multi(bits.into_iter().map(|b| b == 1).collect())
            }
            _ => return Err(perr(lineno, "label does not match header label_kind".into())),
        };
        let sample = Sample {
            id: r.id,
            label,
            m1: r.m1,
            m2: r.m2,
        };
        header
            .validate_sample(&sample)
            .map_err(|msg| perr(lineno, format!("sample {}: {msg}", sample.id)))?;
        if !ids.insert(sample.id.clone()) {
            return Err(perr(lineno, format!("duplicate sample id {}", sample.id)));
        }
        samples.push(sample);
    }
    Ok(Dataset { header, samples })
}

pub fn write_dataset_string(ds: &Dataset) -> Result<String> {
    let h = HeaderRecord {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        d1: ds.header.d1,
        d2: ds.header.d2,
        label_kind: ds.header.label_kind,
        class_count: ds.header.class_count,
    };
    let mut out = serde_json::to_string(&h).expect("header serializes");
    out.push('\n');
    for s in &ds.samples {
        let rec = SampleRecord {
            id: s.id.clone(),
            label: label_record(&s.label),
            m1: s.m1.clone(),
            m2: s.m2.clone(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Data(format!("sample {}: {e}", s.id)))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let path = path.as_ref();
    ds.validate()?;
    let text = write_dataset_string(ds)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub const EXPORT_FORMAT: &str = "promise-export";

/// Effective features of one sample as produced by a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct ExportRow {
    pub id: String,
    pub label: Label,
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    pub m1_generated: bool,
    pub m2_generated: bool,
}

#[derive(Serialize)]
struct ExportRecord<'a> {
    id: &'a str,
    label: LabelRecord,
    m1: &'a [f64],
    m2: &'a [f64],
    m1_generated: bool,
    m2_generated: bool,
}

/// Same container as datasets, tagged `promise-export`, with both
/// modalities always filled and per-modality generated flags.
pub fn write_export_string(header: &DatasetHeader, rows: &[ExportRow]) -> String {
    let h = HeaderRecord {
        format: EXPORT_FORMAT.into(),
        version: DATASET_VERSION,
        d1: header.d1,
        d2: header.d2,
        label_kind: header.label_kind,
        class_count: header.class_count,
    };
    let mut out = serde_json::to_string(&h).expect("header serializes");
    out.push('\n');
    for r in rows {
        let rec = ExportRecord {
            id: &r.id,
            label: label_record(&r.label),
            m1: &r.m1,
            m2: &r.m2,
            m1_generated: r.m1_generated,
            m2_generated: r.m2_generated,
        };
        out.push_str(&serde_json::to_string(&rec).expect("finite export row"));
        out.push('\n');
    }
    out
}

fn label_record(l: &Label) -> LabelRecord {
    match l {
        Label::Single(c) => LabelRecord::Single(*c),
        Label::Multi(bits) => LabelRecord::Multi(bits.iter().map(|&b| b as u8).collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = r#"{"format":"promise-embeddings","version":1,"d1":2,"d2":1,"label_kind":"single","class_count":3}"#;

    fn parse(body: &str) -> Result<Dataset> {
        parse_dataset(&format!("{HEADER}\n{body}"), Path::new("mem.jsonl"))
    }

    #[test]
    fn empty_body() {
        let ds = parse("").unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.header.d1, 2);
    }

    #[test]
    fn round_trip_exact() {
        let ds = parse(
            "{\"id\":\"a\",\"label\":2,\"m1\":[0.1,-3.0000000000000004],\"m2\":null}\n\
             {\"id\":\"b\",\"label\":0,\"m1\":null,\"m2\":[1e-300]}\n",
        )
        .unwrap();
        let text = write_dataset_string(&ds).unwrap();
        let back = parse_dataset(&text, Path::new("x")).unwrap();
        assert_eq!(ds, back);
        assert_eq!(back.samples[0].m1.as_ref().unwrap()[1].to_bits(), (-3.0000000000000004f64).to_bits());
    }

    #[test]
    fn both_null_rejected_with_line() {
        let err = parse("{\"id\":\"a\",\"label\":0,\"m1\":[1,2],\"m2\":null}\n{\"id\":\"b\",\"label\":0,\"m1\":null,\"m2\":null}")
            .unwrap_err();
        match err {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 3);
                assert!(msg.contains("both modalities"), "{msg}");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let err = parse("{\"id\":\"a\",\"label\":0,\"m1\":[1],\"m2\":null}").unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn duplicate_id_rejected() {
        let err = parse(
            "{\"id\":\"a\",\"label\":0,\"m1\":[1,2],\"m2\":null}\n{\"id\":\"a\",\"label\":1,\"m1\":[1,2],\"m2\":null}",
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn non_finite_rejected() {
        assert!(parse("{\"id\":\"a\",\"label\":0,\"m1\":[1e999,2],\"m2\":null}").is_err());
        assert!(parse("{\"id\":\"a\",\"label\":0,\"m1\":[NaN,2],\"m2\":null}").is_err());
    }

    #[test]
    fn label_out_of_range_rejected() {
        assert!(parse("{\"id\":\"a\",\"label\":3,\"m1\":[1,2],\"m2\":null}").is_err());
    }
}
