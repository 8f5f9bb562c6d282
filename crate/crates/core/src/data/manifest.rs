//! Dataset manifests: one CSV per dataset, columns
//! `subject_id,path,role,label,age,sex`.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Class names in encoding order.
pub const CLASS_NAMES: [&str; 3] = ["CN", "AD", "FTD"];

const HEADER: [&str; 6] = ["subject_id", "path", "role", "label", "age", "sex"];

/// Which dataset a record belongs to: unlabeled pre-training data, the
/// labeled task-related pool, or the small target set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    U,
    D,
    T,
}

impl FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_uppercase().as_str() {
            "U" => Ok(Role::U),
            "D" => Ok(Role::D),
            "T" => Ok(Role::T),
            other => Err(format!("unknown role {other:?} (expected U, D or T)")),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::U => "U",
            Role::D => "D",
            Role::T => "T",
        })
    }
}

/// Maps a label string (class name or integer code) to its code.
pub fn parse_label(s: &str) -> Option<usize> {
    let s = s.trim();
    CLASS_NAMES
        .iter()
        .position(|c| c.eq_ignore_ascii_case(s))
        .or_else(|| s.parse::<usize>().ok().filter(|&i| i < CLASS_NAMES.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub subject_id: String,
    pub path: PathBuf,
    pub role: Role,
    pub label: Option<usize>,
    pub age: Option<f64>,
    pub sex: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    records: Vec<ManifestRecord>,
    checksum: String,
}

impl Manifest {
    /// Validates the records and computes the checksum.
    pub fn new(records: Vec<ManifestRecord>) -> Result<Self> {
        let mut problems = Vec::new();
        let mut paths = HashSet::new();
        let mut ids = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            let row = i + 2;
            if r.subject_id.is_empty() {
                problems.push(format!("row {row}: empty subject_id"));
            }
            if !paths.insert(&r.path) {
                problems.push(format!("row {row}: duplicate path {}", r.path.display()));
            }
            if !ids.insert((r.role, &r.subject_id)) {
                problems.push(format!("row {row}: duplicate subject_id {:?} in role {}", r.subject_id, r.role));
            }
            match (r.role, r.label) {
                (Role::U, Some(_)) => problems.push(format!("row {row}: role U must not carry a label")),
                (Role::D | Role::T, None) => problems.push(format!("row {row}: role {} requires a label", r.role)),
                _ => {}
            }
            if let Some(a) = r.age {
                if !a.is_finite() {
                    problems.push(format!("row {row}: age is not finite"));
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Manifest(problems.join("; ")));
        }
        let checksum = checksum(&records);
        Ok(Self { records, checksum })
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn labels(&self) -> Vec<Option<usize>> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// New manifest holding the records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let recs = indices
            .iter()
            .map(|&i| {
                self.records
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Manifest(format!("index {i} out of range for {} records", self.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(recs)
    }

    /// Writes the manifest as CSV. Paths are written relative to the CSV's
    /// directory when they live below it.
    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let mut out = String::from(HEADER.join(","));
        out.push('\n');
        for r in &self.records {
            let p = r.path.strip_prefix(base).unwrap_or(&r.path);
            let fields = [
                r.subject_id.clone(),
                p.display().to_string(),
                r.role.to_string(),
                r.label.map(|l| CLASS_NAMES[l].to_string()).unwrap_or_default(),
                r.age.map(|a| format!("{a}")).unwrap_or_default(),
                r.sex.clone().unwrap_or_default(),
            ];
            for f in &fields {
                if f.contains([',', '"', '\n']) {
                    return Err(Error::Manifest(format!("field {f:?} cannot be written without quoting")));
                }
            }
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn checksum(records: &[ManifestRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        h.update(line.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Reads and validates a manifest CSV. Relative volume paths resolve against
/// the CSV's directory.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new("")))
        .map_err(|e| match e {
            Error::Manifest(m) => Error::Manifest(format!("{}: {m}", path.display())),
            other => other,
        })
}

/// Parses manifest CSV text; `base` anchors relative paths.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Manifest> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Manifest(e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let mut cols = [0usize; 6];
    let missing: Vec<&str> = HEADER
        .iter()
        .enumerate()
        .filter_map(|(i, name)| match col(name) {
            Some(c) => {
                cols[i] = c;
                None
            }
            None => Some(*name),
        })
        .collect();
    if !missing.is_empty() {
        return Err(Error::Manifest(format!("missing column(s): {}", missing.join(", "))));
    }

    let mut records = Vec::new();
    let mut problems = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("row {line}: {e}"));
                continue;
            }
        };
        let get = |c: usize| row.get(cols[c]).unwrap_or("");
        let role = match get(2).parse::<Role>() {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("row {line}: {e}"));
                continue;
            }
        };
        let label = match get(3) {
            "" => None,
            s => match parse_label(s) {
                Some(l) => Some(l),
                None => {
                    problems.push(format!("row {line}: unknown label {s:?}"));
                    continue;
                }
            },
        };
        let age = match get(4) {
            "" => None,
            s => match s.parse::<f64>() {
                Ok(a) => Some(a),
                Err(_) => {
                    problems.push(format!("row {line}: age {s:?} is not a number"));
                    continue;
                }
            },
        };
        let sex = Some(get(5).to_string()).filter(|s| !s.is_empty());
        let raw = PathBuf::from(get(1));
        if raw.as_os_str().is_empty() {
            problems.push(format!("row {line}: empty path"));
            continue;
        }
        let path = if raw.is_absolute() { raw } else { base.join(raw) };
        records.push(ManifestRecord {
            subject_id: get(0).to_string(),
            path,
            role,
            label,
            age,
            sex,
        });
    }
    if !problems.is_empty() {
        return Err(Error::Manifest(problems.join("; ")));
    }
    if records.is_empty() {
        log::warn!("manifest has a header but no rows");
    }
    Manifest::new(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HDR: &str = "subject_id,path,role,label,age,sex\n";

    #[test]
    fn three_rows() {
        let text = format!("{HDR}s1,a.raw,T,CN,70.5,F\ns2,b.raw,T,AD,64,M\ns3,/abs/c.raw,U,,,\n");
        let m = parse_manifest(&text, Path::new("/data")).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.records()[0].path, PathBuf::from("/data/a.raw"));
        assert_eq!(m.records()[1].label, Some(1));
        assert_eq!(m.records()[2].path, PathBuf::from("/abs/c.raw"));
        assert_eq!(m.records()[2].age, None);
    }

    #[test]
    fn labelled_u_row_is_rejected_with_row_number() {
        let text = format!("{HDR}s1,a.raw,U,AD,70,F\n");
        let err = parse_manifest(&text, Path::new("")).unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
    }

    #[test]
    fn header_only_is_empty() {
        assert!(parse_manifest(HDR, Path::new("")).unwrap().is_empty());
    }

    #[test]
    fn missing_column_and_duplicates() {
        let err = parse_manifest("subject_id,path,role\n", Path::new("")).unwrap_err().to_string();
        assert!(err.contains("label") && err.contains("sex"), "{err}");
        let text = format!("{HDR}s1,a.raw,D,2,1,F\ns1,b.raw,D,2,1,F\n");
        let err = parse_manifest(&text, Path::new("")).unwrap_err().to_string();
        assert!(err.contains("row 3") && err.contains("duplicate subject_id"), "{err}");
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!("{HDR}s1,vols/a.raw,T,FTD,70.5,F\ns2,vols/b.raw,U,,,\n");
        let m = parse_manifest(&text, dir.path()).unwrap();
        let p = dir.path().join("m.csv");
        m.write(&p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().contains("vols/a.raw"));
        let back = load_manifest(&p).unwrap();
        assert_eq!(back, m);
    }
}
