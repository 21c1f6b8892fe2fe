//! Tab-separated dataset manifests (`<TAB>` marks a tab).
//!
//! ```text
//! # split: train
//! images/a.png<TAB>normal<TAB>-<TAB>good
//! images/b.png<TAB>anomalous<TAB>masks/b.png<TAB>crack
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Anomalous => "anomalous",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Label::Normal),
            "anomalous" => Ok(Label::Anomalous),
            other => Err(Error::Dataset(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub path: PathBuf,
    pub label: Label,
    pub mask: Option<PathBuf>,
    pub class_tag: String,
}

impl Record {
    pub fn new(path: impl Into<PathBuf>, label: Label, class_tag: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            label,
            mask: None,
            class_tag: class_tag.into(),
        }
    }

    pub fn with_mask(mut self, mask: impl Into<PathBuf>) -> Self {
        self.mask = Some(mask.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub split: Split,
    pub records: Vec<Record>,
}

fn field_ok(s: &str) -> bool {
    !s.is_empty() && !s.contains(['\t', '\n', '\r'])
}

impl Manifest {
    /// Builds a manifest, rejecting anomalous records in a train split.
    pub fn new(split: Split, records: Vec<Record>) -> Result<Self> {
        let m = Self { split, records };
        m.check_labels()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }

    fn check_labels(&self) -> Result<()> {
        if self.split == Split::Train {
            if let Some(r) = self.records.iter().find(|r| r.label.is_anomalous()) {
                return Err(Error::Dataset(format!(
                    "train manifest contains anomalous record {}",
                    r.path.display()
                )));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let split = lines
            .next()
            .and_then(|(_, l)| l.strip_prefix('#'))
            .and_then(|l| l.trim().strip_prefix("split:"))
            .ok_or_else(|| Error::Dataset("manifest must start with '# split: <train|test>'".into()))?
            .trim()
            .parse()?;
        let resolve = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let mut records = Vec::new();
        for (n, line) in lines {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [path, label, mask, class_tag] = fields[..] else {
                return Err(Error::Dataset(format!(
                    "manifest line {}: expected 4 tab-separated fields, got {}",
                    n + 1,
                    fields.len()
                )));
            };
            records.push(Record {
                path: resolve(path),
                label: label
                    .parse()
                    .map_err(|e| Error::Dataset(format!("manifest line {}: {e}", n + 1)))?,
                mask: (mask != "-").then(|| resolve(mask)),
                class_tag: class_tag.to_string(),
            });
        }
        Self::new(split, records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
    }

    /// Serialized form. Paths under `base` are written relative to it.
    pub fn render(&self, base: &Path) -> Result<String> {
        let rel = |p: &Path| -> Result<String> {
            let s = p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned();
            if field_ok(&s) && s != "-" {
                Ok(s)
            } else {
                Err(Error::Dataset(format!("path {s:?} cannot be written to a manifest")))
            }
        };
        let mut out = format!("# split: {}\n", self.split.as_str());
        for r in &self.records {
            if !field_ok(&r.class_tag) {
                return Err(Error::Dataset(format!("invalid class tag {:?}", r.class_tag)));
            }
            let mask = match &r.mask {
                Some(m) => rel(m)?,
                None => "-".into(),
            };
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                rel(&r.path)?,
                r.label,
                mask,
                r.class_tag
            ));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        fs::write(path, self.render(base)?).map_err(|e| Error::io(path, e))
    }

    /// Checks every image and mask exists and that masks match their
    /// image's dimensions. Every failing record is listed.
    pub fn validate_files(&self) -> Result<()> {
        self.check_labels()?;
        let mut failures = Vec::new();
        for r in &self.records {
            let dims = match image::image_dimensions(&r.path) {
                Ok(d) => d,
                Err(e) => {
                    failures.push((r.path.clone(), e.to_string()));
                    continue;
                }
            };
            if let Some(mask) = &r.mask {
                match image::image_dimensions(mask) {
                    Ok(m) if m == dims => {}
                    Ok(m) => failures.push((
                        r.path.clone(),
                        format!("mask {} is {}x{}, image is {}x{}", mask.display(), m.0, m.1, dims.0, dims.1),
                    )),
                    Err(e) => failures.push((r.path.clone(), format!("mask {}: {e}", mask.display()))),
                }
            }
        }
        if failures.is_empty() {
            Ok(())
        } else {
            Err(Error::Batch { failures })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_render_round_trip() {
        let text = "# split: test\na.png\tnormal\t-\tgood\nsub/b.png\tanomalous\tm/b.png\tcrack\n";
        let base = Path::new("/data");
        let m = Manifest::parse(text, base).unwrap();
        assert_eq!(m.records[1].mask.as_deref(), Some(Path::new("/data/m/b.png")));
        assert_eq!(m.count(Label::Anomalous), 1);
        assert_eq!(m.render(base).unwrap(), text);
    }

    #[test]
    fn train_rejects_anomalous() {
        let text = "# split: train\na.png\tanomalous\t-\tx\n";
        assert!(matches!(Manifest::parse(text, Path::new("")), Err(Error::Dataset(_))));
    }

    #[test]
    fn malformed_lines() {
        assert!(Manifest::parse("a.png\tnormal\t-\tx\n", Path::new("")).is_err());
        assert!(Manifest::parse("# split: test\na.png\tnormal\n", Path::new("")).is_err());
        assert!(Manifest::parse("# split: test\na.png\tweird\t-\tx\n", Path::new("")).is_err());
    }
}
