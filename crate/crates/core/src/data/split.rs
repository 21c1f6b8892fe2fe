//! One-class split protocols over a directory dataset.
//!
//! Datasets are laid out as `root/{train,test}/<class>/<image>`, with
//! optional masks at `root/ground_truth/<class>/<stem>_mask.png`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{Label, Manifest, Record, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceImage {
    pub path: PathBuf,
    pub class_tag: String,
    pub split: Split,
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "protocol", content = "normal_class")]
pub enum Protocol {
    /// One class is normal; every other class is anomalous at test time.
    OneVsAll(String),
    /// The named class is normal; all other test classes are anomalous.
    NormalOnly(String),
    /// As `NormalOnly`, with a mask required on every anomalous record.
    RoiMasked(String),
}

impl Protocol {
    pub fn normal_class(&self) -> &str {
        match self {
            Protocol::OneVsAll(c) | Protocol::NormalOnly(c) | Protocol::RoiMasked(c) => c,
        }
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Lists every image under `root`, in sorted path order.
pub fn scan_dataset(root: &Path) -> Result<Vec<SourceImage>> {
    let mut images = Vec::new();
    for split in [Split::Train, Split::Test] {
        let split_dir = root.join(split.as_str());
        if !split_dir.is_dir() {
            continue;
        }
        for class_dir in sorted_entries(&split_dir)?.into_iter().filter(|p| p.is_dir()) {
            let class_tag = class_dir
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| Error::Dataset(format!("bad class directory {}", class_dir.display())))?
                .to_string();
            for path in sorted_entries(&class_dir)?.into_iter().filter(|p| is_image(p)) {
                let mask = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .map(|stem| {
                        root.join("ground_truth")
                            .join(&class_tag)
                            .join(format!("{stem}_mask.png"))
                    })
                    .filter(|m| m.is_file());
                images.push(SourceImage {
                    path,
                    class_tag: class_tag.clone(),
                    split,
                    mask,
                });
            }
        }
    }
    if images.is_empty() {
        return Err(Error::Dataset(format!("no images under {}", root.display())));
    }
    Ok(images)
}

fn classes(images: &[SourceImage]) -> BTreeSet<&str> {
    images.iter().map(|i| i.class_tag.as_str()).collect()
}

/// Train: the normal class's train images. Test: its test images as normal
/// plus every other class's test images as anomalous.
pub fn build_one_vs_all_split(images: &[SourceImage], normal_class: &str) -> Result<(Manifest, Manifest)> {
    if !classes(images).contains(normal_class) {
        return Err(Error::Config(format!(
            "unknown class {normal_class:?}; available: {:?}",
            classes(images)
        )));
    }
    let train = images
        .iter()
        .filter(|i| i.split == Split::Train && i.class_tag == normal_class)
        .map(|i| Record::new(&i.path, Label::Normal, &i.class_tag))
        .collect();
    let test = images
        .iter()
        .filter(|i| i.split == Split::Test)
        .map(|i| {
            let label = if i.class_tag == normal_class {
                Label::Normal
            } else {
                Label::Anomalous
            };
            Record::new(&i.path, label, &i.class_tag)
        })
        .collect();
    Ok((Manifest::new(Split::Train, train)?, Manifest::new(Split::Test, test)?))
}

/// Builds the train/test manifests for `protocol`.
pub fn build_split(images: &[SourceImage], protocol: &Protocol) -> Result<(Manifest, Manifest)> {
    let normal = protocol.normal_class();
    let (train, mut test) = build_one_vs_all_split(images, normal)?;
    if let Protocol::OneVsAll(_) = protocol {
        return Ok((train, test));
    }
    let stray: Vec<_> = images
        .iter()
        .filter(|i| i.split == Split::Train && i.class_tag != normal)
        .map(|i| (i.path.clone(), format!("train image outside normal class {normal:?}")))
        .collect();
    if !stray.is_empty() {
        return Err(Error::Batch { failures: stray });
    }
    if let Protocol::RoiMasked(_) = protocol {
        let masks = images.iter().filter(|i| i.split == Split::Test);
        let mut missing = Vec::new();
        for (record, source) in test.records.iter_mut().zip(masks) {
            debug_assert_eq!(record.path, source.path);
            if record.label.is_anomalous() {
                match &source.mask {
                    Some(m) => record.mask = Some(m.clone()),
                    None => missing.push((record.path.clone(), "anomalous record has no mask".into())),
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::Batch { failures: missing });
        }
    }
    if test.count(Label::Anomalous) == 0 {
        return Err(Error::Dataset("test split has no anomalous records".into()));
    }
    Ok((train, test))
}

/// Seeded uniform sample of `n` records without replacement, kept in their
/// original order. Returns everything when `n >= records.len()`.
pub fn sample_subset(records: &[Record], n: usize, seed: u64) -> Vec<Record> {
    if n >= records.len() {
        return records.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, records.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| records[i].clone()).collect()
}

/// Holds out a seeded, label-stratified share of a test manifest for
/// model selection. Each label contributes `round(fraction * count)`
/// records, at least one, and keeps at least one in the remainder.
/// Returns `(remainder, validation)`.
pub fn split_validation(manifest: &Manifest, fraction: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction must lie in (0, 1), got {fraction}")));
    }
    if manifest.split != Split::Test {
        return Err(Error::Config("validation records come from the test split".into()));
    }
    let mut held = vec![false; manifest.len()];
    for (stream, label) in [Label::Normal, Label::Anomalous].into_iter().enumerate() {
        let members: Vec<usize> = (0..manifest.len())
            .filter(|&i| manifest.records[i].label == label)
            .collect();
        if members.len() < 2 {
            return Err(Error::Dataset(format!(
                "need at least two {label} test records to hold out validation, found {}",
                members.len()
            )));
        }
        let k = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream as u64 + 1);
        for j in index::sample(&mut rng, members.len(), k) {
            held[members[j]] = true;
        }
    }
    let pick = |keep: bool| {
        manifest
            .records
            .iter()
            .zip(&held)
            .filter(|(_, h)| **h == keep)
            .map(|(r, _)| r.clone())
            .collect::<Vec<_>>()
    };
    Ok((Manifest::new(Split::Test, pick(false))?, Manifest::new(Split::Test, pick(true))?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn src(path: &str, class: &str, split: Split) -> SourceImage {
        SourceImage {
            path: path.into(),
            class_tag: class.into(),
            split,
            mask: None,
        }
    }

    fn cifar_like() -> Vec<SourceImage> {
        let mut v = Vec::new();
        for class in ["cat", "frog", "ship"] {
            for k in 0..4 {
                v.push(src(&format!("train/{class}/{k}.png"), class, Split::Train));
            }
            for k in 0..2 {
                v.push(src(&format!("test/{class}/{k}.png"), class, Split::Test));
            }
        }
        v
    }

    #[test]
    fn one_vs_all_frog() {
        let (train, test) = build_one_vs_all_split(&cifar_like(), "frog").unwrap();
        assert!(train.records.iter().all(|r| r.class_tag == "frog"));
        assert_eq!(train.len(), 4);
        assert_eq!(test.count(Label::Normal), 2);
        assert_eq!(test.count(Label::Anomalous), 4);
        let train_paths: BTreeSet<_> = train.records.iter().map(|r| &r.path).collect();
        assert!(test.records.iter().all(|r| !train_paths.contains(&r.path)));
    }

    #[test]
    fn unknown_class() {
        assert!(matches!(
            build_one_vs_all_split(&cifar_like(), "horse"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn roi_requires_masks() {
        let mut images = vec![
            src("train/good/0.png", "good", Split::Train),
            src("test/good/0.png", "good", Split::Test),
            src("test/crack/0.png", "crack", Split::Test),
        ];
        let protocol = Protocol::RoiMasked("good".into());
        assert!(matches!(build_split(&images, &protocol), Err(Error::Batch { .. })));
        images[2].mask = Some("ground_truth/crack/0_mask.png".into());
        let (_, test) = build_split(&images, &protocol).unwrap();
        assert!(test.records[1].mask.is_some());
        assert!(test.records[0].mask.is_none());
    }

    #[test]
    fn subsets_are_seeded() {
        let records: Vec<_> = (0..50)
            .map(|i| Record::new(format!("{i}.png"), Label::Normal, "x"))
            .collect();
        let a = sample_subset(&records, 10, 3);
        assert_eq!(a, sample_subset(&records, 10, 3));
        assert_ne!(a, sample_subset(&records, 10, 4));
        assert_eq!(a.len(), 10);
    }

    #[test]
    fn validation_slice_is_stratified_and_disjoint() {
        let mut records: Vec<Record> = (0..50).map(|i| Record::new(format!("n{i}.png"), Label::Normal, "good")).collect();
        records.extend((0..50).map(|i| Record::new(format!("a{i}.png"), Label::Anomalous, "blob")));
        let m = Manifest::new(Split::Test, records).unwrap();
        let (rest, val) = split_validation(&m, 0.1, 9).unwrap();
        assert_eq!(val.count(Label::Normal), 5);
        assert_eq!(val.count(Label::Anomalous), 5);
        assert_eq!(rest.len() + val.len(), 100);
        assert!(val.records.iter().all(|r| !rest.records.contains(r)));
        assert_eq!(split_validation(&m, 0.1, 9).unwrap().1, val);
        let tiny = Manifest::new(Split::Test, m.records[45..55].to_vec()).unwrap();
        let (_, v) = split_validation(&tiny, 0.1, 1).unwrap();
        assert_eq!((v.count(Label::Normal), v.count(Label::Anomalous)), (1, 1));
    }
}
