use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::format::{read_manifest, read_sequence};
use crate::data::SkeletonSequence;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SPLIT_FILE: &str = "split.yaml";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub label: Option<usize>,
    pub subject: Option<u32>,
    pub view: Option<u32>,
}

/// How manifest entries are partitioned into train and test sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    /// Sequences from these subjects form the test set.
    BySubject(Vec<u32>),
    /// Sequences from these views form the test set.
    ByView(Vec<u32>),
    /// The trailing fraction of each class, in manifest order, is the test set.
    ByFraction(f64),
}

impl Default for SplitRule {
    fn default() -> Self {
        SplitRule::ByFraction(0.2)
    }
}

impl SplitRule {
    fn validate(&self) -> Result<()> {
        if let SplitRule::ByFraction(f) = self {
            if !(0.0..1.0).contains(f) {
                return Err(Error::Config(format!("test fraction {f} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// `true` for every entry that belongs to the test set.
    fn assign(&self, entries: &[ManifestEntry]) -> Result<Vec<bool>> {
        self.validate()?;
        match self {
            SplitRule::BySubject(test) => entries
                .iter()
                .map(|e| {
                    e.subject
                        .map(|s| test.contains(&s))
                        .ok_or_else(|| Error::Data(format!("{}: subject id required by split rule", e.path)))
                })
                .collect(),
            SplitRule::ByView(test) => entries
                .iter()
                .map(|e| {
                    e.view
                        .map(|v| test.contains(&v))
                        .ok_or_else(|| Error::Data(format!("{}: view id required by split rule", e.path)))
                })
                .collect(),
            SplitRule::ByFraction(f) => {
                let mut groups: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
                for (i, e) in entries.iter().enumerate() {
                    groups.entry(e.label).or_default().push(i);
                }
                let mut is_test = vec![false; entries.len()];
                for members in groups.values() {
                    let n_test = (f * members.len() as f64).round() as usize;
                    for &i in &members[members.len() - n_test..] {
                        is_test[i] = true;
                    }
                }
                Ok(is_test)
            }
        }
    }
}

/// Parsed sequences partitioned into train and test sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<SkeletonSequence>,
    pub test: Vec<SkeletonSequence>,
}

impl Corpus {
    /// Number of classes implied by the largest label present.
    pub fn num_classes(&self) -> usize {
        self.train
            .iter()
            .chain(&self.test)
            .filter_map(|s| s.label)
            .max()
            .map_or(0, |m| m + 1)
    }

    /// Seeded per-class subset of the training set keeping `fraction` of each
    /// class (at least one sequence per class). The test set is untouched.
    pub fn label_subset(&self, fraction: f64, seed: u64) -> Result<Corpus> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!("label fraction {fraction} outside (0, 1]")));
        }
        if fraction == 1.0 {
            return Ok(self.clone());
        }
        let mut by_class: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.train.iter().enumerate() {
            by_class.entry(s.label).or_default().push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = Vec::new();
        for members in by_class.values_mut() {
            members.shuffle(&mut rng);
            let n = ((fraction * members.len() as f64).round() as usize).max(1);
            keep.extend_from_slice(&members[..n]);
        }
        keep.sort_unstable();
        Ok(Corpus {
            train: keep.into_iter().map(|i| self.train[i].clone()).collect(),
            test: self.test.clone(),
        })
    }
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Loads a corpus from a manifest file or a directory holding
/// `manifest.csv`. The split rule comes from a `split.yaml` beside the
/// manifest when present, otherwise the default fraction split.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let manifest = manifest_path(path);
    let split_file = manifest.with_file_name(SPLIT_FILE);
    let rule = if split_file.exists() {
        let text = fs::read_to_string(&split_file).map_err(|e| Error::io(&split_file, e))?;
        serde_yaml::with::singleton_map::deserialize(serde_yaml::Deserializer::from_str(&text))
            .map_err(|e| Error::parse(&split_file, e.location().map_or(0, |l| l.line()), e.to_string()))?
    } else {
        SplitRule::default()
    };
    load_corpus_with(path, &rule)
}

pub fn load_corpus_with(path: &Path, rule: &SplitRule) -> Result<Corpus> {
    let manifest = manifest_path(path);
    let entries = read_manifest(&manifest)?;
    if entries.is_empty() {
        return Err(Error::Data(format!("{}: empty corpus", manifest.display())));
    }
    let mut seen = HashSet::new();
    for e in &entries {
        if !seen.insert(e.path.as_str()) {
            return Err(Error::Data(format!("{}: duplicate path {:?}", manifest.display(), e.path)));
        }
    }
    let root = manifest.parent().unwrap_or(Path::new("."));
    let is_test = rule.assign(&entries)?;
    let mut corpus = Corpus {
        train: Vec::new(),
        test: Vec::new(),
    };
    for (e, test) in entries.into_iter().zip(is_test) {
        let frames = read_sequence(&root.join(&e.path))?;
        let seq = SkeletonSequence {
            id: e.path,
            frames,
            label: e.label,
            subject: e.subject,
            view: e.view,
        };
        if test {
            corpus.test.push(seq);
        } else {
            corpus.train.push(seq);
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::format::{write_manifest, write_sequence};
    use crate::numerics::DenseArray;

    fn entry(path: &str, label: usize, subject: u32, view: u32) -> ManifestEntry {
        ManifestEntry {
            path: path.into(),
            label: Some(label),
            subject: Some(subject),
            view: Some(view),
        }
    }

    fn fixture(dir: &Path, entries: &[ManifestEntry]) {
        for (i, e) in entries.iter().enumerate() {
            let frames = DenseArray::full(vec![2, 1, 3], i as f64);
            write_sequence(&dir.join(&e.path), &frames).unwrap();
        }
        write_manifest(&dir.join(MANIFEST_FILE), entries).unwrap();
    }

    #[test]
    fn empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write_manifest(&dir.path().join(MANIFEST_FILE), &[]).unwrap();
        let err = load_corpus(dir.path()).unwrap_err();
        assert!(err.to_string().contains("empty corpus"), "{err}");
    }

    #[test]
    fn missing_sequence_file() {
        let dir = tempfile::tempdir().unwrap();
        write_manifest(&dir.path().join(MANIFEST_FILE), &[entry("nope.txt", 0, 0, 0)]).unwrap();
        let err = load_corpus(dir.path()).unwrap_err();
        assert!(err.to_string().contains("nope.txt"), "{err}");
    }

    #[test]
    fn split_rules_are_disjoint_and_exhaustive() {
        let dir = tempfile::tempdir().unwrap();
        let entries: Vec<_> = (0..12)
            .map(|i| entry(&format!("s{i}.txt"), i % 3, (i % 4) as u32, (i % 2) as u32))
            .collect();
        fixture(dir.path(), &entries);
        for rule in [
            SplitRule::BySubject(vec![3]),
            SplitRule::ByView(vec![1]),
            SplitRule::ByFraction(0.25),
        ] {
            let c = load_corpus_with(dir.path(), &rule).unwrap();
            assert_eq!(c.train.len() + c.test.len(), 12);
            let train: HashSet<_> = c.train.iter().map(|s| &s.id).collect();
            assert!(c.test.iter().all(|s| !train.contains(&s.id)));
            assert!(!c.test.is_empty());
        }
        let c = load_corpus_with(dir.path(), &SplitRule::BySubject(vec![3])).unwrap();
        assert!(c.test.iter().all(|s| s.subject == Some(3)));
        assert_eq!(c.num_classes(), 3);
    }

    #[test]
    fn split_file_is_honoured() {
        let dir = tempfile::tempdir().unwrap();
        let entries: Vec<_> = (0..4).map(|i| entry(&format!("s{i}.txt"), 0, i, 0)).collect();
        fixture(dir.path(), &entries);
        fs::write(dir.path().join(SPLIT_FILE), "by_subject: [0, 1]\n").unwrap();
        let c = load_corpus(dir.path()).unwrap();
        assert_eq!(c.test.len(), 2);
    }

    #[test]
    fn label_subset_is_stratified() {
        let seq = |i: usize| {
            SkeletonSequence::new(format!("{i}"), DenseArray::zeros(vec![1, 1, 1]))
                .unwrap()
                .with_label(i % 2)
        };
        let corpus = Corpus {
            train: (0..20).map(seq).collect(),
            test: vec![seq(99)],
        };
        let sub = corpus.label_subset(0.1, 3).unwrap();
        assert_eq!(sub.train.len(), 2);
        assert_eq!(sub.train.iter().filter(|s| s.label == Some(0)).count(), 1);
        assert_eq!(corpus.label_subset(1.0, 3).unwrap(), corpus);
        assert!(corpus.label_subset(0.0, 3).is_err());
    }
}
