use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use super::logmel::{FeatureConfig, LogMelExtractor, LogMelSpec};
use super::wav::load_audio;
use crate::error::{Error, Result};
use crate::{par, rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub id: String,
    pub spec: LogMelSpec,
    pub label: Option<usize>,
    pub split: Split,
}

/// Ordered feature items with optional class labels in `[0, class_count)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub items: Vec<DatasetItem>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(items: Vec<DatasetItem>, class_count: usize) -> Result<Self> {
        if let Some(item) = items
            .iter()
            .find(|it| it.label.is_some_and(|l| l >= class_count))
        {
            return Err(Error::contract(format!(
                "item `{}` label {:?} outside [0, {class_count})",
                item.id, item.label
            )));
        }
        Ok(LabeledDataset { items, class_count })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Items tagged with `split`, in dataset order.
    pub fn split(&self, split: Split) -> LabeledDataset {
        LabeledDataset {
            items: self
                .items
                .iter()
                .filter(|it| it.split == split)
                .cloned()
                .collect(),
            class_count: self.class_count,
        }
    }

    pub fn specs(&self) -> Vec<&LogMelSpec> {
        self.items.iter().map(|it| &it.spec).collect()
    }

    /// True labels; errors if any item is unlabeled.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.items
            .iter()
            .map(|it| {
                it.label
                    .ok_or_else(|| Error::contract(format!("item `{}` has no label", it.id)))
            })
            .collect()
    }
}

/// Tag the last `test_fraction` of each class as test, then shuffle globally.
pub(crate) fn assign_splits_and_order(
    mut items: Vec<DatasetItem>,
    class_count: usize,
    test_fraction: f64,
    seed: u64,
) -> Vec<DatasetItem> {
    for c in 0..class_count {
        let members: Vec<usize> = items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.label == Some(c))
            .map(|(i, _)| i)
            .collect();
        let n_test = (members.len() as f64 * test_fraction).round() as usize;
        for &i in &members[members.len() - n_test..] {
            items[i].split = Split::Test;
        }
    }
    items.shuffle(&mut rng::stage_rng(seed, "dataset-order"));
    items
}

/// Load `dir/<class>/*.wav`; classes are indexed by sorted directory name.
pub fn load_wav_dataset(
    dir: impl AsRef<Path>,
    features: &FeatureConfig,
    test_fraction: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let read = |p: &Path| -> Result<Vec<std::path::PathBuf>> {
        let mut out: Vec<_> = fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        out.sort();
        Ok(out)
    };
    let classes: Vec<_> = read(dir)?.into_iter().filter(|p| p.is_dir()).collect();
    if classes.len() < 2 {
        return Err(Error::contract(format!(
            "{} must contain at least two class directories",
            dir.display()
        )));
    }
    let mut files = Vec::new();
    for (c, class_dir) in classes.iter().enumerate() {
        for f in read(class_dir)? {
            if f.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
                files.push((c, f));
            }
        }
    }
    let extractor = LogMelExtractor::new(features.clone())?;
    let items = par::map(&files, |(c, path)| -> Result<DatasetItem> {
        let clip = load_audio(path, features.sample_rate)?;
        let class_name = classes[*c].file_name().unwrap().to_string_lossy();
        Ok(DatasetItem {
            id: format!("{class_name}/{}", clip.id),
            spec: extractor.compute(&clip)?,
            label: Some(*c),
            split: Split::Train,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let items = assign_splits_and_order(items, classes.len(), test_fraction, seed);
    LabeledDataset::new(items, classes.len())
}
