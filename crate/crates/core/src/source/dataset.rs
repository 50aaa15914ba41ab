//! Keyword datasets laid out as `root/<keyword>/<clip>.wav`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{ClassSpec, KeywordClass, SampleSource};
use crate::dsp::{read_wav, Waveform};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Layout {
    /// Speech Commands: `validation_list.txt` and `testing_list.txt` in the root.
    Gsc,
    /// The first `test_count` clips (sorted by filename) are test, the rest form the support pool.
    MswcLike { test_count: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetOptions {
    pub layout: Layout,
    /// Keep keywords with strictly more than this many clips.
    pub min_samples: Option<usize>,
    /// Keep keywords with strictly fewer than this many clips.
    pub max_samples: Option<usize>,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self { layout: Layout::MswcLike { test_count: 250 }, min_samples: None, max_samples: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeywordPartition {
    pub name: String,
    pub train: Vec<PathBuf>,
    pub validation: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
}

impl KeywordPartition {
    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A read-only keyword dataset with per-keyword partitions.
#[derive(Clone, Debug)]
pub struct DirDataset {
    root: PathBuf,
    keywords: Vec<KeywordPartition>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

fn read_list(root: &Path, name: &str) -> Result<HashSet<String>> {
    let path = root.join(name);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut set = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let valid = line.split('/').count() == 2 && !line.starts_with('/') && line.split('/').all(|p| !p.is_empty());
        if !valid {
            return Err(Error::Dataset(format!("{}:{}: malformed entry {line:?}", path.display(), i + 1)));
        }
        set.insert(line.to_string());
    }
    Ok(set)
}

impl DirDataset {
    pub fn open(root: impl AsRef<Path>, opts: &DatasetOptions) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        if !root.is_dir() {
            return Err(Error::Dataset(format!("dataset root {} does not exist", root.display())));
        }
        let lists = match opts.layout {
            Layout::Gsc => Some((read_list(&root, "validation_list.txt")?, read_list(&root, "testing_list.txt")?)),
            Layout::MswcLike { .. } => None,
        };

        let mut keywords = Vec::new();
        for dir in sorted_entries(&root)? {
            if !dir.is_dir() {
                continue;
            }
            let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            if name.starts_with('_') || name.starts_with('.') {
                continue;
            }
            let clips: Vec<PathBuf> =
                sorted_entries(&dir)?.into_iter().filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav"))).collect();
            if clips.is_empty() {
                return Err(Error::Dataset(format!("keyword folder {} has no wav files", dir.display())));
            }
            if opts.min_samples.is_some_and(|m| clips.len() <= m) || opts.max_samples.is_some_and(|m| clips.len() >= m) {
                continue;
            }
            let part = match (&opts.layout, &lists) {
                (Layout::Gsc, Some((val, test))) => {
                    let mut p = KeywordPartition { name: name.clone(), train: vec![], validation: vec![], test: vec![] };
                    for clip in clips {
                        let rel = format!("{name}/{}", clip.file_name().and_then(|n| n.to_str()).unwrap_or_default());
                        if test.contains(&rel) {
                            p.test.push(clip);
                        } else if val.contains(&rel) {
                            p.validation.push(clip);
                        } else {
                            p.train.push(clip);
                        }
                    }
                    p
                }
                (Layout::MswcLike { test_count }, _) => {
                    let k = (*test_count).min(clips.len());
                    KeywordPartition { name, test: clips[..k].to_vec(), validation: vec![], train: clips[k..].to_vec() }
                }
                (Layout::Gsc, None) => unreachable!("lists are read for the gsc layout"),
            };
            keywords.push(part);
        }
        if keywords.is_empty() {
            return Err(Error::Dataset(format!("no keywords found under {}", root.display())));
        }
        Ok(Self { root, keywords })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn keywords(&self) -> &[KeywordPartition] {
        &self.keywords
    }

    pub fn keyword(&self, name: &str) -> Option<&KeywordPartition> {
        self.keywords.iter().find(|k| k.name == name)
    }
}

impl SampleSource for DirDataset {
    fn new_class(&self, rng: &mut dyn RngCore) -> Result<KeywordClass> {
        let i = rng.gen_range(0..self.keywords.len());
        Ok(KeywordClass { class_id: i as u64, spec: ClassSpec::Keyword(self.keywords[i].name.clone()) })
    }

    fn render(&self, class: &KeywordClass, rng: &mut dyn RngCore) -> Result<Waveform> {
        let ClassSpec::Keyword(name) = &class.spec else {
            return Err(Error::Dataset("class does not belong to a directory dataset".into()));
        };
        let part = self.keyword(name).ok_or_else(|| Error::Dataset(format!("unknown keyword {name}")))?;
        if part.train.is_empty() {
            return Err(Error::Dataset(format!("keyword {name} has no training clips")));
        }
        read_wav(&part.train[rng.gen_range(0..part.train.len())])
    }

    fn list_classes(&self) -> Option<Vec<KeywordClass>> {
        Some(
            self.keywords
                .iter()
                .enumerate()
                .map(|(i, k)| KeywordClass { class_id: i as u64, spec: ClassSpec::Keyword(k.name.clone()) })
                .collect(),
        )
    }
}
