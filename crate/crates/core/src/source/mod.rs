//! Producers of multi-view keyword samples.

mod dataset;
mod oracle;

pub use dataset::{DatasetOptions, DirDataset, KeywordPartition, Layout};
pub use oracle::{OracleGenConfig, OracleSource, ViewParams};

use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// What makes a class a class.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassSpec {
    /// Unit sequence of the synthetic generator.
    Units(Vec<u16>),
    /// Keyword folder name of a directory dataset.
    Keyword(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KeywordClass {
    pub class_id: u64,
    pub spec: ClassSpec,
}

impl KeywordClass {
    pub fn label(&self) -> String {
        match &self.spec {
            ClassSpec::Keyword(k) => k.clone(),
            ClassSpec::Units(_) => format!("kw{:06}", self.class_id),
        }
    }
}

/// A generator of keyword classes and of fresh views of a class.
pub trait SampleSource: Send + Sync {
    fn new_class(&self, rng: &mut dyn RngCore) -> Result<KeywordClass>;

    /// One freshly rendered view; never alters the identity of `class`.
    fn render(&self, class: &KeywordClass, rng: &mut dyn RngCore) -> Result<Waveform>;

    /// All classes of a finite source.
    fn list_classes(&self) -> Option<Vec<KeywordClass>> {
        None
    }

    /// Ensure future class ids are at least `next`; used when resuming.
    fn restore_class_counter(&self, _next: u64) {}
}

/// One class per line: `class_id<TAB>unit unit unit ...`.
pub fn format_class_manifest(classes: &[KeywordClass]) -> String {
    let mut out = String::new();
    for c in classes {
        let body = match &c.spec {
            ClassSpec::Units(u) => u.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" "),
            ClassSpec::Keyword(k) => k.clone(),
        };
        let _ = writeln!(out, "{}\t{}", c.class_id, body);
    }
    out
}

pub fn read_class_manifest(path: impl AsRef<Path>) -> Result<Vec<KeywordClass>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut classes = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = || Error::Dataset(format!("{}:{}: malformed manifest line", path.display(), lineno + 1));
        let (id, units) = line.split_once('\t').ok_or_else(malformed)?;
        let class_id = id.parse().map_err(|_| malformed())?;
        let units =
            units.split_whitespace().map(|u| u.parse::<u16>()).collect::<std::result::Result<Vec<_>, _>>().map_err(|_| malformed())?;
        classes.push(KeywordClass { class_id, spec: ClassSpec::Units(units) });
    }
    Ok(classes)
}
