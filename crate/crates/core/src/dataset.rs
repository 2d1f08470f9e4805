//! Benchmark datasets: architectures paired with measured accuracy.
//!
//! File format is JSON lines. Each line holds `"arch"` (a graph document, an
//! NB201 cell string or a genome string) and `"accuracy"`, plus optional
//! `"id"`, `"split"` (`"train"` or `"test"`) and `"space"`.

use crate::arch::{parse_graph_value, parse_nb201, ArchGraph, Nb201Config, ResNetGenome};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Search-space families with their default training schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpaceKind {
    Nb201,
    Nb101,
    Macro,
    Nds,
    Custom,
}

impl SpaceKind {
    /// Guess from a space id such as `nb201-cifar100` or `nds-darts`.
    pub fn infer(space_id: &str) -> Self {
        let s = space_id.to_ascii_lowercase().replace(['_', '-'], "");
        if s.contains("nb201") || s.contains("nasbench201") {
            SpaceKind::Nb201
        } else if s.contains("nb101") || s.contains("nasbench101") {
            SpaceKind::Nb101
        } else if s.contains("macro") {
            SpaceKind::Macro
        } else if s.contains("nds") {
            SpaceKind::Nds
        } else {
            SpaceKind::Custom
        }
    }

    pub fn default_steps(self) -> usize {
        match self {
            SpaceKind::Nb201 => 496,
            SpaceKind::Nb101 => 1440,
            SpaceKind::Macro => 208,
            SpaceKind::Nds => 1440,
            SpaceKind::Custom => 200,
        }
    }

    pub fn default_sample_size(self) -> usize {
        match self {
            SpaceKind::Nb201 | SpaceKind::Macro => 64,
            SpaceKind::Nb101 | SpaceKind::Nds => 7,
            SpaceKind::Custom => 16,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub id: String,
    pub graph: ArchGraph,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct BenchmarkDataset {
    pub space_id: String,
    pub kind: SpaceKind,
    pub entries: Vec<Entry>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    arch: serde_json::Value,
    accuracy: f64,
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    split: Option<String>,
    #[serde(default)]
    space: Option<String>,
}

/// Parse an architecture given as a graph document or an encoded string.
pub fn parse_arch(value: serde_json::Value) -> Result<ArchGraph> {
    match value {
        serde_json::Value::String(s) => parse_arch_str(&s),
        other => parse_graph_value(other),
    }
}

/// NB201 cell strings start with `|`; anything else is read as a genome.
pub fn parse_arch_str(s: &str) -> Result<ArchGraph> {
    let s = s.trim();
    if s.starts_with('|') {
        let cfg = Nb201Config::default();
        parse_nb201(s, cfg.stem_channels, cfg.num_cells)
    } else if s.starts_with('{') {
        parse_arch(serde_json::from_str(s)?)
    } else {
        s.parse::<ResNetGenome>()?.decode()
    }
}

impl BenchmarkDataset {
    /// Entries without split tags all go to the train split.
    pub fn new(space_id: impl Into<String>, entries: Vec<Entry>, train: Vec<usize>, test: Vec<usize>) -> Result<Self> {
        let space_id = space_id.into();
        if entries.is_empty() {
            return Err(Error::Data(format!("dataset `{space_id}` is empty")));
        }
        if let Some(e) = entries.iter().find(|e| !e.accuracy.is_finite()) {
            return Err(Error::Data(format!("entry `{}` has non-finite accuracy", e.id)));
        }
        let mut seen = vec![0u8; entries.len()];
        for &i in train.iter().chain(&test) {
            if i >= entries.len() {
                return Err(Error::Data(format!("split index {i} out of range")));
            }
            seen[i] += 1;
            if seen[i] > 1 {
                return Err(Error::Data(format!("entry {i} appears in more than one split slot")));
            }
        }
        Ok(BenchmarkDataset {
            kind: SpaceKind::infer(&space_id),
            space_id,
            entries,
            train,
            test,
        })
    }

    /// All entries in the train split.
    pub fn from_entries(space_id: impl Into<String>, entries: Vec<Entry>) -> Result<Self> {
        let train = (0..entries.len()).collect();
        Self::new(space_id, entries, train, Vec::new())
    }

    pub fn parse_jsonl(text: &str, default_space: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let (mut train, mut test) = (Vec::new(), Vec::new());
        let mut space: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let ctx = |e: Error| Error::Data(format!("line {}: {e}", lineno + 1));
            let line: Line = serde_json::from_str(raw).map_err(|e| ctx(e.into()))?;
            let graph = parse_arch(line.arch).map_err(ctx)?;
            let idx = entries.len();
            match line.split.as_deref() {
                None | Some("train") => train.push(idx),
                Some("test") => test.push(idx),
                Some(other) => return Err(ctx(Error::Data(format!("unknown split `{other}`")))),
            }
            if let Some(s) = line.space {
                if space.as_ref().is_some_and(|prev| *prev != s) {
                    return Err(ctx(Error::Data(format!("mixed spaces `{}` and `{s}`", space.unwrap()))));
                }
                space = Some(s);
            }
            entries.push(Entry {
                id: line.id.unwrap_or_else(|| idx.to_string()),
                graph,
                accuracy: line.accuracy,
            });
        }
        Self::new(space.unwrap_or_else(|| default_space.to_string()), entries, train, test)
    }

    /// Load a JSON-lines file; the space id defaults to the file stem.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
        Self::parse_jsonl(&text, stem)
    }

    /// One JSON object per entry, with graphs in document form.
    pub fn to_jsonl(&self) -> String {
        let mut split = vec![None; self.entries.len()];
        self.train.iter().for_each(|&i| split[i] = Some("train"));
        self.test.iter().for_each(|&i| split[i] = Some("test"));
        let mut out = String::new();
        for (e, s) in self.entries.iter().zip(split) {
            let mut v = serde_json::json!({
                "arch": e.graph.to_json(),
                "accuracy": e.accuracy,
                "id": e.id,
                "space": self.space_id,
            });
            if let Some(s) = s {
                v["split"] = s.into();
            }
            out.push_str(&v.to_string());
            out.push('\n');
        }
        out
    }

    /// Reassign splits: a seeded random `train_size` entries train, the rest test.
    pub fn resplit(&mut self, train_size: usize, seed: u64) -> Result<()> {
        let n = self.entries.len();
        if train_size > n {
            return Err(Error::Usage(format!("train size {train_size} exceeds {n} entries")));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut train = idx[..train_size].to_vec();
        let mut test = idx[train_size..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        self.train = train;
        self.test = test;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn graphs(&self, idx: &[usize]) -> Vec<ArchGraph> {
        idx.iter().map(|&i| self.entries[i].graph.clone()).collect()
    }

    pub fn accuracies(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| self.entries[i].accuracy).collect()
    }

    /// Test split if present, otherwise every entry.
    pub fn eval_indices(&self) -> Vec<usize> {
        if self.test.is_empty() {
            (0..self.entries.len()).collect()
        } else {
            self.test.clone()
        }
    }
}
