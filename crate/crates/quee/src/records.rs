//! Newline-delimited record files.
//!
//! The first line is a header:
//!
//! ```text
//! {"format":"quee-records","version":1,"num_classes":10,"paths":["8","4","8-8",...]}
//! ```
//!
//! Each following line is one sample:
//!
//! ```text
//! {"id":"s000000","split":"train","label":3,"probs":{"8":[0.01,...],"4":[...]}}
//! ```
//!
//! Floats are written in shortest round-trip form, so a written dataset
//! loads back bit-identically.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path as FsPath;

use anyhow::{anyhow, bail, Context, Result};
use quee_core::dataset::{SampleRecord, SplitDataset};
use quee_core::path_space::{NetworkTopology, Path, PathSet};
use quee_core::Error;
use serde::{Deserialize, Serialize};

pub const FORMAT: &str = "quee-records";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    num_classes: usize,
    paths: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    id: String,
    split: Split,
    label: usize,
    probs: BTreeMap<String, Vec<f64>>,
}

pub fn write_dataset(dataset: &SplitDataset, path_set: &PathSet, out: impl Write) -> Result<()> {
    let mut w = BufWriter::new(out);
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        num_classes: dataset.num_classes,
        paths: path_set.iter().map(Path::key).collect(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for (split, records) in [
        (Split::Train, &dataset.train),
        (Split::Validation, &dataset.validation),
        (Split::Test, &dataset.test),
    ] {
        for r in records {
            let line = Line {
                id: r.id.clone(),
                split,
                label: r.label,
                probs: path_set
                    .iter()
                    .map(|p| Ok((p.key(), r.probs_for(p)?.to_vec())))
                    .collect::<Result<_, Error>>()?,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(dataset: &SplitDataset, path_set: &PathSet, path: &FsPath) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_dataset(dataset, path_set, f)
}

/// Reads and validates a record stream against the active path set.
///
/// Paths outside `path_set` are ignored; a record missing an active path,
/// carrying a non-normalized vector or an out-of-range label is rejected
/// with a schema error naming its id.
pub fn read_dataset(input: impl BufRead, topology: &NetworkTopology, path_set: &PathSet) -> Result<SplitDataset> {
    let mut lines = input.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| anyhow!("record file is empty"))?;
    let header: Header = serde_json::from_str(&first?).context("line 1: malformed header")?;
    if header.format != FORMAT {
        bail!("line 1: unknown format `{}`, expected `{FORMAT}`", header.format);
    }
    if header.version != VERSION {
        bail!("line 1: unsupported version {}, expected {VERSION}", header.version);
    }
    let declared: BTreeSet<&str> = header.paths.iter().map(String::as_str).collect();
    for p in path_set {
        topology.check_path(p)?;
        if !declared.contains(p.key().as_str()) {
            bail!("line 1: header does not declare active path {p}");
        }
    }
    let keys: Vec<(String, &Path)> = path_set.iter().map(|p| (p.key(), p)).collect();
    let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parsed: Line = serde_json::from_str(&line).with_context(|| format!("line {}: malformed record", i + 1))?;
        let mut probs = BTreeMap::new();
        for (key, path) in &keys {
            let v = parsed.probs.remove(key).ok_or_else(|| Error::Schema {
                id: parsed.id.clone(),
                reason: format!("missing path {key}"),
            })?;
            probs.insert((*path).clone(), v);
        }
        let record = SampleRecord {
            id: parsed.id,
            label: parsed.label,
            probs,
        };
        match parsed.split {
            Split::Train => train.push(record),
            Split::Validation => validation.push(record),
            Split::Test => test.push(record),
        }
    }
    Ok(SplitDataset::new(train, validation, test, header.num_classes, path_set)?)
}

pub fn load_dataset(path: &FsPath, topology: &NetworkTopology, path_set: &PathSet) -> Result<SplitDataset> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_dataset(BufReader::new(f), topology, path_set).with_context(|| format!("loading {}", path.display()))
}
