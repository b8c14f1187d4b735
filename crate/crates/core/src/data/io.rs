//! Dataset directories: `manifest.tsv` plus one P6 and one P5 image per
//! sample.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{pnm, Dataset, ModalPair};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (expected train or test)"))),
        }
    }
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub id: String,
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
    /// Taken from the directory name when it is `train` or `test`.
    pub split: Option<Split>,
    pub n_classes: usize,
}

impl DatasetManifest {
    pub fn image_a_path(&self, id: &str) -> PathBuf {
        self.root.join(format!("{id}.a.ppm"))
    }

    pub fn image_b_path(&self, id: &str) -> PathBuf {
        self.root.join(format!("{id}.b.pgm"))
    }
}

/// Reads samples on demand.
#[derive(Clone, Debug)]
pub struct PairLoader {
    manifest: DatasetManifest,
}

impl PairLoader {
    pub fn len(&self) -> usize {
        self.manifest.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.records.is_empty()
    }

    pub fn get(&self, i: usize) -> Result<ModalPair> {
        let r = self
            .manifest
            .records
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("sample index {i} out of range for {}", self.len())))?;
        let pa = self.manifest.image_a_path(&r.id);
        let pb = self.manifest.image_b_path(&r.id);
        let a = pnm::read(&pa)?;
        let b = pnm::read(&pb)?;
        if a.shape()[0] != 3 {
            return Err(Error::format(&pa, "modality A must be a P6 (3-channel) image"));
        }
        if b.shape()[0] != 1 {
            return Err(Error::format(&pb, "modality B must be a P5 (1-channel) image"));
        }
        if a.shape()[1..] != b.shape()[1..] {
            return Err(Error::format(
                &pb,
                format!("`{}`: dimensions {:?} differ from modality A {:?}", r.id, &b.shape()[1..], &a.shape()[1..]),
            ));
        }
        ModalPair::new(r.id.clone(), a, b, r.label)
    }

    pub fn load_all(&self) -> Result<Dataset> {
        let pairs = (0..self.len()).map(|i| self.get(i)).collect::<Result<Vec<_>>>()?;
        Dataset::new(self.manifest.n_classes, pairs)
    }
}

/// Parses the manifest of `dir` and checks every referenced file exists.
/// Images are read lazily through the returned loader.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, PairLoader)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines().enumerate();
    let n_classes = match lines.next() {
        Some((_, header)) => header
            .strip_prefix("#classes=")
            .and_then(|n| n.trim().parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::format(&path, format!("line 1: expected `#classes=<N>`, got `{header}`")))?,
        None => return Err(Error::format(&path, "empty manifest")),
    };
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let at = |msg: String| Error::format(&path, format!("line {}: {msg}", i + 1));
        let (id, label) = line
            .split_once('\t')
            .ok_or_else(|| at(format!("expected `<id>\\t<label|->`, got `{line}`")))?;
        if id.is_empty() || id.contains(['/', '\\']) {
            return Err(at(format!("invalid id `{id}`")));
        }
        let label = match label.trim() {
            "-" => None,
            l => {
                let v = l.parse::<usize>().map_err(|_| at(format!("bad label `{l}`")))?;
                if v >= n_classes {
                    return Err(at(format!("label {v} out of range for {n_classes} classes")));
                }
                Some(v)
            }
        };
        if !seen.insert(id.to_owned()) {
            return Err(at(format!("duplicate id `{id}`")));
        }
        records.push(Record { id: id.to_owned(), label });
    }
    let split = dir.file_name().and_then(|n| n.to_str()).and_then(|n| n.parse().ok());
    let manifest = DatasetManifest {
        root: dir.to_path_buf(),
        records,
        split,
        n_classes,
    };
    for r in &manifest.records {
        for p in [manifest.image_a_path(&r.id), manifest.image_b_path(&r.id)] {
            if !p.is_file() {
                return Err(Error::format(&p, format!("missing image for sample `{}`", r.id)));
            }
        }
    }
    Ok((manifest.clone(), PairLoader { manifest }))
}

/// Writes `ds` into `dir` (created if needed), quantizing to 8 bits.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("#classes={}\n", ds.n_classes);
    for p in &ds.pairs {
        let label = if p.is_labeled() { p.label()?.to_string() } else { "-".into() };
        manifest.push_str(&format!("{}\t{label}\n", p.id));
        pnm::write(&dir.join(format!("{}.a.ppm", p.id)), &p.image_a)?;
        pnm::write(&dir.join(format!("{}.b.pgm", p.id)), &p.image_b)?;
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}
