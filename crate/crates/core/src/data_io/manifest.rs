use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{MustError, Result};
use crate::image::Image;

use super::load_png;

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
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    /// Path as written in the manifest, relative to its directory.
    pub path: PathBuf,
    pub label: Option<usize>,
    /// 1-based manifest line, for error messages.
    pub line: usize,
}

/// A parsed manifest. Images are decoded on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub train: Vec<Entry>,
    pub test: Vec<Entry>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn entries(&self, split: Split) -> &[Entry] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn resolve(&self, entry: &Entry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn load_image(&self, entry: &Entry) -> Result<Image> {
        let path = self.resolve(entry);
        load_png(&path).map_err(|e| MustError::Load {
            path: path.clone(),
            msg: format!("manifest line {}: {e}", entry.line),
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Image>> {
        self.entries(split).iter().map(|e| self.load_image(e)).collect()
    }

    /// Images of the split that carry a label, with those labels.
    pub fn load_labeled(&self, split: Split) -> Result<(Vec<Image>, Vec<usize>)> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for e in self.entries(split) {
            if let Some(y) = e.label {
                images.push(self.load_image(e)?);
                labels.push(y);
            }
        }
        Ok((images, labels))
    }
}

/// Parses manifest text. `path` is used for error messages and `root` for
/// resolving entries.
pub fn parse_manifest(text: &str, path: &Path, root: &Path) -> Result<Dataset> {
    let err = |line: usize, msg: String| MustError::Parse { path: path.to_path_buf(), line, msg };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (n, header) = lines.next().ok_or_else(|| err(1, "empty manifest".into()))?;
    let k: usize = header.trim().parse().map_err(|_| err(n, format!("expected class count, found `{header}`")))?;
    if k == 0 {
        return Err(err(n, "class count must be positive".into()));
    }
    let mut class_names = Vec::with_capacity(k);
    for _ in 0..k {
        let (n, name) = lines.next().ok_or_else(|| err(n + 1, format!("expected {k} class names")))?;
        if name.trim().is_empty() {
            return Err(err(n, "empty class name".into()));
        }
        class_names.push(name.trim().to_string());
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut seen: HashSet<(Split, PathBuf)> = HashSet::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(n, format!("expected split<TAB>path<TAB>label, found {} fields", fields.len())));
        }
        let split = match fields[0] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(err(n, format!("unknown split `{other}`"))),
        };
        let label: i64 = fields[2].trim().parse().map_err(|_| err(n, format!("bad label `{}`", fields[2])))?;
        let label = match label {
            -1 => None,
            y if (0..k as i64).contains(&y) => Some(y as usize),
            y => return Err(err(n, format!("label {y} out of range [0, {k})"))),
        };
        let rel = PathBuf::from(fields[1]);
        if !seen.insert((split, rel.clone())) {
            return Err(err(n, format!("duplicate path `{}` in {} split", fields[1], split.as_str())));
        }
        let entry = Entry { path: rel, label, line: n };
        match split {
            Split::Train => train.push(entry),
            Split::Test => test.push(entry),
        }
    }
    Ok(Dataset { root: root.to_path_buf(), class_names, train, test })
}

/// Reads a manifest and checks that every referenced file exists.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| MustError::Load { path: path.to_path_buf(), msg: e.to_string() })?;
    let root = path.parent().unwrap_or(Path::new("."));
    let ds = parse_manifest(&text, path, root)?;
    for e in ds.train.iter().chain(&ds.test) {
        let p = ds.resolve(e);
        if !p.is_file() {
            return Err(MustError::Parse { path: path.to_path_buf(), line: e.line, msg: format!("missing image {}", p.display()) });
        }
    }
    Ok(ds)
}

pub fn format_manifest(ds: &Dataset) -> String {
    let mut out = format!("{}\n", ds.class_names.len());
    for name in &ds.class_names {
        out.push_str(name);
        out.push('\n');
    }
    for (split, entries) in [(Split::Train, &ds.train), (Split::Test, &ds.test)] {
        for e in entries {
            let label = e.label.map_or(-1, |y| y as i64);
            writeln!(out, "{}\t{}\t{label}", split.as_str(), e.path.display()).expect("string write");
        }
    }
    out
}
