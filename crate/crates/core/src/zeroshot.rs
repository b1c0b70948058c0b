//! Zero-shot classifier built from per-class embedding ensembles.

use std::path::Path;

use crate::error::{invalid_input, MustError, Result};
use crate::image::Image;
use crate::linalg::{argmax, norm2};
use crate::model::{classify, Vit};
use crate::params::Params;

/// K×d matrix of unit rows plus a logit scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    weights: Vec<f64>,
    dim: usize,
    class_names: Vec<String>,
    logit_scale: f64,
}

impl ClassifierHead {
    /// Wraps rows that are already unit-norm.
    pub fn from_rows(weights: Vec<f64>, dim: usize, class_names: Vec<String>, logit_scale: f64) -> Result<Self> {
        let k = class_names.len();
        if k < 2 {
            return Err(invalid_input("a classifier needs at least 2 classes"));
        }
        if dim == 0 || weights.len() != k * dim {
            return Err(invalid_input(format!("expected {k}x{dim} weights, got {} values", weights.len())));
        }
        if logit_scale.is_nan() || logit_scale <= 0.0 {
            return Err(invalid_input("logit scale must be positive"));
        }
        for (row, name) in weights.chunks_exact(dim).zip(&class_names) {
            if (norm2(row) - 1.0).abs() > 1e-6 {
                return Err(invalid_input(format!("row for `{name}` is not unit norm")));
            }
        }
        Ok(Self { weights, dim, class_names, logit_scale })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.weights[k * self.dim..(k + 1) * self.dim]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn logit_scale(&self) -> f64 {
        self.logit_scale
    }

    pub fn with_logit_scale(mut self, scale: f64) -> Self {
        self.logit_scale = scale;
        self
    }
}

/// Per-class prompt ensemble: class name and one or more raw vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddings {
    pub name: String,
    pub vectors: Vec<Vec<f64>>,
}

/// Normalize each vector, average, normalize the mean.
pub fn build_head(classes: &[ClassEmbeddings], logit_scale: f64) -> Result<ClassifierHead> {
    let dim = classes
        .first()
        .and_then(|c| c.vectors.first())
        .map(Vec::len)
        .ok_or_else(|| invalid_input("no class embeddings"))?;
    let mut weights = Vec::with_capacity(classes.len() * dim);
    for c in classes {
        if c.vectors.is_empty() {
            return Err(invalid_input(format!("class `{}` has no embeddings", c.name)));
        }
        let mut mean = vec![0.0; dim];
        for v in &c.vectors {
            if v.len() != dim {
                return Err(invalid_input(format!(
                    "class `{}` has a {}-dim vector, expected {dim}",
                    c.name,
                    v.len()
                )));
            }
            let n = norm2(v);
            if n == 0.0 || !n.is_finite() {
                return Err(MustError::DegenerateClass(c.name.clone()));
            }
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x / n;
            }
        }
        for m in &mut mean {
            *m /= c.vectors.len() as f64;
        }
        let n = norm2(&mean);
        // opposing unit vectors can cancel to rounding noise
        if n < 1e-12 {
            return Err(MustError::DegenerateClass(c.name.clone()));
        }
        weights.extend(mean.iter().map(|m| m / n));
    }
    ClassifierHead::from_rows(weights, dim, classes.iter().map(|c| c.name.clone()).collect(), logit_scale)
}

/// Parses the class-embedding table: header `K d`, then
/// `class_name<TAB>v1 v2 ... vd` per line. Repeated names form an ensemble;
/// classes keep first-appearance order.
pub fn parse_class_embeddings(text: &str, path: &Path) -> Result<Vec<ClassEmbeddings>> {
    let err = |line: usize, msg: String| MustError::Parse { path: path.to_path_buf(), line, msg };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines.next().ok_or_else(|| err(1, "empty embedding file".into()))?;
    let mut it = header.split_whitespace();
    let mut next_num = |what: &str| -> Result<usize> {
        it.next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(hline + 1, format!("header must be `K d`, missing {what}")))
    };
    let k = next_num("K")?;
    let d = next_num("d")?;
    let mut classes: Vec<ClassEmbeddings> = Vec::new();
    for (i, line) in lines {
        let (name, rest) = line
            .split_once('\t')
            .ok_or_else(|| err(i + 1, "expected `class_name<TAB>values`".into()))?;
        let vector: Vec<f64> = rest
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|e| err(i + 1, format!("bad value `{s}`: {e}"))))
            .collect::<Result<_>>()?;
        if vector.len() != d {
            return Err(err(i + 1, format!("expected {d} values, found {}", vector.len())));
        }
        match classes.iter_mut().find(|c| c.name == name) {
            Some(c) => c.vectors.push(vector),
            None => classes.push(ClassEmbeddings { name: name.to_string(), vectors: vec![vector] }),
        }
    }
    if classes.len() != k {
        return Err(err(hline + 1, format!("header declares {k} classes, file has {}", classes.len())));
    }
    Ok(classes)
}

pub fn load_class_embeddings(path: &Path) -> Result<Vec<ClassEmbeddings>> {
    let text = std::fs::read_to_string(path).map_err(|e| MustError::Load {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    parse_class_embeddings(&text, path)
}

pub fn format_class_embeddings(classes: &[ClassEmbeddings]) -> String {
    let d = classes.first().and_then(|c| c.vectors.first()).map_or(0, Vec::len);
    let mut out = format!("{} {}\n", classes.len(), d);
    for c in classes {
        for v in &c.vectors {
            let vals: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
            out.push_str(&format!("{}\t{}\n", c.name, vals.join(" ")));
        }
    }
    out
}

/// Argmax of `classify(project(cls), head)` per image; lowest index on ties.
pub fn zeroshot_predict(images: &[Image], vit: &Vit, params: &Params, head: &ClassifierHead) -> Result<Vec<usize>> {
    images
        .iter()
        .map(|img| {
            let v = vit.image_feature(params, img)?;
            Ok(argmax(&classify(&v, head)?))
        })
        .collect()
}
