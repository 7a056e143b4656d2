use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Precomputed image feature vector, standing in for pooled CNN output.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeature {
    pub id: String,
    pub values: Vec<f64>,
}

/// Image features keyed by id, all of one dimension `D`.
///
/// On disk: a `D=<int>` header, then one `<id> <f1> ... <fD>` line per feature.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureStore {
    dim: usize,
    features: Vec<ImageFeature>,
    index: HashMap<String, usize>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            features: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn insert(&mut self, feature: ImageFeature) -> Result<()> {
        if feature.values.len() != self.dim {
            return Err(Error::Shape(format!(
                "feature `{}` has {} values, store dimension is {}",
                feature.id,
                feature.values.len(),
                self.dim
            )));
        }
        if let Some(bad) = feature.values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Shape(format!(
                "feature `{}` has non-finite value {bad}",
                feature.id
            )));
        }
        match self.index.get(&feature.id) {
            Some(&i) => self.features[i] = feature,
            None => {
                self.index.insert(feature.id.clone(), self.features.len());
                self.features.push(feature);
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&ImageFeature> {
        self.index.get(id).map(|&i| &self.features[i])
    }

    pub fn require(&self, id: &str) -> Result<&ImageFeature> {
        self.get(id)
            .ok_or_else(|| Error::MissingFeature(id.to_owned()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ImageFeature> {
        self.features.iter()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "D={}", self.dim).map_err(io)?;
        for f in &self.features {
            write!(w, "{}", f.id).map_err(io)?;
            for v in &f.values {
                // shortest representation that parses back to the same f64
                write!(w, " {v:?}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let malformed = |line: usize, field: &str, message: String| Error::Malformed {
            path: path.to_path_buf(),
            line,
            field: field.to_owned(),
            message,
        };
        let header = lines
            .next()
            .ok_or_else(|| malformed(1, "header", "missing `D=<int>` header".into()))?
            .map_err(|e| Error::io(path, e))?;
        let dim: usize = header
            .trim()
            .strip_prefix("D=")
            .ok_or_else(|| malformed(1, "header", format!("expected `D=<int>`, got `{header}`")))?
            .parse()
            .map_err(|e| malformed(1, "header", format!("{e}")))?;
        let mut store = Self::new(dim);
        for (n, line) in lines.enumerate() {
            let lineno = n + 2;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let id = fields.next().expect("non-empty line").to_owned();
            let values: Vec<f64> = fields
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| malformed(lineno, "value", format!("`{f}`: {e}")))
                })
                .collect::<Result<_>>()?;
            if values.len() != dim {
                return Err(malformed(
                    lineno,
                    "value",
                    format!("expected {dim} values, found {}", values.len()),
                ));
            }
            store
                .insert(ImageFeature { id, values })
                .map_err(|e| malformed(lineno, "value", e.to_string()))?;
        }
        Ok(store)
    }
}
