//! Text embedding files.
//!
//! The first line holds `count dimension`; each following line is an
//! identifier and `dimension` space-separated decimals. Values are written
//! in shortest round-trip form so reading back is exact.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::data::parse_name;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub ids: Vec<String>,
    pub matrix: Array2<f64>,
}

impl Embeddings {
    pub fn new(ids: Vec<String>, matrix: Array2<f64>) -> Result<Self> {
        if ids.len() != matrix.nrows() {
            return Err(Error::shape("embeddings", &[ids.len()], &[matrix.nrows()]));
        }
        if let Some(bad) = ids.iter().find(|id| id.is_empty() || id.contains(char::is_whitespace)) {
            return Err(Error::Format(format!("identifier {bad:?} is empty or contains whitespace")));
        }
        Ok(Self { ids, matrix })
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    /// Class labels parsed from the identifiers.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.ids
            .iter()
            .map(|id| parse_name(id).map(|(c, _, _)| c).ok_or_else(|| Error::Format(format!("identifier {id:?} carries no class label"))))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.matrix.nrows(), self.dim());
        for (id, row) in self.ids.iter().zip(self.matrix.rows()) {
            s.push_str(id);
            for v in row {
                let _ = write!(s, " {v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty embedding file".into()))?;
        let nums: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Format(format!("bad embedding header {header:?}"))))
            .collect::<Result<_>>()?;
        let &[count, dim] = nums.as_slice() else {
            return Err(Error::Format(format!("embedding header needs count and dimension, got {header:?}")));
        };
        let mut ids = Vec::with_capacity(count);
        let mut data = Vec::with_capacity(count * dim);
        for (n, line) in lines.enumerate() {
            let mut tok = line.split_whitespace();
            let id = tok.next().unwrap_or_default().to_string();
            let row: Vec<f64> = tok
                .map(|t| t.parse().map_err(|_| Error::Format(format!("row {}: bad value {t:?}", n + 1))))
                .collect::<Result<_>>()?;
            if row.len() != dim {
                return Err(Error::Format(format!("row {} has {} values, header says {dim}", n + 1, row.len())));
            }
            ids.push(id);
            data.extend(row);
        }
        if ids.len() != count {
            return Err(Error::Format(format!("header says {count} rows, found {}", ids.len())));
        }
        let matrix = Array2::from_shape_vec((count, dim), data).map_err(|e| Error::Format(e.to_string()))?;
        Self::new(ids, matrix)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
