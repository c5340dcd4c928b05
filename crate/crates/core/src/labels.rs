//! Ordered race/ethnicity category sets.
//!
//! The order of a [`CategorySet`] fixes the column order of every vector,
//! matrix and file produced during a run.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Labels used in the NC voter-file analyses, in table order.
pub const DEFAULT_LABELS: [&str; 5] = ["Asian", "Black", "Hispanic", "Others", "White"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct CategorySet {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl CategorySet {
    pub fn new<S: AsRef<str>>(labels: &[S]) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::InvalidCategories(format!(
                "need at least 2 categories, got {}",
                labels.len()
            )));
        }
        let mut index = HashMap::with_capacity(labels.len());
        let mut owned = Vec::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            let l = l.as_ref().trim();
            if l.is_empty() {
                return Err(Error::InvalidCategories(format!("label {i} is empty")));
            }
            if index.insert(l.to_string(), i).is_some() {
                return Err(Error::InvalidCategories(format!("duplicate label `{l}`")));
            }
            owned.push(l.to_string());
        }
        Ok(Self { labels: owned, index })
    }

    /// Parses a comma-separated label list such as `Asian,Black,White`.
    pub fn parse(list: &str) -> Result<Self> {
        let parts: Vec<&str> = list.split(',').map(str::trim).collect();
        Self::new(&parts)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label.trim()).copied()
    }

    /// Like [`index_of`](Self::index_of) but fails with a descriptive error.
    pub fn require(&self, label: &str) -> Result<usize> {
        self.index_of(label).ok_or_else(|| {
            Error::InvalidCategories(format!("`{label}` is not one of {:?}", self.labels))
        })
    }

    pub fn check_index(&self, index: usize) -> Result<()> {
        if index < self.len() {
            Ok(())
        } else {
            Err(Error::CategoryOutOfRange { index, len: self.len() })
        }
    }
}

impl Default for CategorySet {
    fn default() -> Self {
        Self::new(&DEFAULT_LABELS).expect("default labels are valid")
    }
}

impl TryFrom<Vec<String>> for CategorySet {
    type Error = Error;

    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::new(&v)
    }
}

impl From<CategorySet> for Vec<String> {
    fn from(c: CategorySet) -> Self {
        c.labels
    }
}

/// Checks that every label index is below `p`.
pub(crate) fn check_labels(labels: &[usize], p: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= p) {
        Some(&index) => Err(Error::CategoryOutOfRange { index, len: p }),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicates_and_singletons() {
        assert!(CategorySet::new(&["A", "A"]).is_err());
        assert!(CategorySet::new(&["A"]).is_err());
        assert!(CategorySet::new(&["A", ""]).is_err());
    }

    #[test]
    fn parse_keeps_order() {
        let c = CategorySet::parse("White, Black ,Asian").unwrap();
        assert_eq!(c.labels(), ["White", "Black", "Asian"]);
        assert_eq!(c.index_of("Black"), Some(1));
        assert_eq!(c.index_of("Other"), None);
    }
}
