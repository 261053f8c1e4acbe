use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{input, Result};

/// Dictionary encoding of string categories onto a dense `0..len` index space.
///
/// Indices follow insertion order, so an encoder built from a fixed category
/// list is stable across runs and files.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct CategoryEncoder {
    categories: Vec<String>,
    index: HashMap<String, usize>,
}

impl CategoryEncoder {
    pub fn new<S: Into<String>>(categories: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut enc = Self::default();
        for c in categories {
            let c = c.into();
            if enc.index.contains_key(&c) {
                return input(format!("duplicate category {c:?}"));
            }
            enc.push(c);
        }
        Ok(enc)
    }

    fn push(&mut self, c: String) -> usize {
        let idx = self.categories.len();
        self.index.insert(c.clone(), idx);
        self.categories.push(c);
        idx
    }

    /// Index of `value`, adding it as a new category when unseen.
    pub fn encode_or_insert(&mut self, value: &str) -> usize {
        match self.index.get(value) {
            Some(&i) => i,
            None => self.push(value.to_owned()),
        }
    }

    pub fn encode(&self, value: &str) -> Option<usize> {
        self.index.get(value).copied()
    }

    pub fn decode(&self, index: usize) -> Option<&str> {
        self.categories.get(index).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }
}

impl From<Vec<String>> for CategoryEncoder {
    fn from(categories: Vec<String>) -> Self {
        let mut enc = Self::default();
        for c in categories {
            enc.encode_or_insert(&c);
        }
        enc
    }
}

impl From<CategoryEncoder> for Vec<String> {
    fn from(enc: CategoryEncoder) -> Self {
        enc.categories
    }
}
