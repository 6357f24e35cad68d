use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MMWHS_LABELS: &str = include_str!("../../configs/mmwhs_labels.toml");

/// Ordered mapping from structure name to on-disk label code.
///
/// Class index `k` (1-based) is the k-th entry; 0 is background and never
/// appears as a code.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    entries: Vec<(String, u16)>,
}

impl LabelMap {
    pub fn new(entries: Vec<(String, u16)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("label map is empty".into()));
        }
        for (i, (name, code)) in entries.iter().enumerate() {
            if *code == 0 {
                return Err(Error::Config(format!("structure `{name}` uses reserved background code 0")));
            }
            if entries[..i].iter().any(|(n, c)| n == name || c == code) {
                return Err(Error::Config(format!("duplicate name or code for `{name}` = {code}")));
            }
        }
        Ok(Self { entries })
    }

    /// The seven whole-heart substructures with MM-WHS codes.
    pub fn mmwhs() -> Self {
        Self::from_toml_str(MMWHS_LABELS).expect("bundled label map parses")
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let table: toml::Table = s.parse().map_err(|e| Error::Config(format!("label map: {e}")))?;
        let entries = table
            .into_iter()
            .map(|(name, v)| {
                let code = v
                    .as_integer()
                    .filter(|c| (1..=u16::MAX as i64).contains(c))
                    .ok_or_else(|| Error::Config(format!("label `{name}` must map to an integer code in 1..=65535")))?;
                Ok((name, code as u16))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    pub fn to_toml_string(&self) -> String {
        self.entries.iter().map(|(n, c)| format!("{} = {}\n", toml_key(n), c)).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    /// First `n` structures of this map.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.entries.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot take {n} structures from a map of {}",
                self.entries.len()
            )));
        }
        Self::new(self.entries[..n].to_vec())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn name_of_class(&self, class: usize) -> &str {
        &self.entries[class - 1].0
    }

    pub fn code_of(&self, name: &str) -> Option<u16> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, c)| *c)
    }

    pub fn code_of_class(&self, class: usize) -> u16 {
        self.entries[class - 1].1
    }

    pub fn class_of_code(&self, code: u16) -> Option<usize> {
        self.entries.iter().position(|(_, c)| *c == code).map(|i| i + 1)
    }
}

fn toml_key(name: &str) -> String {
    if name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        name.to_string()
    } else {
        format!("{name:?}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_map_has_seven_structures_in_order() {
        let m = LabelMap::mmwhs();
        assert_eq!(m.len(), 7);
        assert_eq!(m.names().collect::<Vec<_>>(), ["LV", "RV", "LA", "RA", "LV-myo", "AA", "PA"]);
        assert_eq!(m.class_of_code(205), Some(5));
    }

    #[test]
    fn toml_round_trip() {
        let m = LabelMap::mmwhs();
        assert_eq!(LabelMap::from_toml_str(&m.to_toml_string()).unwrap(), m);
    }

    #[test]
    fn rejects_background_code_and_duplicates() {
        assert!(LabelMap::from_toml_str("A = 0").is_err());
        assert!(LabelMap::from_toml_str("A = 3\nB = 3").is_err());
        assert!(LabelMap::from_toml_str("A = \"x\"").is_err());
    }
}
