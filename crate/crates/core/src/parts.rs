//! Named groups of elementary part indices ("head", "torso", ...).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::latent::check_parts;
use crate::error::{Error, Result};

/// Built-in index conventions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartTable {
    /// Six-part synthetic figure: 1 head, 2 torso, 3/4 left/right arm,
    /// 5/6 left/right leg.
    Mannequin,
    /// The 24-part DensePose surface labelling.
    DensePose,
}

impl PartTable {
    /// Table matching a part count, if there is one.
    pub fn for_parts(parts: usize) -> Option<Self> {
        match parts {
            6 => Some(Self::Mannequin),
            24 => Some(Self::DensePose),
            _ => None,
        }
    }

    pub fn parts(self) -> usize {
        match self {
            Self::Mannequin => 6,
            Self::DensePose => 24,
        }
    }

    fn groups(self) -> Vec<(&'static str, Vec<u8>)> {
        match self {
            Self::Mannequin => vec![
                ("head", vec![1]),
                ("torso", vec![2]),
                ("arms", vec![3, 4]),
                ("legs", vec![5, 6]),
                ("upper_body", vec![2, 3, 4]),
                ("lower_body", vec![5, 6]),
            ],
            Self::DensePose => vec![
                ("head", vec![23, 24]),
                ("torso", vec![1, 2]),
                ("arms", (15..=22).chain([3, 4]).collect()),
                ("legs", (5..=14).collect()),
                ("upper_body", [1, 2, 3, 4].into_iter().chain(15..=22).collect()),
                ("lower_body", (5..=14).collect()),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartGroups {
    parts: usize,
    groups: BTreeMap<String, Vec<u8>>,
}

fn normalize(name: &str) -> String {
    name.trim().to_ascii_lowercase().replace(['-', ' '], "_")
}

impl PartGroups {
    pub fn builtin(table: PartTable) -> Self {
        let groups = table.groups().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        Self { parts: table.parts(), groups }
    }

    /// Groups for `parts` parts: the built-in table when one matches (else
    /// none), overlaid with `custom`.
    pub fn new(parts: usize, table: Option<PartTable>, custom: &BTreeMap<String, Vec<u8>>) -> Result<Self> {
        let mut out = match table.or_else(|| PartTable::for_parts(parts)) {
            Some(t) if t.parts() != parts => {
                return Err(Error::Config(format!("part table {t:?} has {} parts, model has {parts}", t.parts())))
            }
            Some(t) => Self::builtin(t),
            None => Self { parts, groups: BTreeMap::new() },
        };
        for (name, ids) in custom {
            check_parts(ids, parts)?;
            let mut ids = ids.clone();
            ids.sort_unstable();
            ids.dedup();
            out.groups.insert(normalize(name), ids);
        }
        Ok(out)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.groups.keys().map(String::as_str)
    }

    /// Resolves a group name, `all`, `none`, or a comma list of indices.
    pub fn resolve(&self, name: &str) -> Result<Vec<u8>> {
        let key = normalize(name);
        match key.as_str() {
            "none" | "" => return Ok(Vec::new()),
            "all" => return Ok((1..=self.parts as u8).collect()),
            _ => {}
        }
        if let Some(ids) = self.groups.get(&key) {
            return Ok(ids.clone());
        }
        if key.chars().all(|c| c.is_ascii_digit() || c == ',' || c == '_') {
            let ids: Vec<u8> = key
                .split([',', '_'])
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<u8>().map_err(|_| Error::UnknownGroup(name.to_string())))
                .collect::<Result<_>>()?;
            check_parts(&ids, self.parts)?;
            return Ok(ids);
        }
        Err(Error::UnknownGroup(name.to_string()))
    }

    /// Head parts used for the face crop; empty when no `head` group exists.
    pub fn head(&self) -> Vec<u8> {
        self.groups.get("head").cloned().unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_tables_stay_in_range() {
        for table in [PartTable::Mannequin, PartTable::DensePose] {
            let g = PartGroups::builtin(table);
            for name in g.names() {
                check_parts(&g.resolve(name).unwrap(), table.parts()).unwrap();
            }
        }
    }

    #[test]
    fn densepose_body_halves_partition_the_parts() {
        let g = PartGroups::builtin(PartTable::DensePose);
        let mut all = g.resolve("upper body").unwrap();
        all.extend(g.resolve("lower-body").unwrap());
        all.extend(g.resolve("head").unwrap());
        all.sort_unstable();
        assert_eq!(all, (1..=24).collect::<Vec<u8>>());
    }

    #[test]
    fn resolve_forms() {
        let g = PartGroups::builtin(PartTable::Mannequin);
        assert_eq!(g.resolve("Torso").unwrap(), vec![2]);
        assert_eq!(g.resolve("none").unwrap(), Vec::<u8>::new());
        assert_eq!(g.resolve("all").unwrap(), vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(g.resolve("3,5").unwrap(), vec![3, 5]);
        assert_eq!(g.resolve("hat").unwrap_err().class(), "invalid-part-group");
        assert_eq!(g.resolve("9").unwrap_err().class(), "invalid-part");
    }

    #[test]
    fn custom_groups_overlay() {
        let custom = BTreeMap::from([("Left Arm".to_string(), vec![3])]);
        let g = PartGroups::new(6, None, &custom).unwrap();
        assert_eq!(g.resolve("left_arm").unwrap(), vec![3]);
        assert_eq!(g.head(), vec![1]);
        let bare = PartGroups::new(3, None, &BTreeMap::new()).unwrap();
        assert!(bare.head().is_empty());
        assert!(PartGroups::new(6, Some(PartTable::DensePose), &BTreeMap::new()).is_err());
    }
}
