use std::collections::{BTreeMap, BTreeSet};

use crate::error::{LabError, Result};
use crate::rng::RngState;

pub const TEST_FRACTION: f64 = 0.2;
pub const VAL_FRACTION: f64 = 0.1;
pub const MIN_GROUPS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitManifest {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub source_group: BTreeMap<String, u32>,
}

impl SplitManifest {
    pub fn groups_of<'a>(&'a self, ids: &'a [String]) -> BTreeSet<u32> {
        ids.iter().map(|id| self.source_group[id]).collect()
    }

    /// Tab-separated `id  group  split` lines, sorted by split then id.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("id\tsource_group\tsplit\n");
        for (name, ids) in [("train", &self.train_ids), ("val", &self.val_ids), ("test", &self.test_ids)] {
            let mut sorted: Vec<&String> = ids.iter().collect();
            sorted.sort();
            for id in sorted {
                out.push_str(&format!("{id}\t{}\t{name}\n", self.source_group[id]));
            }
        }
        out
    }
}

/// Group-level 80/20 split into train+val and test, then an item-level 90/10
/// split of the first part. Items are sorted by id before shuffling, so only
/// the seed decides membership.
pub fn make_splits<S: AsRef<str>>(items: &[(S, u32)], seed: u64) -> Result<SplitManifest> {
    let mut source_group = BTreeMap::new();
    for (id, group) in items {
        if source_group.insert(id.as_ref().to_string(), *group).is_some() {
            return Err(LabError::Data(format!("duplicate item id {}", id.as_ref())));
        }
    }
    let mut groups: Vec<u32> = source_group.values().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if groups.len() < MIN_GROUPS {
        return Err(LabError::Data(format!(
            "need at least {MIN_GROUPS} source groups to split, got {}",
            groups.len()
        )));
    }
    let root = RngState::new(seed);
    root.derive_str("split/groups").shuffle(&mut groups);
    let n_test = ((groups.len() as f64 * TEST_FRACTION).round() as usize).max(1);
    let test_groups: BTreeSet<u32> = groups[..n_test].iter().copied().collect();

    let (mut test_ids, mut rest) = (Vec::new(), Vec::new());
    for (id, g) in &source_group {
        if test_groups.contains(g) {
            test_ids.push(id.clone());
        } else {
            rest.push(id.clone());
        }
    }
    root.derive_str("split/items").shuffle(&mut rest);
    let n_val = (rest.len() as f64 * VAL_FRACTION).round() as usize;
    let val_ids = rest[..n_val].to_vec();
    let train_ids = rest[n_val..].to_vec();
    Ok(SplitManifest {
        train_ids,
        val_ids,
        test_ids,
        source_group,
    })
}
