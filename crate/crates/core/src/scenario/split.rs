use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Category, ScenarioError, ScenarioRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    /// Proportions of a 2037 / 479 / 1505 segment split.
    fn default() -> Self {
        let total = 2037.0 + 479.0 + 1505.0;
        SplitRatios {
            train: 2037.0 / total,
            val: 479.0 / total,
            test: 1505.0 / total,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self, ScenarioError> {
        let r = SplitRatios { train, val, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let parts = self.as_array();
        if parts.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(ScenarioError::InvalidRatios(format!("ratios must be positive, got {parts:?}")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ScenarioError::InvalidRatios(format!("ratios sum to {sum}, expected 1")));
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Largest-remainder apportionment of `n` units over `weights` (summing to 1).
fn apportion(n: usize, weights: &[f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = weights.iter().map(|w| w * n as f64).collect();
    let mut out = [0usize; 3];
    for (o, q) in out.iter_mut().zip(&quotas) {
        *o = q.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut remaining = n - out.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        out[i] += 1;
        remaining -= 1;
    }
    out
}

/// Finds one extra unit for category `ci`: either a part with spare deficit,
/// or a part whose unit can be handed to another category.
fn augment(ci: usize, bumped: &mut [[bool; 3]], deficit: &mut [usize; 3], seen: &mut [bool]) -> bool {
    if seen[ci] {
        return false;
    }
    seen[ci] = true;
    for s in 0..3 {
        if bumped[ci][s] {
            continue;
        }
        if deficit[s] > 0 {
            deficit[s] -= 1;
            bumped[ci][s] = true;
            return true;
        }
        for other in 0..bumped.len() {
            if other != ci && bumped[other][s] && !seen[other] {
                // try moving `other`'s unit out of part s
                bumped[other][s] = false;
                if augment(other, bumped, deficit, seen) {
                    bumped[ci][s] = true;
                    return true;
                }
                bumped[other][s] = true;
            }
        }
    }
    false
}

/// Stratified split of positions `0..categories.len()` into train/val/test.
/// Each part's per-category count stays within one record of its quota.
pub fn split_indices(
    categories: &[Category],
    ratios: SplitRatios,
    seed: u64,
) -> Result<DatasetSplit<usize>, ScenarioError> {
    ratios.validate()?;
    let n = categories.len();
    if n < 3 {
        return Err(ScenarioError::TooFewRecords(n));
    }
    let weights = ratios.as_array();
    let mut targets = apportion(n, &weights);
    // every part non-empty
    for s in 0..3 {
        if targets[s] == 0 {
            let donor = (0..3).max_by_key(|&i| targets[i]).unwrap();
            targets[donor] -= 1;
            targets[s] += 1;
        }
    }

    let mut groups: BTreeMap<Category, Vec<usize>> = BTreeMap::new();
    for (i, c) in categories.iter().enumerate() {
        groups.entry(*c).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for members in groups.values_mut() {
        members.shuffle(&mut rng);
    }

    // Per-category floors, then hand out leftovers by largest fractional quota.
    let cats: Vec<Category> = groups.keys().copied().collect();
    let mut counts: Vec<[usize; 3]> = Vec::with_capacity(cats.len());
    let mut candidates = Vec::new();
    for (ci, c) in cats.iter().enumerate() {
        let nc = groups[c].len() as f64;
        let mut row = [0usize; 3];
        for s in 0..3 {
            let q = nc * weights[s];
            row[s] = q.floor() as usize;
            candidates.push((q - q.floor(), ci, s));
        }
        counts.push(row);
    }
    let mut deficit: [usize; 3] = [0; 3];
    for s in 0..3 {
        let assigned: usize = counts.iter().map(|r| r[s]).sum();
        deficit[s] = targets[s].saturating_sub(assigned);
    }
    let mut leftover: Vec<usize> = cats
        .iter()
        .zip(&counts)
        .map(|(c, r)| groups[c].len() - r.iter().sum::<usize>())
        .collect();
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut bumped = vec![[false; 3]; cats.len()];
    for &(_, ci, s) in &candidates {
        if leftover[ci] > 0 && deficit[s] > 0 {
            leftover[ci] -= 1;
            deficit[s] -= 1;
            bumped[ci][s] = true;
        }
    }
    // Reroute along augmenting paths so no category takes two leftover
    // units in the same part.
    for ci in 0..cats.len() {
        while leftover[ci] > 0 {
            let mut seen = vec![false; cats.len()];
            if !augment(ci, &mut bumped, &mut deficit, &mut seen) {
                break;
            }
            leftover[ci] -= 1;
        }
    }
    for (row, extra) in counts.iter_mut().zip(&bumped) {
        for s in 0..3 {
            row[s] += extra[s] as usize;
        }
    }
    for ci in 0..cats.len() {
        while leftover[ci] > 0 {
            let s = (0..3)
                .filter(|&s| deficit[s] > 0)
                .min_by_key(|&s| bumped[ci][s])
                .expect("leftovers and deficits balance");
            counts[ci][s] += 1;
            leftover[ci] -= 1;
            deficit[s] -= 1;
        }
    }

    let mut parts: [Vec<usize>; 3] = Default::default();
    for (ci, c) in cats.iter().enumerate() {
        let members = &groups[c];
        let mut start = 0;
        for s in 0..3 {
            parts[s].extend_from_slice(&members[start..start + counts[ci][s]]);
            start += counts[ci][s];
        }
    }
    for p in parts.iter_mut() {
        p.sort_unstable();
    }
    let [train, val, test] = parts;
    Ok(DatasetSplit { train, val, test })
}

/// Stratified, seeded split of records into disjoint train/val/test lists.
pub fn split_dataset(
    records: Vec<ScenarioRecord>,
    ratios: SplitRatios,
    seed: u64,
) -> Result<DatasetSplit<ScenarioRecord>, ScenarioError> {
    let cats: Vec<Category> = records.iter().map(|r| r.category).collect();
    let idx = split_indices(&cats, ratios, seed)?;
    let mut slots: Vec<Option<ScenarioRecord>> = records.into_iter().map(Some).collect();
    let mut take = |ids: &[usize]| -> Vec<ScenarioRecord> {
        ids.iter().map(|&i| slots[i].take().expect("indices are disjoint")).collect()
    };
    Ok(DatasetSplit {
        train: take(&idx.train),
        val: take(&idx.val),
        test: take(&idx.test),
    })
}

/// File inside a dataset directory listing record ids per split.
pub const SPLITS_FILE: &str = "splits.json";

impl DatasetSplit<ScenarioRecord> {
    /// Record ids of each part.
    pub fn ids(&self) -> DatasetSplit<String> {
        let ids = |v: &[ScenarioRecord]| v.iter().map(|r| r.id.clone()).collect();
        DatasetSplit {
            train: ids(&self.train),
            val: ids(&self.val),
            test: ids(&self.test),
        }
    }
}

/// Writes `splits.json` into `dir`.
pub fn save_split_ids(dir: &Path, ids: &DatasetSplit<String>) -> Result<PathBuf, ScenarioError> {
    let path = dir.join(SPLITS_FILE);
    let text = serde_json::to_string_pretty(ids).expect("split serializes");
    fs::write(&path, text).map_err(|e| ScenarioError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(path)
}

/// Reads `splits.json` from `dir`; `Ok(None)` when the file is absent.
pub fn load_split_ids(dir: &Path) -> Result<Option<DatasetSplit<String>>, ScenarioError> {
    let path = dir.join(SPLITS_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => {
            return Err(ScenarioError::Io {
                path: path.display().to_string(),
                source: e,
            })
        }
    };
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| ScenarioError::MalformedManifest {
            line: e.line(),
            reason: format!("{}: {e}", path.display()),
        })
}

/// Partitions `records` according to `ids`. Records not listed anywhere are
/// dropped; ids without a record are an error.
pub fn partition_by_ids(
    records: Vec<ScenarioRecord>,
    ids: &DatasetSplit<String>,
) -> Result<DatasetSplit<ScenarioRecord>, ScenarioError> {
    let mut by_id: BTreeMap<String, ScenarioRecord> = records.into_iter().map(|r| (r.id.clone(), r)).collect();
    let mut take = |list: &[String]| -> Result<Vec<ScenarioRecord>, ScenarioError> {
        list.iter()
            .map(|id| {
                by_id.remove(id).ok_or_else(|| ScenarioError::InvalidRecord {
                    id: id.clone(),
                    reason: "listed in splits but missing from the dataset (or listed twice)".into(),
                })
            })
            .collect()
    };
    Ok(DatasetSplit {
        train: take(&ids.train)?,
        val: take(&ids.val)?,
        test: take(&ids.test)?,
    })
}
