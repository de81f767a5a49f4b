//! Repeated random sub-sampling of a dataset into calibration and test parts.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::record::RegressionRecord;

/// Default calibration-set size.
pub const DEFAULT_CAL_SIZE: usize = 1000;

/// Mix a master seed and a run index into an independent 64-bit seed
/// (splitmix64 finalizer over the combined word).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One calibration/test partition. Indices refer to positions in the record
/// slice the plan was drawn from and are kept sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitPlan {
    pub run_index: usize,
    pub seed: u64,
    pub calibration: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitPlan {
    pub fn calibration_ids<'a>(&self, records: &'a [RegressionRecord]) -> BTreeSet<&'a str> {
        self.calibration.iter().map(|&i| records[i].id.as_str()).collect()
    }

    pub fn test_ids<'a>(&self, records: &'a [RegressionRecord]) -> BTreeSet<&'a str> {
        self.test.iter().map(|&i| records[i].id.as_str()).collect()
    }

    pub fn select<'a>(
        &self,
        records: &'a [RegressionRecord],
    ) -> (Vec<&'a RegressionRecord>, Vec<&'a RegressionRecord>) {
        (
            self.calibration.iter().map(|&i| &records[i]).collect(),
            self.test.iter().map(|&i| &records[i]).collect(),
        )
    }
}

/// How many calibration records each group contributes under stratified
/// sampling: an equal share, with the remainder going one each to the
/// largest groups (ties broken lexicographically).
pub fn stratified_quota(group_sizes: &BTreeMap<&str, usize>, cal_size: usize) -> Result<BTreeMap<String, usize>> {
    let g = group_sizes.len();
    if g == 0 {
        return Err(Error::InsufficientData("no records".into()));
    }
    let base = cal_size / g;
    let rem = cal_size % g;
    let need = cal_size.div_ceil(g);
    for (name, &have) in group_sizes {
        if have < need {
            return Err(Error::InsufficientGroupData {
                group: name.to_string(),
                have,
                need,
            });
        }
    }
    let mut order: Vec<(&str, usize)> = group_sizes.iter().map(|(k, v)| (*k, *v)).collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut quota: BTreeMap<String, usize> =
        group_sizes.keys().map(|k| (k.to_string(), base)).collect();
    for (name, _) in order.into_iter().take(rem) {
        *quota.get_mut(name).expect("group present") += 1;
    }
    Ok(quota)
}

/// Draw `k` calibration/test partitions with `cal_size` calibration records
/// each. Run `r` uses the seed `derive_seed(seed, r)`.
pub fn split_harness(
    records: &[RegressionRecord],
    k: usize,
    cal_size: usize,
    seed: u64,
    stratify_by_group: bool,
) -> Result<Vec<SplitPlan>> {
    let n = records.len();
    if cal_size == 0 || cal_size >= n {
        return Err(Error::InsufficientData(format!(
            "calibration size {cal_size} must be in [1, {n}) for {n} records"
        )));
    }
    let mut seen = HashSet::with_capacity(n);
    for r in records {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::DuplicateId(r.id.clone()));
        }
    }

    let mut by_group: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_group.entry(r.group.as_str()).or_default().push(i);
    }
    let quota = if stratify_by_group {
        let sizes = by_group.iter().map(|(k, v)| (*k, v.len())).collect();
        Some(stratified_quota(&sizes, cal_size)?)
    } else {
        None
    };

    let plans = (0..k)
        .map(|run| {
            let run_seed = derive_seed(seed, run as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
            let mut in_cal = vec![false; n];
            match &quota {
                Some(quota) => {
                    for (group, members) in &by_group {
                        let mut pool = members.clone();
                        pool.shuffle(&mut rng);
                        for &i in pool.iter().take(quota[*group]) {
                            in_cal[i] = true;
                        }
                    }
                }
                None => {
                    let mut pool: Vec<usize> = (0..n).collect();
                    pool.shuffle(&mut rng);
                    for &i in pool.iter().take(cal_size) {
                        in_cal[i] = true;
                    }
                }
            }
            let (calibration, test): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| in_cal[i]);
            SplitPlan {
                run_index: run,
                seed: run_seed,
                calibration,
                test,
            }
        })
        .collect();
    Ok(plans)
}
