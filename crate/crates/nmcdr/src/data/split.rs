//! Leave-one-out splits and negative sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seeds;

use super::cross::CrossDomainDataset;
use super::ingest::DomainIndex;
use super::DataError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Timestamp-based when every interaction in the domain carries one,
    /// random holdout otherwise.
    #[default]
    Auto,
    Timestamp,
    Random,
}

/// Per-user holdout for one domain. Users with fewer than 3 interactions get
/// no test item; their interactions all stay in train.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DomainSplit {
    pub test: Vec<Option<usize>>,
    pub val: Vec<Option<usize>>,
    /// Sorted remaining train items per user.
    pub train: Vec<Vec<usize>>,
    /// Users excluded from evaluation for having < 3 interactions.
    pub excluded: usize,
}

impl DomainSplit {
    pub fn n_test_users(&self) -> usize {
        self.test.iter().filter(|t| t.is_some()).count()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitSpec {
    pub z: DomainSplit,
    pub zbar: DomainSplit,
    /// Whether a validation item was held out per user.
    pub validation: bool,
}

/// Leave-one-out split of both domains. The most recent interaction is the
/// test item (ties broken towards the highest item id); with validation
/// enabled the second most recent is held out as well.
pub fn split(
    dataset: &CrossDomainDataset,
    mode: SplitMode,
    validation: bool,
    seed: u64,
) -> SplitSpec {
    let z = split_domain(&dataset.domain_z, mode, validation, seed, 0);
    let zbar = split_domain(&dataset.domain_zbar, mode, validation, seed, 1);
    SplitSpec { z, zbar, validation }
}

fn split_domain(
    index: &DomainIndex,
    mode: SplitMode,
    validation: bool,
    seed: u64,
    domain_no: u64,
) -> DomainSplit {
    let use_timestamps = match mode {
        SplitMode::Timestamp => true,
        SplitMode::Random => false,
        SplitMode::Auto =>

            (0..index.n_users()).all(|u| index.interactions(u).iter().all(|x| x.timestamp.is_some())),
    };
    let n = index.n_users();
    let mut test = vec![None; n];
    let mut val = vec![None; n];
    let mut train = vec![Vec::new(); n];
    let mut excluded = 0usize;

    for u in 0..n {
        let list = index.interactions(u);
        if list.len() < 3 {
            excluded += 1;
            train[u] = list.iter().map(|x| x.item).collect();
            continue;
        }
        let mut remaining: Vec<(usize, Option<i64>)> =
            list.iter().map(|x| (x.item, x.timestamp)).collect();
        let take = |remaining: &mut Vec<(usize, Option<i64>)>, pick_no: u64| -> usize {
            let at = if use_timestamps {
                // Most recent wins; equal timestamps (and absent ones, should
                // they sneak into timestamp mode) break towards the highest
                // item id.
                let mut best = 0;
                for (k, &(item, ts)) in remaining.iter().enumerate() {
                    let (bi, bts) = (remaining[best].0, remaining[best].1);
                    let key = (ts.unwrap_or(i64::MIN), item);
                    if key > (bts.unwrap_or(i64::MIN), bi) {
                        best = k;
                    }
                }
                best
            } else {
                let mut rng = seeds::stream_rng(seed, "split", &[domain_no, u as u64, pick_no]);
                rng.random_range(0..remaining.len())
            };
            remaining.swap_remove(at).0
        };
        test[u] = Some(take(&mut remaining, 0));
        if validation {
            val[u] = Some(take(&mut remaining, 1));
        }
        let mut rest: Vec<usize> = remaining.into_iter().map(|(item, _)| item).collect();
        rest.sort_unstable();
        train[u] = rest;
    }
    if excluded > 0 {
        log::warn!("domain {domain_no}: {excluded} users below 3 interactions excluded from eval");
    }
    DomainSplit { test, val, train, excluded }
}

/// Draw `n` distinct items uniformly from the catalog excluding
/// `interacted_sorted`. Exactly uniform over the eligible set.
pub fn sample_negatives_with_rng<R: Rng>(
    index: &DomainIndex,
    interacted_sorted: &[usize],
    user: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>, DataError> {
    let m = index.n_items();
    let eligible = m - interacted_sorted.len();
    if eligible < n {
        return Err(DataError::CatalogTooSmall { user, eligible, need: n });
    }
    let is_interacted = |item: usize| interacted_sorted.binary_search(&item).is_ok();
    // Rejection sampling when the catalog dwarfs the request, otherwise
    // a partial shuffle of the enumerated eligible set.
    if n * 4 <= eligible {
        let mut out = Vec::with_capacity(n);
        let mut seen = std::collections::BTreeSet::new();
        while out.len() < n {
            let cand = rng.random_range(0..m);
            if !is_interacted(cand) && seen.insert(cand) {
                out.push(cand);
            }
        }
        Ok(out)
    } else {
        let mut pool: Vec<usize> = (0..m).filter(|&i| !is_interacted(i)).collect();
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            let at = rng.random_range(k..pool.len());
            pool.swap(k, at);
            out.push(pool[k]);
        }
        Ok(out)
    }
}

/// Reproducible evaluation negatives for `(user, seed)`: the user's full
/// interacted set (train, validation and test) is excluded.
pub fn eval_negatives(
    index: &DomainIndex,
    user: usize,
    n: usize,
    seed: u64,
    domain_no: u64,
) -> Result<Vec<usize>, DataError> {
    let interacted = index.interacted_items(user);
    let mut rng = seeds::stream_rng(seed, "neg-eval", &[domain_no, user as u64]);
    sample_negatives_with_rng(index, &interacted, user, n, &mut rng)
}
