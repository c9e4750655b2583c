//! Pairing two domains: overlapped-user correspondence and density variants.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::seeds;

use super::ingest::DomainIndex;
use super::DataError;

/// Two indexed domains plus the exposed overlapped-user pairs.
///
/// `overlap` holds `(user id in Z, user id in Z-bar)` pairs, injective on both
/// sides; `k_u` is the requested exposure ratio over the full key
/// intersection and `density_factor` the interaction subsampling factor that
/// produced this dataset (1 = untouched).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrossDomainDataset {
    pub domain_z: DomainIndex,
    pub domain_zbar: DomainIndex,
    pub overlap: Vec<(usize, usize)>,
    pub k_u: f64,
    pub density_factor: f64,
    /// Size of the full user-key intersection before the `k_u` subset.
    pub full_intersection: usize,
}

/// Exposed overlap count for a given ratio: `round(k_u * intersection)`.
pub fn overlap_subset_size(k_u: f64, intersection: usize) -> usize {
    (k_u * intersection as f64).round() as usize
}

/// Pair two domains, exposing a uniform random `k_u` fraction of the user-key
/// intersection as overlapped. Users left out of the subset stay in both
/// domains as unrelated users.
pub fn build_cross(
    domain_z: DomainIndex,
    domain_zbar: DomainIndex,
    k_u: f64,
    seed: u64,
) -> Result<CrossDomainDataset, DataError> {
    if !(0.0..=1.0).contains(&k_u) {
        return Err(DataError::BadOverlapRatio(k_u));
    }
    // User keys are sorted in both indices; walk them in lockstep.
    let mut shared: Vec<(usize, usize)> = Vec::new();
    let (za, zb) = (domain_z.user_keys(), domain_zbar.user_keys());
    let (mut i, mut j) = (0, 0);
    while i < za.len() && j < zb.len() {
        match za[i].cmp(&zb[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                shared.push((i, j));
                i += 1;
                j += 1;
            }
        }
    }
    let full_intersection = shared.len();
    if full_intersection == 0 && k_u > 0.0 {
        log::warn!("domains share no user keys; overlap set is empty");
    }
    let take = overlap_subset_size(k_u, full_intersection);
    let mut rng = seeds::stream_rng(seed, "overlap", &[]);
    shared.shuffle(&mut rng);
    let mut overlap: Vec<(usize, usize)> = shared.into_iter().take(take).collect();
    overlap.sort_unstable();
    Ok(CrossDomainDataset {
        domain_z,
        domain_zbar,
        overlap,
        k_u,
        density_factor: 1.0,
        full_intersection,
    })
}

/// Keep a uniform `d_s` fraction of each domain's interactions and rebuild the
/// indices, dropping users that fall below 3 interactions. Subsampling is
/// nested: one fixed permutation per (domain, seed), prefix-truncated, so
/// sweeps over `d_s` are monotone. Always apply to the undensified dataset.
pub fn apply_density(
    dataset: &CrossDomainDataset,
    d_s: f64,
    seed: u64,
) -> Result<CrossDomainDataset, DataError> {
    if !(d_s > 0.0 && d_s <= 1.0) {
        return Err(DataError::BadDensity(d_s));
    }
    let min_after = 3;
    let subsample = |index: &DomainIndex, domain_no: u64| -> Result<DomainIndex, DataError> {
        let raw = index.to_raw();
        let mut order: Vec<usize> = (0..raw.len()).collect();
        let mut rng = seeds::stream_rng(seed, "density", &[domain_no]);
        order.shuffle(&mut rng);
        let keep = (d_s * raw.len() as f64).round() as usize;
        let mut kept_flags = vec![false; raw.len()];
        for &e in order.iter().take(keep) {
            kept_flags[e] = true;
        }
        let kept: Vec<_> =
            raw.into_iter().zip(&kept_flags).filter(|(_, &k)| k).map(|(r, _)| r).collect();
        DomainIndex::build(&kept, min_after)
    };
    let domain_z = subsample(&dataset.domain_z, 0)?;
    let domain_zbar = subsample(&dataset.domain_zbar, 1)?;
    // Remap the overlap pairs by key, dropping pairs whose user vanished.
    let overlap: Vec<(usize, usize)> = dataset
        .overlap
        .iter()
        .filter_map(|&(a, b)| {
            let ka = dataset.domain_z.user_key(a);
            let kb = dataset.domain_zbar.user_key(b);
            match (domain_z.user_id(ka), domain_zbar.user_id(kb)) {
                (Some(x), Some(y)) => Some((x, y)),
                _ => None,
            }
        })
        .collect();
    Ok(CrossDomainDataset {
        domain_z,
        domain_zbar,
        overlap,
        k_u: dataset.k_u,
        density_factor: d_s,
        full_intersection: dataset.full_intersection,
    })
}
