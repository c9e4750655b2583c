//! Per-domain bipartite interaction structure, head/tail user labels and
//! sampled matching-neighbor sets for the user-user matching stages.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CrossDomainDataset, DomainSplit, SplitSpec};
use crate::seeds;

#[derive(Error, Debug)]
pub enum GraphError {
    #[error("user {user} has an empty train list; graphs are built from train edges only")]
    EmptyTrainList { user: usize },
}

/// Bipartite train-edge adjacency for one domain. Test and validation items
/// never enter.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InteractionGraph {
    user_items: Vec<Vec<usize>>,
    item_users: Vec<Vec<usize>>,
}

impl InteractionGraph {
    pub fn build(split: &DomainSplit, n_items: usize) -> Result<Self, GraphError> {
        let mut user_items = Vec::with_capacity(split.train.len());
        let mut item_users = vec![Vec::new(); n_items];
        for (u, items) in split.train.iter().enumerate() {
            if items.is_empty() {
                return Err(GraphError::EmptyTrainList { user: u });
            }
            for &i in items {
                item_users[i].push(u);
            }
            user_items.push(items.clone());
        }
        Ok(InteractionGraph { user_items, item_users })
    }

    pub fn n_users(&self) -> usize {
        self.user_items.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_users.len()
    }

    /// Train items of `user`, sorted ascending.
    pub fn items_of(&self, user: usize) -> &[usize] {
        &self.user_items[user]
    }

    pub fn users_of(&self, item: usize) -> &[usize] {
        &self.item_users[item]
    }

    pub fn degree(&self, user: usize) -> usize {
        self.user_items[user].len()
    }

    pub fn n_edges(&self) -> usize {
        self.user_items.iter().map(Vec::len).sum()
    }
}

/// Build both domains' graphs from a split.
pub fn build_graphs(
    dataset: &CrossDomainDataset,
    split: &SplitSpec,
) -> Result<(InteractionGraph, InteractionGraph), GraphError> {
    Ok((
        InteractionGraph::build(&split.z, dataset.domain_z.n_items())?,
        InteractionGraph::build(&split.zbar, dataset.domain_zbar.n_items())?,
    ))
}

/// Degree-based user partition: head iff train degree strictly exceeds
/// `k_head`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeadTailLabels {
    pub k_head: usize,
    head: Vec<bool>,
    head_users: Vec<usize>,
    tail_users: Vec<usize>,
}

impl HeadTailLabels {
    pub fn label(graph: &InteractionGraph, k_head: usize) -> Self {
        let head: Vec<bool> = (0..graph.n_users()).map(|u| graph.degree(u) > k_head).collect();
        let head_users = (0..graph.n_users()).filter(|&u| head[u]).collect();
        let tail_users = (0..graph.n_users()).filter(|&u| !head[u]).collect();
        HeadTailLabels { k_head, head, head_users, tail_users }
    }

    pub fn is_head(&self, user: usize) -> bool {
        self.head[user]
    }

    pub fn head_users(&self) -> &[usize] {
        &self.head_users
    }

    pub fn tail_users(&self) -> &[usize] {
        &self.tail_users
    }

    pub fn n_users(&self) -> usize {
        self.head.len()
    }
}

/// Sampled stand-ins for the conceptual fully connected user-user graphs:
/// per user, up to `sample_size` intra-domain head users, intra-domain tail
/// users and cross-domain users. The user itself is excluded from its intra
/// sets and its own overlapped counterpart from the cross set.
#[derive(Clone, Debug)]
pub struct MatchingNeighborhood {
    pub sample_size: usize,
    pub head_sets: Vec<Vec<usize>>,
    pub tail_sets: Vec<Vec<usize>>,
    /// Indices into the other domain's user space.
    pub cdr_sets: Vec<Vec<usize>>,
}

/// Uniform sample without replacement of `min(take, pool minus exclusion)`
/// entries; output sorted for a canonical aggregation order.
fn sample_pool(
    pool: &[usize],
    exclude: Option<usize>,
    take: usize,
    rng: &mut impl rand::Rng,
) -> Vec<usize> {
    let mut scratch: Vec<usize> = match exclude {
        Some(x) => pool.iter().copied().filter(|&u| u != x).collect(),
        None => pool.to_vec(),
    };
    let n = take.min(scratch.len());
    for k in 0..n {
        let at = rng.random_range(k..scratch.len());
        scratch.swap(k, at);
    }
    scratch.truncate(n);
    scratch.sort_unstable();
    scratch
}

/// Sampling policy for one epoch.
pub struct MatchingConfig {
    pub sample_size: usize,
    /// Use the full pools instead of sampling (intended for small instances).
    pub exact: bool,
    /// Resample per epoch (`seed` xor `epoch`); otherwise epoch 0's sets are
    /// reused for the whole run.
    pub resample_per_epoch: bool,
}

/// Sample matching neighborhoods for one domain.
///
/// `labels` are this domain's labels, `counterpart_of[u]` the overlapped
/// counterpart of `u` in the other domain (if any), `other_n_users` the other
/// domain's user count. Sets are deterministic in `(seed, epoch, user)`.
pub fn sample_matching(
    labels: &HeadTailLabels,
    counterpart_of: &[Option<usize>],
    other_n_users: usize,
    cfg: &MatchingConfig,
    seed: u64,
    epoch: u64,
    domain_no: u64,
) -> MatchingNeighborhood {
    let epoch = if cfg.resample_per_epoch { epoch } else { 0 };
    let n = labels.n_users();
    let all_other: Vec<usize> = (0..other_n_users).collect();
    let mut head_sets = Vec::with_capacity(n);
    let mut tail_sets = Vec::with_capacity(n);
    let mut cdr_sets = Vec::with_capacity(n);
    for u in 0..n {
        if cfg.exact {
            head_sets.push(
                labels.head_users().iter().copied().filter(|&k| k != u).collect::<Vec<_>>(),
            );
            tail_sets.push(
                labels.tail_users().iter().copied().filter(|&k| k != u).collect::<Vec<_>>(),
            );
            let c = counterpart_of[u];
            cdr_sets.push(all_other.iter().copied().filter(|&r| Some(r) != c).collect());
        } else {
            let mut rng = seeds::stream_rng(seed ^ epoch, "matching", &[domain_no, u as u64]);
            head_sets.push(sample_pool(labels.head_users(), Some(u), cfg.sample_size, &mut rng));
            tail_sets.push(sample_pool(labels.tail_users(), Some(u), cfg.sample_size, &mut rng));
            cdr_sets.push(sample_pool(&all_other, counterpart_of[u], cfg.sample_size, &mut rng));
        }
    }
    MatchingNeighborhood { sample_size: cfg.sample_size, head_sets, tail_sets, cdr_sets }
}

/// Counterpart lookup tables for both domains from the overlap pairs.
pub fn counterpart_tables(
    overlap: &[(usize, usize)],
    n_z: usize,
    n_zbar: usize,
) -> (Vec<Option<usize>>, Vec<Option<usize>>) {
    let mut z = vec![None; n_z];
    let mut zbar = vec![None; n_zbar];
    for &(a, b) in overlap {
        z[a] = Some(b);
        zbar[b] = Some(a);
    }
    (z, zbar)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split_with_train(train: Vec<Vec<usize>>) -> DomainSplit {
        let n = train.len();
        DomainSplit { test: vec![None; n], val: vec![None; n], train, excluded: 0 }
    }

    #[test]
    fn adjacency_is_symmetric_and_counts_match() {
        let split = split_with_train(vec![vec![0, 1], vec![1, 2], vec![0, 2]]);
        let g = InteractionGraph::build(&split, 3).unwrap();
        assert_eq!(g.degree(0), 2);
        assert!(g.users_of(0).contains(&0) && g.users_of(1).contains(&0));
        // Handshake: 6 incidences counted from either side.
        let from_users: usize = (0..3).map(|u| g.degree(u)).sum();
        let from_items: usize = (0..3).map(|i| g.users_of(i).len()).sum();
        assert_eq!(from_users, 6);
        assert_eq!(from_items, 6);
        for i in 0..3 {
            for &u in g.users_of(i) {
                assert!(g.items_of(u).contains(&i));
            }
        }
    }

    #[test]
    fn empty_train_list_is_rejected() {
        let split = split_with_train(vec![vec![0], vec![]]);
        assert!(matches!(
            InteractionGraph::build(&split, 1),
            Err(GraphError::EmptyTrainList { user: 1 })
        ));
    }

    #[test]
    fn head_requires_degree_strictly_above_threshold() {
        let split = split_with_train(vec![
            (0..3).collect(),
            (0..7).collect(),
            (0..8).collect(),
        ]);
        let g = InteractionGraph::build(&split, 8).unwrap();
        let labels = HeadTailLabels::label(&g, 7);
        assert_eq!(
            (0..3).map(|u| labels.is_head(u)).collect::<Vec<_>>(),
            vec![false, false, true]
        );
        // k_head = 0 makes everyone head.
        let all_head = HeadTailLabels::label(&g, 0);
        assert_eq!(all_head.head_users().len(), 3);
        assert!(all_head.tail_users().is_empty());
    }

    #[test]
    fn labels_partition_the_user_set() {
        let split = split_with_train((0..20).map(|u| (0..(u % 11 + 1)).collect()).collect());
        let g = InteractionGraph::build(&split, 11).unwrap();
        let labels = HeadTailLabels::label(&g, 5);
        let mut seen: Vec<usize> =
            labels.head_users().iter().chain(labels.tail_users()).copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..20).collect::<Vec<_>>());
    }

    fn toy_labels(n: usize, heads: &[usize]) -> HeadTailLabels {
        let split = split_with_train(
            (0..n).map(|u| if heads.contains(&u) { (0..9).collect() } else { vec![0] }).collect(),
        );
        let g = InteractionGraph::build(&split, 9).unwrap();
        HeadTailLabels::label(&g, 7)
    }

    #[test]
    fn small_pool_is_taken_whole_and_self_excluded() {
        let labels = toy_labels(6, &[0, 1, 2]);
        let counterparts = vec![None; 6];
        let cfg = MatchingConfig { sample_size: 512, exact: false, resample_per_epoch: true };
        let m = sample_matching(&labels, &counterparts, 4, &cfg, 7, 0, 0);
        // A head user sees the other two heads; a tail user sees all three.
        assert_eq!(m.head_sets[0], vec![1, 2]);
        assert_eq!(m.head_sets[5], vec![0, 1, 2]);
        for u in 0..6 {
            assert!(!m.head_sets[u].contains(&u));
            assert!(!m.tail_sets[u].contains(&u));
        }
    }

    #[test]
    fn counterpart_is_excluded_from_cross_sets() {
        let labels = toy_labels(4, &[0]);
        let counterparts = vec![Some(2), None, None, Some(0)];
        let cfg = MatchingConfig { sample_size: 512, exact: false, resample_per_epoch: true };
        let m = sample_matching(&labels, &counterparts, 5, &cfg, 7, 3, 0);
        assert_eq!(m.cdr_sets[0], vec![0, 1, 3, 4]);
        assert_eq!(m.cdr_sets[1], vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn sampling_is_deterministic_in_seed_and_epoch() {
        let labels = toy_labels(40, &(0..17).collect::<Vec<_>>());
        let counterparts = vec![None; 40];
        let cfg = MatchingConfig { sample_size: 5, exact: false, resample_per_epoch: true };
        let a = sample_matching(&labels, &counterparts, 40, &cfg, 9, 2, 1);
        let b = sample_matching(&labels, &counterparts, 40, &cfg, 9, 2, 1);
        assert_eq!(a.head_sets, b.head_sets);
        assert_eq!(a.cdr_sets, b.cdr_sets);
        let c = sample_matching(&labels, &counterparts, 40, &cfg, 9, 3, 1);
        assert_ne!(a.head_sets, c.head_sets);
        // Fixed-neighborhood mode ignores the epoch.
        let fixed = MatchingConfig { resample_per_epoch: false, ..cfg };
        let d = sample_matching(&labels, &counterparts, 40, &fixed, 9, 2, 1);
        let e = sample_matching(&labels, &counterparts, 40, &fixed, 9, 9, 1);
        assert_eq!(d.head_sets, e.head_sets);
        for u in 0..40 {
            assert_eq!(a.head_sets[u].len(), 5);
            assert!(a.head_sets[u].windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn exact_mode_returns_full_pools() {
        let labels = toy_labels(5, &[0, 4]);
        let counterparts = vec![None, Some(1), None, None, None];
        let cfg = MatchingConfig { sample_size: 2, exact: true, resample_per_epoch: true };
        let m = sample_matching(&labels, &counterparts, 3, &cfg, 1, 0, 0);
        assert_eq!(m.head_sets[0], vec![4]);
        assert_eq!(m.tail_sets[0], vec![1, 2, 3]);
        assert_eq!(m.cdr_sets[1], vec![0, 2]);
        assert_eq!(m.cdr_sets[0], vec![0, 1, 2]);
    }
}
