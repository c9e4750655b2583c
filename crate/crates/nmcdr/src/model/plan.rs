//! Precomputed index arrays and constant coefficient tensors that wire one
//! domain's users into the tape ops.

use std::rc::Rc;

use crate::graph::{InteractionGraph, MatchingNeighborhood};
use crate::numerics::Tensor;

/// Mean-aggregation plan over variable-size row sets: gather `flat` rows,
/// scatter-add them onto their `owners`, then scale by `recip` (1/set-size,
/// zero for empty sets). `bias_mask` is a column with 1 for owners whose set
/// is non-empty: an empty message sum carries no bias term.
#[derive(Clone, Debug)]
pub struct GatherMeanPlan {
    pub flat: Rc<Vec<usize>>,
    pub owners: Rc<Vec<usize>>,
    pub recip: Tensor,
    pub bias_mask: Tensor,
}

impl GatherMeanPlan {
    pub fn from_sets(sets: &[Vec<usize>], n_owners: usize, d: usize) -> Self {
        let mut flat = Vec::new();
        let mut owners = Vec::new();
        let mut recip = Tensor::zeros(n_owners, d);
        let mut bias_mask = Tensor::zeros(n_owners, 1);
        for (owner, set) in sets.iter().enumerate() {
            if set.is_empty() {
                continue;
            }
            let r = 1.0 / set.len() as f64;
            for &member in set {
                flat.push(member);
                owners.push(owner);
            }
            for j in 0..d {
                recip.set(owner, j, r);
            }
            bias_mask.set(owner, 0, 1.0);
        }
        GatherMeanPlan { flat: Rc::new(flat), owners: Rc::new(owners), recip, bias_mask }
    }
}

/// Train-edge adjacency of one domain in flat form: edges sorted by
/// (user, item) with per-user segment offsets, plus the 1/|N_u| scaling.
#[derive(Clone, Debug)]
pub struct AdjacencyPlan {
    pub n_users: usize,
    pub n_items: usize,
    pub edge_users: Rc<Vec<usize>>,
    pub edge_items: Rc<Vec<usize>>,
    pub offsets: Rc<Vec<usize>>,
    pub recip_deg: Tensor,
}

impl AdjacencyPlan {
    pub fn build(graph: &InteractionGraph, d: usize) -> Self {
        let n = graph.n_users();
        let mut edge_users = Vec::with_capacity(graph.n_edges());
        let mut edge_items = Vec::with_capacity(graph.n_edges());
        let mut offsets = Vec::with_capacity(n + 1);
        let mut recip_deg = Tensor::zeros(n, d);
        offsets.push(0);
        for u in 0..n {
            let items = graph.items_of(u);
            for &i in items {
                edge_users.push(u);
                edge_items.push(i);
            }
            offsets.push(edge_users.len());
            let r = 1.0 / items.len() as f64;
            for j in 0..d {
                recip_deg.set(u, j, r);
            }
        }
        AdjacencyPlan {
            n_users: n,
            n_items: graph.n_items(),
            edge_users: Rc::new(edge_users),
            edge_items: Rc::new(edge_items),
            offsets: Rc::new(offsets),
            recip_deg,
        }
    }
}

/// Overlapped-user wiring for one direction of the inter stage: gather the
/// counterpart rows from the other domain and scatter the transformed
/// messages back onto this domain's overlapped rows.
#[derive(Clone, Debug)]
pub struct OverlapPlan {
    /// Counterpart row in the other domain, one per overlapped user.
    pub gather_other: Rc<Vec<usize>>,
    /// Destination row in this domain, parallel to `gather_other`.
    pub scatter_self: Rc<Vec<usize>>,
}

impl OverlapPlan {
    /// `pairs` as (this-domain user, other-domain user), any order.
    pub fn build(pairs: impl Iterator<Item = (usize, usize)>) -> Self {
        let mut sorted: Vec<(usize, usize)> = pairs.collect();
        sorted.sort_unstable();
        let scatter_self = sorted.iter().map(|&(a, _)| a).collect();
        let gather_other = sorted.iter().map(|&(_, b)| b).collect();
        OverlapPlan { gather_other: Rc::new(gather_other), scatter_self: Rc::new(scatter_self) }
    }

    pub fn len(&self) -> usize {
        self.scatter_self.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scatter_self.is_empty()
    }
}

/// Everything the stages need for one domain in one epoch.
#[derive(Clone, Debug)]
pub struct DomainPlan {
    pub adjacency: AdjacencyPlan,
    pub head: GatherMeanPlan,
    pub tail: GatherMeanPlan,
    pub cdr: GatherMeanPlan,
    pub overlap: OverlapPlan,
}

impl DomainPlan {
    /// `overlap_pairs` as (this-domain user, other-domain user).
    pub fn build(
        graph: &InteractionGraph,
        matching: &MatchingNeighborhood,
        overlap_pairs: impl Iterator<Item = (usize, usize)>,
        d: usize,
    ) -> Self {
        let n = graph.n_users();
        DomainPlan {
            adjacency: AdjacencyPlan::build(graph, d),
            head: GatherMeanPlan::from_sets(&matching.head_sets, n, d),
            tail: GatherMeanPlan::from_sets(&matching.tail_sets, n, d),
            cdr: GatherMeanPlan::from_sets(&matching.cdr_sets, n, d),
            overlap: OverlapPlan::build(overlap_pairs),
        }
    }
}
