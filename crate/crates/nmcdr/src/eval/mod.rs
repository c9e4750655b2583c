//! Leave-one-out ranking evaluation and the compressed-model stability
//! diagnostic.

pub mod stability;

use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{eval_negatives, CrossDomainDataset, DataError, DomainSplit, SplitSpec};
use crate::graph::{
    build_graphs, counterpart_tables, sample_matching, GraphError, HeadTailLabels, MatchingConfig,
};
use crate::model::{
    forward_all_with, predict_logits, AblationFlags, DomainPlan, DomainTag, ModelConfig, ModelError,
    ModelParams, PredHeadNodes,
};
use crate::numerics::{NumericsError, Tape, Tensor};
use crate::seeds;

#[derive(Error, Debug)]
pub enum EvalError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("duplicate candidate item {item} for user {user}")]
    DuplicateCandidate { user: usize, item: usize },
    #[error("candidate list for user {user} has {got} entries, expected {want}")]
    CandidateCount { user: usize, got: usize, want: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Sampled negatives per test positive.
    pub negatives: usize,
    /// Ranking cutoff.
    pub k: usize,
    /// Emit per-user rank rows.
    pub per_user: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { negatives: 199, k: 10, per_user: false }
    }
}

/// Which held-out item to rank.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalTarget {
    Test,
    Validation,
}

/// Mid-rank of the positive among the candidates: 1 + (strictly better
/// negatives) + (tied negatives)/2. Hit iff the rank is within `k`; the gain
/// is 1/log2(rank+1), zero past the cutoff.
pub fn rank_metrics(scores: &[f64], positive: usize, k: usize) -> (bool, f64) {
    let pos = scores[positive];
    let mut greater = 0usize;
    let mut ties = 0usize;
    for (i, &s) in scores.iter().enumerate() {
        if i == positive {
            continue;
        }
        if s > pos {
            greater += 1;
        } else if s == pos {
            ties += 1;
        }
    }
    let rank = 1.0 + greater as f64 + ties as f64 / 2.0;
    let hit = rank <= k as f64;
    let ndcg = if hit { 1.0 / (rank + 1.0).log2() } else { 0.0 };
    (hit, ndcg)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub hr10: f64,
    pub ndcg10: f64,
    pub users: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerUserRecord {
    pub domain: String,
    pub user: String,
    pub rank: f64,
    pub hit: u8,
    pub ndcg: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub z: DomainReport,
    pub zbar: DomainReport,
    /// Users without a held-out item (below the interaction minimum).
    pub skipped_users: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_user: Option<Vec<PerUserRecord>>,
}

impl EvalReport {
    pub fn mean_ndcg(&self) -> f64 {
        (self.z.ndcg10 + self.zbar.ndcg10) / 2.0
    }

    pub fn mean_hr(&self) -> f64 {
        (self.z.hr10 + self.zbar.hr10) / 2.0
    }
}

/// Extracted tensors needed to score pairs outside the big stage tape.
struct ScoringSlice {
    user_repr: Tensor,
    item_emb: Tensor,
    hidden: Vec<(Tensor, Tensor)>,
    out: (Tensor, Tensor),
}

impl ScoringSlice {
    fn extract(
        params: &ModelParams,
        tag: DomainTag,
        user_repr: Tensor,
    ) -> Result<Self, ModelError> {
        let mut hidden = Vec::new();
        for layer in 0..params.dims.mlp_hidden.len() {
            hidden.push((
                params.tensor(tag, &format!("pred_w{layer}"))?.clone(),
                params.tensor(tag, &format!("pred_b{layer}"))?.clone(),
            ));
        }
        Ok(ScoringSlice {
            user_repr,
            item_emb: params.tensor(tag, "item_emb")?.clone(),
            hidden,
            out: (
                params.tensor(tag, "pred_w_out")?.clone(),
                params.tensor(tag, "pred_b_out")?.clone(),
            ),
        })
    }

    /// Sigmoid scores for (user, item) id pairs through the shared stack.
    fn scores(&self, users: &[usize], items: &[usize]) -> Result<Vec<f64>, EvalError> {
        let mut t = Tape::new();
        let repr = t.leaf(self.user_repr.clone());
        let item_emb = t.leaf(self.item_emb.clone());
        let hidden = self
            .hidden
            .iter()
            .map(|(w, b)| (t.leaf(w.clone()), t.leaf(b.clone())))
            .collect::<Vec<_>>();
        let out = (t.leaf(self.out.0.clone()), t.leaf(self.out.1.clone()));
        let head = PredHeadNodes { item_emb, hidden, out };
        let logits =
            predict_logits(&mut t, &head, repr, Rc::new(users.to_vec()), Rc::new(items.to_vec()))?;
        let probs = t.sigmoid(logits)?;
        Ok(t.value(probs).data().to_vec())
    }
}

/// Build eval-time matching neighborhoods and plans, run the forward pass and
/// return each domain's final-stage representations.
fn final_representations(
    params: &ModelParams,
    dataset: &CrossDomainDataset,
    split: &SplitSpec,
    model_cfg: &ModelConfig,
    flags: &AblationFlags,
    seed: u64,
) -> Result<(Tensor, Tensor), EvalError> {
    let (graph_z, graph_zbar) = build_graphs(dataset, split)?;
    let labels_z = HeadTailLabels::label(&graph_z, model_cfg.k_head);
    let labels_zbar = HeadTailLabels::label(&graph_zbar, model_cfg.k_head);
    let (cp_z, cp_zbar) =
        counterpart_tables(&dataset.overlap, graph_z.n_users(), graph_zbar.n_users());
    let mcfg = MatchingConfig {
        sample_size: model_cfg.matching_size,
        exact: model_cfg.exact_matching,
        resample_per_epoch: false,
    };
    let eval_seed = seeds::stream_seed(seed, "matching-eval", &[]);
    let match_z = sample_matching(&labels_z, &cp_z, graph_zbar.n_users(), &mcfg, eval_seed, 0, 0);
    let match_zbar =
        sample_matching(&labels_zbar, &cp_zbar, graph_z.n_users(), &mcfg, eval_seed, 0, 1);
    let d = params.dims.d();
    let plan_z = DomainPlan::build(&graph_z, &match_z, dataset.overlap.iter().copied(), d);
    let plan_zbar =
        DomainPlan::build(&graph_zbar, &match_zbar, dataset.overlap.iter().map(|&(a, b)| (b, a)), d);
    let fwd = forward_all_with(params, &plan_z, &plan_zbar, flags, model_cfg.detach_cross_inputs)?;
    let repr_z = fwd.tape.value(fwd.z.g4).clone();
    let repr_zbar = fwd.tape.value(fwd.zbar.g4).clone();
    Ok((repr_z, repr_zbar))
}

/// Leave-one-out evaluation over both domains: each held-out positive is
/// ranked against `negatives` reproducible sampled negatives through the full
/// forward path.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    params: &ModelParams,
    dataset: &CrossDomainDataset,
    split: &SplitSpec,
    model_cfg: &ModelConfig,
    flags: &AblationFlags,
    eval_cfg: &EvalConfig,
    seed: u64,
    target: EvalTarget,
) -> Result<EvalReport, EvalError> {
    let (repr_z, repr_zbar) =
        final_representations(params, dataset, split, model_cfg, flags, seed)?;
    let mut per_user = if eval_cfg.per_user { Some(Vec::new()) } else { None };
    let z = evaluate_domain(
        params,
        DomainTag::Z,
        &dataset.domain_z,
        &split.z,
        repr_z,
        eval_cfg,
        seed,
        target,
        &mut per_user,
    )?;
    let zbar = evaluate_domain(
        params,
        DomainTag::Zbar,
        &dataset.domain_zbar,
        &split.zbar,
        repr_zbar,
        eval_cfg,
        seed,
        target,
        &mut per_user,
    )?;
    let skipped_users = split.z.excluded + split.zbar.excluded;
    Ok(EvalReport { z, zbar, skipped_users, per_user })
}

#[allow(clippy::too_many_arguments)]
fn evaluate_domain(
    params: &ModelParams,
    tag: DomainTag,
    index: &crate::data::DomainIndex,
    split: &DomainSplit,
    user_repr: Tensor,
    eval_cfg: &EvalConfig,
    seed: u64,
    target: EvalTarget,
    per_user: &mut Option<Vec<PerUserRecord>>,
) -> Result<DomainReport, EvalError> {
    let slice = ScoringSlice::extract(params, tag, user_repr)?;
    let held = match target {
        EvalTarget::Test => &split.test,
        EvalTarget::Validation => &split.val,
    };
    let mut hits = 0.0f64;
    let mut gains = 0.0f64;
    let mut evaluated = 0usize;

    // Chunked scoring keeps tape buffers bounded.
    const CHUNK: usize = 64;
    let users_with_target: Vec<usize> =
        (0..index.n_users()).filter(|&u| held[u].is_some()).collect();
    for chunk in users_with_target.chunks(CHUNK) {
        let mut users_idx = Vec::new();
        let mut items_idx = Vec::new();
        let mut spans = Vec::new();
        for &u in chunk {
            let positive = held[u].expect("filtered to users with a held-out item");
            let negatives = eval_negatives(index, u, eval_cfg.negatives, seed, tag.no())?;
            let mut candidates = Vec::with_capacity(1 + negatives.len());
            candidates.push(positive);
            candidates.extend(negatives);
            let mut check = candidates.clone();
            check.sort_unstable();
            check.dedup();
            if check.len() != candidates.len() {
                return Err(EvalError::DuplicateCandidate { user: u, item: positive });
            }
            if candidates.len() != eval_cfg.negatives + 1 {
                return Err(EvalError::CandidateCount {
                    user: u,
                    got: candidates.len(),
                    want: eval_cfg.negatives + 1,
                });
            }
            spans.push((u, users_idx.len(), candidates.len()));
            for &item in &candidates {
                users_idx.push(u);
                items_idx.push(item);
            }
        }
        let scores = slice.scores(&users_idx, &items_idx)?;
        for &(u, start, len) in &spans {
            let window = &scores[start..start + len];
            // The positive is always the first candidate of its span.
            let (hit, ndcg) = rank_metrics(window, 0, eval_cfg.k);
            hits += hit as u64 as f64;
            gains += ndcg;
            evaluated += 1;
            if let Some(rows) = per_user.as_mut() {
                let pos = window[0];
                let greater = window[1..].iter().filter(|&&s| s > pos).count();
                let ties = window[1..].iter().filter(|&&s| s == pos).count();
                rows.push(PerUserRecord {
                    domain: tag.key().to_string(),
                    user: index.user_key(u).to_string(),
                    rank: 1.0 + greater as f64 + ties as f64 / 2.0,
                    hit: hit as u8,
                    ndcg,
                });
            }
        }
    }
    let n = evaluated.max(1) as f64;
    Ok(DomainReport { hr10: hits / n, ndcg10: gains / n, users: evaluated })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_ranked_positive_scores_full_marks() {
        let mut scores = vec![0.1; 200];
        scores[7] = 0.99;
        let (hit, ndcg) = rank_metrics(&scores, 7, 10);
        assert!(hit);
        assert_eq!(ndcg, 1.0);
    }

    #[test]
    fn rank_eleven_misses_the_cutoff() {
        let mut scores = vec![0.0; 200];
        for (i, s) in scores.iter_mut().enumerate().take(10) {
            *s = 1.0 + i as f64;
        }
        scores[50] = 0.5;
        let (hit, ndcg) = rank_metrics(&scores, 50, 10);
        assert!(!hit);
        assert_eq!(ndcg, 0.0);
    }

    #[test]
    fn rank_two_gain_matches_hand_formula() {
        let mut scores = vec![0.0; 200];
        scores[3] = 2.0;
        scores[90] = 1.0;
        let (hit, ndcg) = rank_metrics(&scores, 90, 10);
        assert!(hit);
        assert!((ndcg - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((ndcg - 0.6309).abs() < 1e-4);
    }

    #[test]
    fn ties_count_half() {
        // Positive tied with two negatives and one strictly above:
        // rank = 1 + 1 + 2/2 = 3.
        let scores = vec![0.9, 0.5, 0.5, 0.5, 0.1];
        let (hit, ndcg) = rank_metrics(&scores, 1, 10);
        assert!(hit);
        assert!((ndcg - 1.0 / 4f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn uniform_score_shift_leaves_metrics_unchanged() {
        let mut rng = crate::seeds::stream_rng(3, "shift", &[]);
        use rand::Rng;
        for _ in 0..50 {
            let scores: Vec<f64> = (0..200).map(|_| rng.random_range(-2.0..2.0)).collect();
            let shifted: Vec<f64> = scores.iter().map(|s| s + 17.25).collect();
            let pos = rng.random_range(0..200);
            assert_eq!(rank_metrics(&scores, pos, 10), rank_metrics(&shifted, pos, 10));
        }
    }
}
