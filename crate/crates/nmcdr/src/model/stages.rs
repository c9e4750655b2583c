//! Tape builders for the four stages and the shared prediction head.
//!
//! Every stage reads row-major user matrices (one row per user of the whole
//! domain) so batches only enter at the prediction gather. Message means over
//! empty sets contribute exactly zero, bias included.

use std::rc::Rc;

use crate::numerics::{NodeId, Tape, Tensor};

use super::plan::{AdjacencyPlan, DomainPlan, GatherMeanPlan, OverlapPlan};
use super::{AblationFlags, DomainTag, ModelError, ModelParams};

/// Node handles for one domain's parameters on a tape.
#[derive(Clone, Debug)]
pub struct DomainParamNodes {
    pub user_emb: NodeId,
    pub item_emb: NodeId,
    pub w_hge: NodeId,
    pub b_hge: NodeId,
    pub w_head: NodeId,
    pub b_head: NodeId,
    pub w_tail: NodeId,
    pub b_tail: NodeId,
    pub w_h: NodeId,
    pub b_h: NodeId,
    pub w_t: NodeId,
    pub b_t: NodeId,
    pub w_self: NodeId,
    pub b_self: NodeId,
    pub w_other: NodeId,
    pub b_other: NodeId,
    pub w_cross: NodeId,
    pub w_s: NodeId,
    pub b_s: NodeId,
    pub w_o: NodeId,
    pub b_o: NodeId,
    pub w_ref: NodeId,
    pub b_ref: NodeId,
    pub pred_hidden: Vec<(NodeId, NodeId)>,
    pub pred_out: (NodeId, NodeId),
}

impl DomainParamNodes {
    fn resolve(
        ids: &std::collections::BTreeMap<String, NodeId>,
        params: &ModelParams,
        tag: DomainTag,
    ) -> Result<Self, ModelError> {
        let get = |role: &str| -> Result<NodeId, ModelError> {
            let name = ModelParams::name(tag, role);
            ids.get(&name).copied().ok_or(ModelError::MissingParam(name))
        };
        let mut pred_hidden = Vec::new();
        for layer in 0..params.dims.mlp_hidden.len() {
            pred_hidden.push((get(&format!("pred_w{layer}"))?, get(&format!("pred_b{layer}"))?));
        }
        Ok(DomainParamNodes {
            user_emb: get("user_emb")?,
            item_emb: get("item_emb")?,
            w_hge: get("w_hge")?,
            b_hge: get("b_hge")?,
            w_head: get("w_head")?,
            b_head: get("b_head")?,
            w_tail: get("w_tail")?,
            b_tail: get("b_tail")?,
            w_h: get("w_h")?,
            b_h: get("b_h")?,
            w_t: get("w_t")?,
            b_t: get("b_t")?,
            w_self: get("w_self")?,
            b_self: get("b_self")?,
            w_other: get("w_other")?,
            b_other: get("b_other")?,
            w_cross: get("w_cross")?,
            w_s: get("w_s")?,
            b_s: get("b_s")?,
            w_o: get("w_o")?,
            b_o: get("b_o")?,
            w_ref: get("w_ref")?,
            b_ref: get("b_ref")?,
            pred_hidden,
            pred_out: (get("pred_w_out")?, get("pred_b_out")?),
        })
    }
}

/// Mean of gathered `src` rows per owner (zero rows for owners with no
/// members; `recip` carries the 1/count coefficients).
fn mean_rows(
    t: &mut Tape,
    src: NodeId,
    flat: Rc<Vec<usize>>,
    owners: Rc<Vec<usize>>,
    recip: &Tensor,
    n_rows: usize,
) -> Result<NodeId, ModelError> {
    let gathered = t.row_gather(src, flat)?;
    let summed = t.row_scatter_add(gathered, owners, n_rows)?;
    let recip = t.leaf(recip.clone());
    Ok(t.hadamard(summed, recip)?)
}

/// Mean of `src` rows over each owner's set (zero rows for empty sets).
fn gather_mean(
    t: &mut Tape,
    src: NodeId,
    plan: &GatherMeanPlan,
    n_rows: usize,
) -> Result<NodeId, ModelError> {
    mean_rows(t, src, plan.flat.clone(), plan.owners.clone(), &plan.recip, n_rows)
}

/// Bias replicated onto the rows whose message set is non-empty; empty sets
/// stay all-zero because their (empty) message sum never carried the bias.
fn masked_bias(t: &mut Tape, mask: &Tensor, bias: NodeId) -> Result<NodeId, ModelError> {
    let m = t.leaf(mask.clone());
    Ok(t.matmul(m, bias)?)
}

fn one_minus(t: &mut Tape, x: NodeId) -> Result<NodeId, ModelError> {
    let (r, c) = t.value(x).shape();
    let ones = t.leaf(Tensor::filled(r, c, 1.0));
    let neg = t.scale(x, -1.0)?;
    Ok(t.add(ones, neg)?)
}

/// Sigmoid-gated tanh fusion shared by the intra and inter stages:
/// `tanh((1-H) ⊙ a + H ⊙ b)` with `H = σ(a·Wa + ba + b·Wb + bb)`.
fn gated_fusion(
    t: &mut Tape,
    a: NodeId,
    b: NodeId,
    (w_a, b_a): (NodeId, NodeId),
    (w_b, b_b): (NodeId, NodeId),
) -> Result<NodeId, ModelError> {
    let term_a = t.matmul(a, w_a)?;
    let term_a = t.add(term_a, b_a)?;
    let term_b = t.matmul(b, w_b)?;
    let term_b = t.add(term_b, b_b)?;
    let pre = t.add(term_a, term_b)?;
    let gate = t.sigmoid(pre)?;
    let keep = one_minus(t, gate)?;
    let from_a = t.hadamard(keep, a)?;
    let from_b = t.hadamard(gate, b)?;
    let mixed = t.add(from_a, from_b)?;
    Ok(t.tanh(mixed)?)
}

/// Heterogeneous graph encoder: each user's embedding plus the mean of its
/// interacted items' embeddings, both mapped by the shared encoder matrix.
pub fn encode_stage(
    t: &mut Tape,
    user_emb: NodeId,
    item_emb: NodeId,
    w_hge: NodeId,
    b_hge: NodeId,
    adj: &AdjacencyPlan,
) -> Result<NodeId, ModelError> {
    let item_mean = mean_rows(
        t,
        item_emb,
        adj.edge_items.clone(),
        adj.edge_users.clone(),
        &adj.recip_deg,
        adj.n_users,
    )?;
    let neighbor_msg = t.matmul(item_mean, w_hge)?;
    let neighbor_msg = t.add(neighbor_msg, b_hge)?;
    let self_msg = t.matmul(user_emb, w_hge)?;
    let pre = t.add(self_msg, neighbor_msg)?;
    Ok(t.relu(pre)?)
}

/// Intra-domain matching: separate head/tail mean messages fused by the
/// fine-grained gate, added residually onto the encoder output.
#[allow(clippy::too_many_arguments)]
pub fn intra_stage(
    t: &mut Tape,
    u_g1: NodeId,
    head: &GatherMeanPlan,
    tail: &GatherMeanPlan,
    (w_head, b_head): (NodeId, NodeId),
    (w_tail, b_tail): (NodeId, NodeId),
    gate_head: (NodeId, NodeId),
    gate_tail: (NodeId, NodeId),
) -> Result<NodeId, ModelError> {
    let n = t.value(u_g1).rows();
    let channel = |t: &mut Tape, plan: &GatherMeanPlan, w: NodeId, b: NodeId| {
        let mean = gather_mean(t, u_g1, plan, n)?;
        let mapped = t.matmul(mean, w)?;
        let bias = masked_bias(t, &plan.bias_mask, b)?;
        let pre = t.add(mapped, bias)?;
        Ok::<NodeId, ModelError>(t.relu(pre)?)
    };
    let u_head = channel(t, head, w_head, b_head)?;
    let u_tail = channel(t, tail, w_tail, b_tail)?;
    let fused = gated_fusion(t, u_head, u_tail, gate_head, gate_tail)?;
    Ok(t.add(fused, u_g1)?)
}

/// Cross-domain matching for one direction. `u_g2_other` lives in the other
/// domain's user space; non-overlapped users receive a zero self message.
#[allow(clippy::too_many_arguments)]
pub fn inter_stage(
    t: &mut Tape,
    u_g2: NodeId,
    u_g2_other: NodeId,
    overlap: &OverlapPlan,
    cdr: &GatherMeanPlan,
    (w_self, b_self): (NodeId, NodeId),
    (w_other, b_other): (NodeId, NodeId),
    w_cross_self: NodeId,
    w_cross_other: NodeId,
    gate_self: (NodeId, NodeId),
    gate_other: (NodeId, NodeId),
) -> Result<NodeId, ModelError> {
    let n = t.value(u_g2).rows();
    let d = t.value(u_g2).cols();

    let u_self = if overlap.is_empty() {
        t.leaf(Tensor::zeros(n, d))
    } else {
        let counterpart = t.row_gather(u_g2_other, overlap.gather_other.clone())?;
        let mapped = t.matmul(counterpart, w_self)?;
        let m_self = t.add(mapped, b_self)?;
        let activated = t.relu(m_self)?;
        t.row_scatter_add(activated, overlap.scatter_self.clone(), n)?
    };

    let other_mean = gather_mean(t, u_g2_other, cdr, n)?;
    let other_mapped = t.matmul(other_mean, w_other)?;
    let other_bias = masked_bias(t, &cdr.bias_mask, b_other)?;
    let other_pre = t.add(other_mapped, other_bias)?;
    let u_other = t.relu(other_pre)?;

    // u_g2·W_cross + u_self·(I − W_cross_other)
    let own = t.matmul(u_g2, w_cross_self)?;
    let self_mapped = t.matmul(u_self, w_cross_other)?;
    let self_neg = t.scale(self_mapped, -1.0)?;
    let self_term = t.add(u_self, self_neg)?;
    let fused_star = t.add(own, self_term)?;

    let gated = gated_fusion(t, fused_star, u_other, gate_self, gate_other)?;
    Ok(t.add(gated, u_g2)?)
}

/// Item complementing: per-edge virtual link strengths (a softmax over each
/// user's interacted items) re-aggregate the item embeddings into a residual
/// correction. Returns `(u_g4, alpha)` where `alpha` is the per-edge strength
/// column in adjacency order.
pub fn complement_stage(
    t: &mut Tape,
    u_g3: NodeId,
    item_emb: NodeId,
    w_ref: NodeId,
    b_ref: NodeId,
    adj: &AdjacencyPlan,
) -> Result<(NodeId, NodeId), ModelError> {
    let d = t.value(u_g3).cols();
    let user_rows = t.row_gather(u_g3, adj.edge_users.clone())?;
    let item_rows = t.row_gather(item_emb, adj.edge_items.clone())?;
    let prod = t.hadamard(user_rows, item_rows)?;
    let ones_col = t.leaf(Tensor::filled(d, 1, 1.0));
    let dots = t.matmul(prod, ones_col)?;
    let alpha = t.segment_softmax(dots, adj.offsets.clone())?;
    let ones_row = t.leaf(Tensor::filled(1, d, 1.0));
    let alpha_wide = t.matmul(alpha, ones_row)?;
    let weighted = t.hadamard(item_rows, alpha_wide)?;
    let context = t.row_scatter_add(weighted, adj.edge_users.clone(), adj.n_users)?;
    let mapped = t.matmul(context, w_ref)?;
    let corrected = t.add(mapped, b_ref)?;
    Ok((t.add(u_g3, corrected)?, alpha))
}

/// Node handles of one domain's shared prediction stack plus its item table.
#[derive(Clone, Debug)]
pub struct PredHeadNodes {
    pub item_emb: NodeId,
    pub hidden: Vec<(NodeId, NodeId)>,
    pub out: (NodeId, NodeId),
}

impl DomainParamNodes {
    pub fn pred_head(&self) -> PredHeadNodes {
        PredHeadNodes {
            item_emb: self.item_emb,
            hidden: self.pred_hidden.clone(),
            out: self.pred_out,
        }
    }
}

/// Logits of the shared prediction stack for (user, item) index pairs:
/// ReLU MLP over the concatenated representations, scalar output per pair.
pub fn predict_logits(
    t: &mut Tape,
    head: &PredHeadNodes,
    user_repr: NodeId,
    users: Rc<Vec<usize>>,
    items: Rc<Vec<usize>>,
) -> Result<NodeId, ModelError> {
    let u = t.row_gather(user_repr, users)?;
    let v = t.row_gather(head.item_emb, items)?;
    let mut h = t.concat_cols(u, v)?;
    for &(w, b) in &head.hidden {
        let lin = t.matmul(h, w)?;
        let lin = t.add(lin, b)?;
        h = t.relu(lin)?;
    }
    let (w_out, b_out) = head.out;
    let out = t.matmul(h, w_out)?;
    Ok(t.add(out, b_out)?)
}

/// Representation stages for one domain.
#[derive(Clone, Copy, Debug)]
pub struct StageNodes {
    /// Raw user embedding table.
    pub g0: NodeId,
    pub g1: NodeId,
    pub g2: NodeId,
    pub g3: NodeId,
    pub g4: NodeId,
}

impl StageNodes {
    pub fn of(&self, stage: CompanionStage) -> NodeId {
        match stage {
            CompanionStage::G0 => self.g0,
            CompanionStage::G1 => self.g1,
            CompanionStage::G2 => self.g2,
            CompanionStage::G3 => self.g3,
            CompanionStage::Final => self.g4,
        }
    }
}

/// Which representation feeds a prediction head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompanionStage {
    G0,
    G1,
    G2,
    G3,
    Final,
}

/// A fully built forward pass over both domains.
pub struct ForwardPass {
    pub tape: Tape,
    pub z: StageNodes,
    pub zbar: StageNodes,
    pub z_params: DomainParamNodes,
    pub zbar_params: DomainParamNodes,
}

impl ForwardPass {
    pub fn stages(&self, tag: DomainTag) -> &StageNodes {
        match tag {
            DomainTag::Z => &self.z,
            DomainTag::Zbar => &self.zbar,
        }
    }

    pub fn domain_params(&self, tag: DomainTag) -> &DomainParamNodes {
        match tag {
            DomainTag::Z => &self.z_params,
            DomainTag::Zbar => &self.zbar_params,
        }
    }

    /// Logit head for one stage's representation on (user, item) pairs.
    pub fn head_logits(
        &mut self,
        tag: DomainTag,
        stage: CompanionStage,
        users: Rc<Vec<usize>>,
        items: Rc<Vec<usize>>,
    ) -> Result<NodeId, ModelError> {
        let repr = self.stages(tag).of(stage);
        let head = self.domain_params(tag).pred_head();
        predict_logits(&mut self.tape, &head, repr, users, items)
    }

    /// Companion heads active under `flags`, final head excluded.
    pub fn companion_stages(flags: &AblationFlags) -> Vec<CompanionStage> {
        let mut stages = vec![CompanionStage::G0, CompanionStage::G1];
        if flags.use_intra_matching {
            stages.push(CompanionStage::G2);
        }
        if flags.use_inter_matching {
            stages.push(CompanionStage::G3);
        }
        stages
    }
}

/// Build the full two-domain forward pass on a fresh tape. Disabled stages
/// pass their input through unchanged.
pub fn forward_all(
    params: &ModelParams,
    plan_z: &DomainPlan,
    plan_zbar: &DomainPlan,
    flags: &AblationFlags,
) -> Result<ForwardPass, ModelError> {
    forward_all_with(params, plan_z, plan_zbar, flags, false)
}

/// [`forward_all`] with control over cross-domain gradient flow: when
/// `detach_cross` is set, each inter stage reads the other domain's
/// representations without backpropagating into them.
pub fn forward_all_with(
    params: &ModelParams,
    plan_z: &DomainPlan,
    plan_zbar: &DomainPlan,
    flags: &AblationFlags,
    detach_cross: bool,
) -> Result<ForwardPass, ModelError> {
    let mut t = Tape::new();
    let ids = params.set.mount(&mut t)?;
    let pz = DomainParamNodes::resolve(&ids, params, DomainTag::Z)?;
    let pzb = DomainParamNodes::resolve(&ids, params, DomainTag::Zbar)?;

    let g1_z = encode_stage(&mut t, pz.user_emb, pz.item_emb, pz.w_hge, pz.b_hge, &plan_z.adjacency)?;
    let g1_zb =
        encode_stage(&mut t, pzb.user_emb, pzb.item_emb, pzb.w_hge, pzb.b_hge, &plan_zbar.adjacency)?;

    let (g2_z, g2_zb) = if flags.use_intra_matching {
        (
            intra_stage(
                &mut t,
                g1_z,
                &plan_z.head,
                &plan_z.tail,
                (pz.w_head, pz.b_head),
                (pz.w_tail, pz.b_tail),
                (pz.w_h, pz.b_h),
                (pz.w_t, pz.b_t),
            )?,
            intra_stage(
                &mut t,
                g1_zb,
                &plan_zbar.head,
                &plan_zbar.tail,
                (pzb.w_head, pzb.b_head),
                (pzb.w_tail, pzb.b_tail),
                (pzb.w_h, pzb.b_h),
                (pzb.w_t, pzb.b_t),
            )?,
        )
    } else {
        (g1_z, g1_zb)
    };

    let (g3_z, g3_zb) = if flags.use_inter_matching {
        let (from_zb, from_z) = if detach_cross {
            (t.detach(g2_zb)?, t.detach(g2_z)?)
        } else {
            (g2_zb, g2_z)
        };
        (
            inter_stage(
                &mut t,
                g2_z,
                from_zb,
                &plan_z.overlap,
                &plan_z.cdr,
                (pz.w_self, pz.b_self),
                (pz.w_other, pz.b_other),
                pz.w_cross,
                pzb.w_cross,
                (pz.w_s, pz.b_s),
                (pz.w_o, pz.b_o),
            )?,
            inter_stage(
                &mut t,
                g2_zb,
                from_z,
                &plan_zbar.overlap,
                &plan_zbar.cdr,
                (pzb.w_self, pzb.b_self),
                (pzb.w_other, pzb.b_other),
                pzb.w_cross,
                pz.w_cross,
                (pzb.w_s, pzb.b_s),
                (pzb.w_o, pzb.b_o),
            )?,
        )
    } else {
        (g2_z, g2_zb)
    };

    let (g4_z, g4_zb) = if flags.use_complementing {
        let (z, _) =
            complement_stage(&mut t, g3_z, pz.item_emb, pz.w_ref, pz.b_ref, &plan_z.adjacency)?;
        let (zb, _) =
            complement_stage(&mut t, g3_zb, pzb.item_emb, pzb.w_ref, pzb.b_ref, &plan_zbar.adjacency)?;
        (z, zb)
    } else {
        (g3_z, g3_zb)
    };

    Ok(ForwardPass {
        tape: t,
        z: StageNodes { g0: pz.user_emb, g1: g1_z, g2: g2_z, g3: g3_z, g4: g4_z },
        zbar: StageNodes { g0: pzb.user_emb, g1: g1_zb, g2: g2_zb, g3: g3_zb, g4: g4_zb },
        z_params: pz,
        zbar_params: pzb,
    })
}

/// Score one (user representation, item embedding) pair through a domain's
/// shared prediction stack; strictly inside (0, 1).
pub fn predict_score(
    params: &ModelParams,
    tag: DomainTag,
    user_repr: &Tensor,
    item_row: &Tensor,
) -> Result<f64, ModelError> {
    let mut t = Tape::new();
    let ids = params.set.mount(&mut t)?;
    let nodes = DomainParamNodes::resolve(&ids, params, tag)?;
    let u = t.leaf(user_repr.clone());
    let logits = predict_logits_over(&mut t, &nodes, u, item_row)?;
    let score = t.sigmoid(logits)?;
    Ok(t.value(score).data()[0])
}

fn predict_logits_over(
    t: &mut Tape,
    nodes: &DomainParamNodes,
    user_repr: NodeId,
    item_row: &Tensor,
) -> Result<NodeId, ModelError> {
    let item = t.leaf(item_row.clone());
    let mut head = nodes.pred_head();
    head.item_emb = item;
    let users = Rc::new(vec![0usize]);
    let items = Rc::new(vec![0usize]);
    predict_logits(t, &head, user_repr, users, items)
}

#[cfg(test)]
mod tests {
    use crate::data::DomainSplit;
    use crate::graph::{InteractionGraph, MatchingNeighborhood};
    use crate::model::{init_params, ModelDims, ModelSizes};
    use crate::numerics::math;

    use super::*;

    fn dims(d: usize) -> ModelDims {
        ModelDims { embed: d, hge: d, igm: d, cgm: d, refine: d, mlp_hidden: vec![d, d / 2 + 1] }
    }

    fn graph_from_train(train: Vec<Vec<usize>>, n_items: usize) -> InteractionGraph {
        let n = train.len();
        let split = DomainSplit { test: vec![None; n], val: vec![None; n], train, excluded: 0 };
        InteractionGraph::build(&split, n_items).unwrap()
    }

    fn empty_matching(n: usize) -> MatchingNeighborhood {
        MatchingNeighborhood {
            sample_size: 0,
            head_sets: vec![vec![]; n],
            tail_sets: vec![vec![]; n],
            cdr_sets: vec![vec![]; n],
        }
    }

    fn set_t(p: &mut crate::model::ModelParams, tag: DomainTag, role: &str, t: Tensor) {
        *p.set.get_mut(&ModelParams::name(tag, role)).unwrap() = t;
    }

    #[test]
    fn encode_with_identity_weights_and_zero_self_is_relu_of_neighbor() {
        let d = 3;
        let mut t = Tape::new();
        let user_emb = t.leaf(Tensor::zeros(1, d));
        let item_emb = t.leaf(Tensor::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap());
        let w = t.leaf(Tensor::identity(d));
        let b = t.leaf(Tensor::zeros(1, d));
        let adj = AdjacencyPlan::build(&graph_from_train(vec![vec![0]], 1), d);
        let g1 = encode_stage(&mut t, user_emb, item_emb, w, b, &adj).unwrap();
        assert_eq!(t.value(g1).data(), &[0.5, 0.0, 2.0]);
    }

    #[test]
    fn encode_mean_makes_duplicated_neighbors_equivalent_to_one() {
        let d = 2;
        let run = |items: Vec<usize>, n_items: usize| {
            let mut t = Tape::new();
            let user_emb = t.leaf(Tensor::from_rows(&[vec![0.3, -0.2]]).unwrap());
            // Two distinct items carrying the same embedding row.
            let item_emb =
                t.leaf(Tensor::from_rows(&[vec![1.0, 4.0], vec![1.0, 4.0]][..n_items].to_vec().as_slice()).unwrap());
            let w = t.leaf(Tensor::from_rows(&[vec![0.7, -0.1], vec![0.2, 0.9]]).unwrap());
            let b = t.leaf(Tensor::from_rows(&[vec![0.05, -0.03]]).unwrap());
            let adj = AdjacencyPlan::build(&graph_from_train(vec![items], n_items), d);
            let g1 = encode_stage(&mut t, user_emb, item_emb, w, b, &adj).unwrap();
            t.value(g1).clone()
        };
        let one = run(vec![0], 1);
        let two = run(vec![0, 1], 2);
        for (a, b) in one.data().iter().zip(two.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn intra_with_empty_sets_is_the_identity() {
        let d = 4;
        let mut t = Tape::new();
        let u_g1 = t.leaf(Tensor::from_rows(&[vec![0.4, 0.0, -0.7, 1.2]]).unwrap());
        let mk = |t: &mut Tape| (t.leaf(Tensor::identity(d)), t.leaf(Tensor::zeros(1, d)));
        let (wh, bh) = mk(&mut t);
        let (wt, bt) = mk(&mut t);
        let (wgh, bgh) = mk(&mut t);
        let (wgt, bgt) = mk(&mut t);
        let m = empty_matching(1);
        let head = GatherMeanPlan::from_sets(&m.head_sets, 1, d);
        let tail = GatherMeanPlan::from_sets(&m.tail_sets, 1, d);
        let g2 =
            intra_stage(&mut t, u_g1, &head, &tail, (wh, bh), (wt, bt), (wgh, bgh), (wgt, bgt))
                .unwrap();
        assert_eq!(t.value(g2).data(), t.value(u_g1).data());
    }

    #[test]
    fn intra_equal_channels_reduce_to_tanh_regardless_of_gate() {
        // Head and tail sets both contain exactly user 1 with identity maps,
        // so both channels equal relu(u_g1[1]) and the gate cancels.
        let d = 3;
        let mut t = Tape::new();
        let u_g1 =
            t.leaf(Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![0.9, 0.5, 0.4]]).unwrap());
        let ident = |t: &mut Tape| t.leaf(Tensor::identity(d));
        let zero = |t: &mut Tape| t.leaf(Tensor::zeros(1, d));
        let (wh, bh) = (ident(&mut t), zero(&mut t));
        let (wt, bt) = (ident(&mut t), zero(&mut t));
        // Arbitrary non-trivial gate parameters.
        let wgh = t.leaf(Tensor::filled(d, d, 0.37));
        let bgh = t.leaf(Tensor::from_rows(&[vec![0.5, -0.4, 0.0]]).unwrap());
        let wgt = t.leaf(Tensor::filled(d, d, -0.21));
        let bgt = zero(&mut t);
        let sets = vec![vec![1], vec![]];
        let head = GatherMeanPlan::from_sets(&sets, 2, d);
        let tail = GatherMeanPlan::from_sets(&sets, 2, d);
        let g2 =
            intra_stage(&mut t, u_g1, &head, &tail, (wh, bh), (wt, bt), (wgh, bgh), (wgt, bgt))
                .unwrap();
        let x: [f64; 3] = [0.9, 0.5, 0.4];
        for j in 0..d {
            let expected = x[j].tanh() + 0.1 * (j as f64 + 1.0);
            assert!((t.value(g2).get(0, j) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn inter_forced_path_for_isolated_user() {
        // Non-overlapped user, empty cross pool, W_cross = I:
        // u_g3* = u_g2, u_other = 0, output = tanh((1-H) ⊙ u_g2) + u_g2.
        let d = 2;
        let mut t = Tape::new();
        let u_g2 = t.leaf(Tensor::from_rows(&[vec![0.8, -0.3]]).unwrap());
        let u_g2_other = t.leaf(Tensor::zeros(1, d));
        let overlap = OverlapPlan::build(std::iter::empty());
        let cdr = GatherMeanPlan::from_sets(&[vec![]], 1, d);
        let ident = |t: &mut Tape| t.leaf(Tensor::identity(d));
        let zero_b = |t: &mut Tape| t.leaf(Tensor::zeros(1, d));
        let (ws, bs) = (ident(&mut t), zero_b(&mut t));
        let (wo, bo) = (ident(&mut t), zero_b(&mut t));
        let w_cross_self = ident(&mut t);
        let w_cross_other = ident(&mut t);
        let w_gate_s = t.leaf(Tensor::from_rows(&[vec![0.5, -0.2], vec![0.1, 0.3]]).unwrap());
        let b_gate_s = t.leaf(Tensor::from_rows(&[vec![0.05, -0.15]]).unwrap());
        let w_gate_o = ident(&mut t);
        let b_gate_o = t.leaf(Tensor::from_rows(&[vec![-0.02, 0.12]]).unwrap());
        let g3 = inter_stage(
            &mut t,
            u_g2,
            u_g2_other,
            &overlap,
            &cdr,
            (ws, bs),
            (wo, bo),
            w_cross_self,
            w_cross_other,
            (w_gate_s, b_gate_s),
            (w_gate_o, b_gate_o),
        )
        .unwrap();
        let x = [0.8, -0.3];
        let pre = [
            x[0] * 0.5 + x[1] * 0.1 + 0.05 - 0.02,
            x[0] * -0.2 + x[1] * 0.3 - 0.15 + 0.12,
        ];
        for j in 0..d {
            let h = math::sigmoid(pre[j]);
            let expected = ((1.0 - h) * x[j]).tanh() + x[j];
            assert!((t.value(g3).get(0, j) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn inter_zero_counterpart_gives_zero_self_message() {
        let d = 2;
        let mut t = Tape::new();
        let u_g2 = t.leaf(Tensor::from_rows(&[vec![0.4, 0.6]]).unwrap());
        let u_g2_other = t.leaf(Tensor::zeros(1, d));
        let overlap = OverlapPlan::build(vec![(0usize, 0usize)].into_iter());
        let cdr = GatherMeanPlan::from_sets(&[vec![]], 1, d);
        let ident = |t: &mut Tape| t.leaf(Tensor::identity(d));
        let zero_b = |t: &mut Tape| t.leaf(Tensor::zeros(1, d));
        // With a zero counterpart and b_self = 0, u_self = relu(0) = 0 and the
        // cross fusion reduces to u_g2 · W_cross.
        let (ws, bs) = (ident(&mut t), zero_b(&mut t));
        let (wo, bo) = (ident(&mut t), zero_b(&mut t));
        let w_cross_self = ident(&mut t);
        let w_cross_other = ident(&mut t);
        let (wgs, bgs) = (ident(&mut t), zero_b(&mut t));
        let (wgo, bgo) = (ident(&mut t), zero_b(&mut t));
        let g3 = inter_stage(
            &mut t,
            u_g2,
            u_g2_other,
            &overlap,
            &cdr,
            (ws, bs),
            (wo, bo),
            w_cross_self,
            w_cross_other,
            (wgs, bgs),
            (wgo, bgo),
        )
        .unwrap();
        let x = [0.4, 0.6];
        for j in 0..d {
            let h = math::sigmoid(x[j]);
            let expected = ((1.0 - h) * x[j]).tanh() + x[j];
            assert!((t.value(g3).get(0, j) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn complement_singleton_neighbor_gets_full_weight() {
        let d = 2;
        let mut t = Tape::new();
        let u_g3 = t.leaf(Tensor::from_rows(&[vec![0.3, -0.4]]).unwrap());
        let item_emb = t.leaf(Tensor::from_rows(&[vec![1.5, 0.5]]).unwrap());
        let w_ref = t.leaf(Tensor::identity(d));
        let b_ref = t.leaf(Tensor::from_rows(&[vec![0.01, 0.02]]).unwrap());
        let adj = AdjacencyPlan::build(&graph_from_train(vec![vec![0]], 1), d);
        let (g4, alpha) = complement_stage(&mut t, u_g3, item_emb, w_ref, b_ref, &adj).unwrap();
        assert_eq!(t.value(alpha).data(), &[1.0]);
        let expected = [0.3 + 1.5 + 0.01, -0.4 + 0.5 + 0.02];
        for j in 0..d {
            assert!((t.value(g4).get(0, j) - expected[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn complement_equal_dot_products_give_uniform_alpha() {
        let d = 2;
        let mut t = Tape::new();
        // Zero user representation: every dot product is 0.
        let u_g3 = t.leaf(Tensor::zeros(1, d));
        let item_emb =
            t.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 1.0]]).unwrap());
        let w_ref = t.leaf(Tensor::identity(d));
        let b_ref = t.leaf(Tensor::zeros(1, d));
        let adj = AdjacencyPlan::build(&graph_from_train(vec![vec![0, 1, 2]], 3), d);
        let (g4, alpha) = complement_stage(&mut t, u_g3, item_emb, w_ref, b_ref, &adj).unwrap();
        for &a in t.value(alpha).data() {
            assert!((a - 1.0 / 3.0).abs() < 1e-15);
        }
        let mean = [(1.0 + 0.0 + 3.0) / 3.0, (0.0 + 2.0 + 1.0) / 3.0];
        for j in 0..d {
            assert!((t.value(g4).get(0, j) - mean[j]).abs() < 1e-12);
        }
    }

    fn toy_setup(
        seed: u64,
    ) -> (crate::model::ModelParams, DomainPlan, DomainPlan) {
        let d = 4;
        let sizes = ModelSizes { n_users_z: 3, n_items_z: 4, n_users_zbar: 3, n_items_zbar: 4 };
        let params = init_params(&dims(d), &sizes, seed).unwrap();
        let gz = graph_from_train(vec![vec![0, 1], vec![1, 2], vec![0, 3]], 4);
        let gzb = graph_from_train(vec![vec![0], vec![1, 2], vec![2, 3]], 4);
        let matching = MatchingNeighborhood {
            sample_size: 2,
            head_sets: vec![vec![1], vec![0], vec![0, 1]],
            tail_sets: vec![vec![2], vec![2], vec![]],
            cdr_sets: vec![vec![0, 2], vec![1], vec![0, 1, 2]],
        };
        let overlap = vec![(0usize, 1usize), (2, 0)];
        let plan_z = DomainPlan::build(&gz, &matching, overlap.iter().copied(), d);
        let plan_zbar =
            DomainPlan::build(&gzb, &matching, overlap.iter().map(|&(a, b)| (b, a)), d);
        (params, plan_z, plan_zbar)
    }

    #[test]
    fn residual_identity_with_zeroed_stage_weights() {
        let (mut params, plan_z, plan_zbar) = toy_setup(5);
        let d = 4;
        for tag in [DomainTag::Z, DomainTag::Zbar] {
            for role in [
                "w_head", "w_tail", "w_h", "w_t", "w_self", "w_other", "w_cross", "w_s", "w_o",
                "w_ref",
            ] {
                set_t(&mut params, tag, role, Tensor::zeros(d, d));
            }
            for role in ["b_head", "b_tail", "b_h", "b_t", "b_self", "b_other", "b_s", "b_o", "b_ref"]
            {
                set_t(&mut params, tag, role, Tensor::zeros(1, d));
            }
        }
        let fwd = forward_all(&params, &plan_z, &plan_zbar, &AblationFlags::full()).unwrap();
        for tag in [DomainTag::Z, DomainTag::Zbar] {
            let s = fwd.stages(tag);
            let g1 = fwd.tape.value(s.g1).data();
            let g4 = fwd.tape.value(s.g4).data();
            assert_eq!(g1, g4);
        }
    }

    #[test]
    fn stage_shapes_follow_the_dimension_contract() {
        let (params, plan_z, plan_zbar) = toy_setup(6);
        let fwd = forward_all(&params, &plan_z, &plan_zbar, &AblationFlags::full()).unwrap();
        for (tag, n) in [(DomainTag::Z, 3), (DomainTag::Zbar, 3)] {
            let s = fwd.stages(tag);
            for node in [s.g1, s.g2, s.g3, s.g4] {
                assert_eq!(fwd.tape.value(node).shape(), (n, 4));
            }
        }
    }

    #[test]
    fn disabled_stages_pass_through_and_drop_their_heads() {
        let (params, plan_z, plan_zbar) = toy_setup(7);
        let off = AblationFlags {
            use_intra_matching: false,
            use_inter_matching: false,
            use_complementing: false,
            use_companion_losses: true,
        };
        let fwd = forward_all(&params, &plan_z, &plan_zbar, &off).unwrap();
        let s = fwd.stages(DomainTag::Z);
        assert_eq!(s.g1, s.g2);
        assert_eq!(s.g2, s.g3);
        assert_eq!(s.g3, s.g4);
        let stages = ForwardPass::companion_stages(&off);
        assert_eq!(stages, vec![CompanionStage::G0, CompanionStage::G1]);
        let full = ForwardPass::companion_stages(&AblationFlags::full());
        assert_eq!(full.len(), 4);
    }

    #[test]
    fn zeroing_the_shared_head_zeroes_every_companion_logit() {
        let (mut params, plan_z, plan_zbar) = toy_setup(8);
        let d = 4;
        let hidden = params.dims.mlp_hidden.clone();
        let mut in_w = 2 * d;
        for (layer, &h) in hidden.iter().enumerate() {
            set_t(&mut params, DomainTag::Z, &format!("pred_w{layer}"), Tensor::zeros(in_w, h));
            set_t(&mut params, DomainTag::Z, &format!("pred_b{layer}"), Tensor::zeros(1, h));
            in_w = h;
        }
        set_t(&mut params, DomainTag::Z, "pred_w_out", Tensor::zeros(in_w, 1));
        set_t(&mut params, DomainTag::Z, "pred_b_out", Tensor::zeros(1, 1));
        let mut fwd = forward_all(&params, &plan_z, &plan_zbar, &AblationFlags::full()).unwrap();
        let users = Rc::new(vec![0usize, 1, 2]);
        let items = Rc::new(vec![1usize, 2, 0]);
        for stage in
            [CompanionStage::G0, CompanionStage::G1, CompanionStage::G2, CompanionStage::G3, CompanionStage::Final]
        {
            let logits = fwd
                .head_logits(DomainTag::Z, stage, users.clone(), items.clone())
                .unwrap();
            assert_eq!(fwd.tape.value(logits).data(), &[0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn predict_score_contract() {
        let d = 4;
        let sizes = ModelSizes { n_users_z: 2, n_items_z: 2, n_users_zbar: 2, n_items_zbar: 2 };
        let mut params = init_params(&dims(d), &sizes, 11).unwrap();
        let u = Tensor::from_rows(&[vec![0.5, -0.2, 0.0, 1.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![0.1, 0.9, -0.4, 0.2]]).unwrap();
        let score = predict_score(&params, DomainTag::Z, &u, &v).unwrap();
        assert!(score > 0.0 && score < 1.0);

        // All-zero stack scores exactly one half.
        let hidden = params.dims.mlp_hidden.clone();
        let mut in_w = 2 * d;
        for (layer, &h) in hidden.iter().enumerate() {
            set_t(&mut params, DomainTag::Z, &format!("pred_w{layer}"), Tensor::zeros(in_w, h));
            set_t(&mut params, DomainTag::Z, &format!("pred_b{layer}"), Tensor::zeros(1, h));
            in_w = h;
        }
        set_t(&mut params, DomainTag::Z, "pred_w_out", Tensor::zeros(in_w, 1));
        set_t(&mut params, DomainTag::Z, "pred_b_out", Tensor::zeros(1, 1));
        assert_eq!(predict_score(&params, DomainTag::Z, &u, &v).unwrap(), 0.5);

        // Raising the output bias raises the score.
        set_t(&mut params, DomainTag::Z, "pred_b_out", Tensor::scalar(0.3));
        let lifted = predict_score(&params, DomainTag::Z, &u, &v).unwrap();
        set_t(&mut params, DomainTag::Z, "pred_b_out", Tensor::scalar(0.8));
        let lifted_more = predict_score(&params, DomainTag::Z, &u, &v).unwrap();
        assert!(lifted_more > lifted && lifted > 0.5);
    }
}
