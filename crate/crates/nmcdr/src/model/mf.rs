//! Minimal matrix-factorization baseline: σ(u·v + b_u + b_v).

use std::rc::Rc;

use crate::numerics::{math, NodeId, ParamSet, Tape, Tensor};
use crate::seeds;

use super::{normal_tensor, ModelError};

/// Factor tables and biases under the names `mf.user_factors`,
/// `mf.item_factors`, `mf.user_bias`, `mf.item_bias`.
pub fn mf_init(n_users: usize, n_items: usize, d: usize, seed: u64) -> Result<ParamSet, ModelError> {
    let mut rng = seeds::stream_rng(seed, "mf-init", &[]);
    let mut set = ParamSet::new();
    set.insert("mf.user_factors", normal_tensor(&mut rng, n_users, d, 0.1))?;
    set.insert("mf.item_factors", normal_tensor(&mut rng, n_items, d, 0.1))?;
    set.insert("mf.user_bias", Tensor::zeros(n_users, 1))?;
    set.insert("mf.item_bias", Tensor::zeros(n_items, 1))?;
    Ok(set)
}

/// Batch logits on a tape holding the four mounted tables.
pub fn mf_logits(
    t: &mut Tape,
    ids: &std::collections::BTreeMap<String, NodeId>,
    users: Rc<Vec<usize>>,
    items: Rc<Vec<usize>>,
) -> Result<NodeId, ModelError> {
    let get = |name: &str| -> Result<NodeId, ModelError> {
        ids.get(name).copied().ok_or_else(|| ModelError::MissingParam(name.to_string()))
    };
    let uf = t.row_gather(get("mf.user_factors")?, users.clone())?;
    let vf = t.row_gather(get("mf.item_factors")?, items.clone())?;
    let d = t.value(uf).cols();
    let prod = t.hadamard(uf, vf)?;
    let ones = t.leaf(Tensor::filled(d, 1, 1.0));
    let dots = t.matmul(prod, ones)?;
    let bu = t.row_gather(get("mf.user_bias")?, users)?;
    let bv = t.row_gather(get("mf.item_bias")?, items)?;
    let with_bu = t.add(dots, bu)?;
    Ok(t.add(with_bu, bv)?)
}

/// Plain score for one pair.
pub fn mf_score(params: &ParamSet, user: usize, item: usize) -> Result<f64, ModelError> {
    let uf = params.get("mf.user_factors").ok_or(ModelError::MissingParam("mf.user_factors".into()))?;
    let vf = params.get("mf.item_factors").ok_or(ModelError::MissingParam("mf.item_factors".into()))?;
    let bu = params.get("mf.user_bias").ok_or(ModelError::MissingParam("mf.user_bias".into()))?;
    let bv = params.get("mf.item_bias").ok_or(ModelError::MissingParam("mf.item_bias".into()))?;
    let dot: f64 = uf.row(user).iter().zip(vf.row(item)).map(|(a, b)| a * b).sum();
    Ok(math::sigmoid(dot + bu.get(user, 0) + bv.get(item, 0)))
}
